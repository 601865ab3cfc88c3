#include "cli.hpp"

#include <CLI11.hpp>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "lmk/contrastive.hpp"
#include "lmk/evaluation.hpp"
#include "lmk/log.hpp"
#include "lmk/matcher.hpp"
#include "lmk/parallel.hpp"
#include "lmk/patch.hpp"
#include "lmk/sift3d.hpp"
#include "lmk/synthetic.hpp"

namespace lmk::cli {

namespace fs = std::filesystem;

namespace {

struct Globals {
    std::uint64_t seed = 0;
    int threads = 0;
    bool verbose = false;
};

struct SynthArgs {
    fs::path out;
    int subjects = 20;
    double max_shift_mm = 3.0;
    int dims = 128;
    double spacing_mm = 0.5;
    int blobs = 40;
    int tubes = 12;
    int landmarks = 16;
};

struct TrainArgs {
    fs::path pairs;
    fs::path out;
    fs::path split;
    TrainConfig cfg;
    bool no_augment = false;
};

// Single-subject inputs or a manifest (optionally restricted to one split).
struct SubjectSelection {
    fs::path mri, us, landmarks;
    fs::path pairs, split;
    std::string subset = "test";
};

struct MatchArgs {
    SubjectSelection sel;
    fs::path checkpoint;
    fs::path out;
    SearchConfig search;
    double floor = std::nan("");
};

struct SiftArgs {
    SubjectSelection sel;
    fs::path out;
    fs::path keypoints_out;
    SiftDetectConfig detect;
};

struct EvalArgs {
    fs::path pred, gt, pairs, out, errors_out;
    std::string subject;
    std::string method = "CL";
    bool append = false;
};

struct PatchArgs {
    fs::path volume;
    std::vector<double> point;
    std::string axis = "all";
    fs::path out;
};

void add_selection(CLI::App* sub, SubjectSelection& s) {
    sub->add_option("--mri", s.mri, "MRI volume (.nii or .vol), single-subject mode");
    sub->add_option("--us", s.us, "US volume (.nii or .vol), single-subject mode");
    sub->add_option("--landmarks", s.landmarks, "MRI landmark CSV, single-subject mode");
    sub->add_option("--pairs", s.pairs, "Subject manifest; writes one CSV per subject into --out");
    sub->add_option("--split", s.split, "Split CSV restricting --pairs to --subset");
    sub->add_option("--subset", s.subset, "Split subset used with --split")
        ->capture_default_str()
        ->check(CLI::IsMember({"train", "val", "test", "all"}));
}

bool manifest_mode(const SubjectSelection& s) {
    const bool single = !s.mri.empty() || !s.us.empty() || !s.landmarks.empty();
    if (single == !s.pairs.empty()) {
        throw CLI::ValidationError("inputs", "give either --mri/--us/--landmarks or --pairs");
    }
    if (single && (s.mri.empty() || s.us.empty() || s.landmarks.empty())) {
        throw CLI::ValidationError("inputs", "--mri, --us and --landmarks are all required");
    }
    return !single;
}

std::vector<SubjectEntry> selected_entries(const SubjectSelection& s) {
    auto entries = load_pair_manifest(s.pairs);
    if (s.split.empty() || s.subset == "all") return entries;
    const auto split = load_split(s.split);
    const auto& ids = s.subset == "train" ? split.train : s.subset == "val" ? split.val : split.test;
    const std::set<std::string> keep(ids.begin(), ids.end());
    std::vector<SubjectEntry> out;
    for (auto& e : entries) {
        if (keep.count(e.subject_id)) out.push_back(std::move(e));
    }
    if (out.empty()) throw Error(ErrorCode::EmptyInput, "no subjects in subset '" + s.subset + "'");
    return out;
}

Volume3D load_normalized(const fs::path& p) { return normalize_intensity(load_volume(p)); }

int run_synth(const SynthArgs& a, const Globals& g, std::ostream& out) {
    SynthSpec spec;
    spec.dims = {a.dims, a.dims, a.dims};
    spec.spacing_mm = a.spacing_mm;
    spec.n_blobs = a.blobs;
    spec.n_tubes = a.tubes;
    spec.n_landmarks = a.landmarks;
    spec.max_shift_mm = a.max_shift_mm;
    spec.seed = g.seed;
    const auto manifest = write_synthetic_dataset(a.out, a.subjects, spec);
    out << "wrote " << a.subjects << " subjects; manifest " << manifest.string() << '\n';
    return kOk;
}

int run_train(TrainArgs a, const Globals& g, std::ostream& out) {
    a.cfg.seed = g.seed;
    a.cfg.augment = !a.no_augment;
    a.cfg.validate();
    const auto entries = load_pair_manifest(a.pairs);
    std::vector<SubjectData> subjects;
    std::vector<std::string> ids;
    for (const auto& e : entries) {
        subjects.push_back(load_subject(e));
        ids.push_back(e.subject_id);
    }
    const SplitSpec split = a.split.empty() ? make_split(ids, g.seed) : load_split(a.split);
    fs::create_directories(a.out);
    save_split(split, a.out / "split.csv");
    out << "split: " << split.train.size() << " train, " << split.val.size() << " val, " << split.test.size()
        << " test\n";
    auto result = train(subjects, split, a.cfg, [&](const EpochLog& e, double seconds) {
        out << "epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_loss << " (" << seconds << " s)\n";
        out.flush();
    });
    save_checkpoint(result.best, a.out);
    save_loss_log(result.log, a.out / "loss.csv");
    out << "best epoch " << result.best.meta.epoch << " loss " << result.best.meta.loss << "; checkpoint in "
        << a.out.string() << '\n';
    return kOk;
}

int report_failures(const MatchReport& r, const std::string& subject, std::ostream& err) {
    for (const auto& f : r.failures) err << "no match for " << subject << '/' << f.landmark_id << ": " << f.message << '\n';
    return r.failures.empty() ? kOk : kNoMatch;
}

int run_match(MatchArgs a, std::ostream& out, std::ostream& err) {
    if (!std::isnan(a.floor)) a.search.similarity_floor = a.floor;
    a.search.validate();
    const bool batch = manifest_mode(a.sel);
    if (!fs::exists(a.checkpoint / "model.manifest")) {
        throw Error(ErrorCode::FileOpen, "checkpoint not found: " + (a.checkpoint / "model.manifest").string());
    }
    const Checkpoint ckpt = load_checkpoint(a.checkpoint);
    if (!batch) {
        const auto mri = load_normalized(a.sel.mri);
        const auto us = load_normalized(a.sel.us);
        const auto report = match_all(mri, us, load_landmarks_csv(a.sel.landmarks), ckpt.mri, ckpt.us, a.search);
        save_matches_csv(report.results, a.out);
        out << "matched " << report.results.size() << " landmarks -> " << a.out.string() << '\n';
        return report_failures(report, a.sel.mri.string(), err);
    }
    fs::create_directories(a.out);
    int code = kOk;
    for (const auto& e : selected_entries(a.sel)) {
        const auto s = load_subject(e);
        const auto report = match_all(s.mri, s.us, s.pairs.mri, ckpt.mri, ckpt.us, a.search);
        const auto path = a.out / (e.subject_id + ".csv");
        save_matches_csv(report.results, path);
        out << e.subject_id << ": matched " << report.results.size() << " landmarks -> " << path.string() << '\n';
        out.flush();
        if (report_failures(report, e.subject_id, err) != kOk) code = kNoMatch;
    }
    return code;
}

MatchReport sift_subject(const Volume3D& mri, const Volume3D& us, const LandmarkSet& lms, const SiftDetectConfig& cfg,
                         const fs::path& keypoints_out) {
    const auto index = build_sift_index(us, cfg);
    if (!keypoints_out.empty()) save_keypoints_csv(index.keypoints, keypoints_out);
    return match_all(lms, [&](const Landmark& lm) { return sift_match_landmark(mri, index, lm); });
}

int run_sift(const SiftArgs& a, std::ostream& out, std::ostream& err) {
    const bool batch = manifest_mode(a.sel);
    if (!batch) {
        const auto report = sift_subject(load_normalized(a.sel.mri), load_normalized(a.sel.us),
                                         load_landmarks_csv(a.sel.landmarks), a.detect, a.keypoints_out);
        save_matches_csv(report.results, a.out);
        out << "matched " << report.results.size() << " landmarks -> " << a.out.string() << '\n';
        return report_failures(report, a.sel.mri.string(), err);
    }
    fs::create_directories(a.out);
    if (!a.keypoints_out.empty()) fs::create_directories(a.keypoints_out);
    int code = kOk;
    for (const auto& e : selected_entries(a.sel)) {
        const auto s = load_subject(e);
        const auto kp = a.keypoints_out.empty() ? fs::path{} : a.keypoints_out / (e.subject_id + ".csv");
        const auto report = sift_subject(s.mri, s.us, s.pairs.mri, a.detect, kp);
        const auto path = a.out / (e.subject_id + ".csv");
        save_matches_csv(report.results, path);
        out << e.subject_id << ": matched " << report.results.size() << " landmarks -> " << path.string() << '\n';
        if (report_failures(report, e.subject_id, err) != kOk) code = kNoMatch;
    }
    return code;
}

int run_eval(const EvalArgs& a, std::ostream& out) {
    const auto entries = load_pair_manifest(a.pairs);
    // (entry, predictions, ground truth)
    std::vector<std::tuple<SubjectEntry, fs::path, fs::path>> jobs;
    if (fs::is_directory(a.pred)) {
        if (!a.gt.empty()) throw CLI::ValidationError("--gt", "not used when --pred is a directory");
        for (const auto& e : entries) {
            const auto p = a.pred / (e.subject_id + ".csv");
            if (fs::exists(p)) jobs.emplace_back(e, p, e.us_landmarks);
        }
        if (jobs.empty()) throw Error(ErrorCode::EmptyInput, "no prediction files in " + a.pred.string());
    } else {
        if (a.gt.empty()) throw CLI::ValidationError("--gt", "required when --pred is a file");
        const SubjectEntry* match = nullptr;
        for (const auto& e : entries) {
            const bool by_id = !a.subject.empty() && e.subject_id == a.subject;
            const bool by_path = a.subject.empty() && fs::exists(e.us_landmarks) && fs::exists(a.gt) &&
                                 fs::equivalent(e.us_landmarks, a.gt);
            if (by_id || by_path) match = &e;
        }
        if (!match && entries.size() == 1 && a.subject.empty()) match = &entries.front();
        if (!match) throw Error(ErrorCode::IdMismatch, "cannot tell which manifest subject " + a.gt.string() + " belongs to; pass --subject");
        jobs.emplace_back(*match, a.pred, a.gt);
    }

    std::vector<CaseReport> cases;
    if (a.append && fs::exists(a.out)) cases = load_report_csv(a.out);
    std::ofstream errors_csv;
    if (!a.errors_out.empty()) {
        const bool exists = a.append && fs::exists(a.errors_out);
        errors_csv.open(a.errors_out, exists ? std::ios::app : std::ios::trunc);
        if (!errors_csv) throw Error(ErrorCode::FileOpen, "cannot write " + a.errors_out.string());
        if (!exists) errors_csv << "subject,id,error_mm,method\n";
    }
    for (const auto& [entry, pred, gt] : jobs) {
        const auto severity = severity_class(compute_mtre(load_pairs(entry)));
        const auto preds = load_matches_csv(pred);
        const auto errors = landmark_error(load_landmarks_csv(gt), predictions_as_landmarks(preds));
        std::vector<double> values;
        for (const auto& [id, e] : errors.per_id) {
            values.push_back(e);
            if (errors_csv.is_open()) {
                char buf[64];
                std::snprintf(buf, sizeof buf, "%.17g", e);
                errors_csv << entry.subject_id << ',' << id << ',' << buf << ',' << a.method << '\n';
            }
        }
        cases.push_back(make_case_report(entry.subject_id, severity, values, a.method));
    }
    save_report_csv(cases, a.out);
    out << format_report_table(cases);
    return kOk;
}

int run_patch_dump(const PatchArgs& a, std::ostream& out) {
    const auto v = load_normalized(a.volume);
    const Vec3 p{a.point[0], a.point[1], a.point[2]};
    std::vector<Axis> axes;
    if (a.axis == "all") {
        axes.assign(kAllAxes.begin(), kAllAxes.end());
    } else {
        axes.push_back(parse_axis(a.axis));
    }
    for (Axis ax : axes) {
        const auto series = extract_series(v, p, ax);
        const fs::path stem = a.out.string() + "_" + axis_name(ax);
        save_patch(series, stem);
        out << "wrote " << stem.string() << ".raw\n";
    }
    return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    if (args.empty()) return run(std::vector<std::string>{"lmk"}, out, err);
    CLI::App app{"Landmark identification in MRI/ultrasound pairs with contrastive patch encoders"};
    app.name(args.empty() ? "lmk" : fs::path(args[0]).filename().string());
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    app.add_option("--seed", g.seed, "Seed for all randomness")->capture_default_str();
    app.add_option("--threads", g.threads, "Worker threads (0 = all cores)")->capture_default_str()->check(CLI::NonNegativeNumber);
    app.add_flag("--verbose", g.verbose, "Debug logging");

    SynthArgs synth;
    auto* s_synth = app.add_subcommand("synth", "Generate paired synthetic MRI/US subjects");
    s_synth->add_option("--out", synth.out, "Output directory")->required();
    s_synth->add_option("--subjects", synth.subjects, "Number of subjects")->capture_default_str()->check(CLI::PositiveNumber);
    s_synth->add_option("--max-shift-mm", synth.max_shift_mm, "Maximum deformation magnitude")->capture_default_str()->check(CLI::NonNegativeNumber);
    s_synth->add_option("--dims", synth.dims, "Voxels per axis")->capture_default_str()->check(CLI::Range(32, 1024));
    s_synth->add_option("--spacing-mm", synth.spacing_mm, "Voxel spacing")->capture_default_str()->check(CLI::PositiveNumber);
    s_synth->add_option("--blobs", synth.blobs, "Blobs per subject")->capture_default_str()->check(CLI::NonNegativeNumber);
    s_synth->add_option("--tubes", synth.tubes, "Tubes per subject")->capture_default_str()->check(CLI::NonNegativeNumber);
    s_synth->add_option("--landmarks", synth.landmarks, "Landmarks per subject")->capture_default_str()->check(CLI::PositiveNumber);

    TrainArgs tr;
    auto* s_train = app.add_subcommand("train", "Train the MRI and US patch encoders");
    s_train->add_option("--pairs", tr.pairs, "Subject manifest")->required()->check(CLI::ExistingFile);
    s_train->add_option("--out", tr.out, "Output directory (checkpoint, loss.csv, split.csv)")->required();
    s_train->add_option("--split", tr.split, "Existing split CSV (default: seeded 70/15/15)")->check(CLI::ExistingFile);
    s_train->add_option("--lr", tr.cfg.lr, "Learning rate")->capture_default_str()->check(CLI::PositiveNumber);
    s_train->add_option("--epochs", tr.cfg.epochs, "Epochs")->capture_default_str()->check(CLI::NonNegativeNumber);
    s_train->add_option("--batch-size", tr.cfg.batch_size, "Samples per batch")->capture_default_str()->check(CLI::PositiveNumber);
    s_train->add_option("--temperature", tr.cfg.temperature, "InfoNCE temperature")->capture_default_str()->check(CLI::PositiveNumber);
    s_train->add_option("--negatives", tr.cfg.negatives, "Offset negatives per anchor")->capture_default_str()->check(CLI::NonNegativeNumber);
    s_train->add_option("--weight-decay", tr.cfg.weight_decay, "AdamW weight decay")->capture_default_str()->check(CLI::NonNegativeNumber);
    s_train->add_option("--beta1", tr.cfg.beta1, "AdamW beta1")->capture_default_str();
    s_train->add_option("--beta2", tr.cfg.beta2, "AdamW beta2")->capture_default_str();
    s_train->add_option("--eps", tr.cfg.eps, "AdamW epsilon")->capture_default_str();
    s_train->add_flag("--no-augment", tr.no_augment, "Disable rotation and flip augmentation");

    MatchArgs ma;
    auto* s_match = app.add_subcommand("match", "Locate MRI landmarks in US with the trained encoders");
    add_selection(s_match, ma.sel);
    s_match->add_option("--checkpoint", ma.checkpoint, "Checkpoint directory")->required();
    s_match->add_option("--out", ma.out, "Match CSV (single subject) or output directory (--pairs)")->required();
    s_match->add_option("--range-mm", ma.search.range_mm, "Search half-width")->capture_default_str();
    s_match->add_option("--step-mm", ma.search.step_mm, "Grid step")->capture_default_str();
    s_match->add_option("--min-support", ma.search.min_us_support, "Minimum nonzero fraction of candidate mid-slices")->capture_default_str();
    s_match->add_option("--similarity-floor", ma.floor, "Extend the search when the best score is below this");
    s_match->add_option("--extend-factor", ma.search.extend_factor, "Range multiplier per extension")->capture_default_str();
    s_match->add_option("--max-extensions", ma.search.max_extensions, "Maximum extensions")->capture_default_str();

    SiftArgs sa;
    auto* s_sift = app.add_subcommand("sift-match", "3D SIFT baseline matcher");
    add_selection(s_sift, sa.sel);
    s_sift->add_option("--out", sa.out, "Match CSV (single subject) or output directory (--pairs)")->required();
    s_sift->add_option("--keypoints-out", sa.keypoints_out, "Keypoint CSV (or directory with --pairs)");
    s_sift->add_option("--contrast-thresh", sa.detect.contrast_thresh, "DoG contrast threshold")->capture_default_str();
    s_sift->add_option("--edge-ratio", sa.detect.edge_ratio, "Hessian eigenvalue ratio limit")->capture_default_str();

    EvalArgs ev;
    auto* s_eval = app.add_subcommand("eval", "Landmark identification errors per case");
    s_eval->add_option("--pred", ev.pred, "Match CSV or directory of per-subject match CSVs")->required()->check(CLI::ExistingPath);
    s_eval->add_option("--gt", ev.gt, "US ground-truth landmark CSV (file mode)");
    s_eval->add_option("--pairs", ev.pairs, "Subject manifest")->required()->check(CLI::ExistingFile);
    s_eval->add_option("--out", ev.out, "Report CSV")->required();
    s_eval->add_option("--subject", ev.subject, "Manifest subject of --gt (file mode)");
    s_eval->add_option("--method", ev.method, "Method label")->capture_default_str();
    s_eval->add_option("--errors-out", ev.errors_out, "Per-landmark error CSV");
    s_eval->add_flag("--append", ev.append, "Append to an existing report");

    PatchArgs pa;
    auto* s_patch = app.add_subcommand("patch-dump", "Write the 42x42x3 patch series at a point");
    s_patch->add_option("--volume", pa.volume, "Volume (.nii or .vol)")->required()->check(CLI::ExistingFile);
    s_patch->add_option("--point", pa.point, "World position x y z (mm)")->required()->expected(3);
    s_patch->add_option("--axis", pa.axis, "x, y, z or all")->capture_default_str()->check(CLI::IsMember({"x", "y", "z", "all"}));
    s_patch->add_option("--out", pa.out, "Output stem; writes <stem>_<axis>.raw/.txt")->required();

    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        if (e.get_exit_code() != 0) {
            err << app.help();
            return kUsage;
        }
        return kOk;
    }

    log::set_verbose(g.verbose);
    set_thread_count(g.threads);
    retain_freed_memory();
    out << "# resolved config\n";
    {
        const std::string active = app.get_subcommands().front()->get_name() + ".";
        std::istringstream all(app.config_to_str(true, false));
        for (std::string line; std::getline(all, line);) {
            const auto eq = line.find('=');
            const auto key = line.substr(0, eq);
            if (key.find('.') == std::string::npos || key.rfind(active, 0) == 0) out << line << '\n';
        }
    }
    out.flush();

    try {
        if (s_synth->parsed()) return run_synth(synth, g, out);
        if (s_train->parsed()) return run_train(tr, g, out);
        if (s_match->parsed()) return run_match(ma, out, err);
        if (s_sift->parsed()) return run_sift(sa, out, err);
        if (s_eval->parsed()) return run_eval(ev, out);
        if (s_patch->parsed()) return run_patch_dump(pa, out);
    } catch (const CLI::ValidationError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const Error& e) {
        err << "error [" << error_code_name(e.code()) << "]: " << e.what() << '\n';
        return e.code() == ErrorCode::NoMatch ? kNoMatch : kDataError;
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return kDataError;
    }
    return kUsage;
}

int run(int argc, char** argv) { return run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr); }

}  // namespace lmk::cli
