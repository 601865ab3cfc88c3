#include "lmk/matcher.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>

#include "csv.hpp"
#include "lmk/contrastive.hpp"
#include "lmk/parallel.hpp"

namespace lmk {

namespace {
// Fixed chunking keeps scores independent of the worker count.
constexpr std::size_t kScoreChunk = 48;
}  // namespace

void SearchConfig::validate() const {
    if (!(range_mm > 0.0) || !(step_mm > 0.0) || step_mm > range_mm) {
        throw Error(ErrorCode::InvalidArgument, "search config requires range_mm > 0, step_mm > 0, step_mm <= range_mm");
    }
    if (!(extend_factor >= 1.0) || max_extensions < 0 || min_us_support < 0.0 || min_us_support > 1.0) {
        throw Error(ErrorCode::InvalidArgument, "search config: bad extension or support settings");
    }
}

std::vector<Index3> candidate_offsets(double range_mm, double step_mm) {
    const int n = static_cast<int>(std::floor(range_mm / step_mm + 1e-9));
    std::vector<Index3> out;
    out.reserve(static_cast<std::size_t>(2 * n + 1) * (2 * n + 1) * (2 * n + 1));
    for (int x = -n; x <= n; ++x) {
        for (int y = -n; y <= n; ++y) {
            for (int z = -n; z <= n; ++z) out.push_back({x, y, z});
        }
    }
    return out;
}

std::vector<Vec3> candidate_grid(const Vec3& center, const SearchConfig& cfg) {
    cfg.validate();
    const auto offs = candidate_offsets(cfg.range_mm, cfg.step_mm);
    std::vector<Vec3> out;
    out.reserve(offs.size());
    for (const auto& o : offs) {
        out.push_back({center[0] + o[0] * cfg.step_mm, center[1] + o[1] * cfg.step_mm, center[2] + o[2] * cfg.step_mm});
    }
    return out;
}

std::array<std::vector<double>, 3> reference_features(const Volume3D& mri, const Vec3& landmark,
                                                      const EncoderParams<float>& params) {
    const auto p = extract_25d(mri, landmark);
    const auto feats = encode(params, make_input<float>(std::span<const PatchSeries>(p.series)));
    std::array<std::vector<double>, 3> out;
    for (int a = 0; a < 3; ++a) {
        out[static_cast<std::size_t>(a)].resize(kFeatureDim);
        for (int i = 0; i < kFeatureDim; ++i) out[static_cast<std::size_t>(a)][static_cast<std::size_t>(i)] = feats(i, a);
    }
    return out;
}

EncoderScorer::EncoderScorer(const Volume3D& us, const EncoderParams<float>& us_params,
                             std::array<std::vector<double>, 3> mri_features)
    : us_(us), params_(us_params), mri_features_(std::move(mri_features)) {
    for (const auto& f : mri_features_) {
        if (f.size() != static_cast<std::size_t>(kFeatureDim)) {
            throw Error(ErrorCode::ShapeMismatch, "reference features must have 32 entries per axis");
        }
    }
}

void EncoderScorer::score(std::span<const Vec3> candidates, std::span<std::array<double, 3>> per_axis) const {
    const std::size_t n = candidates.size();
    std::vector<PatchSeries> patches(3 * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (Axis a : kAllAxes) {
            auto& p = patches[3 * i + static_cast<std::size_t>(a)];
            p.axis = a;
            p.center_world = candidates[i];
            extract_series_into(us_, candidates[i], a, p.pixels.data());
        }
    }
    const auto feats = encode(params_, make_input<float>(std::span<const PatchSeries>(patches)));
    std::vector<double> col(kFeatureDim);
    for (std::size_t i = 0; i < n; ++i) {
        for (int a = 0; a < 3; ++a) {
            for (int k = 0; k < kFeatureDim; ++k) {
                col[static_cast<std::size_t>(k)] = feats(k, static_cast<Eigen::Index>(3 * i + static_cast<std::size_t>(a)));
            }
            per_axis[i][static_cast<std::size_t>(a)] = cosine_similarity(mri_features_[static_cast<std::size_t>(a)], col);
        }
    }
}

CandidateScore score_candidate(const std::array<std::vector<double>, 3>& mri_features, const Volume3D& us,
                               const Vec3& candidate, const EncoderParams<float>& us_params) {
    EncoderScorer scorer(us, us_params, mri_features);
    std::array<std::array<double, 3>, 1> per_axis{};
    scorer.score(std::span<const Vec3>(&candidate, 1), per_axis);
    CandidateScore s;
    s.per_axis = per_axis[0];
    s.total = s.per_axis[0] + s.per_axis[1] + s.per_axis[2];
    return s;
}

MatchResult search_landmark(const Vec3& center, const CandidateScorer& scorer, const SupportFn& support,
                            const SearchConfig& cfg) {
    cfg.validate();
    double range = cfg.range_mm;
    std::string diagnostics;
    for (int attempt = 0; attempt <= cfg.max_extensions; ++attempt, range *= cfg.extend_factor) {
        const auto offsets = candidate_offsets(range, cfg.step_mm);
        std::vector<Vec3> eligible;
        std::vector<std::size_t> eligible_index;
        eligible.reserve(offsets.size());
        for (std::size_t i = 0; i < offsets.size(); ++i) {
            const auto& o = offsets[i];
            const Vec3 p{center[0] + o[0] * cfg.step_mm, center[1] + o[1] * cfg.step_mm, center[2] + o[2] * cfg.step_mm};
            if (support && support(p) < cfg.min_us_support) continue;
            eligible.push_back(p);
            eligible_index.push_back(i);
        }

        std::vector<std::array<double, 3>> scores(eligible.size());
        const std::size_t chunks = (eligible.size() + kScoreChunk - 1) / kScoreChunk;
        parallel_for(chunks, [&](std::size_t c) {
            const std::size_t b = c * kScoreChunk, e = std::min(eligible.size(), b + kScoreChunk);
            scorer.score(std::span<const Vec3>(eligible.data() + b, e - b),
                         std::span<std::array<double, 3>>(scores.data() + b, e - b));
        });

        // Deterministic reduction in grid order.
        std::size_t best = eligible.size();
        double best_total = -std::numeric_limits<double>::infinity();
        long best_disp = 0;
        for (std::size_t k = 0; k < eligible.size(); ++k) {
            const double total = scores[k][0] + scores[k][1] + scores[k][2];
            const auto& o = offsets[eligible_index[k]];
            const long disp = static_cast<long>(o[0]) * o[0] + static_cast<long>(o[1]) * o[1] + static_cast<long>(o[2]) * o[2];
            if (best == eligible.size() || total > best_total || (total == best_total && disp < best_disp)) {
                best = k;
                best_total = total;
                best_disp = disp;
            }
        }

        std::ostringstream diag;
        diag << "range " << range << " mm: " << offsets.size() << " candidates, " << eligible.size() << " with support >= "
             << cfg.min_us_support;
        if (best < eligible.size()) diag << ", best score " << best_total;
        if (!diagnostics.empty()) diagnostics += "; ";
        diagnostics += diag.str();

        const bool below_floor = cfg.similarity_floor && best < eligible.size() && best_total < *cfg.similarity_floor;
        if (best < eligible.size() && !below_floor) {
            MatchResult r;
            r.predicted_us_world = eligible[best];
            r.score_per_axis = scores[best];
            r.score_total = best_total;
            r.candidates_evaluated = static_cast<long>(eligible.size());
            r.extended = attempt > 0;
            r.range_mm = range;
            return r;
        }
    }
    throw Error(ErrorCode::NoMatch, "no match: " + diagnostics);
}

MatchResult match_landmark(const Volume3D& mri, const Volume3D& us, const Landmark& mri_landmark,
                           const EncoderParams<float>& params_mri, const EncoderParams<float>& params_us,
                           const SearchConfig& cfg) {
    EncoderScorer scorer(us, params_us, reference_features(mri, mri_landmark.position, params_mri));
    const SupportFn support = [&us](const Vec3& p) { return mid_slice_support(us, p); };
    try {
        auto r = search_landmark(mri_landmark.position, scorer, support, cfg);
        r.landmark_id = mri_landmark.id;
        return r;
    } catch (const Error& e) {
        if (e.code() != ErrorCode::NoMatch) throw;
        throw Error(ErrorCode::NoMatch, "landmark '" + mri_landmark.id + "': " + e.what());
    }
}

MatchReport match_all(const LandmarkSet& mri_landmarks, const LandmarkMatcher& matcher) {
    MatchReport report;
    for (const auto& id : mri_landmarks.sorted_ids()) {
        try {
            auto r = matcher({id, mri_landmarks.at(id)});
            r.landmark_id = id;
            report.results.push_back(std::move(r));
        } catch (const Error& e) {
            if (e.code() != ErrorCode::NoMatch && e.code() != ErrorCode::NoDescriptor) throw;
            report.failures.push_back({id, e.what()});
        }
    }
    return report;
}

MatchReport match_all(const Volume3D& mri, const Volume3D& us, const LandmarkSet& mri_landmarks,
                      const EncoderParams<float>& params_mri, const EncoderParams<float>& params_us,
                      const SearchConfig& cfg) {
    return match_all(mri_landmarks, [&](const Landmark& lm) {
        return match_landmark(mri, us, lm, params_mri, params_us, cfg);
    });
}

void save_matches_csv(std::span<const MatchResult> results, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::FileOpen, "cannot write " + path.string());
    out << "id,x_mm,y_mm,z_mm,score,extended\n";
    char buf[160];
    for (const auto& r : results) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g", r.predicted_us_world[0], r.predicted_us_world[1],
                      r.predicted_us_world[2], r.score_total);
        out << r.landmark_id << ',' << buf << ',' << (r.extended ? 1 : 0) << '\n';
    }
}

std::vector<MatchResult> load_matches_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::FileOpen, "cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || csv::split(line) != std::vector<std::string>{"id", "x_mm", "y_mm", "z_mm", "score", "extended"}) {
        throw Error(ErrorCode::MissingColumn, path.string() + ": header must be 'id,x_mm,y_mm,z_mm,score,extended'");
    }
    std::vector<MatchResult> out;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (csv::trim(line).empty()) continue;
        const auto f = csv::split(line);
        const std::string ctx = path.string() + ":" + std::to_string(lineno);
        if (f.size() != 6) throw Error(ErrorCode::MissingColumn, ctx + ": expected 6 columns");
        MatchResult r;
        r.landmark_id = f[0];
        r.predicted_us_world = {csv::parse_double(f[1], ctx), csv::parse_double(f[2], ctx), csv::parse_double(f[3], ctx)};
        r.score_total = csv::parse_double(f[4], ctx);
        r.extended = csv::parse_long(f[5], ctx) != 0;
        out.push_back(std::move(r));
    }
    return out;
}

LandmarkSet predictions_as_landmarks(std::span<const MatchResult> results) {
    LandmarkSet s;
    for (const auto& r : results) s.add(r.landmark_id, r.predicted_us_world);
    return s;
}

}  // namespace lmk
