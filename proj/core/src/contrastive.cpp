#include "lmk/contrastive.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <limits>
#include <numeric>

#include "csv.hpp"
#include "lmk/log.hpp"
#include "lmk/parallel.hpp"
#include "lmk/random.hpp"

namespace lmk {

double cosine_similarity(std::span<const double> v, std::span<const double> w) {
    if (v.size() != w.size()) throw Error(ErrorCode::ShapeMismatch, "cosine_similarity: length mismatch");
    double vw = 0.0, vv = 0.0, ww = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        vw += v[i] * w[i];
        vv += v[i] * v[i];
        ww += w[i] * w[i];
    }
    if (vv == 0.0 || ww == 0.0) throw Error(ErrorCode::ZeroNorm, "cosine_similarity of a zero vector");
    return std::clamp(vw / (std::sqrt(vv) * std::sqrt(ww)), -1.0, 1.0);
}

template <typename S>
double cosine_similarity(const nn::Matrix<S>& a, Eigen::Index ca, const nn::Matrix<S>& b, Eigen::Index cb) {
    double vw = 0.0, vv = 0.0, ww = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        const double x = static_cast<double>(a(i, ca)), y = static_cast<double>(b(i, cb));
        vw += x * y;
        vv += x * x;
        ww += y * y;
    }
    if (vv == 0.0 || ww == 0.0) throw Error(ErrorCode::ZeroNorm, "cosine_similarity of a zero feature vector");
    return std::clamp(vw / (std::sqrt(vv) * std::sqrt(ww)), -1.0, 1.0);
}

template double cosine_similarity<float>(const nn::Matrix<float>&, Eigen::Index, const nn::Matrix<float>&, Eigen::Index);
template double cosine_similarity<double>(const nn::Matrix<double>&, Eigen::Index, const nn::Matrix<double>&, Eigen::Index);

double info_nce_from_logits(double positive_logit, std::span<const double> negative_logits) {
    if (negative_logits.empty()) throw Error(ErrorCode::EmptyInput, "info_nce: empty negative list");
    double m = positive_logit;
    for (double l : negative_logits) m = std::max(m, l);
    double sum = std::exp(positive_logit - m);
    for (double l : negative_logits) sum += std::exp(l - m);
    return -(positive_logit - m) + std::log(sum);
}

template <typename S>
InfoNceResult<S> info_nce(const nn::Matrix<S>& anchors, const nn::Matrix<S>& candidates,
                          std::span<const int> positive, std::span<const std::vector<int>> negatives,
                          double temperature) {
    const auto n = static_cast<std::size_t>(anchors.cols());
    if (positive.size() != n || negatives.size() != n) {
        throw Error(ErrorCode::ShapeMismatch, "info_nce: one positive and one negative list per anchor required");
    }
    if (anchors.rows() != candidates.rows()) throw Error(ErrorCode::ShapeMismatch, "info_nce: feature length mismatch");
    if (!(temperature > 0.0)) throw Error(ErrorCode::InvalidArgument, "info_nce: temperature must be positive");
    if (n == 0) throw Error(ErrorCode::EmptyInput, "info_nce: no anchors");

    const Eigen::Index dim = anchors.rows();
    InfoNceResult<S> r;
    r.grad_anchors = nn::Matrix<S>::Zero(anchors.rows(), anchors.cols());
    r.grad_candidates = nn::Matrix<S>::Zero(candidates.rows(), candidates.cols());

    // Norms in double.
    auto col_norm = [&](const nn::Matrix<S>& m, Eigen::Index c) {
        double s = 0.0;
        for (Eigen::Index i = 0; i < dim; ++i) s += static_cast<double>(m(i, c)) * static_cast<double>(m(i, c));
        if (s == 0.0) throw Error(ErrorCode::ZeroNorm, "info_nce: zero feature vector");
        return std::sqrt(s);
    };
    std::vector<double> cand_norm(static_cast<std::size_t>(candidates.cols()), -1.0);
    auto cnorm = [&](int j) {
        auto& v = cand_norm[static_cast<std::size_t>(j)];
        if (v < 0.0) v = col_norm(candidates, j);
        return v;
    };

    const double inv_n = 1.0 / static_cast<double>(n);
    double total = 0.0;
    std::vector<int> ids;
    std::vector<double> cosines, logits;
    for (std::size_t i = 0; i < n; ++i) {
        if (negatives[i].empty()) throw Error(ErrorCode::EmptyInput, "info_nce: anchor without negatives");
        ids.clear();
        ids.push_back(positive[i]);
        ids.insert(ids.end(), negatives[i].begin(), negatives[i].end());
        const auto ai = static_cast<Eigen::Index>(i);
        const double an = col_norm(anchors, ai);

        cosines.resize(ids.size());
        logits.resize(ids.size());
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const int j = ids[k];
            if (j < 0 || j >= candidates.cols()) throw Error(ErrorCode::ShapeMismatch, "info_nce: candidate index out of range");
            double d = 0.0;
            for (Eigen::Index t = 0; t < dim; ++t) d += static_cast<double>(anchors(t, ai)) * static_cast<double>(candidates(t, j));
            cosines[k] = d / (an * cnorm(j));
            logits[k] = cosines[k] / temperature;
            m = std::max(m, logits[k]);
        }
        double sum = 0.0;
        for (double l : logits) sum += std::exp(l - m);
        const double lse = m + std::log(sum);
        total += lse - logits[0];

        // d loss_i / d cos_k = (softmax_k - [k == 0]) / T, scaled by 1/n.
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const double p = std::exp(logits[k] - lse);
            const double dcos = (p - (k == 0 ? 1.0 : 0.0)) / temperature * inv_n;
            if (dcos == 0.0) continue;
            const int j = ids[k];
            const double wn = cnorm(j);
            for (Eigen::Index t = 0; t < dim; ++t) {
                const double a = static_cast<double>(anchors(t, ai)), w = static_cast<double>(candidates(t, j));
                r.grad_anchors(t, ai) += static_cast<S>(dcos * (w / (an * wn) - cosines[k] * a / (an * an)));
                r.grad_candidates(t, j) += static_cast<S>(dcos * (a / (an * wn) - cosines[k] * w / (wn * wn)));
            }
        }
    }
    r.loss = total * inv_n;
    return r;
}

template InfoNceResult<float> info_nce<float>(const nn::Matrix<float>&, const nn::Matrix<float>&, std::span<const int>,
                                              std::span<const std::vector<int>>, double);
template InfoNceResult<double> info_nce<double>(const nn::Matrix<double>&, const nn::Matrix<double>&,
                                                std::span<const int>, std::span<const std::vector<int>>, double);

// ---------------------------------------------------------------------------
// Data

SubjectData load_subject(const SubjectEntry& entry) {
    SubjectData s;
    s.id = entry.subject_id;
    s.mri = normalize_intensity(load_volume(entry.mri_volume));
    s.us = normalize_intensity(load_volume(entry.us_volume));
    s.pairs = load_pairs(entry);
    return s;
}

SplitSpec make_split(std::vector<std::string> ids, std::uint64_t seed) {
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
        throw Error(ErrorCode::DuplicateId, "make_split: duplicate subject id");
    }
    Rng rng(derive_seed(seed, 0x5b11));
    rng.shuffle(ids.begin(), ids.end());

    const std::size_t n = ids.size();
    const double fractions[3] = {0.70, 0.15, 0.15};
    std::size_t counts[3];
    double remainders[3];
    std::size_t assigned = 0;
    for (int k = 0; k < 3; ++k) {
        const double exact = fractions[k] * static_cast<double>(n);
        counts[k] = static_cast<std::size_t>(std::floor(exact + 1e-9));
        remainders[k] = exact - static_cast<double>(counts[k]);
        assigned += counts[k];
    }
    int order[3] = {0, 1, 2};
    std::stable_sort(order, order + 3, [&](int a, int b) { return remainders[a] > remainders[b]; });
    for (int k = 0; assigned < n; k = (k + 1) % 3, ++assigned) ++counts[order[k]];

    SplitSpec s;
    auto it = ids.begin();
    s.train.assign(it, it + static_cast<std::ptrdiff_t>(counts[0]));
    it += static_cast<std::ptrdiff_t>(counts[0]);
    s.val.assign(it, it + static_cast<std::ptrdiff_t>(counts[1]));
    it += static_cast<std::ptrdiff_t>(counts[1]);
    s.test.assign(it, ids.end());
    for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
    return s;
}

void save_split(const SplitSpec& split, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::FileOpen, "cannot write " + path.string());
    out << "subject_id,split\n";
    for (const auto& id : split.train) out << id << ",train\n";
    for (const auto& id : split.val) out << id << ",val\n";
    for (const auto& id : split.test) out << id << ",test\n";
}

SplitSpec load_split(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::FileOpen, "cannot open " + path.string());
    SplitSpec s;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (csv::trim(line).empty()) continue;
        const auto f = csv::split(line);
        if (f.size() != 2) throw Error(ErrorCode::MissingColumn, path.string() + ": expected subject_id,split");
        if (f[1] == "train") s.train.push_back(f[0]);
        else if (f[1] == "val") s.val.push_back(f[0]);
        else if (f[1] == "test") s.test.push_back(f[0]);
        else throw Error(ErrorCode::Parse, path.string() + ": unknown split '" + f[1] + "'");
    }
    return s;
}

void TrainConfig::validate() const {
    if (!(lr > 0.0) || epochs < 0 || batch_size <= 0 || !(temperature > 0.0) || negatives < 0 || !(beta1 > 0.0) ||
        !(beta2 > 0.0) || !(eps > 0.0) || weight_decay < 0.0 || beta1 >= 1.0 || beta2 >= 1.0) {
        throw Error(ErrorCode::InvalidArgument, "invalid training configuration");
    }
}

namespace {

std::uint64_t string_hash(const std::string& s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace

std::vector<SampleRef> enumerate_samples(std::span<const SubjectData* const> subjects) {
    std::vector<SampleRef> out;
    for (std::size_t s = 0; s < subjects.size(); ++s) {
        const auto& pairs = subjects[s]->pairs;
        pairs.validate();
        for (const auto& id : pairs.mri.sorted_ids()) {
            for (Axis a : kAllAxes) {
                const std::uint64_t key =
                    derive_seed(string_hash(subjects[s]->id), string_hash(id), static_cast<std::uint64_t>(a));
                out.push_back({s, id, a, key});
            }
        }
    }
    return out;
}

BatchStream::BatchStream(std::span<const SubjectData* const> subjects, int batch_size, int negatives, bool augment,
                         bool shuffle, std::uint64_t seed, int epoch)
    : subjects_(subjects.begin(), subjects.end()),
      order_(enumerate_samples(subjects)),
      batch_size_(static_cast<std::size_t>(std::max(1, batch_size))),
      negatives_(negatives),
      augment_(augment),
      seed_(seed),
      epoch_(epoch) {
    if (shuffle) {
        Rng rng(derive_seed(seed, 0x5f1e, static_cast<std::uint64_t>(epoch)));
        rng.shuffle(order_.begin(), order_.end());
    }
}

std::vector<ContrastiveSample> BatchStream::batch(std::size_t index) const {
    const std::size_t begin = index * batch_size_;
    const std::size_t end = std::min(order_.size(), begin + batch_size_);
    if (begin >= end) return {};
    std::vector<ContrastiveSample> out(end - begin);
    parallel_for(out.size(), [&](std::size_t i) {
        const SampleRef& ref = order_[begin + i];
        const SubjectData& subj = *subjects_[ref.subject];
        const Vec3& mri_pt = subj.pairs.mri.at(ref.landmark_id);
        const Vec3& us_pt = subj.pairs.us.at(ref.landmark_id);
        auto& s = out[i];
        s.subject_id = subj.id;
        s.landmark_id = ref.landmark_id;
        s.axis = ref.axis;
        s.anchor = extract_series(subj.mri, mri_pt, ref.axis);
        s.positive = extract_series(subj.us, us_pt, ref.axis);
        const auto ep = static_cast<std::uint64_t>(static_cast<std::int64_t>(epoch_));
        if (augment_) {
            auto [a, p] = augment_pair(s.anchor, s.positive, derive_seed(seed_, ep, ref.key, 1));
            s.anchor = std::move(a);
            s.positive = std::move(p);
        }
        Rng rng(derive_seed(seed_, ep, ref.key, 2));
        s.negatives.reserve(static_cast<std::size_t>(negatives_));
        for (int k = 0; k < negatives_; ++k) {
            s.negatives.push_back(extract_series(subj.us, sample_negative_center(us_pt, rng), ref.axis));
        }
    });
    return out;
}

BatchLoss batch_loss(const EncoderParams<float>& mri, const EncoderParams<float>& us,
                     std::span<const ContrastiveSample> samples, double temperature, EncoderGraph<float>* mri_graph,
                     EncoderGraph<float>* us_graph) {
    const std::size_t b = samples.size();
    if (b == 0) throw Error(ErrorCode::EmptyInput, "batch_loss: empty batch");
    std::vector<const PatchSeries*> anchors, candidates;
    anchors.reserve(b);
    for (const auto& s : samples) anchors.push_back(&s.anchor);
    for (const auto& s : samples) candidates.push_back(&s.positive);
    std::vector<int> positive(b);
    std::vector<std::vector<int>> negatives(b);
    for (std::size_t i = 0; i < b; ++i) {
        positive[i] = static_cast<int>(i);
        for (const auto& n : samples[i].negatives) {
            negatives[i].push_back(static_cast<int>(candidates.size()));
            candidates.push_back(&n);
        }
        for (std::size_t j = 0; j < b; ++j) {
            if (j != i) negatives[i].push_back(static_cast<int>(j));
        }
    }

    const auto in_a = make_input<float>(std::span<const PatchSeries* const>(anchors));
    const auto in_c = make_input<float>(std::span<const PatchSeries* const>(candidates));
    const nn::Matrix<float> fa = mri_graph ? mri_graph->forward(mri, in_a) : encode(mri, in_a);
    const nn::Matrix<float> fc = us_graph ? us_graph->forward(us, in_c) : encode(us, in_c);
    auto r = info_nce<float>(fa, fc, positive, negatives, temperature);
    return {r.loss, std::move(r.grad_anchors), std::move(r.grad_candidates)};
}

// ---------------------------------------------------------------------------
// AdamW

namespace {

template <typename S>
void adamw_update_impl(std::span<S> theta, std::span<const S> grad, std::span<double> m, std::span<double> v,
                       long step, const TrainConfig& cfg, bool decays) {
    if (grad.size() != theta.size() || m.size() != theta.size() || v.size() != theta.size()) {
        throw Error(ErrorCode::ShapeMismatch, "adamw: parameter / gradient / state size mismatch");
    }
    if (step < 1) throw Error(ErrorCode::InvalidArgument, "adamw: step count starts at 1");
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    const double wd = decays ? cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double g = static_cast<double>(grad[i]);
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = m[i] / bc1, vhat = v[i] / bc2;
        const double t = static_cast<double>(theta[i]);
        theta[i] = static_cast<S>(t - cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps)) - cfg.lr * wd * t);
    }
}

}  // namespace

void adamw_update(std::span<float> theta, std::span<const float> grad, std::span<double> first,
                  std::span<double> second, long step, const TrainConfig& cfg, bool decays) {
    adamw_update_impl<float>(theta, grad, first, second, step, cfg, decays);
}

void adamw_update(std::span<double> theta, std::span<const double> grad, std::span<double> first,
                  std::span<double> second, long step, const TrainConfig& cfg, bool decays) {
    adamw_update_impl<double>(theta, grad, first, second, step, cfg, decays);
}

template <typename S>
void adamw_step(EncoderParams<S>& params, const EncoderParams<S>& grads, AdamWState& state, const TrainConfig& cfg) {
    std::vector<std::pair<const S*, std::size_t>> g;
    grads.for_each([&](const TensorInfo&, const S* data, std::size_t n) { g.push_back({data, n}); });
    if (state.first.empty()) {
        params.for_each([&](const TensorInfo&, const S*, std::size_t n) {
            state.first.emplace_back(n, 0.0);
            state.second.emplace_back(n, 0.0);
        });
    }
    ++state.step;
    std::size_t k = 0;
    params.for_each([&](const TensorInfo& info, S* data, std::size_t n) {
        if (k >= g.size() || g[k].second != n || state.first[k].size() != n) {
            throw Error(ErrorCode::ShapeMismatch, "adamw: gradient shape mismatch at " + info.name);
        }
        adamw_update(std::span<S>(data, n), std::span<const S>(g[k].first, n), state.first[k], state.second[k],
                     state.step, cfg, info.decays);
        ++k;
    });
}

template void adamw_step<float>(EncoderParams<float>&, const EncoderParams<float>&, AdamWState&, const TrainConfig&);
template void adamw_step<double>(EncoderParams<double>&, const EncoderParams<double>&, AdamWState&, const TrainConfig&);

// ---------------------------------------------------------------------------
// Training loop

namespace {

constexpr int kEvalEpochTag = -1;

std::vector<const SubjectData*> select(std::span<const SubjectData> subjects, const std::vector<std::string>& ids) {
    std::vector<const SubjectData*> out;
    for (const auto& id : ids) {
        auto it = std::find_if(subjects.begin(), subjects.end(), [&](const SubjectData& s) { return s.id == id; });
        if (it == subjects.end()) throw Error(ErrorCode::IdMismatch, "split names unknown subject '" + id + "'");
        out.push_back(&*it);
    }
    return out;
}

double evaluate_loss(const EncoderParams<float>& mri, const EncoderParams<float>& us,
                     const std::vector<const SubjectData*>& subjects, const TrainConfig& cfg) {
    if (subjects.empty()) return std::numeric_limits<double>::quiet_NaN();
    BatchStream stream(subjects, cfg.batch_size, cfg.negatives, false, false, cfg.seed ^ 0xE7A1ULL, kEvalEpochTag);
    double total = 0.0;
    for (std::size_t b = 0; b < stream.batch_count(); ++b) {
        const auto samples = stream.batch(b);
        total += batch_loss(mri, us, samples, cfg.temperature).loss * static_cast<double>(samples.size());
    }
    return total / static_cast<double>(stream.sample_count());
}

}  // namespace

TrainResult train(std::span<const SubjectData> subjects, const SplitSpec& split, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
    cfg.validate();
    const auto train_set = select(subjects, split.train);
    const auto val_set = select(subjects, split.val);
    if (train_set.empty()) throw Error(ErrorCode::EmptyInput, "training split is empty");

    auto mri = init_encoder<float>(derive_seed(cfg.seed, 1));
    auto us = init_encoder<float>(derive_seed(cfg.seed, 2));
    AdamWState mri_state, us_state;

    TrainResult result;
    auto clock_start = std::chrono::steady_clock::now();
    auto elapsed = [&] {
        const auto now = std::chrono::steady_clock::now();
        const double s = std::chrono::duration<double>(now - clock_start).count();
        clock_start = now;
        return s;
    };

    EpochLog initial{0, evaluate_loss(mri, us, train_set, cfg), evaluate_loss(mri, us, val_set, cfg)};
    result.log.push_back(initial);
    if (on_epoch) on_epoch(initial, elapsed());

    auto selection_loss = [](const EpochLog& e) { return std::isnan(e.val_loss) ? e.train_loss : e.val_loss; };
    double best = selection_loss(initial);
    result.best = {mri, us, {cfg.seed, 0, best}};

    EncoderGraph<float> mri_graph, us_graph;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        BatchStream stream(train_set, cfg.batch_size, cfg.negatives, cfg.augment, true, cfg.seed, epoch);
        double total = 0.0;
        for (std::size_t b = 0; b < stream.batch_count(); ++b) {
            const auto samples = stream.batch(b);
            const auto bl = batch_loss(mri, us, samples, cfg.temperature, &mri_graph, &us_graph);
            total += bl.loss * static_cast<double>(samples.size());
            const auto g_mri = mri_graph.backward(bl.grad_anchor_features);
            const auto g_us = us_graph.backward(bl.grad_candidate_features);
            adamw_step(mri, g_mri, mri_state, cfg);
            adamw_step(us, g_us, us_state, cfg);
        }
        EpochLog e{epoch, total / static_cast<double>(stream.sample_count()), evaluate_loss(mri, us, val_set, cfg)};
        result.log.push_back(e);
        if (selection_loss(e) < best) {
            best = selection_loss(e);
            result.best = {mri, us, {cfg.seed, epoch, best}};
        }
        if (on_epoch) on_epoch(e, elapsed());
    }
    return result;
}

void save_loss_log(std::span<const EpochLog> log, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::FileOpen, "cannot write " + path.string());
    out << "epoch,train_loss,val_loss\n";
    for (const auto& e : log) {
        out << e.epoch << ',' << csv::format_double(e.train_loss) << ','
            << (std::isnan(e.val_loss) ? std::string("nan") : csv::format_double(e.val_loss)) << '\n';
    }
}

}  // namespace lmk
