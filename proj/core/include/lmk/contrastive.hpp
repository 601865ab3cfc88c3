#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lmk/encoder.hpp"
#include "lmk/landmarks.hpp"
#include "lmk/patch.hpp"
#include "lmk/volume.hpp"

namespace lmk {

/// Cosine similarity; throws ZeroNorm if either vector is zero.
double cosine_similarity(std::span<const double> v, std::span<const double> w);
template <typename S>
double cosine_similarity(const nn::Matrix<S>& feats_a, Eigen::Index col_a, const nn::Matrix<S>& feats_b,
                         Eigen::Index col_b);

/// Result of one InfoNCE evaluation: the mean loss over anchors and its
/// gradients with respect to the raw (unnormalized) feature columns.
template <typename S>
struct InfoNceResult {
    double loss = 0.0;
    nn::Matrix<S> grad_anchors;
    nn::Matrix<S> grad_candidates;
};

/// InfoNCE over feature columns. Anchor i is scored against candidate
/// positive[i] and the candidates listed in negatives[i]; logits are cosine
/// similarities divided by `temperature`; the loss is the mean of
/// -log softmax(positive) over anchors, evaluated with a max-subtracted
/// log-sum-exp.
template <typename S>
InfoNceResult<S> info_nce(const nn::Matrix<S>& anchors, const nn::Matrix<S>& candidates,
                          std::span<const int> positive, std::span<const std::vector<int>> negatives,
                          double temperature);

/// Scalar form on precomputed similarities: -log(e^a / (e^a + sum e^a'_j)).
double info_nce_from_logits(double positive_logit, std::span<const double> negative_logits);

// ---------------------------------------------------------------------------
// Data

/// One subject's normalized volumes and landmark pairs.
struct SubjectData {
    std::string id;
    Volume3D mri;
    Volume3D us;
    LandmarkPairSet pairs;
};

/// Loads both volumes (normalized) and validates the pairing.
SubjectData load_subject(const SubjectEntry& entry);

struct SplitSpec {
    std::vector<std::string> train;
    std::vector<std::string> val;
    std::vector<std::string> test;
};

/// Subject-wise 70/15/15 split (largest-remainder rounding) of a seeded
/// shuffle of the ids.
SplitSpec make_split(std::vector<std::string> subject_ids, std::uint64_t seed);
void save_split(const SplitSpec& split, const std::filesystem::path& path);
SplitSpec load_split(const std::filesystem::path& path);

struct TrainConfig {
    double lr = 1e-5;
    int epochs = 50;
    int batch_size = 256;
    double temperature = 1.0;
    int negatives = 4;  // explicit offset negatives per anchor
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    bool augment = true;
    std::uint64_t seed = 0;

    void validate() const;
};

struct ContrastiveSample {
    std::string subject_id;
    std::string landmark_id;
    Axis axis = Axis::X;
    PatchSeries anchor;                  // MRI at the landmark
    PatchSeries positive;                // US at the paired landmark
    std::vector<PatchSeries> negatives;  // US at offset-sampled centers
};

struct SampleRef {
    std::size_t subject = 0;
    std::string landmark_id;
    Axis axis = Axis::X;
    std::uint64_t key = 0;  // stable identity used to derive per-sample seeds
};

/// One sample per (landmark x axis) of the given subjects, in subject order,
/// then sorted landmark id, then axis.
std::vector<SampleRef> enumerate_samples(std::span<const SubjectData* const> subjects);

/// Deterministic stream of batches for one epoch. The sample order is a
/// seeded shuffle; each sample's augmentation and negative centers derive
/// from (seed, epoch, sample key), so batches do not depend on thread count.
class BatchStream {
public:
    BatchStream(std::span<const SubjectData* const> subjects, int batch_size, int negatives, bool augment,
                bool shuffle, std::uint64_t seed, int epoch);

    std::size_t batch_count() const { return (order_.size() + batch_size_ - 1) / batch_size_; }
    std::size_t sample_count() const { return order_.size(); }
    std::vector<ContrastiveSample> batch(std::size_t index) const;

private:
    std::vector<const SubjectData*> subjects_;
    std::vector<SampleRef> order_;
    std::size_t batch_size_;
    int negatives_;
    bool augment_;
    std::uint64_t seed_;
    int epoch_;
};

/// InfoNCE of one batch: each anchor sees its explicit negatives plus every
/// other sample's positive. Returns the loss and, when graphs are given,
/// records forward passes for backward().
struct BatchLoss {
    double loss = 0.0;
    nn::Matrix<float> grad_anchor_features;
    nn::Matrix<float> grad_candidate_features;
};

BatchLoss batch_loss(const EncoderParams<float>& mri, const EncoderParams<float>& us,
                     std::span<const ContrastiveSample> samples, double temperature,
                     EncoderGraph<float>* mri_graph = nullptr, EncoderGraph<float>* us_graph = nullptr);

// ---------------------------------------------------------------------------
// AdamW

struct AdamWState {
    std::vector<std::vector<double>> first;
    std::vector<std::vector<double>> second;
    long step = 0;
};

/// One decoupled-weight-decay Adam update over a single tensor. `step` is the
/// 1-based step count used for bias correction.
void adamw_update(std::span<float> theta, std::span<const float> grad, std::span<double> first,
                  std::span<double> second, long step, const TrainConfig& cfg, bool decays);
void adamw_update(std::span<double> theta, std::span<const double> grad, std::span<double> first,
                  std::span<double> second, long step, const TrainConfig& cfg, bool decays);

/// Advances the step count and updates every tensor of `params`.
template <typename S>
void adamw_step(EncoderParams<S>& params, const EncoderParams<S>& grads, AdamWState& state, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Training loop

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;  // NaN when there is no validation split
};

struct TrainResult {
    Checkpoint best;
    std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&, double seconds)>;

/// Trains both encoders on the train split, selecting the checkpoint with the
/// lowest validation loss (epoch 0 = initialization). Throws EmptyInput when
/// the train split is empty.
TrainResult train(std::span<const SubjectData> subjects, const SplitSpec& split, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

void save_loss_log(std::span<const EpochLog> log, const std::filesystem::path& path);

}  // namespace lmk
