#pragma once

// Twin patch encoder: six conv blocks (conv 3x3 -> group norm -> leaky ReLU)
// with channels 64,64,64,32,32,32 and strides 1,2,1,2,1,2, then
// flatten(32*6*6) -> linear(64) -> leaky ReLU -> linear(32).

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lmk/nn.hpp"
#include "lmk/patch.hpp"

namespace lmk {

inline constexpr int kConvBlocks = 6;
inline constexpr int kInputChannels = kPatchSlices;
inline constexpr std::array<int, kConvBlocks> kBlockChannels{64, 64, 64, 32, 32, 32};
inline constexpr std::array<int, kConvBlocks> kBlockStrides{1, 2, 1, 2, 1, 2};
inline constexpr int kHiddenUnits = 64;
inline constexpr int kFeatureDim = 32;

/// Spatial side after the last conv block (42 -> 6).
constexpr int final_spatial_side() {
    int s = kPatchSide;
    for (int st : kBlockStrides) s = (s + st - 1) / st;
    return s;
}
inline constexpr int kFlattenDim = kBlockChannels.back() * final_spatial_side() * final_spatial_side();

template <typename S>
struct ConvBlockParams {
    nn::Matrix<S> weight;  // out x (in * 9)
    nn::Vector<S> bias;
    nn::Vector<S> norm_scale;
    nn::Vector<S> norm_shift;
};

/// Shape and role of one learnable tensor.
struct TensorInfo {
    std::string name;
    std::vector<int> shape;
    bool decays = false;  // weight decay applies (conv / linear weights only)
};

/// All learnable tensors of one encoder.
template <typename S>
struct EncoderParams {
    std::array<ConvBlockParams<S>, kConvBlocks> blocks;
    nn::Matrix<S> fc1_weight;  // 64 x 1152
    nn::Vector<S> fc1_bias;
    nn::Matrix<S> fc2_weight;  // 32 x 64
    nn::Vector<S> fc2_bias;

    /// Architecture-shaped tensors, all zero.
    static EncoderParams zeros();

    /// Visits every tensor in a fixed order as (info, pointer, count).
    template <typename F>
    void for_each(F&& fn) {
        visit(*this, fn);
    }
    template <typename F>
    void for_each(F&& fn) const {
        visit(*this, fn);
    }

    std::size_t parameter_count() const;

    template <typename T>
    EncoderParams<T> cast() const;

private:
    template <typename Self, typename F>
    static void visit(Self& self, F& fn);
};

/// Names, shapes and decay flags in visiting order.
std::vector<TensorInfo> encoder_tensor_layout();

/// Fan-in scaled uniform weights (bound sqrt(6 / fan_in)), zero biases and
/// shifts, unit scales.
template <typename S>
EncoderParams<S> init_encoder(std::uint64_t seed);

/// Packs patch series into a 3 x 42 x 42 input batch.
template <typename S>
nn::Activation<S> make_input(std::span<const PatchSeries* const> patches);
template <typename S>
nn::Activation<S> make_input(std::span<const PatchSeries> patches);

/// Inference without recording; returns kFeatureDim x batch.
template <typename S>
nn::Matrix<S> encode(const EncoderParams<S>& params, const nn::Activation<S>& input);

/// Records a forward pass so its reverse pass can be run once.
template <typename S>
class EncoderGraph {
public:
    nn::Matrix<S> forward(const EncoderParams<S>& params, const nn::Activation<S>& input);
    /// Parameter gradients for d(loss)/d(features) = grad_features
    /// (kFeatureDim x batch). Throws BackwardBeforeForward if no forward pass
    /// is recorded; consumes the recording.
    EncoderParams<S> backward(const nn::Matrix<S>& grad_features);
    /// Also returns d(loss)/d(input) (used by gradient checks).
    EncoderParams<S> backward(const nn::Matrix<S>& grad_features, nn::Activation<S>* grad_input);
    bool recorded() const { return params_ != nullptr; }

private:
    const EncoderParams<S>* params_ = nullptr;
    std::array<nn::Activation<S>, kConvBlocks> block_inputs_;
    std::array<nn::GroupNormCache<S>, kConvBlocks> norm_caches_;
    std::array<nn::Matrix<S>, kConvBlocks> norm_outputs_;
    nn::Matrix<S> flat_;
    nn::Matrix<S> hidden_pre_;
    nn::Matrix<S> hidden_;
};

// ---------------------------------------------------------------------------
// Checkpoints: `model.manifest` (text) + `model.bin` (float32 LE payload).

struct CheckpointMeta {
    std::uint64_t seed = 0;
    int epoch = 0;
    double loss = 0.0;
};

struct Checkpoint {
    EncoderParams<float> mri;
    EncoderParams<float> us;
    CheckpointMeta meta;
};

/// FNV-1a 64 over the payload bytes.
std::uint64_t payload_checksum(std::span<const char> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------

template <typename S>
template <typename Self, typename F>
void EncoderParams<S>::visit(Self& self, F& fn) {
    const auto layout = encoder_tensor_layout();
    std::size_t k = 0;
    for (auto& b : self.blocks) {
        fn(layout[k++], b.weight.data(), static_cast<std::size_t>(b.weight.size()));
        fn(layout[k++], b.bias.data(), static_cast<std::size_t>(b.bias.size()));
        fn(layout[k++], b.norm_scale.data(), static_cast<std::size_t>(b.norm_scale.size()));
        fn(layout[k++], b.norm_shift.data(), static_cast<std::size_t>(b.norm_shift.size()));
    }
    fn(layout[k++], self.fc1_weight.data(), static_cast<std::size_t>(self.fc1_weight.size()));
    fn(layout[k++], self.fc1_bias.data(), static_cast<std::size_t>(self.fc1_bias.size()));
    fn(layout[k++], self.fc2_weight.data(), static_cast<std::size_t>(self.fc2_weight.size()));
    fn(layout[k++], self.fc2_bias.data(), static_cast<std::size_t>(self.fc2_bias.size()));
}

template <typename S>
EncoderParams<S> EncoderParams<S>::zeros() {
    EncoderParams<S> p;
    int in = kInputChannels;
    for (int i = 0; i < kConvBlocks; ++i) {
        const int out = kBlockChannels[static_cast<std::size_t>(i)];
        auto& b = p.blocks[static_cast<std::size_t>(i)];
        b.weight = nn::Matrix<S>::Zero(out, in * 9);
        b.bias = nn::Vector<S>::Zero(out);
        b.norm_scale = nn::Vector<S>::Zero(out);
        b.norm_shift = nn::Vector<S>::Zero(out);
        in = out;
    }
    p.fc1_weight = nn::Matrix<S>::Zero(kHiddenUnits, kFlattenDim);
    p.fc1_bias = nn::Vector<S>::Zero(kHiddenUnits);
    p.fc2_weight = nn::Matrix<S>::Zero(kFeatureDim, kHiddenUnits);
    p.fc2_bias = nn::Vector<S>::Zero(kFeatureDim);
    return p;
}

template <typename S>
std::size_t EncoderParams<S>::parameter_count() const {
    std::size_t n = 0;
    for_each([&](const TensorInfo&, const S*, std::size_t count) { n += count; });
    return n;
}

template <typename S>
template <typename T>
EncoderParams<T> EncoderParams<S>::cast() const {
    EncoderParams<T> out;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        out.blocks[i].weight = blocks[i].weight.template cast<T>();
        out.blocks[i].bias = blocks[i].bias.template cast<T>();
        out.blocks[i].norm_scale = blocks[i].norm_scale.template cast<T>();
        out.blocks[i].norm_shift = blocks[i].norm_shift.template cast<T>();
    }
    out.fc1_weight = fc1_weight.template cast<T>();
    out.fc1_bias = fc1_bias.template cast<T>();
    out.fc2_weight = fc2_weight.template cast<T>();
    out.fc2_bias = fc2_bias.template cast<T>();
    return out;
}

}  // namespace lmk
