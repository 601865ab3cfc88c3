#include "lmk/encoder.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

#include "csv.hpp"
#include "lmk/random.hpp"

namespace lmk {

std::vector<TensorInfo> encoder_tensor_layout() {
    std::vector<TensorInfo> out;
    int in = kInputChannels;
    for (int i = 0; i < kConvBlocks; ++i) {
        const int ch = kBlockChannels[static_cast<std::size_t>(i)];
        const std::string prefix = "block" + std::to_string(i + 1) + ".";
        out.push_back({prefix + "conv.weight", {ch, in, 3, 3}, true});
        out.push_back({prefix + "conv.bias", {ch}, false});
        out.push_back({prefix + "norm.scale", {ch}, false});
        out.push_back({prefix + "norm.shift", {ch}, false});
        in = ch;
    }
    out.push_back({"fc1.weight", {kHiddenUnits, kFlattenDim}, true});
    out.push_back({"fc1.bias", {kHiddenUnits}, false});
    out.push_back({"fc2.weight", {kFeatureDim, kHiddenUnits}, true});
    out.push_back({"fc2.bias", {kFeatureDim}, false});
    return out;
}

template <typename S>
EncoderParams<S> init_encoder(std::uint64_t seed) {
    Rng rng(seed);
    auto p = EncoderParams<S>::zeros();
    auto fill_uniform = [&](nn::Matrix<S>& w) {
        const double bound = std::sqrt(6.0 / static_cast<double>(w.cols()));
        for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
    };
    for (auto& b : p.blocks) {
        fill_uniform(b.weight);
        b.norm_scale.setOnes();
    }
    fill_uniform(p.fc1_weight);
    fill_uniform(p.fc2_weight);
    return p;
}

template <typename S>
nn::Activation<S> make_input(std::span<const PatchSeries* const> patches) {
    const int n = static_cast<int>(patches.size());
    nn::Activation<S> a(n, kInputChannels, kPatchSide, kPatchSide);
    constexpr int plane = kPatchSide * kPatchSide;
    for (int b = 0; b < n; ++b) {
        const float* src = patches[static_cast<std::size_t>(b)]->pixels.data();
        for (int s = 0; s < kInputChannels; ++s) {
            S* dst = a.data.row(s).data() + static_cast<Eigen::Index>(b) * plane;
            for (int i = 0; i < plane; ++i) dst[i] = static_cast<S>(src[s * plane + i]);
        }
    }
    return a;
}

template <typename S>
nn::Activation<S> make_input(std::span<const PatchSeries> patches) {
    std::vector<const PatchSeries*> ptrs;
    ptrs.reserve(patches.size());
    for (const auto& p : patches) ptrs.push_back(&p);
    return make_input<S>(std::span<const PatchSeries* const>(ptrs));
}

namespace {

template <typename S>
nn::Matrix<S> flatten(const nn::Activation<S>& a) {
    const int plane = a.plane();
    nn::Matrix<S> flat(a.channels * plane, a.batch);
    for (int c = 0; c < a.channels; ++c) {
        const S* src = a.data.row(c).data();
        for (int b = 0; b < a.batch; ++b) {
            for (int i = 0; i < plane; ++i) flat(c * plane + i, b) = src[static_cast<Eigen::Index>(b) * plane + i];
        }
    }
    return flat;
}

template <typename S>
nn::Activation<S> unflatten(const nn::Matrix<S>& flat, int channels, int side) {
    const int plane = side * side;
    nn::Activation<S> a(static_cast<int>(flat.cols()), channels, side, side);
    for (int c = 0; c < channels; ++c) {
        S* dst = a.data.row(c).data();
        for (int b = 0; b < a.batch; ++b) {
            for (int i = 0; i < plane; ++i) dst[static_cast<Eigen::Index>(b) * plane + i] = flat(c * plane + i, b);
        }
    }
    return a;
}

template <typename S>
void check_input(const nn::Activation<S>& input) {
    nn::check(input.channels == kInputChannels && input.height == kPatchSide && input.width == kPatchSide,
              "encoder input must be 3 x 42 x 42");
}

}  // namespace

template <typename S>
nn::Matrix<S> encode(const EncoderParams<S>& params, const nn::Activation<S>& input) {
    check_input(input);
    // Fixed micro-batches keep activations cache-resident and make each
    // column's result independent of the caller's batch size.
    constexpr int chunk = 4;
    if (input.batch > chunk) {
        nn::Matrix<S> out(kFeatureDim, input.batch);
        const Eigen::Index plane = input.plane();
        for (int b0 = 0; b0 < input.batch; b0 += chunk) {
            const int n = std::min(chunk, input.batch - b0);
            nn::Activation<S> part(n, input.channels, input.height, input.width);
            part.data = input.data.middleCols(b0 * plane, n * plane);
            out.middleCols(b0, n) = encode(params, part);
        }
        return out;
    }
    nn::Activation<S> a = input;
    for (int i = 0; i < kConvBlocks; ++i) {
        const auto& bp = params.blocks[static_cast<std::size_t>(i)];
        auto z = nn::conv2d_forward(a, bp.weight, bp.bias, kBlockStrides[static_cast<std::size_t>(i)]);
        a = nn::group_norm_forward(z, bp.norm_scale, bp.norm_shift);
        nn::leaky_relu_inplace(a.data);
    }
    nn::Matrix<S> h = nn::linear_forward(flatten(a), params.fc1_weight, params.fc1_bias);
    nn::leaky_relu_inplace(h);
    return nn::linear_forward(h, params.fc2_weight, params.fc2_bias);
}

template <typename S>
nn::Matrix<S> EncoderGraph<S>::forward(const EncoderParams<S>& params, const nn::Activation<S>& input) {
    check_input(input);
    params_ = &params;
    nn::Activation<S> a = input;
    for (int i = 0; i < kConvBlocks; ++i) {
        const auto idx = static_cast<std::size_t>(i);
        const auto& bp = params.blocks[idx];
        auto z = nn::conv2d_forward(a, bp.weight, bp.bias, kBlockStrides[idx]);
        block_inputs_[idx] = std::move(a);
        a = nn::group_norm_forward(z, bp.norm_scale, bp.norm_shift, &norm_caches_[idx]);
        norm_outputs_[idx] = a.data;
        nn::leaky_relu_inplace(a.data);
    }
    flat_ = flatten(a);
    hidden_pre_ = nn::linear_forward(flat_, params.fc1_weight, params.fc1_bias);
    hidden_ = hidden_pre_;
    nn::leaky_relu_inplace(hidden_);
    return nn::linear_forward(hidden_, params.fc2_weight, params.fc2_bias);
}

template <typename S>
EncoderParams<S> EncoderGraph<S>::backward(const nn::Matrix<S>& grad_features) {
    return backward(grad_features, nullptr);
}

template <typename S>
EncoderParams<S> EncoderGraph<S>::backward(const nn::Matrix<S>& grad_features, nn::Activation<S>* grad_input) {
    if (!params_) throw Error(ErrorCode::BackwardBeforeForward, "encoder backward called without a recorded forward");
    nn::check(grad_features.rows() == kFeatureDim && grad_features.cols() == hidden_.cols(),
              "encoder backward: feature gradient shape mismatch");
    const auto& p = *params_;
    auto g = EncoderParams<S>::zeros();

    nn::Matrix<S> dh = nn::linear_backward(hidden_, p.fc2_weight, grad_features, g.fc2_weight, g.fc2_bias);
    dh = nn::leaky_relu_backward(hidden_pre_, dh);
    nn::Matrix<S> dflat = nn::linear_backward(flat_, p.fc1_weight, dh, g.fc1_weight, g.fc1_bias);
    nn::Activation<S> da = unflatten(dflat, kBlockChannels.back(), final_spatial_side());

    for (int i = kConvBlocks - 1; i >= 0; --i) {
        const auto idx = static_cast<std::size_t>(i);
        const auto& bp = p.blocks[idx];
        auto& gb = g.blocks[idx];
        nn::Activation<S> dy = da;
        dy.data = nn::leaky_relu_backward(norm_outputs_[idx], da.data);
        nn::Activation<S> dz = nn::group_norm_backward(norm_caches_[idx], bp.norm_scale, dy, gb.norm_scale, gb.norm_shift);
        const bool need_input = i > 0 || grad_input != nullptr;
        da = nn::conv2d_backward(block_inputs_[idx], bp.weight, kBlockStrides[idx], dz, gb.weight, gb.bias, need_input);
    }
    if (grad_input) *grad_input = std::move(da);

    params_ = nullptr;
    for (auto& a : block_inputs_) a = {};
    for (auto& c : norm_caches_) c = {};
    for (auto& m : norm_outputs_) m.resize(0, 0);
    return g;
}

template EncoderParams<float> init_encoder<float>(std::uint64_t);
template EncoderParams<double> init_encoder<double>(std::uint64_t);
template nn::Activation<float> make_input<float>(std::span<const PatchSeries* const>);
template nn::Activation<double> make_input<double>(std::span<const PatchSeries* const>);
template nn::Activation<float> make_input<float>(std::span<const PatchSeries>);
template nn::Activation<double> make_input<double>(std::span<const PatchSeries>);
template nn::Matrix<float> encode<float>(const EncoderParams<float>&, const nn::Activation<float>&);
template nn::Matrix<double> encode<double>(const EncoderParams<double>&, const nn::Activation<double>&);
template class EncoderGraph<float>;
template class EncoderGraph<double>;

// ---------------------------------------------------------------------------
// Checkpoints

std::uint64_t payload_checksum(std::span<const char> bytes) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

namespace {

std::string shape_string(const std::vector<int>& shape) {
    std::string s;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += 'x';
        s += std::to_string(shape[i]);
    }
    return s;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::vector<char> payload;
    std::ostringstream manifest;
    manifest << "# lmk encoder checkpoint\n";
    manifest << "format 1\n";
    manifest << "seed " << ckpt.meta.seed << '\n';
    manifest << "epoch " << ckpt.meta.epoch << '\n';
    manifest << "loss " << csv::format_double(ckpt.meta.loss) << '\n';

    auto append = [&](const std::string& prefix, const EncoderParams<float>& params) {
        params.for_each([&](const TensorInfo& info, const float* data, std::size_t count) {
            manifest << "tensor " << prefix << info.name << ' ' << shape_string(info.shape) << ' ' << payload.size()
                     << " float32-le\n";
            const auto* bytes = reinterpret_cast<const char*>(data);
            payload.insert(payload.end(), bytes, bytes + count * sizeof(float));
        });
    };
    append("mri.", ckpt.mri);
    append("us.", ckpt.us);
    manifest << "payload_bytes " << payload.size() << '\n';
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(payload_checksum(payload)));
    manifest << "checksum fnv1a64 " << buf << '\n';

    {
        std::ofstream out(dir / "model.bin", std::ios::binary);
        if (!out) throw Error(ErrorCode::FileOpen, "cannot write " + (dir / "model.bin").string());
        out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    }
    std::ofstream out(dir / "model.manifest");
    if (!out) throw Error(ErrorCode::FileOpen, "cannot write " + (dir / "model.manifest").string());
    out << manifest.str();
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "model.manifest";
    const auto payload_path = dir / "model.bin";
    std::ifstream min(manifest_path);
    if (!min) throw Error(ErrorCode::FileOpen, "cannot open checkpoint manifest " + manifest_path.string());
    std::ifstream pin(payload_path, std::ios::binary);
    if (!pin) throw Error(ErrorCode::FileOpen, "cannot open checkpoint payload " + payload_path.string());
    const std::vector<char> payload((std::istreambuf_iterator<char>(pin)), std::istreambuf_iterator<char>());

    struct Entry {
        std::string shape;
        std::size_t offset;
    };
    std::vector<std::pair<std::string, Entry>> tensors;
    Checkpoint ckpt;
    std::size_t payload_bytes = 0;
    std::string checksum;
    std::string line;
    while (std::getline(min, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "tensor") {
            std::string name, shape, dtype;
            std::size_t offset = 0;
            ls >> name >> shape >> offset >> dtype;
            if (!ls || dtype != "float32-le") throw Error(ErrorCode::Parse, manifest_path.string() + ": bad tensor line '" + line + "'");
            tensors.push_back({name, {shape, offset}});
        } else if (key == "seed") {
            ls >> ckpt.meta.seed;
        } else if (key == "epoch") {
            ls >> ckpt.meta.epoch;
        } else if (key == "loss") {
            std::string v;
            ls >> v;
            ckpt.meta.loss = csv::parse_double(v, manifest_path.string());
        } else if (key == "payload_bytes") {
            ls >> payload_bytes;
        } else if (key == "checksum") {
            std::string algo;
            ls >> algo >> checksum;
        } else if (key != "format") {
            throw Error(ErrorCode::Parse, manifest_path.string() + ": unknown key '" + key + "'");
        }
    }

    if (payload.size() < payload_bytes) {
        throw Error(ErrorCode::TruncatedPayload, payload_path.string() + ": payload has " + std::to_string(payload.size()) +
                                                     " bytes, manifest declares " + std::to_string(payload_bytes));
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(payload_checksum(payload)));
    if (checksum != buf) {
        throw Error(ErrorCode::ChecksumMismatch, payload_path.string() + ": checksum " + buf + " does not match manifest " + checksum);
    }

    auto fill = [&](const std::string& prefix, EncoderParams<float>& params) {
        params = EncoderParams<float>::zeros();
        params.for_each([&](const TensorInfo& info, float* data, std::size_t count) {
            const std::string name = prefix + info.name;
            const Entry* e = nullptr;
            for (const auto& [n, entry] : tensors) {
                if (n == name) e = &entry;
            }
            if (!e) throw Error(ErrorCode::ShapeMismatch, "checkpoint is missing tensor '" + name + "'");
            if (e->shape != shape_string(info.shape)) {
                throw Error(ErrorCode::ShapeMismatch, "checkpoint tensor '" + name + "' has shape " + e->shape +
                                                          ", architecture expects " + shape_string(info.shape));
            }
            if (e->offset + count * sizeof(float) > payload.size()) {
                throw Error(ErrorCode::TruncatedPayload, "checkpoint tensor '" + name + "' extends past the payload");
            }
            std::memcpy(data, payload.data() + e->offset, count * sizeof(float));
        });
    };
    fill("mri.", ckpt.mri);
    fill("us.", ckpt.us);
    return ckpt;
}

}  // namespace lmk
