#pragma once

// Central finite-difference checks of every differentiable op and of the full
// encoder, all in double precision. Each check draws `instances` random
// problems and returns the worst relative error seen.

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lmk/contrastive.hpp"
#include "lmk/encoder.hpp"
#include "lmk/nn.hpp"
#include "support/oracles.hpp"

namespace gradcheck {

using lmk::nn::Activation;
using Mat = lmk::nn::Matrix<double>;
using Vec = lmk::nn::Vector<double>;

struct Result {
    std::string name;
    int instances = 0;
    long entries = 0;
    double worst = 0.0;
};

inline void fill(std::mt19937_64& g, double* p, Eigen::Index n, double scale = 1.0) {
    std::normal_distribution<double> d(0.0, scale);
    for (Eigen::Index i = 0; i < n; ++i) p[i] = d(g);
}

/// Compares every entry of an analytic gradient against finite differences
/// of `loss` with respect to the matching entry of `x`.
template <typename F>
void compare_all(Result& r, double* x, const double* analytic, Eigen::Index n, const F& loss, double h = 1e-6) {
    for (Eigen::Index i = 0; i < n; ++i) {
        const double num = oracle::central_difference(loss, x[i], h);
        r.worst = std::max(r.worst, oracle::relative_error(analytic[i], num));
        ++r.entries;
    }
}

/// Weighted-sum loss sum(out .* w), so d(loss)/d(out) = w.
inline double weighted(const Mat& out, const Mat& w) { return (out.array() * w.array()).sum(); }

inline Result conv2d(int instances, std::uint64_t seed) {
    Result r{"conv2d", 0, 0, 0.0};
    std::mt19937_64 g(seed);
    for (int k = 0; k < instances; ++k) {
        const int stride = 1 + k % 2;
        Activation<double> in(2, 3, 7, 6);
        fill(g, in.data.data(), in.data.size());
        Mat w(4, 27);
        Vec b(4);
        fill(g, w.data(), w.size(), 0.5);
        fill(g, b.data(), b.size());
        const auto probe = lmk::nn::conv2d_forward(in, w, b, stride);
        Mat weights(probe.data.rows(), probe.data.cols());
        fill(g, weights.data(), weights.size());
        auto loss = [&] { return weighted(lmk::nn::conv2d_forward(in, w, b, stride).data, weights); };

        Activation<double> grad_out = probe;
        grad_out.data = weights;
        Mat gw = Mat::Zero(4, 27);
        Vec gb = Vec::Zero(4);
        const auto gin = lmk::nn::conv2d_backward(in, w, stride, grad_out, gw, gb);
        compare_all(r, in.data.data(), gin.data.data(), in.data.size(), loss);
        compare_all(r, w.data(), gw.data(), w.size(), loss);
        compare_all(r, b.data(), gb.data(), b.size(), loss);
        ++r.instances;
    }
    return r;
}

inline Result group_norm(int instances, std::uint64_t seed) {
    Result r{"group_norm", 0, 0, 0.0};
    std::mt19937_64 g(seed);
    for (int k = 0; k < instances; ++k) {
        const int groups = k % 2 ? 4 : 8;
        Activation<double> in(2, 8, 3, 4);
        fill(g, in.data.data(), in.data.size(), 2.0);
        in.data.array() += 0.7;
        Vec scale(8), shift(8);
        fill(g, scale.data(), scale.size());
        fill(g, shift.data(), shift.size());
        Mat weights(in.data.rows(), in.data.cols());
        fill(g, weights.data(), weights.size());
        auto loss = [&] {
            return weighted(lmk::nn::group_norm_forward<double>(in, scale, shift, nullptr, groups).data, weights);
        };

        lmk::nn::GroupNormCache<double> cache;
        auto out = lmk::nn::group_norm_forward<double>(in, scale, shift, &cache, groups);
        out.data = weights;
        Vec gs = Vec::Zero(8), gsh = Vec::Zero(8);
        const auto gin = lmk::nn::group_norm_backward(cache, scale, out, gs, gsh);
        compare_all(r, in.data.data(), gin.data.data(), in.data.size(), loss);
        compare_all(r, scale.data(), gs.data(), scale.size(), loss);
        compare_all(r, shift.data(), gsh.data(), shift.size(), loss);
        ++r.instances;
    }
    return r;
}

inline Result leaky_relu(int instances, std::uint64_t seed) {
    Result r{"leaky_relu", 0, 0, 0.0};
    std::mt19937_64 g(seed);
    for (int k = 0; k < instances; ++k) {
        Mat x(5, 7);
        fill(g, x.data(), x.size());
        // Keep samples away from the kink so no difference quotient straddles it.
        for (Eigen::Index i = 0; i < x.size(); ++i)
            if (std::abs(x.data()[i]) < 1e-3) x.data()[i] = 0.5;
        Mat weights(5, 7);
        fill(g, weights.data(), weights.size());
        auto loss = [&] {
            Mat y = x;
            lmk::nn::leaky_relu_inplace(y);
            return weighted(y, weights);
        };
        const Mat gx = lmk::nn::leaky_relu_backward(x, weights);
        compare_all(r, x.data(), gx.data(), x.size(), loss);
        ++r.instances;
    }
    return r;
}

inline Result linear(int instances, std::uint64_t seed) {
    Result r{"linear", 0, 0, 0.0};
    std::mt19937_64 g(seed);
    for (int k = 0; k < instances; ++k) {
        Mat x(6, 3), w(4, 6), weights(4, 3);
        Vec b(4);
        fill(g, x.data(), x.size());
        fill(g, w.data(), w.size());
        fill(g, b.data(), b.size());
        fill(g, weights.data(), weights.size());
        auto loss = [&] { return weighted(lmk::nn::linear_forward(x, w, b), weights); };
        Mat gw = Mat::Zero(4, 6);
        Vec gb = Vec::Zero(4);
        const Mat gx = lmk::nn::linear_backward(x, w, weights, gw, gb);
        compare_all(r, x.data(), gx.data(), x.size(), loss);
        compare_all(r, w.data(), gw.data(), w.size(), loss);
        compare_all(r, b.data(), gb.data(), b.size(), loss);
        ++r.instances;
    }
    return r;
}

inline Result info_nce(int instances, std::uint64_t seed) {
    Result r{"info_nce", 0, 0, 0.0};
    std::mt19937_64 g(seed);
    for (int k = 0; k < instances; ++k) {
        const int n = 4, dim = 6, per = 3;
        Mat anchors(dim, n), candidates(dim, n * (1 + per));
        fill(g, anchors.data(), anchors.size());
        fill(g, candidates.data(), candidates.size());
        std::vector<int> positive(n);
        std::vector<std::vector<int>> negatives(n);
        for (int i = 0; i < n; ++i) {
            positive[static_cast<std::size_t>(i)] = i;
            for (int j = 0; j < per; ++j) negatives[static_cast<std::size_t>(i)].push_back(n + i * per + j);
            // Other anchors' positives act as extra negatives.
            negatives[static_cast<std::size_t>(i)].push_back((i + 1) % n);
        }
        const double temperature = k % 2 ? 0.5 : 1.0;
        auto loss = [&] {
            return lmk::info_nce<double>(anchors, candidates, positive, negatives, temperature).loss;
        };
        const auto res = lmk::info_nce<double>(anchors, candidates, positive, negatives, temperature);
        compare_all(r, anchors.data(), res.grad_anchors.data(), anchors.size(), loss);
        compare_all(r, candidates.data(), res.grad_candidates.data(), candidates.size(), loss);
        ++r.instances;
    }
    return r;
}

/// Full encoder: all parameters perturbed away from their initial values so
/// biases and norm affines take generic values. Each instance checks the
/// directional derivative along a random unit direction of the whole
/// parameter vector, of the input, and of three individual tensors (rotating
/// so all tensors are covered across instances).
inline Result encoder(int instances, std::uint64_t seed) {
    Result r{"encoder", 0, 0, 0.0};
    std::mt19937_64 g(seed);
    const auto layout = lmk::encoder_tensor_layout();
    const int tensors = static_cast<int>(layout.size());
    for (int k = 0; k < instances; ++k) {
        auto params = lmk::init_encoder<double>(seed + static_cast<std::uint64_t>(k));
        params.for_each([&](const lmk::TensorInfo&, double* p, std::size_t n) {
            std::normal_distribution<double> d(0.0, 0.05);
            for (std::size_t i = 0; i < n; ++i) p[i] += d(g);
        });
        Activation<double> in(2, lmk::kInputChannels, lmk::kPatchSide, lmk::kPatchSide);
        fill(g, in.data.data(), in.data.size());
        Mat weights(lmk::kFeatureDim, 2);
        fill(g, weights.data(), weights.size());

        lmk::EncoderGraph<double> graph;
        graph.forward(params, in);
        Activation<double> grad_in;
        const auto grads = graph.backward(weights, &grad_in);

        // Directions: 0 = all parameters, 1 = input, 2.. = single tensors.
        std::vector<int> chosen{-1, -2};
        for (int j = 0; j < 3; ++j) chosen.push_back((k + j * instances) % tensors);

        for (int which : chosen) {
            auto dir = lmk::EncoderParams<double>::zeros();
            Activation<double> din(2, lmk::kInputChannels, lmk::kPatchSide, lmk::kPatchSide);
            din.data.setZero();
            if (which == -2) {
                fill(g, din.data.data(), din.data.size());
            } else {
                int t = 0;
                dir.for_each([&](const lmk::TensorInfo&, double* p, std::size_t n) {
                    if (which == -1 || which == t) fill(g, p, static_cast<Eigen::Index>(n));
                    ++t;
                });
            }
            // Unit-norm direction with a small step: the leaky ReLU kinks make the
            // loss only piecewise smooth, and a long step crosses many of them.
            double norm2 = din.data.squaredNorm();
            dir.for_each([&](const lmk::TensorInfo&, const double* p, std::size_t n) {
                for (std::size_t i = 0; i < n; ++i) norm2 += p[i] * p[i];
            });
            const double inv = 1.0 / std::sqrt(norm2);
            din.data *= inv;
            dir.for_each([&](const lmk::TensorInfo&, double* p, std::size_t n) {
                for (std::size_t i = 0; i < n; ++i) p[i] *= inv;
            });

            double analytic = (grad_in.data.array() * din.data.array()).sum();
            std::vector<const double*> gp;
            grads.for_each([&](const lmk::TensorInfo&, const double* p, std::size_t) { gp.push_back(p); });
            std::size_t t = 0;
            dir.for_each([&](const lmk::TensorInfo&, const double* p, std::size_t n) {
                for (std::size_t i = 0; i < n; ++i) analytic += gp[t][i] * p[i];
                ++t;
            });

            auto shifted = [&](double eps) {
                auto p = params;
                std::vector<const double*> dp;
                dir.for_each([&](const lmk::TensorInfo&, const double* q, std::size_t) { dp.push_back(q); });
                std::size_t u = 0;
                p.for_each([&](const lmk::TensorInfo&, double* q, std::size_t n) {
                    for (std::size_t i = 0; i < n; ++i) q[i] += eps * dp[u][i];
                    ++u;
                });
                Activation<double> x = in;
                x.data += eps * din.data;
                return weighted(lmk::encode(p, x), weights);
            };
            const double h = 1e-7;
            const double numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            r.worst = std::max(r.worst, oracle::relative_error(analytic, numeric));
            ++r.entries;
        }
        ++r.instances;
    }
    return r;
}

inline std::vector<Result> all(int instances, std::uint64_t seed) {
    return {conv2d(instances, seed), group_norm(instances, seed + 1), leaky_relu(instances, seed + 2),
            linear(instances, seed + 3), info_nce(instances, seed + 4), encoder(instances, seed + 5)};
}

}  // namespace gradcheck
