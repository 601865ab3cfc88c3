#pragma once

// Differentiable building blocks for the patch encoder. Activations are kept
// as channel-major matrices: row = channel, column = (sample * H + y) * W + x.
// Every op has an explicit forward and backward so the encoder can run its
// reverse pass without a general graph.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "lmk/common.hpp"

namespace lmk::nn {

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

/// Batch of C x H x W feature maps.
template <typename S>
struct Activation {
    int batch = 0;
    int channels = 0;
    int height = 0;
    int width = 0;
    Matrix<S> data;  // channels x (batch * height * width)

    Activation() = default;
    Activation(int n, int c, int h, int w) : batch(n), channels(c), height(h), width(w), data(c, n * h * w) {}
    int plane() const { return height * width; }
    S& at(int n, int c, int y, int x) { return data(c, (n * height + y) * width + x); }
    S at(int n, int c, int y, int x) const { return data(c, (n * height + y) * width + x); }
};

inline int conv_output_size(int in, int stride) { return (in + stride - 1) / stride; }

inline void check(bool ok, const std::string& what) {
    if (!ok) throw Error(ErrorCode::ShapeMismatch, what);
}

// ---------------------------------------------------------------------------
// conv2d: 3x3 kernel, zero padding 1, stride 1 or 2, cross-correlation.
// weight: C_out x (C_in * 9) with column index ci * 9 + ky * 3 + kx.

template <typename S>
void im2col(const Activation<S>& in, int stride, Matrix<S>& cols) {
    const int ho = conv_output_size(in.height, stride), wo = conv_output_size(in.width, stride);
    cols.resize(in.channels * 9, static_cast<Eigen::Index>(in.batch) * ho * wo);
    for (int ci = 0; ci < in.channels; ++ci) {
        const S* src_row = in.data.row(ci).data();
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                S* dst = cols.row(ci * 9 + ky * 3 + kx).data();
                // Output columns [lo, hi) read inside the input row.
                const int lo = kx == 0 ? 1 : 0;
                const int hi = std::min(wo, (in.width - kx) / stride + 1);
                for (int b = 0; b < in.batch; ++b) {
                    for (int yo = 0; yo < ho; ++yo) {
                        const int yi = yo * stride + ky - 1;
                        S* d = dst + (static_cast<Eigen::Index>(b) * ho + yo) * wo;
                        if (yi < 0 || yi >= in.height) {
                            std::fill(d, d + wo, S(0));
                            continue;
                        }
                        const S* s = src_row + (static_cast<Eigen::Index>(b) * in.height + yi) * in.width;
                        for (int xo = 0; xo < lo; ++xo) d[xo] = S(0);
                        if (stride == 1) {
                            std::copy(s + lo + kx - 1, s + hi + kx - 1, d + lo);
                        } else {
                            for (int xo = lo; xo < hi; ++xo) d[xo] = s[2 * xo + kx - 1];
                        }
                        for (int xo = hi; xo < wo; ++xo) d[xo] = S(0);
                    }
                }
            }
        }
    }
}

template <typename S>
void col2im_add(const Matrix<S>& cols, int stride, Activation<S>& grad_in) {
    const int ho = conv_output_size(grad_in.height, stride), wo = conv_output_size(grad_in.width, stride);
    for (int ci = 0; ci < grad_in.channels; ++ci) {
        S* dst_row = grad_in.data.row(ci).data();
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const S* src = cols.row(ci * 9 + ky * 3 + kx).data();
                for (int b = 0; b < grad_in.batch; ++b) {
                    for (int yo = 0; yo < ho; ++yo) {
                        const int yi = yo * stride + ky - 1;
                        if (yi < 0 || yi >= grad_in.height) continue;
                        const S* s = src + (static_cast<Eigen::Index>(b) * ho + yo) * wo;
                        S* d = dst_row + (static_cast<Eigen::Index>(b) * grad_in.height + yi) * grad_in.width;
                        for (int xo = 0; xo < wo; ++xo) {
                            const int xi = xo * stride + kx - 1;
                            if (xi >= 0 && xi < grad_in.width) d[xi] += s[xo];
                        }
                    }
                }
            }
        }
    }
}

template <typename S>
Activation<S> conv2d_forward(const Activation<S>& in, const Matrix<S>& weight, const Vector<S>& bias, int stride) {
    check(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
    check(weight.cols() == in.channels * 9, "conv2d: weight columns != C_in * 9");
    check(bias.size() == weight.rows(), "conv2d: bias length != C_out");
    Matrix<S> cols;
    im2col(in, stride, cols);
    Activation<S> out;
    out.batch = in.batch;
    out.channels = static_cast<int>(weight.rows());
    out.height = conv_output_size(in.height, stride);
    out.width = conv_output_size(in.width, stride);
    out.data.noalias() = weight * cols;
    out.data.colwise() += bias;
    return out;
}

/// Accumulates into grad_weight / grad_bias; returns the input gradient when
/// `need_input` is set.
template <typename S>
Activation<S> conv2d_backward(const Activation<S>& in, const Matrix<S>& weight, int stride,
                              const Activation<S>& grad_out, Matrix<S>& grad_weight, Vector<S>& grad_bias,
                              bool need_input = true) {
    Matrix<S> cols;
    im2col(in, stride, cols);
    grad_weight.noalias() += grad_out.data * cols.transpose();
    grad_bias.noalias() += grad_out.data.rowwise().sum();
    Activation<S> grad_in;
    if (need_input) {
        grad_in = Activation<S>(in.batch, in.channels, in.height, in.width);
        grad_in.data.setZero();
        cols.noalias() = weight.transpose() * grad_out.data;
        col2im_add(cols, stride, grad_in);
    }
    return grad_in;
}

// ---------------------------------------------------------------------------
// group_norm with per-channel affine.

inline constexpr int kGroups = 8;
inline constexpr double kGroupNormEps = 1e-5;

// One channel's plane of one sample. Reductions run per plane in S with
// Eigen's vectorized tree sum and are combined across planes in double.
template <typename S>
auto plane_map(const Matrix<S>& m, int ch, Eigen::Index off, int plane) {
    return Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(m.row(ch).data() + off, plane);
}

template <typename S>
auto plane_map_mut(Matrix<S>& m, int ch, Eigen::Index off, int plane) {
    return Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>(m.row(ch).data() + off, plane);
}

template <typename S>
struct GroupNormCache {
    Matrix<S> normalized;           // xhat, same shape as input
    std::vector<double> inv_std;    // batch * groups
    int groups = kGroups;
};

template <typename S>
Activation<S> group_norm_forward(const Activation<S>& x, const Vector<S>& scale, const Vector<S>& shift,
                                 GroupNormCache<S>* cache = nullptr, int groups = kGroups,
                                 double eps = kGroupNormEps) {
    check(groups > 0 && x.channels % groups == 0, "group_norm: channel count " + std::to_string(x.channels) +
                                                      " not divisible by " + std::to_string(groups) + " groups");
    check(scale.size() == x.channels && shift.size() == x.channels, "group_norm: affine length != channels");
    const int cpg = x.channels / groups;
    const int plane = x.plane();
    Activation<S> y(x.batch, x.channels, x.height, x.width);
    GroupNormCache<S> local;
    GroupNormCache<S>& c = cache ? *cache : local;
    c.groups = groups;
    c.normalized.resize(x.data.rows(), x.data.cols());
    c.inv_std.assign(static_cast<std::size_t>(x.batch) * groups, 0.0);
    const double count = static_cast<double>(cpg) * plane;

    for (int b = 0; b < x.batch; ++b) {
        const Eigen::Index off = static_cast<Eigen::Index>(b) * plane;
        for (int g = 0; g < groups; ++g) {
            double sum = 0.0;
            for (int ch = g * cpg; ch < (g + 1) * cpg; ++ch) sum += static_cast<double>(plane_map(x.data, ch, off, plane).sum());
            const double mean = sum / count;
            const S mean_s = static_cast<S>(mean);
            double ss = 0.0;
            for (int ch = g * cpg; ch < (g + 1) * cpg; ++ch) {
                ss += static_cast<double>((plane_map(x.data, ch, off, plane) - mean_s).square().sum());
            }
            const double inv = 1.0 / std::sqrt(ss / count + eps);
            c.inv_std[static_cast<std::size_t>(b) * groups + g] = inv;
            const S inv_s = static_cast<S>(inv);
            for (int ch = g * cpg; ch < (g + 1) * cpg; ++ch) {
                auto n = plane_map_mut(c.normalized, ch, off, plane);
                n = (plane_map(x.data, ch, off, plane) - mean_s) * inv_s;
                plane_map_mut(y.data, ch, off, plane) = scale[ch] * n + shift[ch];
            }
        }
    }
    return y;
}

template <typename S>
Activation<S> group_norm_backward(const GroupNormCache<S>& cache, const Vector<S>& scale,
                                  const Activation<S>& grad_out, Vector<S>& grad_scale, Vector<S>& grad_shift) {
    const int groups = cache.groups;
    const int cpg = grad_out.channels / groups;
    const int plane = grad_out.plane();
    const double count = static_cast<double>(cpg) * plane;
    Activation<S> grad_in(grad_out.batch, grad_out.channels, grad_out.height, grad_out.width);

    for (int ch = 0; ch < grad_out.channels; ++ch) {
        grad_scale[ch] += (grad_out.data.row(ch).array() * cache.normalized.row(ch).array()).sum();
        grad_shift[ch] += grad_out.data.row(ch).sum();
    }
    for (int b = 0; b < grad_out.batch; ++b) {
        const Eigen::Index off = static_cast<Eigen::Index>(b) * plane;
        for (int g = 0; g < groups; ++g) {
            double sum_dx = 0.0, sum_dx_x = 0.0;
            for (int ch = g * cpg; ch < (g + 1) * cpg; ++ch) {
                const auto go = plane_map(grad_out.data, ch, off, plane);
                const double sc = static_cast<double>(scale[ch]);
                sum_dx += sc * static_cast<double>(go.sum());
                sum_dx_x += sc * static_cast<double>((go * plane_map(cache.normalized, ch, off, plane)).sum());
            }
            const S mean_dx = static_cast<S>(sum_dx / count), mean_dx_x = static_cast<S>(sum_dx_x / count);
            const S inv = static_cast<S>(cache.inv_std[static_cast<std::size_t>(b) * groups + g]);
            for (int ch = g * cpg; ch < (g + 1) * cpg; ++ch) {
                plane_map_mut(grad_in.data, ch, off, plane) =
                    inv * (scale[ch] * plane_map(grad_out.data, ch, off, plane) - mean_dx -
                           plane_map(cache.normalized, ch, off, plane) * mean_dx_x);
            }
        }
    }
    return grad_in;
}

// ---------------------------------------------------------------------------
// leaky_relu

inline constexpr double kLeakySlope = 0.01;

template <typename Derived>
void leaky_relu_inplace(Eigen::MatrixBase<Derived>& x, double slope = kLeakySlope) {
    using S = typename Derived::Scalar;
    check(slope >= 0.0 && slope < 1.0, "leaky_relu: slope must lie in [0, 1)");
    const S a = static_cast<S>(slope);
    // max(v, a v) is the leaky ReLU for 0 < a < 1 and vectorizes.
    x = x.cwiseMax(a * x);
}

/// Gradient is 1 for x > 0 and `slope` otherwise (including x == 0).
template <typename S>
Matrix<S> leaky_relu_backward(const Matrix<S>& pre_activation, const Matrix<S>& grad_out,
                              double slope = kLeakySlope) {
    const S a = static_cast<S>(slope);
    return (pre_activation.array() > S(0)).select(grad_out, a * grad_out);
}

// ---------------------------------------------------------------------------
// linear: y = W x + b with x as columns (N_in x batch).

template <typename S>
Matrix<S> linear_forward(const Matrix<S>& x, const Matrix<S>& weight, const Vector<S>& bias) {
    check(weight.cols() == x.rows(), "linear: weight columns != input length");
    check(bias.size() == weight.rows(), "linear: bias length != output length");
    Matrix<S> y = weight * x;
    y.colwise() += bias;
    return y;
}

template <typename S>
Matrix<S> linear_backward(const Matrix<S>& x, const Matrix<S>& weight, const Matrix<S>& grad_out,
                          Matrix<S>& grad_weight, Vector<S>& grad_bias) {
    grad_weight.noalias() += grad_out * x.transpose();
    grad_bias.noalias() += grad_out.rowwise().sum();
    return weight.transpose() * grad_out;
}

}  // namespace lmk::nn
