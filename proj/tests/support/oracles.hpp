#pragma once

// Independent reference computations used by the unit and acceptance tests.
// Nothing here calls into the code under test beyond plain data types.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <functional>
#include <random>
#include <vector>

#include "lmk/encoder.hpp"
#include "lmk/matcher.hpp"
#include "lmk/volume.hpp"

namespace oracle {

/// Direct 3x3 cross-correlation with zero padding 1, any stride.
/// in: [n][c][h][w] flattened, weight: [co][ci][3][3], returns [n][co][ho][wo].
inline std::vector<double> direct_conv(const std::vector<double>& in, int n, int ci, int h, int w,
                                       const std::vector<double>& weight, const std::vector<double>& bias, int co,
                                       int stride, int& ho, int& wo) {
    ho = (h - 1) / stride + 1;
    wo = (w - 1) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(n) * co * ho * wo, 0.0);
    for (int b = 0; b < n; ++b)
        for (int o = 0; o < co; ++o)
            for (int y = 0; y < ho; ++y)
                for (int x = 0; x < wo; ++x) {
                    double acc = bias[static_cast<std::size_t>(o)];
                    for (int c = 0; c < ci; ++c)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                const int yy = y * stride + ky - 1, xx = x * stride + kx - 1;
                                if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                                acc += weight[static_cast<std::size_t>(((o * ci + c) * 3 + ky) * 3 + kx)] *
                                       in[static_cast<std::size_t>(((b * ci + c) * h + yy) * w + xx)];
                            }
                    out[static_cast<std::size_t>(((b * co + o) * ho + y) * wo + x)] = acc;
                }
    return out;
}

/// Central finite difference of f with respect to x[i].
inline double central_difference(const std::function<double()>& f, double& x, double h = 1e-6) {
    const double saved = x;
    x = saved + h;
    const double fp = f();
    x = saved - h;
    const double fm = f();
    x = saved;
    return (fp - fm) / (2.0 * h);
}

/// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
/// gradient is ~0 from turning finite-difference rounding noise into a large
/// ratio.
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
    const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / scale;
}

/// Parameter count of the encoder derived from its layer description only:
/// six 3x3 conv blocks (weights, bias, per-channel norm scale and shift), a
/// spatial walk with padding 1, and the two fully connected layers.
inline std::size_t encoder_parameter_count_by_shape_walk() {
    const int channels[] = {64, 64, 64, 32, 32, 32};
    const int strides[] = {1, 2, 1, 2, 1, 2};
    int in_ch = 3, side = 42;
    std::size_t total = 0;
    for (int i = 0; i < 6; ++i) {
        total += static_cast<std::size_t>(channels[i]) * in_ch * 9 + channels[i];  // conv
        total += 2 * static_cast<std::size_t>(channels[i]);                          // norm affine
        side = (side + 2 - 3) / strides[i] + 1;
        in_ch = channels[i];
    }
    const std::size_t flat = static_cast<std::size_t>(in_ch) * side * side;
    total += flat * 64 + 64;
    total += 64 * 32 + 32;
    return total;
}

/// Student t density.
inline double t_pdf(double x, double df) {
    return std::exp(std::lgamma((df + 1) / 2) - std::lgamma(df / 2)) / std::sqrt(df * M_PI) *
           std::pow(1 + x * x / df, -(df + 1) / 2);
}

/// Two-sided p-value by composite Simpson integration of the density on [0, |t|].
inline double t_two_sided_p_numeric(double t, double df, int intervals = 200000) {
    const double a = 0.0, b = std::abs(t);
    const double h = (b - a) / intervals;
    double s = t_pdf(a, df) + t_pdf(b, df);
    for (int i = 1; i < intervals; ++i) s += (i % 2 ? 4.0 : 2.0) * t_pdf(a + i * h, df);
    const double half = s * h / 3.0;
    return 1.0 - 2.0 * half;
}

/// Fraction of |T| >= |t| over `samples` draws of T = Z / sqrt(chi2_df / df).
inline double t_two_sided_p_monte_carlo(double t, int df, int samples, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> z(0.0, 1.0);
    std::chi_squared_distribution<double> chi(df);
    long hits = 0;
    for (int i = 0; i < samples; ++i) {
        const double v = z(gen) / std::sqrt(chi(gen) / df);
        if (std::abs(v) >= std::abs(t)) ++hits;
    }
    return static_cast<double>(hits) / samples;
}

/// Mean distance of a uniform pick in the [-r, r]^3 box from its center.
inline double random_box_pick_error(double r, int samples, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> u(-r, r);
    double sum = 0.0;
    for (int i = 0; i < samples; ++i) {
        const double x = u(gen), y = u(gen), z = u(gen);
        sum += std::sqrt(x * x + y * y + z * z);
    }
    return sum / samples;
}

/// value = a*x + b*y + c*z + d at every voxel.
inline lmk::Volume3D ramp_volume(lmk::Index3 dims, lmk::Vec3 spacing, lmk::Vec3 origin, double a, double b, double c,
                                 double d) {
    lmk::Volume3D v(dims, spacing, origin);
    for (int z = 0; z < dims[2]; ++z)
        for (int y = 0; y < dims[1]; ++y)
            for (int x = 0; x < dims[0]; ++x) v.at(x, y, z) = static_cast<float>(a * x + b * y + c * z + d);
    return v;
}

/// Scorer whose per-axis similarity decreases with distance from a planted
/// optimum, so the global argmax is known in closed form.
class PlantedScorer final : public lmk::CandidateScorer {
public:
    explicit PlantedScorer(lmk::Vec3 optimum) : optimum_(optimum) {}
    void score(std::span<const lmk::Vec3> candidates, std::span<std::array<double, 3>> per_axis) const override {
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            const double d = lmk::distance(candidates[i], optimum_);
            per_axis[i] = {-d, -0.5 * d, -0.25 * d};
        }
    }

private:
    lmk::Vec3 optimum_;
};

/// Bytes of a file, for byte-identity checks.
inline std::vector<char> read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace oracle
