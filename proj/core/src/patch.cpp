#include "lmk/patch.hpp"

#include <cstdio>
#include <fstream>

namespace lmk {

std::pair<int, int> in_plane_axes(Axis axis) {
    switch (axis) {
    case Axis::X: return {1, 2};
    case Axis::Y: return {0, 2};
    case Axis::Z: return {0, 1};
    }
    throw Error(ErrorCode::InvalidArgument, "bad axis");
}

void extract_series_into(const Volume3D& v, const Vec3& center, Axis axis, float* out) {
    const Index3 c = v.nearest_voxel(center);
    const int stack = static_cast<int>(axis);
    const auto [row_axis, col_axis] = in_plane_axes(axis);
    const Index3& dims = v.dims();

    for (int s = 0; s < kPatchSlices; ++s) {
        Index3 idx = c;
        idx[stack] = c[stack] + s - 1;
        const bool slice_inside = idx[stack] >= 0 && idx[stack] < dims[stack];
        for (int r = 0; r < kPatchSide; ++r) {
            idx[row_axis] = c[row_axis] - kPatchLow + r;
            const bool row_inside = slice_inside && idx[row_axis] >= 0 && idx[row_axis] < dims[row_axis];
            float* dst = out + (s * kPatchSide + r) * kPatchSide;
            for (int col = 0; col < kPatchSide; ++col) {
                idx[col_axis] = c[col_axis] - kPatchLow + col;
                dst[col] = (row_inside && idx[col_axis] >= 0 && idx[col_axis] < dims[col_axis])
                               ? v.at(idx[0], idx[1], idx[2])
                               : 0.0f;
            }
        }
    }
}

PatchSeries extract_series(const Volume3D& v, const Vec3& center, Axis axis) {
    PatchSeries p;
    p.axis = axis;
    p.center_world = center;
    extract_series_into(v, center, axis, p.pixels.data());
    return p;
}

Patch25D extract_25d(const Volume3D& v, const Vec3& center) {
    Patch25D out;
    for (Axis a : kAllAxes) out.series[static_cast<int>(a)] = extract_series(v, center, a);
    return out;
}

double mid_slice_support(const Volume3D& v, const Vec3& center) {
    const Index3 c = v.nearest_voxel(center);
    std::size_t nonzero = 0;
    for (Axis axis : kAllAxes) {
        const auto [row_axis, col_axis] = in_plane_axes(axis);
        Index3 idx = c;
        for (int r = 0; r < kPatchSide; ++r) {
            idx[row_axis] = c[row_axis] - kPatchLow + r;
            for (int col = 0; col < kPatchSide; ++col) {
                idx[col_axis] = c[col_axis] - kPatchLow + col;
                if (v.at_or_zero(idx[0], idx[1], idx[2]) != 0.0f) ++nonzero;
            }
        }
    }
    return static_cast<double>(nonzero) / (3.0 * kPatchSide * kPatchSide);
}

AugmentParams draw_augment(Rng& rng) {
    AugmentParams p;
    p.angle_deg = rng.uniform(-kMaxRotationDeg, kMaxRotationDeg);
    p.hflip = rng.bernoulli(0.5);
    p.vflip = rng.bernoulli(0.5);
    return p;
}

PatchSeries apply_augment(const AugmentParams& params, const PatchSeries& p) {
    PatchSeries out = p;
    if (params.angle_deg != 0.0) {
        const double th = params.angle_deg * M_PI / 180.0;
        const double cs = std::cos(th), sn = std::sin(th);
        const double center = kPatchLow;
        for (int s = 0; s < kPatchSlices; ++s) {
            for (int r = 0; r < kPatchSide; ++r) {
                for (int c = 0; c < kPatchSide; ++c) {
                    // Inverse map: output pixel -> source position.
                    const double dr = r - center, dc = c - center;
                    const double sr = cs * dr + sn * dc + center;
                    const double sc = -sn * dr + cs * dc + center;
                    const int r0 = static_cast<int>(std::floor(sr)), c0 = static_cast<int>(std::floor(sc));
                    const double fr = sr - r0, fc = sc - c0;
                    double acc = 0.0;
                    for (int i = 0; i < 2; ++i) {
                        const int rr = r0 + i;
                        if (rr < 0 || rr >= kPatchSide) continue;
                        const double wr = i ? fr : 1.0 - fr;
                        for (int j = 0; j < 2; ++j) {
                            const int cc = c0 + j;
                            if (cc < 0 || cc >= kPatchSide) continue;
                            acc += wr * (j ? fc : 1.0 - fc) * p.at(s, rr, cc);
                        }
                    }
                    out.at(s, r, c) = static_cast<float>(acc);
                }
            }
        }
    }
    if (params.hflip || params.vflip) {
        const PatchSeries rotated = out;
        for (int s = 0; s < kPatchSlices; ++s) {
            for (int r = 0; r < kPatchSide; ++r) {
                const int sr = params.vflip ? kPatchSide - 1 - r : r;
                for (int c = 0; c < kPatchSide; ++c) {
                    const int sc = params.hflip ? kPatchSide - 1 - c : c;
                    out.at(s, r, c) = rotated.at(s, sr, sc);
                }
            }
        }
    }
    return out;
}

std::pair<PatchSeries, PatchSeries> augment_pair(const PatchSeries& anchor, const PatchSeries& positive,
                                                 std::uint64_t seed) {
    if (anchor.axis != positive.axis) {
        throw Error(ErrorCode::InvalidArgument, "augment_pair: anchor and positive stack along different axes");
    }
    Rng rng(seed);
    const auto params = draw_augment(rng);
    return {apply_augment(params, anchor), apply_augment(params, positive)};
}

Vec3 sample_negative_center(const Vec3& true_center, Rng& rng) {
    for (;;) {
        const Vec3 off{rng.uniform(-kNegativeMaxOffsetMm, kNegativeMaxOffsetMm),
                       rng.uniform(-kNegativeMaxOffsetMm, kNegativeMaxOffsetMm),
                       rng.uniform(-kNegativeMaxOffsetMm, kNegativeMaxOffsetMm)};
        if (norm(off) >= kNegativeMinRadiusMm) return true_center + off;
    }
}

Vec3 sample_negative_center(const Vec3& true_center, std::uint64_t seed) {
    Rng rng(seed);
    return sample_negative_center(true_center, rng);
}

void save_patch(const PatchSeries& p, const std::filesystem::path& stem) {
    auto raw = stem;
    raw += ".raw";
    auto txt = stem;
    txt += ".txt";
    {
        std::ofstream out(raw, std::ios::binary);
        if (!out) throw Error(ErrorCode::FileOpen, "cannot write " + raw.string());
        out.write(reinterpret_cast<const char*>(p.pixels.data()),
                  static_cast<std::streamsize>(p.pixels.size() * sizeof(float)));
    }
    std::ofstream out(txt);
    if (!out) throw Error(ErrorCode::FileOpen, "cannot write " + txt.string());
    char buf[160];
    std::snprintf(buf, sizeof buf, "center_world %.17g %.17g %.17g\n", p.center_world[0], p.center_world[1],
                  p.center_world[2]);
    out << "# lmk patch series\n";
    out << "axis " << axis_name(p.axis) << '\n' << buf;
    out << "shape " << kPatchSlices << ' ' << kPatchSide << ' ' << kPatchSide << '\n';
    out << "layout slice,row,col (col fastest)\n";
    out << "dtype float32-le\n";
    out << "data " << raw.filename().string() << '\n';
}

}  // namespace lmk
