#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "lmk/common.hpp"
#include "lmk/random.hpp"
#include "lmk/volume.hpp"

namespace lmk {

inline constexpr int kPatchSide = 42;
inline constexpr int kPatchSlices = 3;
inline constexpr int kPatchPixels = kPatchSide * kPatchSide * kPatchSlices;
/// The window is [c - 21, c + 20] because the side is even.
inline constexpr int kPatchLow = 21;

/// The two in-plane axes (row axis, column axis) for a stacking axis.
std::pair<int, int> in_plane_axes(Axis axis);

/// Three adjacent 42x42 slices stacked along one canonical axis. Pixels are
/// laid out slice-major, then row, then column (column fastest). Slice 1 is
/// the one through the center voxel.
struct PatchSeries {
    Axis axis = Axis::Z;
    Vec3 center_world{0.0, 0.0, 0.0};
    std::vector<float> pixels = std::vector<float>(kPatchPixels, 0.0f);

    float at(int slice, int row, int col) const {
        return pixels[static_cast<std::size_t>((slice * kPatchSide + row) * kPatchSide + col)];
    }
    float& at(int slice, int row, int col) {
        return pixels[static_cast<std::size_t>((slice * kPatchSide + row) * kPatchSide + col)];
    }
};

/// One series per canonical axis, sharing the center.
struct Patch25D {
    std::array<PatchSeries, 3> series;
    const PatchSeries& operator[](Axis a) const { return series[static_cast<int>(a)]; }
};

/// Snaps `center` to the nearest voxel and cuts the 42x42x3 window around it.
/// Voxels outside the volume read as 0.
PatchSeries extract_series(const Volume3D& v, const Vec3& center, Axis axis);
/// Writes into `out` (kPatchPixels floats) without allocating.
void extract_series_into(const Volume3D& v, const Vec3& center, Axis axis, float* out);
Patch25D extract_25d(const Volume3D& v, const Vec3& center);

/// Fraction of nonzero voxels in the middle slice of each axis' series,
/// averaged over the three axes.
double mid_slice_support(const Volume3D& v, const Vec3& center);

struct AugmentParams {
    double angle_deg = 0.0;  // in-plane rotation about the center pixel
    bool hflip = false;      // reverse columns
    bool vflip = false;      // reverse rows
};

inline constexpr double kMaxRotationDeg = 15.0;

AugmentParams draw_augment(Rng& rng);
/// Rotation (bilinear, zero fill) followed by the flips, on all three slices.
PatchSeries apply_augment(const AugmentParams& params, const PatchSeries& p);
/// Draws one transform from `seed` and applies it to both members.
std::pair<PatchSeries, PatchSeries> augment_pair(const PatchSeries& anchor, const PatchSeries& positive,
                                                 std::uint64_t seed);

inline constexpr double kNegativeMaxOffsetMm = 10.0;
inline constexpr double kNegativeMinRadiusMm = 1.5;

/// true_center + offset, offset uniform in [-10, 10]^3 mm, resampled while
/// its norm is below 1.5 mm.
Vec3 sample_negative_center(const Vec3& true_center, Rng& rng);
Vec3 sample_negative_center(const Vec3& true_center, std::uint64_t seed);

/// Writes `<stem>.raw` (float32 LE, kPatchPixels values) and `<stem>.txt`.
void save_patch(const PatchSeries& p, const std::filesystem::path& stem);

}  // namespace lmk
