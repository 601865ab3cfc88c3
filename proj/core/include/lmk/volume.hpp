#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include "lmk/common.hpp"

namespace lmk {

/// Scalar 3D grid with physical geometry. Samples are stored x-fastest:
/// index = x + dims[0] * (y + dims[1] * z). World position of voxel i is
/// origin + i * spacing (axis-aligned, no rotation).
class Volume3D {
public:
    Volume3D() = default;
    Volume3D(Index3 dims, Vec3 spacing, Vec3 origin, std::vector<float> data);
    /// Zero-filled volume.
    Volume3D(Index3 dims, Vec3 spacing, Vec3 origin = {0.0, 0.0, 0.0});

    const Index3& dims() const { return dims_; }
    const Vec3& spacing() const { return spacing_; }
    const Vec3& origin() const { return origin_; }
    const std::vector<float>& data() const { return data_; }
    std::vector<float>& data() { return data_; }
    std::size_t size() const { return data_.size(); }

    bool contains(int x, int y, int z) const {
        return x >= 0 && y >= 0 && z >= 0 && x < dims_[0] && y < dims_[1] && z < dims_[2];
    }
    std::size_t index(int x, int y, int z) const {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(dims_[0]) *
                   (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims_[1]) * static_cast<std::size_t>(z));
    }
    float at(int x, int y, int z) const { return data_[index(x, y, z)]; }
    float& at(int x, int y, int z) { return data_[index(x, y, z)]; }
    /// Zero outside the grid.
    float at_or_zero(int x, int y, int z) const { return contains(x, y, z) ? at(x, y, z) : 0.0f; }
    /// Trilinear interpolation at continuous voxel coordinates; zero outside.
    double sample_linear(const Vec3& voxel) const;

    Vec3 world_to_voxel(const Vec3& p) const;
    Vec3 voxel_to_world(const Vec3& v) const;
    /// Nearest voxel (round half up) of a world point.
    Index3 nearest_voxel(const Vec3& p) const;

    /// Throws ErrorCode::InvalidArgument when the invariants do not hold.
    void validate() const;

private:
    Index3 dims_{0, 0, 0};
    Vec3 spacing_{1.0, 1.0, 1.0};
    Vec3 origin_{0.0, 0.0, 0.0};
    std::vector<float> data_;
};

/// Percentile with linear interpolation between order statistics (q in [0,100]).
/// `values` is sorted in place.
double percentile_sorted(const std::vector<float>& sorted, double q);

/// Clips nonzero voxels to their [0.5, 99.5] percentile window and maps the
/// window affinely onto [0, 1]. Zero voxels stay zero. A degenerate window
/// maps every nonzero voxel to 1.
Volume3D normalize_intensity(const Volume3D& v);

/// Uncompressed little-endian NIfTI-1 (.nii), int16 or float32.
Volume3D load_nifti(const std::filesystem::path& path);
void save_nifti(const Volume3D& v, const std::filesystem::path& path);

/// Text manifest (`.vol`) plus raw little-endian float32 payload (`.raw`).
Volume3D load_raw_volume(const std::filesystem::path& manifest);
void save_raw_volume(const Volume3D& v, const std::filesystem::path& manifest);

/// Dispatches on extension: `.nii` or `.vol`.
Volume3D load_volume(const std::filesystem::path& path);

}  // namespace lmk
