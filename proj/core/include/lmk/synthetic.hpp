#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "lmk/landmarks.hpp"
#include "lmk/volume.hpp"

namespace lmk {

struct SynthSpec {
    Index3 dims{128, 128, 128};
    double spacing_mm = 0.5;
    int n_blobs = 40;
    int n_tubes = 12;
    int n_landmarks = 16;
    double max_shift_mm = 3.0;
    std::uint64_t seed = 0;

    void validate() const;
};

/// One cosine mode a * cos(omega . (p - center)).
struct DeformationMode {
    double amplitude = 0.0;
    Vec3 omega{0.0, 0.0, 0.0};  // rad / mm
};

/// Displacement d_c(p) = sum_k a_ck cos(omega_ck . (p - center)) per axis c.
/// All amplitudes are non-negative, so |d| peaks at `center`.
struct Deformation {
    Vec3 center{0.0, 0.0, 0.0};
    std::array<std::array<DeformationMode, 3>, 3> modes{};  // [axis][mode]

    /// sqrt(sum_c (sum_k a_ck)^2), the exact maximum of |d|.
    double max_magnitude() const;
};

Vec3 evaluate_deformation(const Deformation& d, const Vec3& p);

/// Conical acquisition fan; points within `half_angle` of the axis are kept.
struct FanMask {
    Vec3 apex{0.0, 0.0, 0.0};
    Vec3 axis{0.0, 0.0, -1.0};  // unit
    double half_angle = 0.5;    // radians

    bool inside(const Vec3& p) const;
    /// Distance to the cone surface, positive inside.
    double depth(const Vec3& p) const;
};

struct SynthSubject {
    Volume3D mri;
    Volume3D us;
    LandmarkPairSet pairs;
    Deformation deformation;
    FanMask fan;
};

/// Pseudo-MRI of blobs and tubes, a smooth planted deformation and a pseudo-US
/// of the deformed image with altered contrast, speckle, blur and a fan mask.
/// Throws PlacementFailed if the landmarks cannot be placed.
SynthSubject generate_subject(const SynthSpec& spec);

/// Writes `<dir>/<id>/{mri.vol,us.vol,mri_landmarks.csv,us_landmarks.csv}` for
/// subjects synth_000 ... and the pairing manifest `<dir>/pairs.csv`. Subject i
/// uses seed derive_seed(spec.seed, i). Returns the manifest path.
std::filesystem::path write_synthetic_dataset(const std::filesystem::path& dir, int n_subjects, const SynthSpec& spec);

}  // namespace lmk
