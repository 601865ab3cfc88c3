#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "lmk/matcher.hpp"
#include "lmk/volume.hpp"

namespace lmk {

/// Sampled 1D Gaussian truncated at 4 sigma and renormalized to sum 1.
std::vector<double> gaussian_kernel(double sigma);

/// Separable Gaussian blur (sigma in voxels, per axis) with half-sample
/// symmetric (reflect) borders.
Volume3D gaussian_blur(const Volume3D& v, const Vec3& sigma_voxels);
Volume3D gaussian_blur(const Volume3D& v, double sigma_voxels);

struct Octave {
    std::vector<Volume3D> gauss;  // S + 3 levels
    std::vector<Volume3D> dog;    // S + 2 levels, dog[s] = gauss[s + 1] - gauss[s]
    std::vector<double> sigmas;   // absolute scale of each Gaussian level (octave-0 voxels)
};

struct ScaleSpace {
    std::vector<Octave> octaves;
    int levels_per_octave = 3;
    double sigma0 = 1.6;
};

/// Octave o level s has scale sigma0 * 2^(o + s/S). Octave o > 0 starts from
/// a stride-2 sample of level S of octave o - 1. Throws VolumeTooSmall if the
/// coarsest octave would be smaller than 16 voxels along any axis.
ScaleSpace build_scale_space(const Volume3D& v, int octaves = 3, int levels_per_octave = 3, double sigma0 = 1.6);

struct Keypoint3D {
    Vec3 voxel;  // continuous coordinates in the input grid
    Vec3 world;  // mm
    double sigma = 0.0;
    int octave = 0;
    double level = 0.0;  // refined level within the octave
    double dog = 0.0;    // refined DoG value
};

struct SiftDetectConfig {
    double contrast_thresh = 0.02;
    double edge_ratio = 10.0;
};

/// Strict 80-neighbour DoG extrema, refined by a 4D quadratic fit, with low
/// contrast and edge-like responses discarded.
std::vector<Keypoint3D> detect_keypoints(const ScaleSpace& ss, const SiftDetectConfig& cfg = {});

inline constexpr int kSiftSubregions = 4;
inline constexpr int kSiftDirections = 12;
inline constexpr int kSiftDescriptorSize = kSiftSubregions * kSiftSubregions * kSiftSubregions * kSiftDirections;
inline constexpr double kSiftClamp = 0.2;
inline constexpr double kReferenceSigma = 1.6;

/// 4x4x4 spatial bins x 12 icosahedral directions, Gaussian-weighted,
/// L2-normalized, clamped at 0.2 and renormalized. Computed in the volume
/// frame (no orientation assignment). Throws NoDescriptor when the window
/// lies outside the volume or has no gradient.
std::vector<double> compute_descriptor(const Volume3D& v, const Vec3& world, double sigma);

/// US keypoints with their descriptors, built once per query volume.
struct SiftIndex {
    std::vector<Keypoint3D> keypoints;
    std::vector<std::vector<double>> descriptors;
};

SiftIndex build_sift_index(const Volume3D& us, const SiftDetectConfig& cfg = {});

/// Predicts the US keypoint whose descriptor has the highest cosine
/// similarity to the MRI reference descriptor. Throws NoKeypoints when the
/// index is empty.
MatchResult sift_match_landmark(const Volume3D& mri, const SiftIndex& us_index, const Landmark& mri_landmark);
MatchResult sift_match_landmark(const Volume3D& mri, const Volume3D& us, const Landmark& mri_landmark);

/// `x_mm,y_mm,z_mm,sigma,dog`
void save_keypoints_csv(std::span<const Keypoint3D> keypoints, const std::filesystem::path& path);

}  // namespace lmk
