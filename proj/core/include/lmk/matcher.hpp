#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lmk/encoder.hpp"
#include "lmk/landmarks.hpp"
#include "lmk/volume.hpp"

namespace lmk {

struct SearchConfig {
    double range_mm = 5.0;
    double step_mm = 0.5;
    std::optional<double> similarity_floor;  // disabled by default
    double extend_factor = 2.0;
    int max_extensions = 1;
    double min_us_support = 0.5;  // fraction of nonzero voxels in the candidate mid-slices

    void validate() const;
};

struct MatchResult {
    std::string landmark_id;
    Vec3 predicted_us_world{0.0, 0.0, 0.0};
    double score_total = 0.0;
    std::array<double, 3> score_per_axis{0.0, 0.0, 0.0};
    long candidates_evaluated = 0;
    bool extended = false;
    double range_mm = 0.0;  // half-width of the box the prediction came from
};

/// Integer offsets (in steps) of the search box, lexicographic in (x, y, z)
/// with x outermost.
std::vector<Index3> candidate_offsets(double range_mm, double step_mm);
/// World points center + offset * step, same order as candidate_offsets.
std::vector<Vec3> candidate_grid(const Vec3& center, const SearchConfig& cfg);

/// Scores candidate locations. Implementations must be deterministic: the
/// same candidate span always yields the same scores. The search calls it on
/// fixed chunks, so results do not depend on the thread count.
class CandidateScorer {
public:
    virtual ~CandidateScorer() = default;
    /// Writes per-axis similarities for each candidate.
    virtual void score(std::span<const Vec3> candidates, std::span<std::array<double, 3>> per_axis) const = 0;
};

/// Summed cosine similarity between precomputed MRI features and the US
/// encoder's features of the candidate's patch series.
class EncoderScorer final : public CandidateScorer {
public:
    EncoderScorer(const Volume3D& us, const EncoderParams<float>& us_params,
                  std::array<std::vector<double>, 3> mri_features);
    void score(std::span<const Vec3> candidates, std::span<std::array<double, 3>> per_axis) const override;

private:
    const Volume3D& us_;
    const EncoderParams<float>& params_;
    std::array<std::vector<double>, 3> mri_features_;
};

/// MRI encoder features of the three series at a landmark.
std::array<std::vector<double>, 3> reference_features(const Volume3D& mri, const Vec3& landmark,
                                                      const EncoderParams<float>& params);

/// Per-axis scores and their total for one candidate.
struct CandidateScore {
    double total = 0.0;
    std::array<double, 3> per_axis{0.0, 0.0, 0.0};
};
CandidateScore score_candidate(const std::array<std::vector<double>, 3>& mri_features, const Volume3D& us,
                               const Vec3& candidate, const EncoderParams<float>& us_params);

using SupportFn = std::function<double(const Vec3&)>;

/// Exhaustive search of the box around `center`; argmax of the summed score
/// with ties broken by smaller displacement, then lexicographic offset order.
/// Candidates with support below cfg.min_us_support are skipped. If nothing
/// is eligible, or the best score is under the floor, the box is enlarged by
/// extend_factor (up to max_extensions times). Throws NoMatch otherwise.
MatchResult search_landmark(const Vec3& center, const CandidateScorer& scorer, const SupportFn& support,
                            const SearchConfig& cfg);

MatchResult match_landmark(const Volume3D& mri, const Volume3D& us, const Landmark& mri_landmark,
                           const EncoderParams<float>& params_mri, const EncoderParams<float>& params_us,
                           const SearchConfig& cfg);

struct MatchFailure {
    std::string landmark_id;
    std::string message;
};

struct MatchReport {
    std::vector<MatchResult> results;
    std::vector<MatchFailure> failures;
};

/// Matches every MRI landmark (sorted by id); per-landmark NoMatch errors are
/// recorded as failures instead of aborting.
using LandmarkMatcher = std::function<MatchResult(const Landmark&)>;
MatchReport match_all(const LandmarkSet& mri_landmarks, const LandmarkMatcher& matcher);
MatchReport match_all(const Volume3D& mri, const Volume3D& us, const LandmarkSet& mri_landmarks,
                      const EncoderParams<float>& params_mri, const EncoderParams<float>& params_us,
                      const SearchConfig& cfg);

/// `id,x_mm,y_mm,z_mm,score,extended`
void save_matches_csv(std::span<const MatchResult> results, const std::filesystem::path& path);
std::vector<MatchResult> load_matches_csv(const std::filesystem::path& path);
/// Predicted positions as a landmark set (for evaluation).
LandmarkSet predictions_as_landmarks(std::span<const MatchResult> results);

}  // namespace lmk
