#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lmk/common.hpp"

namespace lmk {

struct Landmark {
    std::string id;
    Vec3 position;  // world mm
};

/// Named world-space points with unique ids; insertion order is preserved.
class LandmarkSet {
public:
    LandmarkSet() = default;
    explicit LandmarkSet(std::vector<Landmark> entries);

    /// Throws DuplicateId if the id is already present.
    void add(std::string id, const Vec3& position);

    const std::vector<Landmark>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    std::optional<Vec3> find(const std::string& id) const;
    /// Throws IdMismatch when absent.
    const Vec3& at(const std::string& id) const;
    std::vector<std::string> sorted_ids() const;

    friend bool operator==(const LandmarkSet& a, const LandmarkSet& b);

private:
    std::vector<Landmark> entries_;
};

/// MRI and US landmarks of one subject, paired by id.
struct LandmarkPairSet {
    std::string subject_id;
    LandmarkSet mri;
    LandmarkSet us;

    /// Throws IdMismatch unless both sets hold the same ids.
    void validate() const;
};

/// `id,x_mm,y_mm,z_mm` with a header line.
LandmarkSet load_landmarks_csv(const std::filesystem::path& path);
void save_landmarks_csv(const LandmarkSet& set, const std::filesystem::path& path);

/// One row of the subject pairing manifest.
struct SubjectEntry {
    std::string subject_id;
    std::filesystem::path mri_volume;
    std::filesystem::path us_volume;
    std::filesystem::path mri_landmarks;
    std::filesystem::path us_landmarks;
};

/// `subject_id,mri_volume,us_volume,mri_landmarks,us_landmarks`, one line per
/// subject, optional header. Relative paths resolve against the manifest's
/// directory.
std::vector<SubjectEntry> load_pair_manifest(const std::filesystem::path& path);
void save_pair_manifest(const std::vector<SubjectEntry>& entries, const std::filesystem::path& path);

LandmarkPairSet load_pairs(const SubjectEntry& entry);

}  // namespace lmk
