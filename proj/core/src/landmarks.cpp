#include "lmk/landmarks.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

#include "csv.hpp"

namespace lmk {

LandmarkSet::LandmarkSet(std::vector<Landmark> entries) {
    for (auto& e : entries) add(std::move(e.id), e.position);
}

void LandmarkSet::add(std::string id, const Vec3& position) {
    if (id.empty()) throw Error(ErrorCode::InvalidArgument, "landmark id must not be empty");
    for (double c : position) {
        if (!std::isfinite(c)) throw Error(ErrorCode::InvalidArgument, "landmark '" + id + "' has a non-finite coordinate");
    }
    if (find(id)) throw Error(ErrorCode::DuplicateId, "duplicate landmark id '" + id + "'");
    entries_.push_back({std::move(id), position});
}

std::optional<Vec3> LandmarkSet::find(const std::string& id) const {
    for (const auto& e : entries_) {
        if (e.id == id) return e.position;
    }
    return std::nullopt;
}

const Vec3& LandmarkSet::at(const std::string& id) const {
    for (const auto& e : entries_) {
        if (e.id == id) return e.position;
    }
    throw Error(ErrorCode::IdMismatch, "landmark id '" + id + "' not present");
}

std::vector<std::string> LandmarkSet::sorted_ids() const {
    std::vector<std::string> ids;
    ids.reserve(entries_.size());
    for (const auto& e : entries_) ids.push_back(e.id);
    std::sort(ids.begin(), ids.end());
    return ids;
}

bool operator==(const LandmarkSet& a, const LandmarkSet& b) {
    if (a.size() != b.size()) return false;
    for (const auto& e : a.entries()) {
        const auto p = b.find(e.id);
        if (!p || *p != e.position) return false;
    }
    return true;
}

void LandmarkPairSet::validate() const {
    if (mri.sorted_ids() != us.sorted_ids()) {
        throw Error(ErrorCode::IdMismatch, "subject '" + subject_id + "': MRI and US landmark ids differ");
    }
}

LandmarkSet load_landmarks_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::FileOpen, "cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorCode::MissingColumn, path.string() + ": missing header line");
    const auto header = csv::split(line);
    const std::vector<std::string> expected{"id", "x_mm", "y_mm", "z_mm"};
    if (header != expected) {
        throw Error(ErrorCode::MissingColumn, path.string() + ": header must be 'id,x_mm,y_mm,z_mm'");
    }
    LandmarkSet set;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (csv::trim(line).empty()) continue;
        const auto f = csv::split(line);
        const std::string ctx = path.string() + ":" + std::to_string(lineno);
        if (f.size() != 4) throw Error(ErrorCode::MissingColumn, ctx + ": expected 4 columns, got " + std::to_string(f.size()));
        set.add(f[0], {csv::parse_double(f[1], ctx), csv::parse_double(f[2], ctx), csv::parse_double(f[3], ctx)});
    }
    return set;
}

void save_landmarks_csv(const LandmarkSet& set, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::FileOpen, "cannot write " + path.string());
    out << "id,x_mm,y_mm,z_mm\n";
    char buf[128];
    for (const auto& e : set.entries()) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g", e.position[0], e.position[1], e.position[2]);
        out << e.id << ',' << buf << '\n';
    }
}

std::vector<SubjectEntry> load_pair_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::FileOpen, "cannot open " + path.string());
    const auto base = path.parent_path();
    auto resolve = [&](const std::string& p) {
        std::filesystem::path fp(p);
        return fp.is_absolute() ? fp : base / fp;
    };
    std::vector<SubjectEntry> out;
    std::set<std::string> seen;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (csv::trim(line).empty()) continue;
        const auto f = csv::split(line);
        if (lineno == 1 && !f.empty() && f[0] == "subject_id") continue;
        const std::string ctx = path.string() + ":" + std::to_string(lineno);
        if (f.size() != 5) throw Error(ErrorCode::MissingColumn, ctx + ": expected 5 columns");
        if (!seen.insert(f[0]).second) throw Error(ErrorCode::DuplicateId, ctx + ": duplicate subject '" + f[0] + "'");
        out.push_back({f[0], resolve(f[1]), resolve(f[2]), resolve(f[3]), resolve(f[4])});
    }
    if (out.empty()) throw Error(ErrorCode::EmptyInput, path.string() + ": manifest lists no subjects");
    return out;
}

void save_pair_manifest(const std::vector<SubjectEntry>& entries, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::FileOpen, "cannot write " + path.string());
    out << "subject_id,mri_volume,us_volume,mri_landmarks,us_landmarks\n";
    for (const auto& e : entries) {
        out << e.subject_id << ',' << e.mri_volume.string() << ',' << e.us_volume.string() << ','
            << e.mri_landmarks.string() << ',' << e.us_landmarks.string() << '\n';
    }
}

LandmarkPairSet load_pairs(const SubjectEntry& entry) {
    LandmarkPairSet p{entry.subject_id, load_landmarks_csv(entry.mri_landmarks), load_landmarks_csv(entry.us_landmarks)};
    p.validate();
    return p;
}

}  // namespace lmk
