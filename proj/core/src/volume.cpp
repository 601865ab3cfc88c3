#include "lmk/volume.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "lmk/log.hpp"

namespace lmk {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

Axis parse_axis(const std::string& s) {
    if (s == "X" || s == "x") return Axis::X;
    if (s == "Y" || s == "y") return Axis::Y;
    if (s == "Z" || s == "z") return Axis::Z;
    throw Error(ErrorCode::InvalidArgument, "unknown axis '" + s + "' (expected X, Y or Z)");
}

const char* error_code_name(ErrorCode c) {
    switch (c) {
    case ErrorCode::InvalidArgument: return "invalid argument";
    case ErrorCode::FileOpen: return "file open";
    case ErrorCode::BadMagic: return "bad magic";
    case ErrorCode::UnsupportedDatatype: return "unsupported datatype";
    case ErrorCode::BadDimensions: return "bad dimensions";
    case ErrorCode::TruncatedPayload: return "truncated payload";
    case ErrorCode::Parse: return "parse error";
    case ErrorCode::DuplicateId: return "duplicate id";
    case ErrorCode::MissingColumn: return "missing column";
    case ErrorCode::IdMismatch: return "id mismatch";
    case ErrorCode::EmptyInput: return "empty input";
    case ErrorCode::ShapeMismatch: return "shape mismatch";
    case ErrorCode::ChecksumMismatch: return "checksum mismatch";
    case ErrorCode::BackwardBeforeForward: return "backward before forward";
    case ErrorCode::ZeroNorm: return "zero norm";
    case ErrorCode::VolumeTooSmall: return "volume too small";
    case ErrorCode::NoKeypoints: return "no keypoints";
    case ErrorCode::NoDescriptor: return "no descriptor";
    case ErrorCode::NoMatch: return "no match";
    case ErrorCode::PlacementFailed: return "placement failed";
    }
    return "unknown";
}

// ---------------------------------------------------------------------------
// Volume3D

Volume3D::Volume3D(Index3 dims, Vec3 spacing, Vec3 origin, std::vector<float> data)
    : dims_(dims), spacing_(spacing), origin_(origin), data_(std::move(data)) {
    validate();
}

Volume3D::Volume3D(Index3 dims, Vec3 spacing, Vec3 origin)
    : dims_(dims), spacing_(spacing), origin_(origin) {
    for (int d : dims_) {
        if (d <= 0) throw Error(ErrorCode::BadDimensions, "volume dimensions must be positive");
    }
    data_.assign(static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2], 0.0f);
    validate();
}

void Volume3D::validate() const {
    for (int d : dims_) {
        if (d <= 0) throw Error(ErrorCode::BadDimensions, "volume dimensions must be positive");
    }
    const auto n = static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
    if (data_.size() != n) {
        throw Error(ErrorCode::ShapeMismatch, "volume data length " + std::to_string(data_.size()) +
                                                  " != dims product " + std::to_string(n));
    }
    for (double s : spacing_) {
        if (!(s > 0.0) || !std::isfinite(s)) throw Error(ErrorCode::InvalidArgument, "volume spacing must be positive");
    }
    for (double o : origin_) {
        if (!std::isfinite(o)) throw Error(ErrorCode::InvalidArgument, "volume origin must be finite");
    }
    for (float f : data_) {
        if (!std::isfinite(f)) throw Error(ErrorCode::InvalidArgument, "volume contains non-finite samples");
    }
}

Vec3 Volume3D::world_to_voxel(const Vec3& p) const {
    return {(p[0] - origin_[0]) / spacing_[0], (p[1] - origin_[1]) / spacing_[1], (p[2] - origin_[2]) / spacing_[2]};
}

Vec3 Volume3D::voxel_to_world(const Vec3& v) const {
    return {origin_[0] + v[0] * spacing_[0], origin_[1] + v[1] * spacing_[1], origin_[2] + v[2] * spacing_[2]};
}

Index3 Volume3D::nearest_voxel(const Vec3& p) const {
    const Vec3 v = world_to_voxel(p);
    return {static_cast<int>(std::floor(v[0] + 0.5)), static_cast<int>(std::floor(v[1] + 0.5)),
            static_cast<int>(std::floor(v[2] + 0.5))};
}

double Volume3D::sample_linear(const Vec3& v) const {
    const int x0 = static_cast<int>(std::floor(v[0]));
    const int y0 = static_cast<int>(std::floor(v[1]));
    const int z0 = static_cast<int>(std::floor(v[2]));
    const double fx = v[0] - x0, fy = v[1] - y0, fz = v[2] - z0;
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz) {
        const double wz = dz ? fz : 1.0 - fz;
        for (int dy = 0; dy < 2; ++dy) {
            const double wy = dy ? fy : 1.0 - fy;
            for (int dx = 0; dx < 2; ++dx) {
                const double wx = dx ? fx : 1.0 - fx;
                acc += wx * wy * wz * at_or_zero(x0 + dx, y0 + dy, z0 + dz);
            }
        }
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Intensity normalization

double percentile_sorted(const std::vector<float>& sorted, double q) {
    if (sorted.empty()) throw Error(ErrorCode::EmptyInput, "percentile of empty set");
    const double pos = q / 100.0 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return static_cast<double>(sorted[lo]) + frac * (static_cast<double>(sorted[hi]) - static_cast<double>(sorted[lo]));
}

Volume3D normalize_intensity(const Volume3D& v) {
    std::vector<float> nonzero;
    nonzero.reserve(v.size());
    for (float f : v.data()) {
        if (f != 0.0f) nonzero.push_back(f);
    }
    if (nonzero.empty()) throw Error(ErrorCode::EmptyInput, "cannot normalize an all-zero volume");
    std::sort(nonzero.begin(), nonzero.end());
    const double lo = percentile_sorted(nonzero, 0.5);
    const double hi = percentile_sorted(nonzero, 99.5);
    const double range = hi - lo;

    std::vector<float> out(v.size());
    const auto& in = v.data();
    for (std::size_t i = 0; i < in.size(); ++i) {
        if (in[i] == 0.0f) {
            out[i] = 0.0f;
        } else if (!(range > 0.0)) {
            out[i] = 1.0f;
        } else {
            const double c = std::clamp(static_cast<double>(in[i]), lo, hi);
            out[i] = static_cast<float>(std::clamp((c - lo) / range, 0.0, 1.0));
        }
    }
    return Volume3D(v.dims(), v.spacing(), v.origin(), std::move(out));
}

// ---------------------------------------------------------------------------
// NIfTI-1

namespace {

constexpr std::size_t kNiftiHeaderSize = 348;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;

template <typename T>
T read_le(const char* base, std::size_t offset) {
    T v;
    std::memcpy(&v, base + offset, sizeof(T));
    return v;
}

template <typename T>
void write_le(char* base, std::size_t offset, T v) {
    std::memcpy(base + offset, &v, sizeof(T));
}

std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::FileOpen, "cannot open " + path.string());
    return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

bool off_diagonal(const double m[3][3]) {
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) {
            if (r != c && std::abs(m[r][c]) > 1e-6 * (std::abs(m[r][r]) + std::abs(m[c][c]) + 1e-12)) return true;
        }
    }
    return false;
}

}  // namespace

Volume3D load_nifti(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    if (bytes.size() < kNiftiHeaderSize) {
        throw Error(ErrorCode::TruncatedPayload, path.string() + ": file shorter than a NIfTI-1 header");
    }
    const char* h = bytes.data();
    const auto sizeof_hdr = read_le<std::int32_t>(h, 0);
    if (sizeof_hdr != 348) {
        throw Error(ErrorCode::BadMagic, path.string() + ": sizeof_hdr is not 348 (big-endian or not NIfTI-1)");
    }
    if (std::memcmp(h + 344, "n+1\0", 4) != 0) {
        throw Error(ErrorCode::BadMagic, path.string() + ": magic is not \"n+1\" (single-file NIfTI-1 required)");
    }

    const auto ndim = read_le<std::int16_t>(h, 40);
    if (ndim != 3) {
        throw Error(ErrorCode::BadDimensions, path.string() + ": expected 3 dimensions, header has " + std::to_string(ndim));
    }
    Index3 dims{read_le<std::int16_t>(h, 42), read_le<std::int16_t>(h, 44), read_le<std::int16_t>(h, 46)};
    for (int d : dims) {
        if (d <= 0) throw Error(ErrorCode::BadDimensions, path.string() + ": non-positive dimension");
    }

    const auto datatype = read_le<std::int16_t>(h, 70);
    std::size_t elem = 0;
    if (datatype == kDtInt16) {
        elem = 2;
    } else if (datatype == kDtFloat32) {
        elem = 4;
    } else {
        throw Error(ErrorCode::UnsupportedDatatype,
                    path.string() + ": datatype " + std::to_string(datatype) + " (only int16=4 and float32=16)");
    }

    Vec3 spacing{read_le<float>(h, 80), read_le<float>(h, 84), read_le<float>(h, 88)};
    for (auto& s : spacing) s = std::abs(s);

    const double vox_offset = read_le<float>(h, 108);
    const double slope = read_le<float>(h, 112);
    const double inter = read_le<float>(h, 116);

    Vec3 origin{0.0, 0.0, 0.0};
    const auto qform_code = read_le<std::int16_t>(h, 252);
    const auto sform_code = read_le<std::int16_t>(h, 254);
    bool oblique = false;
    if (sform_code > 0) {
        double m[3][3];
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) m[r][c] = read_le<float>(h, 280 + 16 * r + 4 * c);
            origin[r] = read_le<float>(h, 280 + 16 * r + 12);
        }
        oblique = off_diagonal(m);
    } else if (qform_code > 0) {
        const double b = read_le<float>(h, 256), c = read_le<float>(h, 260), d = read_le<float>(h, 264);
        const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
        const double m[3][3] = {{a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
                                {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
                                {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b}};
        oblique = off_diagonal(m);
        origin = {read_le<float>(h, 268), read_le<float>(h, 272), read_le<float>(h, 276)};
    }
    if (oblique) {
        log::warn(path.string() + ": header carries a non-axis-aligned transform; rotation is ignored");
    }

    const std::size_t n = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    const auto offset = static_cast<std::size_t>(std::max(vox_offset, 348.0));
    if (bytes.size() < offset + n * elem) {
        throw Error(ErrorCode::TruncatedPayload, path.string() + ": payload holds " +
                                                     std::to_string(bytes.size() > offset ? bytes.size() - offset : 0) +
                                                     " bytes, need " + std::to_string(n * elem));
    }

    const bool scaled = std::isfinite(slope) && slope != 0.0;
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        double raw = datatype == kDtInt16 ? static_cast<double>(read_le<std::int16_t>(h, offset + 2 * i))
                                          : static_cast<double>(read_le<float>(h, offset + 4 * i));
        if (scaled) raw = slope * raw + inter;
        data[i] = static_cast<float>(raw);
    }
    return Volume3D(dims, spacing, origin, std::move(data));
}

void save_nifti(const Volume3D& v, const std::filesystem::path& path) {
    for (int d : v.dims()) {
        if (d > 32767) throw Error(ErrorCode::BadDimensions, "dimension exceeds NIfTI-1 int16 range");
    }
    std::vector<char> header(352, 0);
    char* h = header.data();
    write_le<std::int32_t>(h, 0, 348);
    write_le<std::int16_t>(h, 40, 3);
    for (int i = 0; i < 3; ++i) write_le<std::int16_t>(h, 42 + 2 * i, static_cast<std::int16_t>(v.dims()[i]));
    for (int i = 3; i < 7; ++i) write_le<std::int16_t>(h, 42 + 2 * i, 1);
    write_le<std::int16_t>(h, 70, kDtFloat32);
    write_le<std::int16_t>(h, 72, 32);
    write_le<float>(h, 76, 1.0f);
    for (int i = 0; i < 3; ++i) write_le<float>(h, 80 + 4 * i, static_cast<float>(v.spacing()[i]));
    write_le<float>(h, 108, 352.0f);
    write_le<std::int8_t>(h, 123, 2);  // mm
    write_le<std::int16_t>(h, 254, 1);
    for (int r = 0; r < 3; ++r) {
        write_le<float>(h, 280 + 16 * r + 4 * r, static_cast<float>(v.spacing()[r]));
        write_le<float>(h, 280 + 16 * r + 12, static_cast<float>(v.origin()[r]));
    }
    std::memcpy(h + 344, "n+1\0", 4);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::FileOpen, "cannot write " + path.string());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(v.data().data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
}

// ---------------------------------------------------------------------------
// Raw manifest format

Volume3D load_raw_volume(const std::filesystem::path& manifest) {
    std::ifstream in(manifest);
    if (!in) throw Error(ErrorCode::FileOpen, "cannot open " + manifest.string());
    Index3 dims{0, 0, 0};
    Vec3 spacing{0, 0, 0}, origin{0, 0, 0};
    std::string data_file, dtype, line;
    bool have_dims = false, have_spacing = false;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "dims") {
            ls >> dims[0] >> dims[1] >> dims[2];
            have_dims = static_cast<bool>(ls);
        } else if (key == "spacing") {
            ls >> spacing[0] >> spacing[1] >> spacing[2];
            have_spacing = static_cast<bool>(ls);
        } else if (key == "origin") {
            ls >> origin[0] >> origin[1] >> origin[2];
        } else if (key == "dtype") {
            ls >> dtype;
        } else if (key == "data") {
            ls >> data_file;
        } else {
            throw Error(ErrorCode::Parse, manifest.string() + ": unknown key '" + key + "'");
        }
    }
    if (!have_dims || !have_spacing || data_file.empty()) {
        throw Error(ErrorCode::Parse, manifest.string() + ": manifest needs dims, spacing and data");
    }
    if (dtype != "float32-le") throw Error(ErrorCode::UnsupportedDatatype, manifest.string() + ": dtype " + dtype);
    for (int d : dims) {
        if (d <= 0) throw Error(ErrorCode::BadDimensions, manifest.string() + ": non-positive dimension");
    }
    const auto bytes = read_file(manifest.parent_path() / data_file);
    const std::size_t n = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    if (bytes.size() < n * sizeof(float)) {
        throw Error(ErrorCode::TruncatedPayload, manifest.string() + ": raw payload too short");
    }
    std::vector<float> data(n);
    std::memcpy(data.data(), bytes.data(), n * sizeof(float));
    return Volume3D(dims, spacing, origin, std::move(data));
}

void save_raw_volume(const Volume3D& v, const std::filesystem::path& manifest) {
    auto raw = manifest;
    raw.replace_extension(".raw");
    {
        std::ofstream out(manifest);
        if (!out) throw Error(ErrorCode::FileOpen, "cannot write " + manifest.string());
        char buf[256];
        out << "# lmk raw volume\n";
        out << "dims " << v.dims()[0] << ' ' << v.dims()[1] << ' ' << v.dims()[2] << '\n';
        std::snprintf(buf, sizeof buf, "spacing %.17g %.17g %.17g\n", v.spacing()[0], v.spacing()[1], v.spacing()[2]);
        out << buf;
        std::snprintf(buf, sizeof buf, "origin %.17g %.17g %.17g\n", v.origin()[0], v.origin()[1], v.origin()[2]);
        out << buf;
        out << "dtype float32-le\n";
        out << "data " << raw.filename().string() << '\n';
    }
    std::ofstream out(raw, std::ios::binary);
    if (!out) throw Error(ErrorCode::FileOpen, "cannot write " + raw.string());
    out.write(reinterpret_cast<const char*>(v.data().data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
}

Volume3D load_volume(const std::filesystem::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".nii") return load_nifti(path);
    if (ext == ".vol") return load_raw_volume(path);
    if (ext == ".gz") throw Error(ErrorCode::UnsupportedDatatype, path.string() + ": compressed NIfTI is not supported");
    throw Error(ErrorCode::InvalidArgument, path.string() + ": unknown volume extension (expected .nii or .vol)");
}

}  // namespace lmk
