#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace lmk {

using Vec3 = std::array<double, 3>;
using Index3 = std::array<int, 3>;

/// Canonical stacking direction of a patch series.
enum class Axis : int { X = 0, Y = 1, Z = 2 };

inline constexpr std::array<Axis, 3> kAllAxes{Axis::X, Axis::Y, Axis::Z};

inline const char* axis_name(Axis a) {
    switch (a) {
    case Axis::X: return "X";
    case Axis::Y: return "Y";
    case Axis::Z: return "Z";
    }
    return "?";
}

Axis parse_axis(const std::string& s);

/// Failure categories. The CLI maps these onto exit codes.
enum class ErrorCode {
    InvalidArgument,
    FileOpen,
    BadMagic,
    UnsupportedDatatype,
    BadDimensions,
    TruncatedPayload,
    Parse,
    DuplicateId,
    MissingColumn,
    IdMismatch,
    EmptyInput,
    ShapeMismatch,
    ChecksumMismatch,
    BackwardBeforeForward,
    ZeroNorm,
    VolumeTooSmall,
    NoKeypoints,
    NoDescriptor,
    NoMatch,
    PlacementFailed,
};

const char* error_code_name(ErrorCode c);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}
    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline double distance(const Vec3& a, const Vec3& b) { return norm(a - b); }

}  // namespace lmk
