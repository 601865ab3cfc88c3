#include <doctest.h>

#include "lmk/patch.hpp"
#include "lmk/random.hpp"
#include "support/oracles.hpp"

using namespace lmk;

namespace {

// Direct indexing oracle: value of the ramp at the voxel a patch pixel maps to,
// or 0 when that voxel is outside the grid.
float ramp_pixel(const Volume3D& v, Index3 c, Axis axis, int s, int r, int col) {
    Index3 idx = c;
    const int stack = static_cast<int>(axis);
    const int row_axis = stack == 0 ? 1 : 0;
    const int col_axis = stack == 2 ? 1 : 2;
    idx[stack] += s - 1;
    idx[row_axis] += r - 21;
    idx[col_axis] += col - 21;
    if (!v.contains(idx[0], idx[1], idx[2])) return 0.0f;
    return static_cast<float>(1.0 * idx[0] + 100.0 * idx[1] + 10000.0 * idx[2] + 1.0);
}

}  // namespace

TEST_CASE("extraction matches direct indexing on a ramp, including zero padding") {
    const auto v = oracle::ramp_volume({50, 47, 45}, {0.5, 0.5, 0.5}, {3.0, -2.0, 1.0}, 1.0, 100.0, 10000.0, 1.0);
    const std::vector<Index3> centers{{25, 23, 22}, {0, 0, 0}, {49, 46, 44}, {3, 40, 1}, {30, 5, 43}};
    for (const Index3& c : centers) {
        const Vec3 w = v.voxel_to_world({static_cast<double>(c[0]), static_cast<double>(c[1]), static_cast<double>(c[2])});
        for (Axis a : kAllAxes) {
            const auto p = extract_series(v, w, a);
            CHECK(p.axis == a);
            int mismatches = 0;
            for (int s = 0; s < kPatchSlices; ++s)
                for (int r = 0; r < kPatchSide; ++r)
                    for (int col = 0; col < kPatchSide; ++col)
                        if (p.at(s, r, col) != ramp_pixel(v, c, a, s, r, col)) ++mismatches;
            CHECK(mismatches == 0);
        }
    }
}

TEST_CASE("extraction snaps to the nearest voxel") {
    const auto v = oracle::ramp_volume({50, 50, 50}, {1, 1, 1}, {0, 0, 0}, 1.0, 100.0, 10000.0, 1.0);
    const auto a = extract_series(v, {20.4, 20.0, 20.0}, Axis::Z);
    const auto b = extract_series(v, {20.0, 19.6, 20.2}, Axis::Z);
    CHECK(a.pixels == b.pixels);
    CHECK(a.at(1, 21, 21) == v.at(20, 20, 20));
}

TEST_CASE("2.5D patch holds one series per axis") {
    const auto v = oracle::ramp_volume({50, 50, 50}, {1, 1, 1}, {0, 0, 0}, 1.0, 100.0, 10000.0, 1.0);
    const auto p = extract_25d(v, {25, 25, 25});
    for (Axis a : kAllAxes) {
        CHECK(p[a].axis == a);
        CHECK(p[a].pixels == extract_series(v, {25, 25, 25}, a).pixels);
    }
}

TEST_CASE("mid-slice support counts nonzero voxels") {
    Volume3D v({64, 64, 64}, {1, 1, 1});
    CHECK(mid_slice_support(v, {32, 32, 32}) == 0.0);
    for (auto& f : v.data()) f = 1.0f;
    CHECK(mid_slice_support(v, {32, 32, 32}) == 1.0);
    // At a corner only the quadrant [0, 20] x [0, 20] of each mid slice is inside.
    CHECK(mid_slice_support(v, {0, 0, 0}) == doctest::Approx(21.0 * 21.0 / (42.0 * 42.0)));
}

TEST_CASE("augmentation identity, flips and rotation bounds") {
    PatchSeries p;
    Rng rng(3);
    for (auto& f : p.pixels) f = static_cast<float>(rng.uniform());

    CHECK(apply_augment({}, p).pixels == p.pixels);

    AugmentParams h;
    h.hflip = true;
    const auto hf = apply_augment(h, p);
    AugmentParams vv;
    vv.vflip = true;
    const auto vf = apply_augment(vv, p);
    for (int s = 0; s < 3; ++s)
        for (int r = 0; r < kPatchSide; ++r)
            for (int c = 0; c < kPatchSide; ++c) {
                CHECK(hf.at(s, r, c) == p.at(s, r, kPatchSide - 1 - c));
                CHECK(vf.at(s, r, c) == p.at(s, kPatchSide - 1 - r, c));
            }
    CHECK(apply_augment(h, hf).pixels == p.pixels);

    for (int i = 0; i < 200; ++i) {
        const auto a = draw_augment(rng);
        CHECK(std::abs(a.angle_deg) <= kMaxRotationDeg);
    }
}

TEST_CASE("rotation keeps the center pixel and turns a ramp") {
    PatchSeries p;
    for (int s = 0; s < 3; ++s)
        for (int r = 0; r < kPatchSide; ++r)
            for (int c = 0; c < kPatchSide; ++c) p.at(s, r, c) = static_cast<float>(c);
    AugmentParams a;
    a.angle_deg = 10.0;
    const auto q = apply_augment(a, p);
    CHECK(q.at(1, 21, 21) == doctest::Approx(21.0));
    // Away from the zero-filled rim the output is still an affine ramp whose
    // gradient has unit norm.
    const double gx = q.at(1, 21, 22) - q.at(1, 21, 21);
    const double gy = q.at(1, 22, 21) - q.at(1, 21, 21);
    CHECK(std::hypot(gx, gy) == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(std::abs(gy) == doctest::Approx(std::sin(10.0 * M_PI / 180.0)).epsilon(1e-4));
}

TEST_CASE("paired augmentation applies the same transform to both members") {
    PatchSeries a, b;
    Rng rng(5);
    for (auto& f : a.pixels) f = static_cast<float>(rng.uniform());
    b.pixels = a.pixels;
    const auto [x, y] = augment_pair(a, b, 77);
    CHECK(x.pixels == y.pixels);
    const auto [x2, y2] = augment_pair(a, b, 77);
    CHECK(x2.pixels == x.pixels);
}

TEST_CASE("negative centers lie in the offset shell") {
    Rng rng(11);
    const Vec3 c{5.0, -3.0, 12.0};
    for (int i = 0; i < 5000; ++i) {
        const Vec3 n = sample_negative_center(c, rng);
        const Vec3 d = n - c;
        CHECK(norm(d) >= kNegativeMinRadiusMm);
        for (double x : d) CHECK(std::abs(x) <= kNegativeMaxOffsetMm);
    }
    CHECK(sample_negative_center(c, 9) == sample_negative_center(c, 9));
}
