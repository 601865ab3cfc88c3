#include <doctest.h>

#include <random>

#include "lmk/evaluation.hpp"
#include "lmk/synthetic.hpp"
#include "support/tempdir.hpp"

using namespace lmk;

namespace {

SynthSpec small(double shift, std::uint64_t seed) {
    SynthSpec s;
    s.dims = {64, 64, 64};
    s.spacing_mm = 1.0;
    s.n_blobs = 20;
    s.n_tubes = 5;
    s.n_landmarks = 6;
    s.max_shift_mm = shift;
    s.seed = seed;
    return s;
}

}  // namespace

TEST_CASE("zero shift gives identical landmark pairs") {
    const auto s = generate_subject(small(0.0, 4));
    CHECK(s.pairs.mri.size() == 6);
    CHECK(compute_mtre(s.pairs) == 0.0);
}

TEST_CASE("planted deformation is bounded by the maximum shift") {
    const auto s = generate_subject(small(3.0, 5));
    CHECK(s.deformation.max_magnitude() == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(norm(evaluate_deformation(s.deformation, s.deformation.center)) == doctest::Approx(3.0).epsilon(1e-12));
    std::mt19937_64 g(1);
    std::uniform_real_distribution<double> u(-40.0, 100.0);
    double worst = 0.0;
    for (int i = 0; i < 10000; ++i)
        worst = std::max(worst, norm(evaluate_deformation(s.deformation, {u(g), u(g), u(g)})));
    CHECK(worst <= 3.0 + 1e-9);

    for (const auto& id : s.pairs.mri.sorted_ids()) {
        const Vec3 p = s.pairs.mri.at(id), q = s.pairs.us.at(id);
        const Vec3 d = evaluate_deformation(s.deformation, p);
        CHECK(distance(p + d, q) < 1e-9);
        CHECK(distance(p, q) <= 3.0 + 1e-9);
    }
    const double mtre = compute_mtre(s.pairs);
    CHECK(mtre > 0.0);
    CHECK(mtre <= 3.0);
}

TEST_CASE("landmarks lie inside the fan and the US is zero outside it") {
    const auto s = generate_subject(small(3.0, 6));
    for (const auto& id : s.pairs.us.sorted_ids()) {
        CHECK(s.fan.inside(s.pairs.us.at(id)));
        CHECK(s.fan.depth(s.pairs.us.at(id)) >= 0.0);
    }
    long outside_nonzero = 0, outside = 0;
    const auto& us = s.us;
    for (int z = 0; z < 64; ++z)
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) {
                const Vec3 w = us.voxel_to_world({double(x), double(y), double(z)});
                if (s.fan.inside(w)) continue;
                ++outside;
                if (us.at(x, y, z) != 0.0f) ++outside_nonzero;
            }
    CHECK(outside > 0);
    CHECK(outside_nonzero == 0);
    for (float f : s.mri.data()) {
        CHECK(f >= 0.0f);
        CHECK(f <= 1.0f);
    }
}

TEST_CASE("generation is deterministic in the seed") {
    const auto a = generate_subject(small(2.0, 9)), b = generate_subject(small(2.0, 9)), c = generate_subject(small(2.0, 10));
    CHECK(a.mri.data() == b.mri.data());
    CHECK(a.us.data() == b.us.data());
    CHECK(a.pairs.us == b.pairs.us);
    CHECK(a.mri.data() != c.mri.data());
}

TEST_CASE("spec validation") {
    SynthSpec s = small(1.0, 1);
    s.dims = {16, 64, 64};
    CHECK_THROWS_AS(generate_subject(s), Error);
    s = small(-1.0, 1);
    CHECK_THROWS_AS(generate_subject(s), Error);
}

TEST_CASE("dataset writer produces a loadable manifest") {
    test::TempDir dir;
    const auto manifest = write_synthetic_dataset(dir.path(), 2, small(1.0, 3));
    const auto entries = load_pair_manifest(manifest);
    REQUIRE(entries.size() == 2);
    CHECK(entries[0].subject_id == "synth_000");
    const auto pairs = load_pairs(entries[1]);
    CHECK(pairs.mri.size() == 6);
    const auto us = load_volume(entries[1].us_volume);
    CHECK(us.dims() == Index3{64, 64, 64});
}
