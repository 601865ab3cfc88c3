#include <doctest.h>

#include <set>

#include "lmk/encoder.hpp"
#include "lmk/matcher.hpp"
#include "lmk/parallel.hpp"
#include "support/oracles.hpp"
#include "support/tempdir.hpp"

using namespace lmk;

namespace {

class ConstantScorer final : public CandidateScorer {
public:
    void score(std::span<const Vec3> c, std::span<std::array<double, 3>> out) const override {
        for (std::size_t i = 0; i < c.size(); ++i) out[i] = {0.1, 0.1, 0.1};
    }
};

const SupportFn kFullSupport = [](const Vec3&) { return 1.0; };

}  // namespace

TEST_CASE("search grid has 21^3 points in x-outermost order") {
    const auto offsets = candidate_offsets(5.0, 0.5);
    CHECK(offsets.size() == 9261);
    CHECK(offsets.front() == Index3{-10, -10, -10});
    CHECK(offsets[1] == Index3{-10, -10, -9});
    CHECK(offsets.back() == Index3{10, 10, 10});
    const Vec3 c{1.0, 2.0, 3.0};
    const auto grid = candidate_grid(c, SearchConfig{});
    CHECK(grid.size() == 9261);
    std::set<std::array<long, 3>> unique;
    for (const auto& p : grid) {
        for (int a = 0; a < 3; ++a) CHECK(std::abs(p[a] - c[a]) <= 5.0 + 1e-12);
        unique.insert({std::lround(p[0] * 2), std::lround(p[1] * 2), std::lround(p[2] * 2)});
    }
    CHECK(unique.size() == 9261);
    CHECK(candidate_offsets(1.0, 0.5).size() == 125);
}

TEST_CASE("planted-distance scorer optimum is recovered exactly") {
    const Vec3 center{10.0, -4.0, 7.5};
    for (const Index3 o : {Index3{3, -7, 10}, Index3{0, 0, 0}, Index3{-10, 10, -1}}) {
        const Vec3 planted{center[0] + 0.5 * o[0], center[1] + 0.5 * o[1], center[2] + 0.5 * o[2]};
        const auto r = search_landmark(center, oracle::PlantedScorer(planted), kFullSupport, SearchConfig{});
        CHECK(r.predicted_us_world == planted);
        CHECK(r.score_total == 0.0);
        CHECK(r.candidates_evaluated == 9261);
        CHECK_FALSE(r.extended);
    }
}

TEST_CASE("ties resolve to the smallest displacement") {
    const Vec3 center{1.0, 1.0, 1.0};
    const auto r = search_landmark(center, ConstantScorer(), kFullSupport, SearchConfig{});
    CHECK(r.predicted_us_world == center);
}

TEST_CASE("unsupported boxes extend once and then fail") {
    const Vec3 center{0.0, 0.0, 0.0};
    // Only points farther than 6 mm along x carry signal.
    const SupportFn far = [](const Vec3& p) { return std::abs(p[0]) > 6.0 ? 1.0 : 0.0; };
    const auto r = search_landmark(center, oracle::PlantedScorer({8.0, 0.0, 0.0}), far, SearchConfig{});
    CHECK(r.extended);
    CHECK(r.range_mm == 10.0);
    CHECK(r.predicted_us_world == Vec3{8.0, 0.0, 0.0});

    const SupportFn none = [](const Vec3&) { return 0.0; };
    try {
        search_landmark(center, ConstantScorer(), none, SearchConfig{});
        FAIL("expected NoMatch");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::NoMatch);
        CHECK(std::string(e.what()).find("range 10") != std::string::npos);
    }
}

TEST_CASE("similarity floor triggers extension") {
    SearchConfig cfg;
    cfg.similarity_floor = -1.0;
    // Best score inside the 5 mm box is -1.75 * 2 = -3.5, below the floor;
    // the 10 mm box reaches the planted point.
    const Vec3 planted{7.0, 0.0, 0.0};
    const auto r = search_landmark({0, 0, 0}, oracle::PlantedScorer(planted), kFullSupport, cfg);
    CHECK(r.extended);
    CHECK(r.predicted_us_world == planted);
    cfg.max_extensions = 0;
    CHECK_THROWS_AS(search_landmark({0, 0, 0}, oracle::PlantedScorer(planted), kFullSupport, cfg), Error);
}

TEST_CASE("search config validation") {
    SearchConfig cfg;
    cfg.step_mm = 0.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = SearchConfig{};
    cfg.step_mm = 6.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("match_all records failures without aborting") {
    LandmarkSet s;
    s.add("B", {0, 0, 0});
    s.add("A", {1, 0, 0});
    const auto report = match_all(s, [](const Landmark& l) {
        if (l.id == "B") throw Error(ErrorCode::NoMatch, "nothing");
        MatchResult r;
        r.landmark_id = l.id;
        r.predicted_us_world = l.position;
        return r;
    });
    REQUIRE(report.results.size() == 1);
    CHECK(report.results[0].landmark_id == "A");
    REQUIRE(report.failures.size() == 1);
    CHECK(report.failures[0].landmark_id == "B");
}

TEST_CASE("match CSV round trip") {
    test::TempDir dir;
    std::vector<MatchResult> rs(2);
    rs[0].landmark_id = "L01";
    rs[0].predicted_us_world = {0.1, 1.0 / 3.0, -2.5};
    rs[0].score_total = 2.718281828459045;
    rs[1].landmark_id = "L02";
    rs[1].extended = true;
    save_matches_csv(rs, dir / "m.csv");
    const auto back = load_matches_csv(dir / "m.csv");
    REQUIRE(back.size() == 2);
    CHECK(back[0].predicted_us_world == rs[0].predicted_us_world);
    CHECK(back[0].score_total == rs[0].score_total);
    CHECK(back[1].extended);
    const auto set = predictions_as_landmarks(back);
    CHECK(set.at("L01") == rs[0].predicted_us_world);
}

TEST_CASE("encoder matching is independent of the thread count") {
    Volume3D mri({48, 48, 48}, {1, 1, 1}), us({48, 48, 48}, {1, 1, 1});
    std::mt19937_64 g(3);
    std::uniform_real_distribution<float> u(0.05f, 1.0f);
    for (auto& f : mri.data()) f = u(g);
    for (auto& f : us.data()) f = u(g);
    const auto p_mri = init_encoder<float>(1), p_us = init_encoder<float>(2);
    SearchConfig cfg;
    cfg.range_mm = 1.0;
    const Landmark l{"L01", {24.0, 24.0, 24.0}};

    set_thread_count(1);
    const auto one = match_landmark(mri, us, l, p_mri, p_us, cfg);
    set_thread_count(4);
    const auto four = match_landmark(mri, us, l, p_mri, p_us, cfg);
    set_thread_count(1);
    CHECK(one.predicted_us_world == four.predicted_us_world);
    CHECK(one.score_total == four.score_total);
    CHECK(one.candidates_evaluated == 125);

    // The reported score is the summed per-axis cosine similarity at the
    // prediction (float32 features, so batch composition moves the last bits).
    const auto direct = score_candidate(reference_features(mri, l.position, p_mri), us, one.predicted_us_world, p_us);
    CHECK(direct.total == doctest::Approx(one.score_total).epsilon(1e-5));
}
