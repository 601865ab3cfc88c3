#include <doctest.h>

#include "lmk/evaluation.hpp"
#include "support/oracles.hpp"
#include "support/reported_cases.hpp"
#include "support/tempdir.hpp"

using namespace lmk;

namespace {

LandmarkSet points(const std::vector<std::pair<std::string, Vec3>>& v) {
    LandmarkSet s;
    for (const auto& [id, p] : v) s.add(id, p);
    return s;
}

}  // namespace

TEST_CASE("mean registration error of three pairs") {
    LandmarkPairSet p;
    p.subject_id = "s";
    p.mri = points({{"a", {0, 0, 0}}, {"b", {1, 1, 1}}, {"c", {5, 5, 5}}});
    p.us = points({{"a", {3, 0, 0}}, {"b", {1, 5, 1}}, {"c", {5, 5, 10}}});
    CHECK(compute_mtre(p) == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("landmark error is per id, sorted, and rejects mismatched ids") {
    const auto gt = points({{"b", {0, 0, 0}}, {"a", {0, 0, 0}}});
    const auto pred = points({{"a", {0, 3, 4}}, {"b", {1, 0, 0}}});
    const auto e = landmark_error(gt, pred);
    REQUIRE(e.per_id.size() == 2);
    CHECK(e.per_id[0].first == "a");
    CHECK(e.per_id[0].second == 5.0);
    CHECK(e.mean == 3.0);
    CHECK_THROWS_AS(landmark_error(gt, points({{"a", {0, 0, 0}}})), Error);
    CHECK_THROWS_AS(landmark_error(LandmarkSet{}, LandmarkSet{}), Error);
}

TEST_CASE("severity classes and their boundaries") {
    CHECK(severity_class(2.0) == Severity::Small);
    CHECK(severity_class(4.5) == Severity::Medium);
    CHECK(severity_class(7.0) == Severity::Large);
    CHECK(severity_class(0.0) == Severity::Small);
    CHECK(severity_class(3.0) == Severity::Medium);
    CHECK(severity_class(6.0) == Severity::Medium);
    CHECK(severity_class(6.0000001) == Severity::Large);
    CHECK_THROWS_AS(severity_class(-1.0), Error);
    for (Severity s : {Severity::Small, Severity::Medium, Severity::Large}) CHECK(parse_severity(severity_name(s)) == s);
}

TEST_CASE("paired t-test against numerical and Monte-Carlo oracles") {
    const std::vector<double> a{1, 2, 3}, b{0, 0, 0};
    const auto r = paired_t_test(a, b);
    CHECK(r.df == 2);
    CHECK(r.t == doctest::Approx(2.0 * std::sqrt(3.0)).epsilon(1e-12));
    CHECK(r.t == doctest::Approx(3.4641).epsilon(1e-4));
    const double numeric = oracle::t_two_sided_p_numeric(r.t, 2);
    CHECK(std::abs(r.p - numeric) < 1e-3);
    CHECK(std::abs(r.p - 0.0742) < 1e-3);
    // Closed form for two degrees of freedom: p = 1 - |t| / sqrt(t^2 + 2).
    CHECK(r.p == doctest::Approx(1.0 - r.t / std::sqrt(r.t * r.t + 2.0)).epsilon(1e-10));
    const double mc = oracle::t_two_sided_p_monte_carlo(r.t, 2, 400000, 99);
    CHECK(std::abs(r.p - mc) < 3e-3);

    std::mt19937_64 g(5);
    std::normal_distribution<double> d(0.3, 1.0);
    for (int n : {5, 12, 30}) {
        std::vector<double> x(static_cast<std::size_t>(n)), y(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            x[static_cast<std::size_t>(i)] = d(g);
            y[static_cast<std::size_t>(i)] = d(g) - 0.5;
        }
        const auto rr = paired_t_test(x, y);
        CHECK(std::abs(rr.p - oracle::t_two_sided_p_numeric(rr.t, n - 1)) < 1e-6);
    }
}

TEST_CASE("t-test degenerate and invalid inputs") {
    const std::vector<double> a{1, 2, 3};
    const auto same = paired_t_test(a, a);
    CHECK(same.degenerate);
    CHECK(same.t == 0.0);
    CHECK(same.p == 1.0);
    const std::vector<double> shifted{2, 3, 4};
    const auto shift = paired_t_test(shifted, a);
    CHECK(shift.degenerate);
    CHECK(std::isinf(shift.t));
    CHECK(shift.p == 0.0);
    CHECK_THROWS_AS(paired_t_test(std::vector<double>{1}, std::vector<double>{2}), Error);
    CHECK_THROWS_AS(paired_t_test(a, std::vector<double>{1, 2}), Error);
}

TEST_CASE("student t CDF symmetry and known values") {
    CHECK(student_t_cdf(0.0, 7) == doctest::Approx(0.5));
    CHECK(student_t_cdf(1.3, 4) + student_t_cdf(-1.3, 4) == doctest::Approx(1.0));
    // df = 1 is the Cauchy distribution.
    CHECK(student_t_cdf(1.0, 1) == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(incomplete_beta(2.0, 3.0, 0.4) == doctest::Approx(0.5248).epsilon(1e-12));
}

TEST_CASE("reported per-case rows reproduce the pooled summaries") {
    const auto cl = pool_cases(reported::cases(true));
    const auto sift = pool_cases(reported::cases(false));
    CHECK(std::abs(cl.case_mean - reported::kClMean) <= 0.05);
    CHECK(std::abs(cl.case_std - reported::kClStd) <= 0.05);
    CHECK(std::abs(sift.case_mean - reported::kSiftMean) <= 0.05);
    CHECK(std::abs(sift.case_std - reported::kSiftStd) <= 0.05);
    CHECK(cl.n_cases == 22);
    // With equal landmark counts both conventions share the mean.
    CHECK(cl.landmark_mean == doctest::Approx(cl.case_mean));
}

TEST_CASE("landmark-weighted pooling equals pooling the raw errors") {
    const std::vector<double> e1{1, 2, 4}, e2{3, 3, 8, 10, 1};
    const std::vector<CaseReport> cases{make_case_report("a", Severity::Small, e1, "CL"),
                                        make_case_report("b", Severity::Large, e2, "CL")};
    const auto p = pool_cases(cases);
    std::vector<double> all(e1);
    all.insert(all.end(), e2.begin(), e2.end());
    CHECK(p.n_landmarks == 8);
    CHECK(p.landmark_mean == doctest::Approx(mean_of(all)).epsilon(1e-12));
    CHECK(p.landmark_std == doctest::Approx(sample_std(all)).epsilon(1e-12));
    CHECK(p.case_mean == doctest::Approx((7.0 / 3.0 + 5.0) / 2.0));
}

TEST_CASE("report table layout") {
    const std::vector<double> zero{0.0, 0.0}, some{1.0, 2.0, 3.0};
    const std::vector<CaseReport> cases{make_case_report("s2", Severity::Large, some, "CL"),
                                        make_case_report("s1", Severity::Small, zero, "CL"),
                                        make_case_report("s2", Severity::Large, some, "SIFT"),
                                        make_case_report("s1", Severity::Small, zero, "SIFT")};
    const auto table = format_report_table(cases);
    CHECK(table.find("0.00±0.00") != std::string::npos);
    CHECK(table.find("2.00±1.00") != std::string::npos);
    CHECK(table.find("s1 (Small)") < table.find("s2 (Large)"));
    CHECK(table.find("CL") < table.find("SIFT"));
    CHECK(table.find("All (per case)") != std::string::npos);

    const std::vector<CaseReport> dup{make_case_report("s1", Severity::Small, zero, "CL"),
                                      make_case_report("s1", Severity::Small, zero, "CL")};
    CHECK_THROWS_AS(format_report_table(dup), Error);
}

TEST_CASE("report CSV round trip keeps exact values") {
    test::TempDir dir;
    const std::vector<double> e{0.1, 0.7, 1.0 / 3.0};
    const std::vector<CaseReport> cases{make_case_report("s1", Severity::Medium, e, "CL"),
                                        make_case_report("s1", Severity::Medium, e, "SIFT")};
    save_report_csv(cases, dir / "r.csv");
    const auto back = load_report_csv(dir / "r.csv");
    REQUIRE(back.size() == 2);
    CHECK(back[0].mean_error_mm == cases[0].mean_error_mm);
    CHECK(back[0].std_error_mm == cases[0].std_error_mm);
    CHECK(back[1].method == "SIFT");
    CHECK(back[0].severity == Severity::Medium);
    CHECK(back[0].n_landmarks == 3);
}
