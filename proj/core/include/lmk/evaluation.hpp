#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lmk/landmarks.hpp"

namespace lmk {

struct LandmarkErrors {
    std::vector<std::pair<std::string, double>> per_id;  // sorted by id
    double mean = 0.0;
};

/// Euclidean distance per landmark id and their mean. Throws IdMismatch
/// unless both sets hold the same ids, EmptyInput if they are empty.
LandmarkErrors landmark_error(const LandmarkSet& gt, const LandmarkSet& pred);

enum class Severity { Small, Medium, Large };

/// < 3 mm Small, [3, 6] Medium, > 6 Large.
Severity severity_class(double mtre_mm);
const char* severity_name(Severity s);
Severity parse_severity(const std::string& s);

/// Mean distance between paired MRI and US landmarks.
double compute_mtre(const LandmarkPairSet& pairs);

double mean_of(std::span<const double> v);
/// Sample standard deviation (n - 1); zero for fewer than two values.
double sample_std(std::span<const double> v);

/// Regularized incomplete beta I_x(a, b) by continued fraction.
double incomplete_beta(double a, double b, double x);
/// CDF of Student's t distribution with df degrees of freedom.
double student_t_cdf(double t, double df);

struct TTestResult {
    double t = 0.0;
    double p = 1.0;  // two-sided
    int df = 0;
    bool degenerate = false;  // zero variance of the differences
};

/// Two-sided paired-samples t-test on a - b. Throws InvalidArgument for
/// unequal lengths or fewer than two pairs.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

struct CaseReport {
    std::string subject_id;
    Severity severity = Severity::Small;
    double mean_error_mm = 0.0;
    double std_error_mm = 0.0;  // sample std over landmarks
    int n_landmarks = 0;
    std::string method;
};

CaseReport make_case_report(std::string subject_id, Severity severity, std::span<const double> errors,
                            std::string method);

struct PooledStats {
    std::string method;
    int n_cases = 0;
    int n_landmarks = 0;
    double case_mean = 0.0;  // mean of per-case means
    double case_std = 0.0;   // sample std of per-case means
    double landmark_mean = 0.0;
    double landmark_std = 0.0;  // sample std over all landmarks, from per-case moments
};

/// Pooled statistics of one method's cases.
PooledStats pool_cases(std::span<const CaseReport> cases);

/// Methods in order of first appearance.
std::vector<std::string> report_methods(std::span<const CaseReport> cases);

/// Text table: one row per subject (sorted by id) with `mean±std` per method,
/// followed by pooled rows for both conventions. Throws InvalidArgument if
/// the methods do not cover the same subjects.
std::string format_report_table(std::span<const CaseReport> cases);

/// `subject,severity,n,mean_mm,std_mm,method`
void save_report_csv(std::span<const CaseReport> cases, const std::filesystem::path& path);
std::vector<CaseReport> load_report_csv(const std::filesystem::path& path);

}  // namespace lmk
