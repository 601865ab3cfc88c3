#include "lmk/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "csv.hpp"

namespace lmk {

LandmarkErrors landmark_error(const LandmarkSet& gt, const LandmarkSet& pred) {
    const auto ids = gt.sorted_ids();
    if (ids != pred.sorted_ids()) throw Error(ErrorCode::IdMismatch, "ground truth and prediction ids differ");
    if (ids.empty()) throw Error(ErrorCode::EmptyInput, "no landmarks to evaluate");
    LandmarkErrors out;
    double sum = 0.0;
    for (const auto& id : ids) {
        const double e = distance(gt.at(id), pred.at(id));
        out.per_id.emplace_back(id, e);
        sum += e;
    }
    out.mean = sum / static_cast<double>(ids.size());
    return out;
}

Severity severity_class(double mtre_mm) {
    if (!(mtre_mm >= 0.0)) throw Error(ErrorCode::InvalidArgument, "mTRE must be non-negative");
    if (mtre_mm < 3.0) return Severity::Small;
    if (mtre_mm <= 6.0) return Severity::Medium;
    return Severity::Large;
}

const char* severity_name(Severity s) {
    switch (s) {
        case Severity::Small: return "Small";
        case Severity::Medium: return "Medium";
        case Severity::Large: return "Large";
    }
    return "?";
}

Severity parse_severity(const std::string& s) {
    if (s == "Small") return Severity::Small;
    if (s == "Medium") return Severity::Medium;
    if (s == "Large") return Severity::Large;
    throw Error(ErrorCode::Parse, "unknown severity '" + s + "'");
}

double compute_mtre(const LandmarkPairSet& pairs) {
    pairs.validate();
    return landmark_error(pairs.mri, pairs.us).mean;
}

double mean_of(std::span<const double> v) {
    if (v.empty()) throw Error(ErrorCode::EmptyInput, "mean of an empty list");
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double sample_std(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

namespace {

// Modified Lentz evaluation of the incomplete beta continued fraction.
double beta_continued_fraction(double a, double b, double x) {
    constexpr double tiny = 1e-300;
    constexpr double eps = 1e-15;
    double c = 1.0;
    double d = 1.0 - (a + b) * x / (a + 1.0);
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 10000; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::abs(delta - 1.0) < eps) break;
    }
    return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0) || !(x >= 0.0) || !(x <= 1.0)) {
        throw Error(ErrorCode::InvalidArgument, "incomplete_beta: need a, b > 0 and x in [0, 1]");
    }
    if (x == 0.0 || x == 1.0) return x;
    const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    if (x < (a + 1.0) / (a + b + 2.0)) return std::exp(log_front) * beta_continued_fraction(a, b, x) / a;
    return 1.0 - std::exp(log_front) * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double df) {
    if (!(df > 0.0)) throw Error(ErrorCode::InvalidArgument, "student_t_cdf: df must be positive");
    if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
    const double tail = 0.5 * incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
    return t >= 0.0 ? 1.0 - tail : tail;
}

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw Error(ErrorCode::InvalidArgument, "paired t-test needs equal-length samples");
    if (a.size() < 2) throw Error(ErrorCode::InvalidArgument, "paired t-test needs at least two pairs");
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a[i] - b[i];
    TTestResult r;
    r.df = static_cast<int>(d.size()) - 1;
    const double m = mean_of(d);
    const double sd = sample_std(d);
    if (sd == 0.0) {
        r.degenerate = true;
        if (m == 0.0) {
            r.t = 0.0;
            r.p = 1.0;
        } else {
            r.t = m > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
            r.p = 0.0;
        }
        return r;
    }
    r.t = m / (sd / std::sqrt(static_cast<double>(d.size())));
    const double df = r.df;
    r.p = incomplete_beta(0.5 * df, 0.5, df / (df + r.t * r.t));
    return r;
}

CaseReport make_case_report(std::string subject_id, Severity severity, std::span<const double> errors,
                            std::string method) {
    if (errors.empty()) throw Error(ErrorCode::EmptyInput, "case '" + subject_id + "' has no landmark errors");
    CaseReport r;
    r.subject_id = std::move(subject_id);
    r.severity = severity;
    r.mean_error_mm = mean_of(errors);
    r.std_error_mm = sample_std(errors);
    r.n_landmarks = static_cast<int>(errors.size());
    r.method = std::move(method);
    return r;
}

PooledStats pool_cases(std::span<const CaseReport> cases) {
    if (cases.empty()) throw Error(ErrorCode::EmptyInput, "no cases to pool");
    PooledStats s;
    s.method = cases.front().method;
    s.n_cases = static_cast<int>(cases.size());
    std::vector<double> means;
    double sum = 0.0, sum_sq = 0.0;
    for (const auto& c : cases) {
        if (c.n_landmarks < 1) throw Error(ErrorCode::InvalidArgument, "case '" + c.subject_id + "' has no landmarks");
        means.push_back(c.mean_error_mm);
        const double n = c.n_landmarks;
        s.n_landmarks += c.n_landmarks;
        sum += n * c.mean_error_mm;
        sum_sq += (n - 1.0) * c.std_error_mm * c.std_error_mm + n * c.mean_error_mm * c.mean_error_mm;
    }
    s.case_mean = mean_of(means);
    s.case_std = sample_std(means);
    const double total = s.n_landmarks;
    s.landmark_mean = sum / total;
    s.landmark_std = s.n_landmarks > 1 ? std::sqrt(std::max(0.0, (sum_sq - total * s.landmark_mean * s.landmark_mean) / (total - 1.0)))
                                       : 0.0;
    return s;
}

std::vector<std::string> report_methods(std::span<const CaseReport> cases) {
    std::vector<std::string> out;
    for (const auto& c : cases) {
        if (std::find(out.begin(), out.end(), c.method) == out.end()) out.push_back(c.method);
    }
    return out;
}

std::string format_report_table(std::span<const CaseReport> cases) {
    if (cases.empty()) throw Error(ErrorCode::EmptyInput, "no cases to report");
    const auto methods = report_methods(cases);
    std::map<std::string, std::map<std::string, const CaseReport*>> by_subject;
    std::map<std::string, std::vector<CaseReport>> by_method;
    for (const auto& c : cases) {
        auto& slot = by_subject[c.subject_id][c.method];
        if (slot) throw Error(ErrorCode::DuplicateId, "case '" + c.subject_id + "' listed twice for " + c.method);
        slot = &c;
        by_method[c.method].push_back(c);
    }
    for (const auto& [id, row] : by_subject) {
        if (row.size() != methods.size()) {
            throw Error(ErrorCode::InvalidArgument, "case '" + id + "' is not reported for every method");
        }
    }

    auto cell = [](double m, double s) { return csv::format_fixed(m, 2) + "±" + csv::format_fixed(s, 2); };
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> header{"Case"};
    header.insert(header.end(), methods.begin(), methods.end());
    rows.push_back(header);
    for (const auto& [id, row] : by_subject) {
        std::vector<std::string> r{id + " (" + severity_name(row.begin()->second->severity) + ")"};
        for (const auto& m : methods) r.push_back(cell(row.at(m)->mean_error_mm, row.at(m)->std_error_mm));
        rows.push_back(r);
    }
    std::vector<std::string> per_case{"All (per case)"}, per_landmark{"All (per landmark)"};
    for (const auto& m : methods) {
        const auto p = pool_cases(by_method[m]);
        per_case.push_back(cell(p.case_mean, p.case_std));
        per_landmark.push_back(cell(p.landmark_mean, p.landmark_std));
    }
    rows.push_back(per_case);
    rows.push_back(per_landmark);

    // Column widths in code points; "±" is two bytes in UTF-8.
    auto width = [](const std::string& s) {
        std::size_t w = 0;
        for (unsigned char ch : s) w += (ch & 0xC0) != 0x80;
        return w;
    };
    std::vector<std::size_t> widths(header.size(), 0);
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) widths[i] = std::max(widths[i], width(r[i]));
    }
    std::ostringstream out;
    for (std::size_t k = 0; k < rows.size(); ++k) {
        if (k == 1 || k == rows.size() - 2) {
            std::size_t total = 0;
            for (auto w : widths) total += w + 2;
            out << std::string(total - 2, '-') << '\n';
        }
        for (std::size_t i = 0; i < rows[k].size(); ++i) {
            out << rows[k][i];
            if (i + 1 < rows[k].size()) out << std::string(widths[i] - width(rows[k][i]) + 2, ' ');
        }
        out << '\n';
    }
    return out.str();
}

void save_report_csv(std::span<const CaseReport> cases, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::FileOpen, "cannot write " + path.string());
    out << "subject,severity,n,mean_mm,std_mm,method\n";
    for (const auto& c : cases) {
        out << c.subject_id << ',' << severity_name(c.severity) << ',' << c.n_landmarks << ','
            << csv::format_double(c.mean_error_mm) << ',' << csv::format_double(c.std_error_mm) << ',' << c.method << '\n';
    }
}

std::vector<CaseReport> load_report_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::FileOpen, "cannot open " + path.string());
    std::string line;
    const std::vector<std::string> expected{"subject", "severity", "n", "mean_mm", "std_mm", "method"};
    if (!std::getline(in, line) || csv::split(line) != expected) {
        throw Error(ErrorCode::MissingColumn, path.string() + ": header must be 'subject,severity,n,mean_mm,std_mm,method'");
    }
    std::vector<CaseReport> out;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (csv::trim(line).empty()) continue;
        const auto f = csv::split(line);
        const std::string ctx = path.string() + ":" + std::to_string(lineno);
        if (f.size() != 6) throw Error(ErrorCode::MissingColumn, ctx + ": expected 6 columns");
        CaseReport c;
        c.subject_id = f[0];
        c.severity = parse_severity(f[1]);
        c.n_landmarks = static_cast<int>(csv::parse_long(f[2], ctx));
        c.mean_error_mm = csv::parse_double(f[3], ctx);
        c.std_error_mm = csv::parse_double(f[4], ctx);
        c.method = f[5];
        if (c.n_landmarks < 1 || c.mean_error_mm < 0.0 || c.std_error_mm < 0.0) {
            throw Error(ErrorCode::Parse, ctx + ": n must be >= 1 and statistics non-negative");
        }
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace lmk
