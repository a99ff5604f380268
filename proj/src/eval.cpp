#include "radq/eval.hpp"

#include "radq/error.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace radq {

Metrics compute_metrics(const ConfusionCounts& c) {
    if (c.tp < 0 || c.tn < 0 || c.fp < 0 || c.fn < 0)
        throw NumericError("metrics: negative confusion counts");
    Metrics m;
    const long p = c.positives(), n = c.negatives();
    if (p > 0) m.sensitivity = static_cast<double>(c.tp) / static_cast<double>(p);
    if (n > 0) m.specificity = static_cast<double>(c.tn) / static_cast<double>(n);
    if (p + n > 0) m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(p + n);
    return m;
}

FisherReport fisher_criterion(const std::vector<std::vector<double>>& healthy,
                              const std::vector<std::vector<double>>& cancerous,
                              bool variance_denominator) {
    if (healthy.size() < 2 || cancerous.size() < 2)
        throw NumericError("fisher_criterion: need at least 2 samples per class");
    const std::size_t dim = healthy.front().size();
    for (const auto& v : healthy)
        if (v.size() != dim) throw NumericError("fisher_criterion: ragged healthy sequences");
    for (const auto& v : cancerous)
        if (v.size() != dim) throw NumericError("fisher_criterion: ragged cancerous sequences");

    FisherReport rep;
    rep.per_dimension.resize(dim);
    rep.infinite_dimension.assign(dim, false);

    auto moments = [](const std::vector<std::vector<double>>& rows, std::size_t d) {
        double sum = 0.0, sum2 = 0.0;
        for (const auto& r : rows) {
            sum += r[d];
            sum2 += r[d] * r[d];
        }
        const double n = static_cast<double>(rows.size());
        const double mean = sum / n;
        const double var = std::max(0.0, sum2 / n - mean * mean);
        return std::pair{mean, std::sqrt(var)};
    };

    double sum_defined = 0.0;
    double max_defined = 0.0;
    std::size_t defined = 0;
    for (std::size_t d = 0; d < dim; ++d) {
        const auto [mu_h, sd_h] = moments(healthy, d);
        const auto [mu_c, sd_c] = moments(cancerous, d);
        const double num = (mu_h - mu_c) * (mu_h - mu_c);
        const double den = variance_denominator ? sd_h * sd_h + sd_c * sd_c : sd_h + sd_c;
        if (den == 0.0) {
            if (num == 0.0) {
                rep.per_dimension[d] = 0.0;
                sum_defined += 0.0;
                ++defined;
            } else {
                rep.per_dimension[d] = std::numeric_limits<double>::infinity();
                rep.infinite_dimension[d] = true;
            }
        } else {
            rep.per_dimension[d] = num / den;
            sum_defined += rep.per_dimension[d];
            max_defined = std::max(max_defined, rep.per_dimension[d]);
            ++defined;
        }
    }
    rep.defined_count = defined;
    rep.aggregate_mean = defined > 0 ? sum_defined / static_cast<double>(defined) : 0.0;
    rep.max_defined = max_defined;
    return rep;
}

namespace {

// Continued-fraction kernel for the regularized incomplete beta (modified
// Lentz iteration).
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 500;
    constexpr double kEps = 1e-15;
    constexpr double kTiny = 1e-300;

    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) return h;
    }
    throw NumericError("incomplete beta: continued fraction did not converge");
}

} // namespace

double regularized_incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0)) throw NumericError("incomplete beta: parameters must be positive");
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double df) {
    if (!(df > 0.0)) throw NumericError("student_t_cdf: df must be positive");
    const double x = df / (df + t * t);
    const double tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x);
    return t >= 0.0 ? 1.0 - tail : tail;
}

PairedTestResult paired_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw NumericError("paired_test: length mismatch");
    const std::size_t n = a.size();
    if (n < 2) throw NumericError("paired_test: need at least 2 paired samples");

    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i] - mean;
        ss += d * d;
    }
    const double var = ss / static_cast<double>(n - 1); // sample variance of differences

    PairedTestResult res;
    res.df = static_cast<double>(n - 1);
    if (var == 0.0) {
        res.status = PairedTestStatus::degenerate;
        return res;
    }
    res.t = mean / std::sqrt(var / static_cast<double>(n));
    res.p = regularized_incomplete_beta(res.df / 2.0, 0.5, res.df / (res.df + res.t * res.t));
    return res;
}

} // namespace radq
