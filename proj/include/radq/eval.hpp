#pragma once

#include <optional>
#include <span>
#include <vector>

namespace radq {

struct ConfusionCounts {
    long tp = 0, tn = 0, fp = 0, fn = 0;

    long positives() const { return tp + fn; }
    long negatives() const { return tn + fp; }

    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        tn += o.tn;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
};

// Undefined metrics (P = 0 or N = 0) are reported as absent, never NaN.
struct Metrics {
    std::optional<double> sensitivity; // TP / P
    std::optional<double> specificity; // TN / N
    std::optional<double> accuracy;    // (TP + TN) / (P + N)
};

Metrics compute_metrics(const ConfusionCounts& c);

// Per-dimension separability (mu_h - mu_c)^2 / (sigma_h + sigma_c) with
// population standard deviations. Dimensions with zero sigma-sum and equal
// means score 0; zero sigma-sum with differing means is flagged infinite and
// excluded from the mean aggregate.
struct FisherReport {
    std::vector<double> per_dimension;
    std::vector<bool> infinite_dimension;
    double aggregate_mean = 0.0; // over defined dimensions
    double max_defined = 0.0;
    std::size_t defined_count = 0;
};

// variance_denominator switches to the classical sigma_h^2 + sigma_c^2 form.
FisherReport fisher_criterion(const std::vector<std::vector<double>>& healthy,
                              const std::vector<std::vector<double>>& cancerous,
                              bool variance_denominator = false);

enum class PairedTestStatus { ok, degenerate };

struct PairedTestResult {
    PairedTestStatus status = PairedTestStatus::ok;
    double t = 0.0;
    double df = 0.0;
    double p = 1.0;
};

// Paired two-sided Student t-test on per-fold differences a - b.
PairedTestResult paired_test(std::span<const double> a, std::span<const double> b);

// Regularized incomplete beta I_x(a, b) via continued fraction, |err| < 1e-10.
double regularized_incomplete_beta(double a, double b, double x);
double student_t_cdf(double t, double df);

} // namespace radq
