#include "radq/error.hpp"
#include "radq/eval.hpp"
#include "radq/rng.hpp"

#include <cmath>

#include <doctest.h>

using namespace radq;
using doctest::Approx;

namespace {

// Student-t density for the numerical-integration oracle.
double t_density(double x, double df) {
    const double c = std::exp(std::lgamma((df + 1) / 2) - std::lgamma(df / 2)) /
                     std::sqrt(df * std::acos(-1.0));
    return c * std::pow(1.0 + x * x / df, -(df + 1) / 2);
}

double simpson(double a, double b, double df, int n) {
    const double h = (b - a) / n;
    double s = t_density(a, df) + t_density(b, df);
    for (int i = 1; i < n; ++i) s += t_density(a + i * h, df) * (i % 2 ? 4.0 : 2.0);
    return s * h / 3.0;
}

// CDF via adaptive refinement of the Simpson rule.
double t_cdf_oracle(double t, double df) {
    const double sign = t < 0 ? -1.0 : 1.0;
    const double upper = std::abs(t);
    double prev = simpson(0, upper, df, 64), cur = simpson(0, upper, df, 128);
    int n = 256;
    while (std::abs(cur - prev) > 1e-13 && n <= (1 << 20)) {
        prev = cur;
        cur = simpson(0, upper, df, n);
        n *= 2;
    }
    return 0.5 + sign * cur;
}

} // namespace

TEST_SUITE("eval") {

TEST_CASE("metric arithmetic is exact") {
    const Metrics m = compute_metrics({64, 82, 18, 36}); // P = 100, N = 100
    CHECK(*m.sensitivity == 64.0 / 100.0);
    CHECK(*m.specificity == 82.0 / 100.0);
    CHECK(*m.accuracy == 146.0 / 200.0);

    const Metrics perfect = compute_metrics({10, 20, 0, 0});
    CHECK(*perfect.sensitivity == 1.0);
    CHECK(*perfect.specificity == 1.0);
    CHECK(*perfect.accuracy == 1.0);

    const Metrics zero = compute_metrics({0, 0, 5, 5});
    CHECK(*zero.sensitivity == 0.0);
    CHECK(*zero.specificity == 0.0);
    CHECK(*zero.accuracy == 0.0);
}

TEST_CASE("undefined metrics are explicit markers, not NaN") {
    const Metrics no_p = compute_metrics({0, 10, 2, 0});
    CHECK(!no_p.sensitivity.has_value());
    CHECK(no_p.specificity.has_value());
    const Metrics no_n = compute_metrics({5, 0, 0, 1});
    CHECK(!no_n.specificity.has_value());
    CHECK(no_n.sensitivity.has_value());
    CHECK_THROWS_AS(compute_metrics({-1, 0, 0, 0}), NumericError);
}

TEST_CASE("pooled metrics equal metrics of summed counts") {
    Rng rng(7);
    std::vector<ConfusionCounts> folds;
    ConfusionCounts pooled;
    for (int i = 0; i < 12; ++i) {
        ConfusionCounts c{(long)rng.below(30), (long)rng.below(30), (long)rng.below(10),
                          (long)rng.below(10)};
        pooled += c;
        folds.push_back(c);
    }
    long tp = 0, tn = 0, fp = 0, fn = 0;
    for (const auto& c : folds) {
        tp += c.tp;
        tn += c.tn;
        fp += c.fp;
        fn += c.fn;
    }
    const Metrics a = compute_metrics(pooled);
    const Metrics b = compute_metrics({tp, tn, fp, fn});
    CHECK(*a.sensitivity == *b.sensitivity);
    CHECK(*a.specificity == *b.specificity);
    CHECK(*a.accuracy == *b.accuracy);
}

TEST_CASE("fisher criterion hand example: FC = 4/2 = 2") {
    // healthy: mu 0, population sigma 1; cancerous: mu 2, sigma 1
    const std::vector<std::vector<double>> healthy{{-1.0}, {1.0}};
    const std::vector<std::vector<double>> cancer{{1.0}, {3.0}};
    const FisherReport rep = fisher_criterion(healthy, cancer);
    REQUIRE(rep.per_dimension.size() == 1);
    CHECK(rep.per_dimension[0] == Approx(2.0).epsilon(1e-12));
    CHECK(rep.aggregate_mean == Approx(2.0).epsilon(1e-12));

    // classical variance denominator: 4 / (1 + 1) = 2 as well here
    const FisherReport var_rep = fisher_criterion(healthy, cancer, true);
    CHECK(var_rep.per_dimension[0] == Approx(2.0).epsilon(1e-12));
}

TEST_CASE("identical class distributions score zero") {
    const std::vector<std::vector<double>> same{{0.5, 2.0}, {1.5, 4.0}};
    const FisherReport rep = fisher_criterion(same, same);
    for (double v : rep.per_dimension) CHECK(v == 0.0);
    CHECK(rep.aggregate_mean == 0.0);
}

TEST_CASE("zero sigma-sum with differing means is an infinite marker excluded from the mean") {
    const std::vector<std::vector<double>> healthy{{1.0, 0.0}, {1.0, 2.0}};
    const std::vector<std::vector<double>> cancer{{2.0, 1.0}, {2.0, 3.0}};
    const FisherReport rep = fisher_criterion(healthy, cancer);
    CHECK(rep.infinite_dimension[0]);
    CHECK(!rep.infinite_dimension[1]);
    CHECK(rep.defined_count == 1);
    CHECK(std::isfinite(rep.aggregate_mean));
}

TEST_CASE("fisher criterion shift invariance and |c| scaling") {
    Rng rng(11);
    std::vector<std::vector<double>> healthy, cancer;
    for (int i = 0; i < 20; ++i) {
        std::vector<double> h(5), c(5);
        for (int d = 0; d < 5; ++d) {
            h[d] = rng.normal();
            c[d] = rng.normal() + 0.8;
        }
        healthy.push_back(h);
        cancer.push_back(c);
    }
    const FisherReport base = fisher_criterion(healthy, cancer);

    auto transform = [&](double mul, double add) {
        auto th = healthy;
        auto tc = cancer;
        for (auto& r : th)
            for (auto& v : r) v = v * mul + add;
        for (auto& r : tc)
            for (auto& v : r) v = v * mul + add;
        return fisher_criterion(th, tc);
    };
    const FisherReport shifted = transform(1.0, 17.5);
    for (std::size_t d = 0; d < 5; ++d)
        CHECK(shifted.per_dimension[d] == Approx(base.per_dimension[d]).epsilon(1e-9));

    const double c = 3.5;
    const FisherReport scaled = transform(c, 0.0);
    for (std::size_t d = 0; d < 5; ++d)
        CHECK(scaled.per_dimension[d] == Approx(c * base.per_dimension[d]).epsilon(1e-9));
}

TEST_CASE("fisher criterion requires 2 samples per class") {
    CHECK_THROWS_AS(fisher_criterion({{1.0}}, {{2.0}, {3.0}}), NumericError);
}

TEST_CASE("paired t-test on differences [1,2,3]") {
    const std::vector<double> a{2.0, 4.0, 6.0};
    const std::vector<double> b{1.0, 2.0, 3.0};
    const PairedTestResult r = paired_test(a, b);
    CHECK(r.status == PairedTestStatus::ok);
    CHECK(r.t == Approx(2.0 * std::sqrt(3.0)).epsilon(1e-12));
    CHECK(r.df == 2.0);
    CHECK(r.p == Approx(0.0742).epsilon(2e-3));
    // closed form for df = 2: p = 1 - t/sqrt(2 + t^2)
    const double p_exact = 1.0 - r.t / std::sqrt(2.0 + r.t * r.t);
    CHECK(r.p == Approx(p_exact).epsilon(1e-10));

    const PairedTestResult swapped = paired_test(b, a);
    CHECK(swapped.t == Approx(-r.t).epsilon(1e-12));
    CHECK(swapped.p == Approx(r.p).epsilon(1e-12));
}

TEST_CASE("identical samples are a degenerate marker") {
    const std::vector<double> a{1.0, 2.0, 3.0};
    const PairedTestResult r = paired_test(a, a);
    CHECK(r.status == PairedTestStatus::degenerate);
    CHECK_THROWS_AS(paired_test(std::vector<double>{1.0}, std::vector<double>{2.0}), NumericError);
}

TEST_CASE("t CDF matches the independent integration oracle to 1e-10") {
    for (const double df : {1.0, 2.0, 5.0, 19.0, 30.0}) {
        for (const double t : {0.0, 0.5, 1.7, 2.0 * std::sqrt(3.0), -2.2}) {
            const double got = student_t_cdf(t, df);
            const double want = t_cdf_oracle(t, df);
            CHECK(std::abs(got - want) < 1e-10);
        }
    }
}

TEST_CASE("p values stay in (0, 1] and the beta function hits its edges") {
    CHECK(regularized_incomplete_beta(2.0, 3.0, 0.0) == 0.0);
    CHECK(regularized_incomplete_beta(2.0, 3.0, 1.0) == 1.0);
    Rng rng(13);
    for (int i = 0; i < 50; ++i) {
        std::vector<double> a(6), b(6);
        for (int k = 0; k < 6; ++k) {
            a[k] = rng.normal();
            b[k] = rng.normal();
        }
        const PairedTestResult r = paired_test(a, b);
        if (r.status == PairedTestStatus::ok) {
            CHECK(r.p > 0.0);
            CHECK(r.p <= 1.0);
        }
    }
}

} // TEST_SUITE
