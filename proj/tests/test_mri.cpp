#include "radq/error.hpp"
#include "radq/mri.hpp"
#include "radq/rng.hpp"

#include <cmath>

#include <doctest.h>

using namespace radq;
using doctest::Approx;

namespace {

// Independent log-linear regression oracle (normal equations in long double).
DiffusionParams ls_oracle(const std::vector<std::pair<double, double>>& samples) {
    long double sb = 0, sy = 0, sbb = 0, sby = 0;
    const long double n = static_cast<long double>(samples.size());
    for (const auto& [b, s] : samples) {
        const long double y = std::log(static_cast<long double>(s));
        sb += b;
        sy += y;
        sbb += static_cast<long double>(b) * b;
        sby += b * y;
    }
    const long double slope = (n * sby - sb * sy) / (n * sbb - sb * sb);
    const long double intercept = (sy - slope * sb) / n;
    return {static_cast<double>(std::exp(intercept)), std::max(0.0, static_cast<double>(-slope))};
}

Volume const_volume(const char* id, int nx, int ny, int nz, float value) {
    Volume v(id, nx, ny, nz);
    for (auto& x : v.data) x = value;
    return v;
}

} // namespace

TEST_SUITE("mri") {

TEST_CASE("dwi_signal evaluates S0 * exp(-b D)") {
    CHECK(dwi_signal({1000.0, 0.002}, 1000.0) == Approx(1000.0 * std::exp(-2.0)).epsilon(1e-12));
    CHECK(dwi_signal({1000.0, 0.002}, 1000.0) == Approx(135.33528323661).epsilon(1e-9));
    CHECK(dwi_signal({123.5, 0.42}, 0.0) == 123.5);
    CHECK(dwi_signal({0.0, 0.007}, 555.0) == 0.0);
}

TEST_CASE("dwi_signal is strictly decreasing in b for D > 0 and constant for D = 0") {
    Rng rng(1);
    for (int it = 0; it < 200; ++it) {
        const DiffusionParams p{rng.uniform(1.0, 2000.0), rng.uniform(1e-5, 4e-3)};
        const double b1 = rng.uniform(0.0, 1500.0);
        const double b2 = b1 + rng.uniform(1.0, 500.0);
        CHECK(dwi_signal(p, b1) > dwi_signal(p, b2));
        CHECK(dwi_signal({p.s0, 0.0}, b1) == p.s0);
    }
}

TEST_CASE("fit_adc recovers noiseless parameters within 1e-9 relative") {
    const DiffusionParams truth{800.0, 1.5e-3};
    std::vector<std::pair<double, double>> samples;
    for (double b : {0.0, 400.0, 1000.0}) samples.emplace_back(b, dwi_signal(truth, b));
    const DiffusionParams fit = fit_adc(samples);
    CHECK(fit.s0 == Approx(truth.s0).epsilon(1e-9));
    CHECK(fit.d == Approx(truth.d).epsilon(1e-9));
    const DiffusionParams oracle = ls_oracle(samples);
    CHECK(fit.s0 == Approx(oracle.s0).epsilon(1e-12));
    CHECK(fit.d == Approx(oracle.d).epsilon(1e-12));
}

TEST_CASE("fit_adc two-point slope and constant signals") {
    std::vector<std::pair<double, double>> two{{0.0, 1000.0}, {1000.0, 1000.0 * std::exp(-1.0)}};
    CHECK(fit_adc(two).d == Approx(1e-3).epsilon(1e-12));
    std::vector<std::pair<double, double>> flat{{0.0, 420.0}, {500.0, 420.0}, {1000.0, 420.0}};
    CHECK(fit_adc(flat).d == 0.0);
    CHECK(fit_adc(flat).s0 == Approx(420.0).epsilon(1e-12));
}

TEST_CASE("fit_adc oracle agreement on random noiseless data") {
    Rng rng(2);
    for (int it = 0; it < 100; ++it) {
        const DiffusionParams truth{rng.uniform(50.0, 3000.0), rng.uniform(1e-4, 3.5e-3)};
        std::vector<std::pair<double, double>> samples;
        double b = 0.0;
        const int n = 2 + (int)rng.below(5);
        for (int i = 0; i < n; ++i) {
            samples.emplace_back(b, dwi_signal(truth, b));
            b += rng.uniform(50.0, 600.0);
        }
        const DiffusionParams fit = fit_adc(samples);
        CHECK(fit.s0 == Approx(truth.s0).epsilon(1e-9));
        CHECK(fit.d == Approx(truth.d).epsilon(1e-9));
    }
}

TEST_CASE("fit_adc error paths") {
    CHECK_THROWS_WITH_AS(fit_adc(std::vector<std::pair<double, double>>{{0.0, 10.0}, {100.0, 0.0}}),
                         doctest::Contains("non-positive"), NumericError);
    CHECK_THROWS_WITH_AS(fit_adc(std::vector<std::pair<double, double>>{{500.0, 10.0}, {500.0, 9.0}}),
                         doctest::Contains("degenerate"), NumericError);
    CHECK_THROWS_AS(fit_adc(std::vector<std::pair<double, double>>{{0.0, 10.0}}), NumericError);
}

TEST_CASE("compute_adc_map: uniform volumes give a uniform map") {
    const DiffusionParams truth{900.0, 1.2e-3};
    std::vector<std::pair<double, Volume>> dwi;
    for (double b : {0.0, 400.0, 1000.0})
        dwi.emplace_back(b, const_volume("dwi", 4, 3, 2, static_cast<float>(dwi_signal(truth, b))));
    const AdcMapResult res = compute_adc_map(dwi);
    CHECK(res.qa_nonpositive == 0);
    for (float d : res.adc.data) CHECK(d == Approx(truth.d).epsilon(1e-6));
    for (float s : res.s0.data) CHECK(s == Approx(truth.s0).epsilon(1e-6));
}

TEST_CASE("compute_adc_map: non-positive signal flags the voxel") {
    std::vector<std::pair<double, Volume>> dwi;
    dwi.emplace_back(0.0, const_volume("a", 2, 2, 1, 100.f));
    dwi.emplace_back(1000.0, const_volume("b", 2, 2, 1, 37.f));
    dwi[1].second.data[2] = 0.0f;
    const AdcMapResult res = compute_adc_map(dwi);
    CHECK(res.qa_nonpositive == 1);
    CHECK(res.adc.data[2] == 0.0f);
    CHECK(res.adc.data[0] > 0.0f);

    dwi[1].second = Volume("b", 3, 2, 1);
    CHECK_THROWS_AS(compute_adc_map(dwi), NumericError);
}

TEST_CASE("compute_chb_dwi closed form") {
    Volume adc = const_volume("adc", 2, 2, 1, 1e-3f);
    Volume s0 = const_volume("s0", 2, 2, 1, 1000.f);
    const Volume chb = compute_chb_dwi(adc, s0, 2000.0);
    for (float v : chb.data) CHECK(v == Approx(135.3352832366127).epsilon(1e-6));

    Volume flat = const_volume("adc", 2, 2, 1, 0.0f);
    const Volume same = compute_chb_dwi(flat, s0, 2000.0);
    CHECK(same.data == s0.data);

    CHECK_THROWS_AS(compute_chb_dwi(adc, const_volume("s0", 3, 2, 1, 1.f), 2000.0), NumericError);
}

TEST_CASE("chb-dwi extrapolation from a fitted map matches the forward model within 1e-5") {
    // synthetic noiseless stack with spatially varying parameters
    const int nx = 6, ny = 5, nz = 2;
    Rng rng(3);
    std::vector<DiffusionParams> truth(nx * ny * nz);
    for (auto& p : truth) p = {rng.uniform(200.0, 1500.0), rng.uniform(0.5e-3, 2.5e-3)};
    std::vector<std::pair<double, Volume>> dwi;
    for (double b : {0.0, 100.0, 400.0, 1000.0}) {
        Volume v("dwi", nx, ny, nz);
        for (std::size_t i = 0; i < v.data.size(); ++i)
            v.data[i] = static_cast<float>(dwi_signal(truth[i], b));
        dwi.emplace_back(b, std::move(v));
    }
    const AdcMapResult fit = compute_adc_map(dwi);
    const Volume chb = compute_chb_dwi(fit.adc, fit.s0, 2000.0);
    for (std::size_t i = 0; i < chb.data.size(); ++i)
        CHECK(chb.data[i] == Approx(dwi_signal(truth[i], 2000.0)).epsilon(1e-5));
}

TEST_CASE("compute_cdi constant-volume identities") {
    std::vector<std::pair<double, Volume>> dwi;
    dwi.emplace_back(0.0, const_volume("a", 4, 4, 2, 2.0f));
    dwi.emplace_back(100.0, const_volume("b", 4, 4, 2, 3.0f));
    CDIConfig cfg;
    cfg.window_radius = 0;
    cfg.normalize_inputs = false;
    const Volume cdi = compute_cdi(dwi, cfg);
    for (float v : cdi.data) CHECK(v == 6.0f);

    // n constant volumes of value c -> c^n
    std::vector<std::pair<double, Volume>> dwi3;
    for (double b : {0.0, 50.0, 150.0}) dwi3.emplace_back(b, const_volume("c", 3, 3, 1, 1.5f));
    const Volume cdi3 = compute_cdi(dwi3, cfg);
    for (float v : cdi3.data) CHECK(v == 3.375f);

    // window averaging keeps constants constant
    cfg.window_radius = 1;
    const Volume cdi_w = compute_cdi(dwi, cfg);
    for (float v : cdi_w.data) CHECK(v == 6.0f);
}

TEST_CASE("compute_cdi nonnegativity and metadata") {
    Rng rng(4);
    std::vector<std::pair<double, Volume>> dwi;
    for (double b : {0.0, 200.0}) {
        Volume v("d", 5, 5, 2);
        for (auto& x : v.data) x = static_cast<float>(rng.uniform(0.0, 50.0));
        dwi.emplace_back(b, std::move(v));
    }
    const Volume cdi = compute_cdi(dwi, CDIConfig{});
    for (float v : cdi.data) CHECK(v >= 0.0f);
    CHECK(cdi.meta.at("method") == "cdi-product-v1");
    CHECK(cdi.meta.at("window_radius") == "1");
}

TEST_CASE("compute_cdi is translation-equivariant away from boundaries") {
    const int nx = 10, ny = 8, nz = 1;
    Rng rng(5);
    std::vector<std::pair<double, Volume>> dwi, shifted;
    for (double b : {0.0, 300.0}) {
        Volume v("d", nx, ny, nz);
        for (auto& x : v.data) x = static_cast<float>(rng.uniform(0.1, 10.0));
        Volume s("d", nx, ny, nz);
        for (int y = 0; y < ny; ++y)
            for (int x = 1; x < nx; ++x) s.at(x, y, 0) = v.at(x - 1, y, 0);
        dwi.emplace_back(b, std::move(v));
        shifted.emplace_back(b, std::move(s));
    }
    CDIConfig cfg;
    cfg.normalize_inputs = false; // normalization scale would differ after the shift
    const Volume a = compute_cdi(dwi, cfg);
    const Volume b = compute_cdi(shifted, cfg);
    for (int y = 1; y < ny - 1; ++y)
        for (int x = 2; x < nx - 1; ++x) CHECK(b.at(x, y, 0) == a.at(x - 1, y, 0));
}

TEST_CASE("config validation") {
    CDIConfig cfg;
    cfg.window_radius = 4;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    BValueSchedule sched{{0.0}};
    CHECK_THROWS_AS(sched.validate(), ConfigError);
    sched.b_values = {100.0, 200.0};
    CHECK_THROWS_AS(sched.validate(), ConfigError);
    sched.b_values = {0.0, 200.0, 200.0};
    CHECK_THROWS_AS(sched.validate(), ConfigError);
    sched.b_values = {0.0, 100.0, 400.0};
    CHECK_NOTHROW(sched.validate());
}

} // TEST_SUITE
