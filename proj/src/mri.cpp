#include "radq/mri.hpp"

#include "radq/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace radq {

void BValueSchedule::validate() const {
    if (b_values.size() < 2) throw ConfigError("b-value schedule needs at least 2 entries");
    if (b_values.front() != 0.0) throw ConfigError("first b-value must be 0");
    for (std::size_t i = 1; i < b_values.size(); ++i)
        if (!(b_values[i] > b_values[i - 1]))
            throw ConfigError("b-values must be strictly increasing");
}

void CDIConfig::validate() const {
    if (window_radius < 0 || window_radius > 3)
        throw ConfigError("cdi window_radius must lie in [0, 3]");
}

double dwi_signal(const DiffusionParams& p, double b) { return p.s0 * std::exp(-b * p.d); }

DiffusionParams fit_adc(std::span<const std::pair<double, double>> signals) {
    if (signals.size() < 2) throw NumericError("fit_adc: need at least 2 (b, S) samples");
    double sum_b = 0.0, sum_y = 0.0;
    for (const auto& [b, s] : signals) {
        if (!(s > 0.0)) throw NumericError("fit_adc: non-positive signal at b=" + std::to_string(b));
        sum_b += b;
        sum_y += std::log(s);
    }
    const double n = static_cast<double>(signals.size());
    const double mean_b = sum_b / n;
    const double mean_y = sum_y / n;
    double sxx = 0.0, sxy = 0.0;
    for (const auto& [b, s] : signals) {
        const double db = b - mean_b;
        sxx += db * db;
        sxy += db * (std::log(s) - mean_y);
    }
    if (sxx == 0.0) throw NumericError("fit_adc: degenerate fit, fewer than 2 distinct b-values");
    const double slope = sxy / sxx;
    DiffusionParams p;
    p.d = std::max(0.0, -slope);
    p.s0 = std::exp(mean_y - slope * mean_b);
    return p;
}

namespace {

void require_aligned(const std::vector<std::pair<double, Volume>>& dwi_by_b) {
    if (dwi_by_b.size() < 2) throw NumericError("need at least 2 b-value volumes");
    for (std::size_t i = 1; i < dwi_by_b.size(); ++i)
        if (!dwi_by_b[i].second.same_dims(dwi_by_b[0].second))
            throw NumericError("b-value volumes have mismatched dims");
}

} // namespace

AdcMapResult compute_adc_map(const std::vector<std::pair<double, Volume>>& dwi_by_b) {
    require_aligned(dwi_by_b);
    const Volume& ref = dwi_by_b[0].second;

    AdcMapResult out;
    out.adc = Volume("adc", ref.nx, ref.ny, ref.nz, ref.voxel_size_mm);
    out.s0 = Volume("s0", ref.nx, ref.ny, ref.nz, ref.voxel_size_mm);

    const std::size_t n = ref.voxel_count();
    const std::size_t nb = dwi_by_b.size();
    std::vector<std::pair<double, double>> samples(nb);
    for (std::size_t i = 0; i < n; ++i) {
        bool ok = true;
        for (std::size_t j = 0; j < nb; ++j) {
            const double s = dwi_by_b[j].second.data[i];
            if (!(s > 0.0)) ok = false;
            samples[j] = {dwi_by_b[j].first, s};
        }
        if (!ok) {
            ++out.qa_nonpositive;
            out.adc.data[i] = 0.0f;
            out.s0.data[i] = std::max(0.0f, dwi_by_b[0].second.data[i]);
            continue;
        }
        const DiffusionParams p = fit_adc(samples);
        out.adc.data[i] = static_cast<float>(p.d);
        out.s0.data[i] = static_cast<float>(p.s0);
    }
    return out;
}

Volume compute_chb_dwi(const Volume& adc_map, const Volume& s0_map, double b_target) {
    if (!adc_map.same_dims(s0_map)) throw NumericError("compute_chb_dwi: dim mismatch");
    Volume out("chb_dwi", adc_map.nx, adc_map.ny, adc_map.nz, adc_map.voxel_size_mm);
    out.meta["b_target"] = std::to_string(b_target);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = static_cast<float>(static_cast<double>(s0_map.data[i]) *
                                         std::exp(-b_target * static_cast<double>(adc_map.data[i])));
    return out;
}

Volume compute_cdi(const std::vector<std::pair<double, Volume>>& dwi_by_b, const CDIConfig& cfg) {
    cfg.validate();
    require_aligned(dwi_by_b);
    const Volume& ref = dwi_by_b[0].second;
    const int nx = ref.nx, ny = ref.ny, nz = ref.nz;

    // Per-volume normalization scale.
    std::vector<double> scale(dwi_by_b.size(), 1.0);
    if (cfg.normalize_inputs) {
        for (std::size_t j = 0; j < dwi_by_b.size(); ++j) {
            const auto& d = dwi_by_b[j].second.data;
            const float mx = *std::max_element(d.begin(), d.end());
            scale[j] = mx > 0.0f ? 1.0 / static_cast<double>(mx) : 1.0;
        }
    }

    // Product of (normalized) signals per voxel.
    std::vector<double> prod(ref.voxel_count(), 1.0);
    for (std::size_t j = 0; j < dwi_by_b.size(); ++j) {
        const auto& d = dwi_by_b[j].second.data;
        for (std::size_t i = 0; i < prod.size(); ++i) prod[i] *= static_cast<double>(d[i]) * scale[j];
    }

    // In-plane window mean, clipped at slice borders.
    Volume out("cdi", nx, ny, nz, ref.voxel_size_mm);
    out.meta["method"] = "cdi-product-v1";
    out.meta["window_radius"] = std::to_string(cfg.window_radius);
    out.meta["normalize_inputs"] = cfg.normalize_inputs ? "1" : "0";
    const int r = cfg.window_radius;
    for (int z = 0; z < nz; ++z) {
        for (int y = 0; y < ny; ++y) {
            const int y0 = std::max(0, y - r), y1 = std::min(ny - 1, y + r);
            for (int x = 0; x < nx; ++x) {
                const int x0 = std::max(0, x - r), x1 = std::min(nx - 1, x + r);
                double acc = 0.0;
                for (int yy = y0; yy <= y1; ++yy)
                    for (int xx = x0; xx <= x1; ++xx)
                        acc += prod[ref.index(xx, yy, z)];
                const int count = (y1 - y0 + 1) * (x1 - x0 + 1);
                out.data[ref.index(x, y, z)] = static_cast<float>(acc / count);
            }
        }
    }
    return out;
}

} // namespace radq
