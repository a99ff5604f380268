#pragma once

#include "radq/volume.hpp"

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace radq {

struct DiffusionParams {
    double s0 = 0.0; // signal intensity without diffusion weighting
    double d = 0.0;  // apparent diffusion coefficient, mm^2/s
};

struct BValueSchedule {
    std::vector<double> b_values; // strictly increasing, first element 0

    void validate() const; // throws ConfigError
};

struct CDIConfig {
    int window_radius = 1;       // in-plane half-width; 1 -> 3x3 window
    bool normalize_inputs = true; // max-normalize each b-volume to [0,1] before mixing

    void validate() const;
};

// Forward diffusion signal S = S0 * exp(-b * D).
double dwi_signal(const DiffusionParams& p, double b);

// Ordinary least squares on ln S = ln S0 - b * D; D clamped to >= 0.
// Throws NumericError for S <= 0 or fewer than 2 distinct b-values.
DiffusionParams fit_adc(std::span<const std::pair<double, double>> signals);

struct AdcMapResult {
    Volume adc;
    Volume s0;
    // Voxels where some signal was <= 0; those get D = 0 and S0 from the b=0
    // sample clamped at 0.
    std::size_t qa_nonpositive = 0;
};

AdcMapResult compute_adc_map(const std::vector<std::pair<double, Volume>>& dwi_by_b);

// Closed-form extrapolation S0 * exp(-b_target * D) per voxel.
Volume compute_chb_dwi(const Volume& adc_map, const Volume& s0_map, double b_target = 2000.0);

// Local-window signal mixing: per voxel the in-plane window average of the
// product of per-b signals (each volume max-normalized first when
// cfg.normalize_inputs). Windows are clipped at boundaries, divisor is the
// actual window size. Tagged "cdi-product-v1" in the output metadata.
Volume compute_cdi(const std::vector<std::pair<double, Volume>>& dwi_by_b, const CDIConfig& cfg = {});

} // namespace radq
