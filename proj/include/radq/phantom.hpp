#pragma once

#include "radq/mri.hpp"
#include "radq/volume.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace radq {

struct PhantomConfig {
    int n_patients = 20;
    std::array<int, 3> dims{128, 128, 8};
    // DWI/CDI in-plane resolution; slices are thicker (acquisition-style anisotropy).
    std::array<double, 3> voxel_size_mm{1.56, 1.56, 3.0};
    BValueSchedule b_values{{0.0, 100.0, 400.0, 1000.0}};
    double healthy_d_mean = 1.6e-3, healthy_d_std = 0.15e-3; // mm^2/s
    double tumour_d_mean = 0.9e-3, tumour_d_std = 0.10e-3;
    int tumours_min = 1, tumours_max = 3;
    double tumour_radius_mm_min = 4.0, tumour_radius_mm_max = 10.0;
    double noise_sigma = 0.0; // additive Gaussian on DWI volumes, clamped at 0
    std::uint64_t seed = 0;

    void validate() const; // throws ConfigError naming the violated field
};

struct TumourComponent {
    std::array<double, 3> center_voxel{}; // fractional voxel coordinates
    double radius_mm = 0.0;
    double mean_d = 0.0;
};

struct GroundTruth {
    std::map<std::string, std::vector<TumourComponent>> tumours_by_patient;
};

struct Cohort {
    CohortManifest manifest;
    std::vector<PatientCase> cases;
    GroundTruth ground_truth;
};

// Deterministic: cohort content is a pure function of cfg. Each patient draws
// from a substream keyed by (seed, patient index).
Cohort generate_cohort(const PhantomConfig& cfg);

// Per-patient voxel counts, tumour volumes and intensity ranges.
nlohmann::json cohort_summary(const std::vector<PatientCase>& cases);

// Full cohort directory layout: cohort.json, ground_truth.json, cases/<id>/.
void save_cohort_tree(const Cohort& cohort, const std::filesystem::path& dir);
Cohort load_cohort_tree(const std::filesystem::path& dir);

nlohmann::json phantom_config_to_json(const PhantomConfig& cfg);
PhantomConfig phantom_config_from_json(const nlohmann::json& j); // rejects unknown keys

} // namespace radq
