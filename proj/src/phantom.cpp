#include "radq/phantom.hpp"

#include "radq/error.hpp"
#include "radq/json_util.hpp"
#include "radq/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

namespace radq {

using nlohmann::json;

namespace {

// Prostate ellipsoid semi-axes in mm (x, y, z), centered in the grid. Sized
// so the default healthy sampling grid outnumbers tumour components by the
// clinical-cohort margin.
constexpr std::array<double, 3> kProstateSemiAxesMm{27.0, 23.0, 10.5};
// Tissue draws are truncated at +/-2 sigma so healthy and tumour D supports
// stay disjoint on noiseless data (checked in validate()).
constexpr double kTruncSigmas = 2.0;
// Tumour voxel texture uses half the component std, truncated likewise.
constexpr double kTumourTextureScale = 0.5;
constexpr double kT2wTumourFactor = 0.85;

} // namespace

void PhantomConfig::validate() const {
    if (n_patients < 1) throw ConfigError("phantom.n_patients must be >= 1");
    for (int d : dims)
        if (d < 8) throw ConfigError("phantom.dims entries must be >= 8");
    for (double s : voxel_size_mm)
        if (!(s > 0.0)) throw ConfigError("phantom.voxel_size_mm entries must be positive");
    b_values.validate();
    if (!(tumour_d_mean < healthy_d_mean))
        throw ConfigError("phantom.tumour_d_mean must be below healthy_d_mean");
    if (!(healthy_d_std < healthy_d_mean / 3.0))
        throw ConfigError("phantom.healthy_d_std must be below healthy_d_mean/3");
    if (!(tumour_d_std < tumour_d_mean / 3.0))
        throw ConfigError("phantom.tumour_d_std must be below tumour_d_mean/3");
    // Disjoint D supports under the 2-sigma truncation (tumour texture adds
    // at most another sigma on top of a component mean).
    if (!(healthy_d_mean - kTruncSigmas * healthy_d_std >
          tumour_d_mean + (kTruncSigmas + 1.0) * tumour_d_std))
        throw ConfigError("phantom D distributions overlap: increase the class gap or lower the stds");
    if (tumours_min < 1 || tumours_max < tumours_min)
        throw ConfigError("phantom.tumours_per_patient range invalid");
    if (!(tumour_radius_mm_min > 0.0) || tumour_radius_mm_max < tumour_radius_mm_min)
        throw ConfigError("phantom.tumour_radius_mm range invalid");
    if (noise_sigma < 0.0) throw ConfigError("phantom.noise_sigma must be >= 0");
    for (int i = 0; i < 3; ++i) {
        const double semi_vox = kProstateSemiAxesMm[i] / voxel_size_mm[i];
        if (semi_vox > (dims[i] - 1) / 2.0)
            throw ConfigError("phantom.dims too small to contain the prostate ellipsoid along axis " +
                              std::to_string(i));
    }
}

namespace {

struct Geometry {
    std::array<double, 3> center; // voxel coordinates
    std::array<double, 3> semi_vox;
};

Geometry make_geometry(const PhantomConfig& cfg) {
    Geometry g;
    for (int i = 0; i < 3; ++i) {
        g.center[i] = (cfg.dims[i] - 1) / 2.0;
        g.semi_vox[i] = kProstateSemiAxesMm[i] / cfg.voxel_size_mm[i];
    }
    return g;
}

double ellipsoid_norm(const Geometry& g, double x, double y, double z) {
    const double dx = (x - g.center[0]) / g.semi_vox[0];
    const double dy = (y - g.center[1]) / g.semi_vox[1];
    const double dz = (z - g.center[2]) / g.semi_vox[2];
    return dx * dx + dy * dy + dz * dz;
}

// Distance in mm from voxel (x,y,z) to the tumour sphere surface (negative inside).
double tumour_distance_mm(const PhantomConfig& cfg, const TumourComponent& t, int x, int y, int z) {
    const double dx = (x - t.center_voxel[0]) * cfg.voxel_size_mm[0];
    const double dy = (y - t.center_voxel[1]) * cfg.voxel_size_mm[1];
    const double dz = (z - t.center_voxel[2]) * cfg.voxel_size_mm[2];
    return std::sqrt(dx * dx + dy * dy + dz * dz) - t.radius_mm;
}

struct GeneratedPatient {
    PatientCase pc;
    std::vector<TumourComponent> tumours;
};

GeneratedPatient generate_patient(const PhantomConfig& cfg, int patient_index) {
    const auto [nx, ny, nz] = cfg.dims;
    const Geometry geom = make_geometry(cfg);
    const std::uint64_t pseed = derive_seed(cfg.seed, "patient", static_cast<std::uint64_t>(patient_index));

    PatientCase pc;
    {
        char buf[16];
        std::snprintf(buf, sizeof buf, "p%03d", patient_index);
        pc.patient_id = buf;
    }
    Rng meta_rng(derive_seed(pseed, "meta"));
    pc.age_years = meta_rng.uniform_int(53, 83);

    // Tumour components: centers inside a shrunk prostate, radii and mean D seeded.
    std::vector<TumourComponent> tumours;
    {
        Rng trng(derive_seed(pseed, "tumours"));
        const int k = trng.uniform_int(cfg.tumours_min, cfg.tumours_max);
        for (int i = 0; i < k; ++i) {
            TumourComponent t;
            // Uniform direction, radius biased inward so spheres sit mostly interior.
            double u, v, w, s;
            do {
                u = trng.uniform(-1.0, 1.0);
                v = trng.uniform(-1.0, 1.0);
                w = trng.uniform(-1.0, 1.0);
                s = u * u + v * v + w * w;
            } while (s > 1.0 || s == 0.0);
            const double shrink = 0.70 * std::cbrt(trng.uniform01());
            t.center_voxel = {geom.center[0] + geom.semi_vox[0] * u * shrink,
                              geom.center[1] + geom.semi_vox[1] * v * shrink,
                              geom.center[2] + geom.semi_vox[2] * w * shrink};
            t.radius_mm = trng.uniform(cfg.tumour_radius_mm_min, cfg.tumour_radius_mm_max);
            t.mean_d = cfg.tumour_d_mean + cfg.tumour_d_std * trng.truncated_normal(kTruncSigmas);
            tumours.push_back(t);
        }
    }

    // Smooth S0 field: gentle low-frequency modulation around 1000 inside the
    // prostate, darker background. Kept within +/-8% so the CDI product stays
    // dominated by the D contrast rather than S0 texture.
    Rng s0rng(derive_seed(pseed, "s0"));
    const double ph1 = s0rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double ph2 = s0rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double ph3 = s0rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double f1 = s0rng.uniform(0.8, 1.6);
    const double f2 = s0rng.uniform(0.8, 1.6);

    Volume prostate("prostate_mask", nx, ny, nz, cfg.voxel_size_mm);
    Volume tumour_mask("tumour_mask", nx, ny, nz, cfg.voxel_size_mm);
    std::vector<double> s0_map(prostate.voxel_count());
    std::vector<double> d_map(prostate.voxel_count());

    Rng healthy_rng(derive_seed(pseed, "healthy_d"));
    Rng tumour_texture_rng(derive_seed(pseed, "tumour_d"));
    Rng background_rng(derive_seed(pseed, "background_d"));

    const double feather_mm = cfg.voxel_size_mm[0]; // 1-voxel boundary feather

    for (int z = 0; z < nz; ++z) {
        for (int y = 0; y < ny; ++y) {
            for (int x = 0; x < nx; ++x) {
                const std::size_t i = prostate.index(x, y, z);
                const bool inside = ellipsoid_norm(geom, x, y, z) <= 1.0;
                prostate.data[i] = inside ? 1.0f : 0.0f;

                const double wave = 0.05 * std::sin(2.0 * std::numbers::pi * (f1 * x / nx) + ph1) *
                                        std::sin(2.0 * std::numbers::pi * (f2 * y / ny) + ph2) +
                                    0.03 * std::sin(2.0 * std::numbers::pi * (1.0 * z / nz) + ph3);
                const double s0_base = inside ? 1000.0 : 550.0;
                s0_map[i] = s0_base * (1.0 + wave);

                // Healthy tissue D (outside the prostate: fast-diffusing background).
                double d = inside
                               ? cfg.healthy_d_mean + cfg.healthy_d_std * healthy_rng.truncated_normal(kTruncSigmas)
                               : 2.4e-3 + 0.1e-3 * background_rng.truncated_normal(kTruncSigmas);

                // Tumour spheres with a Gaussian-feathered 1-voxel boundary.
                bool in_tumour = false;
                for (const TumourComponent& t : tumours) {
                    const double dist = tumour_distance_mm(cfg, t, x, y, z);
                    const double tex = t.mean_d + kTumourTextureScale * cfg.tumour_d_std *
                                                      tumour_texture_rng.truncated_normal(kTruncSigmas);
                    if (dist <= 0.0) {
                        d = tex;
                        in_tumour = true;
                    } else {
                        const double wt = std::exp(-0.5 * (dist / feather_mm) * (dist / feather_mm));
                        d = wt * tex + (1.0 - wt) * d;
                    }
                }
                d_map[i] = d;
                tumour_mask.data[i] = (in_tumour && inside) ? 1.0f : 0.0f;
            }
        }
    }

    // DWI stack via the forward signal model, plus optional Gaussian noise.
    for (std::size_t j = 0; j < cfg.b_values.b_values.size(); ++j) {
        const double b = cfg.b_values.b_values[j];
        Volume dwi("dwi_b" + std::to_string(static_cast<int>(b)), nx, ny, nz, cfg.voxel_size_mm);
        Rng noise_rng(derive_seed(pseed, "dwi_noise", static_cast<std::uint64_t>(j)));
        for (std::size_t i = 0; i < dwi.data.size(); ++i) {
            double s = s0_map[i] * std::exp(-b * d_map[i]);
            if (cfg.noise_sigma > 0.0) s += cfg.noise_sigma * noise_rng.normal();
            dwi.data[i] = static_cast<float>(std::max(0.0, s));
        }
        pc.dwi_by_b.emplace_back(b, std::move(dwi));
    }

    // T2w: S0 scaled by 0.85 inside tumours (feathered like the D map).
    pc.t2w = Volume("t2w", nx, ny, nz, cfg.voxel_size_mm);
    for (int z = 0; z < nz; ++z) {
        for (int y = 0; y < ny; ++y) {
            for (int x = 0; x < nx; ++x) {
                const std::size_t i = pc.t2w.index(x, y, z);
                double wmax = 0.0;
                for (const TumourComponent& t : tumours) {
                    const double dist = tumour_distance_mm(cfg, t, x, y, z);
                    const double wt = dist <= 0.0
                                          ? 1.0
                                          : std::exp(-0.5 * (dist / feather_mm) * (dist / feather_mm));
                    wmax = std::max(wmax, wt);
                }
                pc.t2w.data[i] = static_cast<float>(s0_map[i] * (1.0 - (1.0 - kT2wTumourFactor) * wmax));
            }
        }
    }

    pc.prostate_mask = std::move(prostate);
    pc.tumour_mask = std::move(tumour_mask);

    // Derived modalities from the (possibly noisy) DWI stack.
    AdcMapResult fit = compute_adc_map(pc.dwi_by_b);
    pc.adc = std::move(fit.adc);
    pc.chb_dwi = compute_chb_dwi(pc.adc, fit.s0, 2000.0);
    pc.cdi = compute_cdi(pc.dwi_by_b, CDIConfig{});

    pc.validate();
    return {std::move(pc), std::move(tumours)};
}

} // namespace

Cohort generate_cohort(const PhantomConfig& cfg) {
    cfg.validate();
    Cohort cohort;
    cohort.manifest.seed = cfg.seed;
    for (int p = 0; p < cfg.n_patients; ++p) {
        GeneratedPatient gp = generate_patient(cfg, p);
        cohort.manifest.cases.push_back({gp.pc.patient_id, "cases/" + gp.pc.patient_id});
        cohort.ground_truth.tumours_by_patient[gp.pc.patient_id] = std::move(gp.tumours);
        cohort.cases.push_back(std::move(gp.pc));
    }
    return cohort;
}

nlohmann::json cohort_summary(const std::vector<PatientCase>& cases) {
    json out = json::array();
    for (const PatientCase& pc : cases) {
        std::size_t prostate_voxels = 0, tumour_voxels = 0;
        for (std::size_t i = 0; i < pc.prostate_mask.data.size(); ++i) {
            prostate_voxels += pc.prostate_mask.data[i] == 1.0f;
            tumour_voxels += pc.tumour_mask.data[i] == 1.0f;
        }
        const double voxel_mm3 =
            pc.t2w.voxel_size_mm[0] * pc.t2w.voxel_size_mm[1] * pc.t2w.voxel_size_mm[2];
        auto range = [](const Volume& v) {
            const auto [lo, hi] = std::minmax_element(v.data.begin(), v.data.end());
            return json{{"min", *lo}, {"max", *hi}};
        };
        json j;
        j["patient_id"] = pc.patient_id;
        j["age_years"] = pc.age_years;
        j["prostate_voxels"] = prostate_voxels;
        j["tumour_voxels"] = tumour_voxels;
        j["tumour_volume_mm3"] = static_cast<double>(tumour_voxels) * voxel_mm3;
        j["intensity_ranges"] = {{"t2w", range(pc.t2w)},
                                 {"adc", range(pc.adc)},
                                 {"chb_dwi", range(pc.chb_dwi)},
                                 {"cdi", range(pc.cdi)}};
        out.push_back(j);
    }
    return out;
}

void save_cohort_tree(const Cohort& cohort, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const PatientCase& pc : cohort.cases) save_case(pc, dir / "cases" / pc.patient_id);
    save_cohort(cohort.manifest, dir / "cohort.json");

    json gt;
    for (const auto& [pid, tumours] : cohort.ground_truth.tumours_by_patient) {
        json arr = json::array();
        for (const TumourComponent& t : tumours)
            arr.push_back({{"center_voxel", t.center_voxel},
                           {"radius_mm", t.radius_mm},
                           {"mean_d", t.mean_d}});
        gt[pid] = arr;
    }
    std::ofstream out(dir / "ground_truth.json", std::ios::trunc);
    if (!out) throw ParseError("cannot write ground_truth.json in '" + dir.string() + "'");
    out << gt.dump(2) << '\n';
}

Cohort load_cohort_tree(const std::filesystem::path& dir) {
    Cohort cohort;
    cohort.manifest = load_cohort(dir / "cohort.json");
    for (const auto& entry : cohort.manifest.cases)
        cohort.cases.push_back(load_case(dir / entry.path));

    const auto gt_path = dir / "ground_truth.json";
    if (std::filesystem::exists(gt_path)) {
        std::ifstream in(gt_path);
        json gt;
        try {
            in >> gt;
        } catch (const json::exception& e) {
            throw ParseError("'" + gt_path.string() + "': " + e.what());
        }
        for (const auto& [pid, arr] : gt.items()) {
            std::vector<TumourComponent> tumours;
            for (const auto& tj : arr) {
                TumourComponent t;
                const auto c = tj.at("center_voxel").get<std::vector<double>>();
                t.center_voxel = {c.at(0), c.at(1), c.at(2)};
                t.radius_mm = tj.at("radius_mm").get<double>();
                t.mean_d = tj.at("mean_d").get<double>();
                tumours.push_back(t);
            }
            cohort.ground_truth.tumours_by_patient[pid] = std::move(tumours);
        }
    }
    return cohort;
}

nlohmann::json phantom_config_to_json(const PhantomConfig& cfg) {
    json j;
    j["n_patients"] = cfg.n_patients;
    j["dims"] = cfg.dims;
    j["voxel_size_mm"] = cfg.voxel_size_mm;
    j["b_values"] = cfg.b_values.b_values;
    j["healthy_d_mean"] = cfg.healthy_d_mean;
    j["healthy_d_std"] = cfg.healthy_d_std;
    j["tumour_d_mean"] = cfg.tumour_d_mean;
    j["tumour_d_std"] = cfg.tumour_d_std;
    j["tumours_min"] = cfg.tumours_min;
    j["tumours_max"] = cfg.tumours_max;
    j["tumour_radius_mm_min"] = cfg.tumour_radius_mm_min;
    j["tumour_radius_mm_max"] = cfg.tumour_radius_mm_max;
    j["noise_sigma"] = cfg.noise_sigma;
    j["seed"] = cfg.seed;
    return j;
}

PhantomConfig phantom_config_from_json(const nlohmann::json& j) {
    reject_unknown_keys(j,
                        {"n_patients", "dims", "voxel_size_mm", "b_values", "healthy_d_mean",
                         "healthy_d_std", "tumour_d_mean", "tumour_d_std", "tumours_min", "tumours_max",
                         "tumour_radius_mm_min", "tumour_radius_mm_max", "noise_sigma", "seed"},
                        "phantom config");
    PhantomConfig cfg;
    try {
        if (j.contains("n_patients")) cfg.n_patients = j["n_patients"].get<int>();
        if (j.contains("dims")) cfg.dims = j["dims"].get<std::array<int, 3>>();
        if (j.contains("voxel_size_mm")) cfg.voxel_size_mm = j["voxel_size_mm"].get<std::array<double, 3>>();
        if (j.contains("b_values")) cfg.b_values.b_values = j["b_values"].get<std::vector<double>>();
        if (j.contains("healthy_d_mean")) cfg.healthy_d_mean = j["healthy_d_mean"].get<double>();
        if (j.contains("healthy_d_std")) cfg.healthy_d_std = j["healthy_d_std"].get<double>();
        if (j.contains("tumour_d_mean")) cfg.tumour_d_mean = j["tumour_d_mean"].get<double>();
        if (j.contains("tumour_d_std")) cfg.tumour_d_std = j["tumour_d_std"].get<double>();
        if (j.contains("tumours_min")) cfg.tumours_min = j["tumours_min"].get<int>();
        if (j.contains("tumours_max")) cfg.tumours_max = j["tumours_max"].get<int>();
        if (j.contains("tumour_radius_mm_min"))
            cfg.tumour_radius_mm_min = j["tumour_radius_mm_min"].get<double>();
        if (j.contains("tumour_radius_mm_max"))
            cfg.tumour_radius_mm_max = j["tumour_radius_mm_max"].get<double>();
        if (j.contains("noise_sigma")) cfg.noise_sigma = j["noise_sigma"].get<double>();
        if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("phantom config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

} // namespace radq
