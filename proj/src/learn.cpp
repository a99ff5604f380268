#include "radq/learn.hpp"

#include "radq/error.hpp"
#include "radq/rng.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace radq {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(std::span<const double> a) { return dot(a, a); }

} // namespace

ScgResult scg_minimize(const Objective& f, std::vector<double> x0, const ScgConfig& cfg) {
    if (x0.empty()) throw ConfigError("scg_minimize: empty parameter vector");
    if (!(cfg.sigma > 0.0)) throw ConfigError("scg_minimize: sigma must be positive");
    if (cfg.lambda_init < 0.0) throw ConfigError("scg_minimize: lambda must be >= 0");

    const std::size_t n = x0.size();
    ScgResult res;
    res.x = x0;

    std::vector<double> w = std::move(x0);
    std::vector<double> grad(n), grad_probe(n), r(n), p(n), w_trial(n), s(n);

    double fw = f(w, grad);
    res.initial_value = fw;
    if (!std::isfinite(fw)) throw NumericError("scg_minimize: objective not finite at the initial point");
    for (double g : grad)
        if (!std::isfinite(g)) throw NumericError("scg_minimize: gradient not finite at the initial point");

    for (std::size_t i = 0; i < n; ++i) r[i] = -grad[i];
    p = r;

    double best_value = fw;
    res.x = w;

    double lambda = cfg.lambda_init;
    double lambda_bar = 0.0;
    bool success = true;
    double raw_delta = 0.0; // p' * s from the last second-order probe
    int no_reduction_streak = 0;

    const int restart_every = static_cast<int>(n);
    int since_restart = 0;

    for (int k = 1; k <= cfg.max_iter; ++k) {
        const double p_norm2 = norm2(p);
        const double r_norm = std::sqrt(norm2(r));
        if (r_norm <= cfg.grad_tol) {
            res.status = ScgStatus::converged;
            break;
        }
        if (p_norm2 == 0.0) {
            p = r;
            since_restart = 0;
            continue;
        }

        if (success) {
            // Second-order information along p via a finite-difference probe.
            const double sigma_k = cfg.sigma / std::sqrt(p_norm2);
            for (std::size_t i = 0; i < n; ++i) w_trial[i] = w[i] + sigma_k * p[i];
            const double f_probe = f(w_trial, grad_probe);
            bool finite = std::isfinite(f_probe);
            for (double g : grad_probe) finite = finite && std::isfinite(g);
            if (!finite) {
                res.status = ScgStatus::aborted_non_finite;
                res.trace.push_back({k, f_probe, r_norm, lambda, false});
                break;
            }
            for (std::size_t i = 0; i < n; ++i) s[i] = (grad_probe[i] - grad[i]) / sigma_k;
            raw_delta = dot(p, s);
        }

        // Scale and, if needed, make the local curvature positive definite.
        double delta = raw_delta + (lambda - lambda_bar) * p_norm2;
        if (delta <= 0.0) {
            lambda_bar = 2.0 * (lambda - delta / p_norm2);
            delta = -delta + lambda * p_norm2;
            lambda = lambda_bar;
        }

        const double mu = dot(p, r);
        if (mu == 0.0) { // direction orthogonal to the gradient: restart on r
            p = r;
            since_restart = 0;
            success = true;
            continue;
        }
        const double alpha = mu / delta;

        for (std::size_t i = 0; i < n; ++i) w_trial[i] = w[i] + alpha * p[i];
        const double f_trial = f(w_trial, {});
        if (!std::isfinite(f_trial)) {
            res.status = ScgStatus::aborted_non_finite;
            res.trace.push_back({k, f_trial, r_norm, lambda, false});
            break;
        }
        const double comparison = 2.0 * delta * (fw - f_trial) / (mu * mu);

        if (comparison >= 0.0) {
            // Successful reduction. A zero reduction means the objective has
            // hit floating-point resolution; bail out after a short streak.
            no_reduction_streak = fw == f_trial ? no_reduction_streak + 1 : 0;
            w.swap(w_trial);
            fw = f_trial;
            const double f_check = f(w, grad);
            (void)f_check;
            bool finite = std::isfinite(fw);
            for (double g : grad) finite = finite && std::isfinite(g);
            if (!finite) {
                res.status = ScgStatus::aborted_non_finite;
                res.trace.push_back({k, fw, r_norm, lambda, true});
                break;
            }
            const double r_old_dot = dot(r, grad); // r_new = -grad
            double r_new_norm2 = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                r[i] = -grad[i];
                r_new_norm2 += r[i] * r[i];
            }
            lambda_bar = 0.0;
            success = true;
            if (++since_restart >= restart_every) {
                p = r;
                since_restart = 0;
            } else {
                const double beta = (r_new_norm2 + r_old_dot) / mu; // |r+|^2 - r+'r over mu
                for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
            }
            if (comparison >= 0.75) lambda *= 0.25;
            if (fw < best_value) {
                best_value = fw;
                res.x = w;
            }
        } else {
            lambda_bar = lambda;
            success = false;
        }
        if (comparison < 0.25) lambda += delta * (1.0 - comparison) / p_norm2;

        res.trace.push_back({k, fw, std::sqrt(norm2(r)), lambda, comparison >= 0.0});

        if (lambda > 1e18 || no_reduction_streak >= 3) {
            res.status = ScgStatus::stalled;
            break;
        }
        if (k == cfg.max_iter) res.status = ScgStatus::max_iterations;
    }
    if (res.trace.empty() || res.status == ScgStatus::max_iterations) {
        const double r_norm = std::sqrt(norm2(r));
        if (r_norm <= cfg.grad_tol) res.status = ScgStatus::converged;
    }
    res.value = best_value;
    return res;
}

namespace {

struct MlpShape {
    int input = 0, hidden = 0;
    std::size_t w1_off = 0, b1_off = 0, w2_off = 0, b2_off = 0, total = 0;
};

MlpShape mlp_shape(int input, int hidden) {
    MlpShape s;
    s.input = input;
    s.hidden = hidden;
    s.w1_off = 0;
    s.b1_off = s.w1_off + static_cast<std::size_t>(hidden) * input;
    s.w2_off = s.b1_off + hidden;
    s.b2_off = s.w2_off + 2 * static_cast<std::size_t>(hidden);
    s.total = s.b2_off + 2;
    return s;
}

// Mean cross-entropy and gradient over the standardized batch.
double mlp_loss(const MlpShape& sh, std::span<const double> theta,
                const std::vector<std::vector<double>>& xs, const std::vector<Label>& ys,
                std::span<double> grad) {
    const int in = sh.input, hid = sh.hidden;
    const double* w1 = theta.data() + sh.w1_off;
    const double* b1 = theta.data() + sh.b1_off;
    const double* w2 = theta.data() + sh.w2_off;
    const double* b2 = theta.data() + sh.b2_off;
    const bool want_grad = !grad.empty();
    if (want_grad) std::fill(grad.begin(), grad.end(), 0.0);

    std::vector<double> h(hid), dh(hid);
    double loss = 0.0;
    const double inv_n = 1.0 / static_cast<double>(xs.size());
    for (std::size_t s = 0; s < xs.size(); ++s) {
        const double* x = xs[s].data();
        for (int j = 0; j < hid; ++j) {
            double acc = b1[j];
            const double* row = w1 + static_cast<std::size_t>(j) * in;
            for (int i = 0; i < in; ++i) acc += row[i] * x[i];
            h[j] = std::tanh(acc);
        }
        double z0 = b2[0], z1 = b2[1];
        for (int j = 0; j < hid; ++j) {
            z0 += w2[j] * h[j];
            z1 += w2[hid + j] * h[j];
        }
        const double zmax = std::max(z0, z1);
        const double e0 = std::exp(z0 - zmax), e1 = std::exp(z1 - zmax);
        const double zsum = e0 + e1;
        const double log_p_true = (ys[s] == Label::cancerous ? z1 : z0) - zmax - std::log(zsum);
        loss -= log_p_true * inv_n;

        if (want_grad) {
            const double p0 = e0 / zsum, p1 = e1 / zsum;
            const double g0 = (p0 - (ys[s] == Label::healthy ? 1.0 : 0.0)) * inv_n;
            const double g1 = (p1 - (ys[s] == Label::cancerous ? 1.0 : 0.0)) * inv_n;
            grad[sh.b2_off] += g0;
            grad[sh.b2_off + 1] += g1;
            for (int j = 0; j < hid; ++j) {
                grad[sh.w2_off + j] += g0 * h[j];
                grad[sh.w2_off + hid + j] += g1 * h[j];
                dh[j] = (g0 * w2[j] + g1 * w2[hid + j]) * (1.0 - h[j] * h[j]);
            }
            for (int j = 0; j < hid; ++j) {
                grad[sh.b1_off + j] += dh[j];
                double* grow = grad.data() + sh.w1_off + static_cast<std::size_t>(j) * in;
                for (int i = 0; i < in; ++i) grow[i] += dh[j] * x[i];
            }
        }
    }
    return loss;
}

} // namespace

std::size_t mlp_param_count(int input_dim, int hidden) { return mlp_shape(input_dim, hidden).total; }

double mlp_objective(int input_dim, int hidden, std::span<const double> theta,
                     const std::vector<std::vector<double>>& inputs, const std::vector<Label>& labels,
                     std::span<double> grad) {
    const MlpShape sh = mlp_shape(input_dim, hidden);
    if (theta.size() != sh.total) throw ConfigError("mlp_objective: parameter length mismatch");
    return mlp_loss(sh, theta, inputs, labels, grad);
}

std::array<double, 2> MlpClassifier::predict_probs(std::span<const double> x) const {
    if (static_cast<int>(x.size()) != input_dim) throw NumericError("predict: feature length mismatch");
    std::vector<double> xs(input_dim);
    for (int i = 0; i < input_dim; ++i) xs[i] = (x[i] - feat_mean[i]) / feat_std[i];

    std::vector<double> h(hidden);
    for (int j = 0; j < hidden; ++j) {
        double acc = b1[j];
        const double* row = w1.data() + static_cast<std::size_t>(j) * input_dim;
        for (int i = 0; i < input_dim; ++i) acc += row[i] * xs[i];
        h[j] = std::tanh(acc);
    }
    double z0 = b2[0], z1 = b2[1];
    for (int j = 0; j < hidden; ++j) {
        z0 += w2[j] * h[j];
        z1 += w2[hidden + j] * h[j];
    }
    const double zmax = std::max(z0, z1);
    const double e0 = std::exp(z0 - zmax), e1 = std::exp(z1 - zmax);
    return {e0 / (e0 + e1), e1 / (e0 + e1)};
}

Label MlpClassifier::predict(std::span<const double> x) const {
    const auto probs = predict_probs(x);
    return probs[1] > probs[0] ? Label::cancerous : Label::healthy;
}

MlpClassifier train_classifier(const std::vector<std::vector<double>>& features,
                               const std::vector<Label>& labels, std::uint64_t seed,
                               const MlpConfig& cfg) {
    if (features.empty() || features.size() != labels.size())
        throw ConfigError("train_classifier: empty or mismatched inputs");
    const int in = static_cast<int>(features.front().size());
    for (const auto& f : features)
        if (static_cast<int>(f.size()) != in) throw ConfigError("train_classifier: ragged features");

    MlpClassifier model;
    model.input_dim = in;
    model.hidden = cfg.hidden;
    model.feat_mean.assign(in, 0.0);
    model.feat_std.assign(in, 0.0);

    const double n = static_cast<double>(features.size());
    for (const auto& f : features)
        for (int i = 0; i < in; ++i) model.feat_mean[i] += f[i];
    for (int i = 0; i < in; ++i) model.feat_mean[i] /= n;
    for (const auto& f : features)
        for (int i = 0; i < in; ++i) {
            const double d = f[i] - model.feat_mean[i];
            model.feat_std[i] += d * d;
        }
    for (int i = 0; i < in; ++i) {
        model.feat_std[i] = std::sqrt(model.feat_std[i] / n);
        if (model.feat_std[i] == 0.0) model.feat_std[i] = 1.0; // constant feature passes through
    }

    std::vector<std::vector<double>> xs(features.size(), std::vector<double>(in));
    for (std::size_t s = 0; s < features.size(); ++s)
        for (int i = 0; i < in; ++i)
            xs[s][i] = (features[s][i] - model.feat_mean[i]) / model.feat_std[i];

    const MlpShape sh = mlp_shape(in, cfg.hidden);
    std::vector<double> theta(sh.total, 0.0);
    Rng rng(derive_seed(seed, "mlp_init"));
    const double r1 = 1.0 / std::sqrt(static_cast<double>(in));
    for (std::size_t i = sh.w1_off; i < sh.b1_off; ++i) theta[i] = rng.uniform(-r1, r1);
    const double r2 = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
    for (std::size_t i = sh.w2_off; i < sh.b2_off; ++i) theta[i] = rng.uniform(-r2, r2);

    const Objective obj = [&](std::span<const double> x, std::span<double> grad) {
        return mlp_loss(sh, x, xs, labels, grad);
    };
    ScgResult res = scg_minimize(obj, std::move(theta), cfg.scg);
    if (res.status == ScgStatus::aborted_non_finite)
        throw NumericError("train_classifier: non-finite objective during optimization");

    model.w1.assign(res.x.begin() + sh.w1_off, res.x.begin() + sh.b1_off);
    model.b1.assign(res.x.begin() + sh.b1_off, res.x.begin() + sh.w2_off);
    model.w2.assign(res.x.begin() + sh.w2_off, res.x.begin() + sh.b2_off);
    model.b2.assign(res.x.begin() + sh.b2_off, res.x.end());
    return model;
}

namespace {

using FamilyKey = std::pair<std::string, int>;

// Majority-class subsampling at family granularity; keys sorted, shuffle seeded.
std::set<FamilyKey> choose_balanced(const std::map<FamilyKey, Label>& family_labels, std::uint64_t seed) {
    std::vector<FamilyKey> healthy, cancer;
    for (const auto& [key, label] : family_labels)
        (label == Label::cancerous ? cancer : healthy).push_back(key);
    if (cancer.empty()) throw NumericError("balance: no cancerous candidates");
    if (healthy.empty()) throw NumericError("balance: no healthy candidates");
    const std::size_t target = std::min(healthy.size(), cancer.size());
    Rng rng(derive_seed(seed, "balance"));
    if (healthy.size() > target) {
        rng.shuffle(healthy);
        healthy.resize(target);
    } else if (cancer.size() > target) {
        rng.shuffle(cancer);
        cancer.resize(target);
    }
    std::set<FamilyKey> keep(healthy.begin(), healthy.end());
    keep.insert(cancer.begin(), cancer.end());
    return keep;
}

} // namespace

std::vector<FoldResult> run_lopo(const std::vector<FeatureRecord>& records, std::uint64_t seed,
                                 const LopoConfig& cfg) {
    if (records.empty()) throw ConfigError("run_lopo: no records");
    std::set<std::string> patients;
    for (const auto& r : records) patients.insert(r.patient_id);
    if (patients.size() < 2) throw ConfigError("run_lopo: need at least 2 patients");

    std::vector<FoldResult> folds;
    std::uint64_t fold_index = 0;
    for (const std::string& test_patient : patients) {
        const std::uint64_t fold_seed = derive_seed(seed, "fold", fold_index++);
        FoldResult fold;
        fold.test_patient = test_patient;

        // Train pool: all other patients, originals or full rotation families.
        std::map<FamilyKey, Label> train_families;
        for (const auto& r : records) {
            if (r.patient_id == test_patient) continue;
            if (!cfg.train_rotations && r.rotation_index != 0) continue;
            train_families[{r.patient_id, r.source_index}] = r.label;
        }
        // Test pool: held-out patient's originals only.
        std::map<FamilyKey, Label> test_families;
        for (const auto& r : records) {
            if (r.patient_id != test_patient || r.rotation_index != 0) continue;
            test_families[{r.patient_id, r.source_index}] = r.label;
        }

        bool test_has_cancer = false, test_has_healthy = false;
        for (const auto& [key, label] : test_families) {
            test_has_cancer |= (label == Label::cancerous);
            test_has_healthy |= (label == Label::healthy);
        }
        if (!test_has_cancer || !test_has_healthy) {
            fold.skipped = true;
            folds.push_back(std::move(fold));
            continue;
        }

        const auto train_keep = choose_balanced(train_families, derive_seed(fold_seed, "train"));
        const auto test_keep = choose_balanced(test_families, derive_seed(fold_seed, "test"));

        std::vector<std::vector<double>> train_x;
        std::vector<Label> train_y;
        for (const auto& r : records) {
            if (r.patient_id == test_patient) continue;
            if (!cfg.train_rotations && r.rotation_index != 0) continue;
            if (!train_keep.count({r.patient_id, r.source_index})) continue;
            train_x.push_back(r.features);
            train_y.push_back(r.label);
        }
        fold.train_families.assign(train_keep.begin(), train_keep.end());

        const MlpClassifier model =
            train_classifier(train_x, train_y, derive_seed(fold_seed, "mlp"), cfg.mlp);

        for (const auto& r : records) {
            if (r.patient_id != test_patient || r.rotation_index != 0) continue;
            if (!test_keep.count({r.patient_id, r.source_index})) continue;
            const auto probs = model.predict_probs(r.features);
            const Label pred = probs[1] > probs[0] ? Label::cancerous : Label::healthy;
            fold.predictions.push_back(
                {r.patient_id, r.source_index, r.rotation_index, r.label, pred, probs[1]});
            if (r.label == Label::cancerous)
                (pred == Label::cancerous ? fold.counts.tp : fold.counts.fn)++;
            else
                (pred == Label::healthy ? fold.counts.tn : fold.counts.fp)++;
        }
        folds.push_back(std::move(fold));
    }
    return folds;
}

void audit_lopo_leakage(const std::vector<FeatureRecord>& records,
                        const std::vector<FoldResult>& folds) {
    // Family -> patient consistency over the whole record set.
    std::map<FamilyKey, std::string> family_patient;
    for (const auto& r : records) {
        const FamilyKey key{r.patient_id, r.source_index};
        auto [it, inserted] = family_patient.emplace(key, r.patient_id);
        if (!inserted && it->second != r.patient_id)
            throw NumericError("leakage audit: rotation family split across patients");
    }
    for (const auto& fold : folds) {
        if (fold.skipped) continue;
        for (const auto& fam : fold.train_families)
            if (fam.first == fold.test_patient)
                throw NumericError("leakage audit: fold '" + fold.test_patient +
                                   "' trains on its own test patient");
        for (const auto& pred : fold.predictions) {
            if (pred.patient_id != fold.test_patient)
                throw NumericError("leakage audit: test prediction from a foreign patient");
            for (const auto& fam : fold.train_families)
                if (fam.first == pred.patient_id && fam.second == pred.source_index)
                    throw NumericError("leakage audit: rotation family straddles train/test");
        }
    }
}

} // namespace radq
