// Acceptance suite: ten criteria, one pass/fail line each. Exit code is the
// number of failed criteria.

#include "radq/baseline.hpp"
#include "radq/candidates.hpp"
#include "radq/error.hpp"
#include "radq/eval.hpp"
#include "radq/learn.hpp"
#include "radq/mri.hpp"
#include "radq/phantom.hpp"
#include "radq/pipeline.hpp"
#include "radq/rng.hpp"
#include "radq/sequencer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

using namespace radq;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int g_failures = 0;
std::vector<std::string> g_notes;

void note(const std::string& s) { g_notes.push_back(s); }

void criterion(int number, const std::string& name, const std::function<bool()>& body) {
    const auto start = std::chrono::steady_clock::now();
    bool ok = false;
    std::string error;
    try {
        ok = body();
    } catch (const std::exception& e) {
        error = e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%s] criterion %2d: %s (%.2f s)%s%s\n", ok ? "PASS" : "FAIL", number, name.c_str(),
                secs, error.empty() ? "" : " error: ", error.c_str());
    for (const std::string& n : g_notes) std::printf("       - %s\n", n.c_str());
    g_notes.clear();
    std::fflush(stdout);
    if (!ok) ++g_failures;
}

bool approx_rel(double a, double b, double tol) {
    return std::abs(a - b) <= tol * std::max({std::abs(a), std::abs(b), 1e-300});
}

// --------------------------------------------------------------------------
// 1. signal-model oracles
// --------------------------------------------------------------------------
bool signal_model_oracles() {
    bool ok = true;

    Rng rng(1001);
    for (int it = 0; it < 200; ++it) {
        const DiffusionParams truth{rng.uniform(50.0, 3000.0), rng.uniform(1e-4, 3.5e-3)};
        std::vector<std::pair<double, double>> samples;
        double b = 0.0;
        const int n = 2 + (int)rng.below(4);
        for (int i = 0; i < n; ++i) {
            samples.emplace_back(b, dwi_signal(truth, b));
            b += rng.uniform(100.0, 500.0);
        }
        const DiffusionParams fit = fit_adc(samples);
        ok &= approx_rel(fit.s0, truth.s0, 1e-9) && approx_rel(fit.d, truth.d, 1e-9);
    }

    const int nx = 8, ny = 8, nz = 2;
    std::vector<DiffusionParams> truth(nx * ny * nz);
    for (auto& p : truth) p = {rng.uniform(200.0, 1500.0), rng.uniform(0.5e-3, 2.5e-3)};
    std::vector<std::pair<double, Volume>> dwi;
    for (double b : {0.0, 100.0, 400.0, 1000.0}) {
        Volume v("dwi", nx, ny, nz);
        for (std::size_t i = 0; i < v.data.size(); ++i)
            v.data[i] = static_cast<float>(dwi_signal(truth[i], b));
        dwi.emplace_back(b, std::move(v));
    }
    const AdcMapResult fitmap = compute_adc_map(dwi);
    const Volume chb = compute_chb_dwi(fitmap.adc, fitmap.s0, 2000.0);
    for (std::size_t i = 0; i < chb.data.size(); ++i)
        ok &= approx_rel(chb.data[i], dwi_signal(truth[i], 2000.0), 1e-5);

    CDIConfig cfg;
    cfg.window_radius = 1;
    cfg.normalize_inputs = false;
    std::vector<std::pair<double, Volume>> consts;
    for (double b : {0.0, 50.0, 150.0}) {
        Volume v("c", 6, 6, 2);
        for (auto& x : v.data) x = 1.5f;
        consts.emplace_back(b, std::move(v));
    }
    for (float v : compute_cdi(consts, cfg).data) ok &= (v == 3.375f);
    return ok;
}

// --------------------------------------------------------------------------
// 2. threshold mask suite
// --------------------------------------------------------------------------
bool mask_suite() {
    bool ok = true;
    Volume v("cdi", 4, 1, 1);
    v.data = {1, 4, 6, 10};
    ok &= threshold_cdi(v).mask.data == std::vector<float>{0, 0, 1, 1};

    Volume edge("cdi", 3, 1, 1);
    edge.data = {1, 5, 10}; // exactly max/2 stays out (strict)
    ok &= threshold_cdi(edge).mask.data == std::vector<float>{0, 0, 1};

    Rng rng(1002);
    for (int it = 0; it < 100; ++it) {
        Volume r("cdi", 30, 1, 1);
        for (auto& x : r.data) x = static_cast<float>(rng.uniform(0.0, 100.0));
        const auto base = threshold_cdi(r).mask.data;
        for (const float c : {2.0f, 0.25f, 3.7f, 41.5f}) {
            Volume s = r;
            for (auto& x : s.data) x *= c;
            ok &= threshold_cdi(s).mask.data == base;
        }
    }

    Volume flat("cdi", 5, 1, 1);
    for (auto& x : flat.data) x = 2.5f;
    try {
        threshold_cdi(flat);
        ok = false;
    } catch (const NumericError&) {
    }
    return ok;
}

// --------------------------------------------------------------------------
// 3. augmentation suite
// --------------------------------------------------------------------------
bool augmentation_suite() {
    bool ok = true;
    auto make_set = [](int n, Label label, int size) {
        std::vector<Candidate> out;
        Rng rng(2000 + n);
        for (int i = 0; i < n; ++i) {
            Candidate c;
            c.patient_id = "p" + std::to_string(i % 20);
            c.source_index = i;
            c.label = label;
            c.patch = Tensor3f(kPatchChannels, size, size);
            for (auto& v : c.patch.v) v = static_cast<float>(rng.normal());
            out.push_back(std::move(c));
        }
        return out;
    };

    // the 80 -> 640 and 714 -> 5712 counts
    ok &= augment_rotations(make_set(80, Label::cancerous, 8)).size() == 640;
    ok &= augment_rotations(make_set(714, Label::healthy, 8)).size() == 5712;

    // 90-degree multiples are pixel-exact permutations; 4 compositions = identity
    const auto src = make_set(3, Label::cancerous, 32);
    const auto aug = augment_rotations(src);
    ok &= aug.size() == 24;
    for (int i = 0; i < 3; ++i) {
        const Tensor3f& p = src[i].patch;
        ok &= aug[8 * i + 0].patch.v == p.v;
        ok &= aug[8 * i + 2].patch.v == rotate_patch90(p).v;
        ok &= aug[8 * i + 4].patch.v == rotate_patch90(rotate_patch90(p)).v;
        ok &= aug[8 * i + 6].patch.v == rotate_patch90(rotate_patch90(rotate_patch90(p))).v;
        ok &= rotate_patch90(rotate_patch90(rotate_patch90(rotate_patch90(p)))).v == p.v;
        for (int k = 0; k < 8; ++k) ok &= aug[8 * i + k].rotation_index == k;
    }
    return ok;
}

// --------------------------------------------------------------------------
// 4. sequencer structural suite (desk profile)
// --------------------------------------------------------------------------
bool sequencer_structural_suite() {
    bool ok = true;
    const LayerPlan desk = make_plan("desk", 8);
    const SequencerModel m = make_model(desk, 41);

    ok &= trained_scalar_count(m) < 1100;
    ok &= realized_weight_count(desk) > 100000;
    note("trained scalars: " + std::to_string(trained_scalar_count(m)) +
         ", realized weights: " + std::to_string(realized_weight_count(desk)));

    NetWeights<float> w;
    w.init(m);
    Tensor3f patch(4, 32, 32);
    Rng rng(1003);
    for (auto& v : patch.v) v = static_cast<float>(rng.normal());

    NetTape<float> tape;
    const std::vector<float> seq = net_forward(w, patch, &tape);
    ok &= seq.size() == 500;
    for (float v : seq) ok &= std::isfinite(v);
    ok &= tape.x.size() == 18;
    for (const auto& x : tape.x) ok &= (x.h == 32 && x.w == 32);

    NetWeights<float> w2;
    w2.init(m);
    ok &= net_forward(w2, patch) == seq;

    std::vector<Candidate> cands;
    for (int i = 0; i < 6; ++i) {
        Candidate c;
        c.patient_id = "p" + std::to_string(i);
        c.source_index = i;
        c.label = i % 2 ? Label::cancerous : Label::healthy;
        c.patch = patch;
        for (auto& v : c.patch.v) v += static_cast<float>(0.01 * i);
        cands.push_back(std::move(c));
    }
    const auto s1 = sequence_batch(m, cands, 1);
    const auto s4 = sequence_batch(m, cands, 4);
    for (std::size_t i = 0; i < s1.size(); ++i) ok &= s1[i].values == s4[i].values;

    DiscoveryProblem<float> p1(m, cands, DiscoveryProblem<float>::PsiMode::squashed, 1);
    DiscoveryProblem<float> p4(m, cands, DiscoveryProblem<float>::PsiMode::squashed, 4);
    DiscoveryHead head;
    head.w.assign(1000, 0.0);
    Rng hr(1004);
    for (auto& v : head.w) v = 0.01 * hr.normal();
    const auto x = p1.pack(m, head);
    std::vector<double> g1(p1.dim()), g4(p4.dim());
    const double f1 = p1.eval(x, g1);
    const double f4 = p4.eval(x, g4);
    ok &= (f1 == f4) && (g1 == g4);
    note("threads 1 vs 4: loss and gradient bit-identical");
    return ok;
}

// --------------------------------------------------------------------------
// 5. random-field suite
// --------------------------------------------------------------------------
struct Lag1 {
    double r = 0.0;
    double se = 0.0;
    std::size_t pairs = 0;
};

Lag1 lag1(const std::vector<double>& bank) {
    double ma = 0, mb = 0;
    std::size_t n = 0;
    const std::size_t slices = bank.size() / 25;
    for (std::size_t s = 0; s < slices; ++s)
        for (int u = 0; u < 5; ++u)
            for (int v = 0; v + 1 < 5; ++v) {
                ma += bank[s * 25 + u * 5 + v];
                mb += bank[s * 25 + u * 5 + v + 1];
                ++n;
            }
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t s = 0; s < slices; ++s)
        for (int u = 0; u < 5; ++u)
            for (int v = 0; v + 1 < 5; ++v) {
                const double a = bank[s * 25 + u * 5 + v] - ma;
                const double b = bank[s * 25 + u * 5 + v + 1] - mb;
                sab += a * b;
                saa += a * a;
                sbb += b * b;
            }
    Lag1 out;
    out.r = sab / std::sqrt(saa * sbb);
    out.pairs = n;
    out.se = std::sqrt((1.0 - out.r * out.r) / (n - 2.0));
    return out;
}

bool random_field_suite() {
    bool ok = true;
    const LayerPlan desk = make_plan("desk", 8);
    // layer 16: 250 fields x 64 input slices -> 320k adjacent pairs
    auto bank_r = [&](double psi) { return lag1(realize_field_bank(desk, 16, 424242, psi)); };

    const Lag1 at_min = bank_r(kPsiMin);
    ok &= at_min.pairs >= 100000;
    ok &= std::abs(at_min.r) < 0.05;
    std::ostringstream oss;
    oss << "lag-1 r at psi_min: " << at_min.r << " over " << at_min.pairs << " pairs";
    note(oss.str());

    double prev_r = -1.0, prev_se = 0.0;
    std::ostringstream grid;
    grid << "r over psi grid {0.25, 0.5, 1.0, 2.0}:";
    for (const double psi : {0.25, 0.5, 1.0, 2.0}) {
        const Lag1 cur = bank_r(psi);
        ok &= cur.pairs >= 100000;
        ok &= cur.r >= prev_r - 2.0 * (cur.se + prev_se);
        grid << " " << cur.r;
        prev_r = cur.r;
        prev_se = cur.se;
    }
    note(grid.str());
    return ok;
}

// --------------------------------------------------------------------------
// 6. gradient suite
// --------------------------------------------------------------------------
bool gradient_suite() {
    bool ok = true;

    // 2-layer desk-profile model: the first two desk conv layers + FC stack
    LayerPlan plan;
    plan.profile = "custom";
    plan.conv_channels = {8, 8};
    plan.fc_widths = {1000, 500};
    plan.input_channels = 4;
    plan.patch_size = 32;
    const SequencerModel base = make_model(plan, 4100, 0.6);

    std::vector<Candidate> cands;
    Rng crng(4101);
    for (int i = 0; i < 8; ++i) {
        Candidate c;
        c.patient_id = "p";
        c.source_index = i;
        c.label = i % 2 ? Label::cancerous : Label::healthy;
        c.patch = Tensor3f(4, 32, 32);
        const float shift = c.label == Label::cancerous ? 0.6f : -0.6f;
        for (auto& v : c.patch.v) v = static_cast<float>(crng.normal()) + shift;
        cands.push_back(std::move(c));
    }
    DiscoveryProblem<double> problem(base, cands, DiscoveryProblem<double>::PsiMode::raw, 1);
    DiscoveryHead head;
    head.w.assign(1000, 0.0);
    Rng hr(4102);
    for (auto& v : head.w) v = 0.2 * hr.normal();
    head.b = {0.03, -0.06};
    const std::vector<double> x = problem.pack(base, head);
    std::vector<double> grad(problem.dim());
    problem.eval(x, grad);

    // Stencil below the subgradient-boundary spacing: the loss is piecewise
    // smooth (median pooling, AVReU), and at this scale an h = 1e-4 stencil
    // always straddles an argmedian flip on some coordinate.
    const double h = 1e-6;
    double worst = 0.0;
    auto fd_check = [&](std::size_t k) {
        std::vector<double> xp = x, xm = x;
        xp[k] += h;
        xm[k] -= h;
        const double fd = (problem.eval(xp, {}) - problem.eval(xm, {})) / (2 * h);
        const double denom = std::max({std::abs(fd), std::abs(grad[k]), 1e-8});
        const double rel = std::abs(grad[k] - fd) / denom;
        worst = std::max(worst, rel);
        return rel < 1e-4;
    };
    for (std::size_t k = 0; k < 10; ++k) ok &= fd_check(k); // psi, gain, bias, fc scalars
    for (std::size_t k = 10; k < problem.dim(); k += 83) ok &= fd_check(k); // head samples
    ok &= fd_check(problem.dim() - 2);
    ok &= fd_check(problem.dim() - 1);
    {
        std::ostringstream oss;
        oss << "sequencer worst relative error: " << worst << " (h = 1e-6)";
        note(oss.str());
    }

    const int input = 5, hidden = 11;
    Rng rng(4103);
    std::vector<std::vector<double>> xs;
    std::vector<Label> ys;
    for (int i = 0; i < 16; ++i) {
        std::vector<double> xi(input);
        for (auto& v : xi) v = rng.normal();
        xs.push_back(xi);
        ys.push_back(i % 2 ? Label::cancerous : Label::healthy);
    }
    const std::size_t dim = mlp_param_count(input, hidden);
    std::vector<double> theta(dim);
    for (auto& t : theta) t = 0.4 * rng.normal();
    std::vector<double> mg(dim);
    mlp_objective(input, hidden, theta, xs, ys, mg);
    double worst_mlp = 0.0;
    const double hm = 1e-6;
    for (std::size_t k = 0; k < dim; k += 3) {
        std::vector<double> tp = theta, tm = theta;
        tp[k] += hm;
        tm[k] -= hm;
        const double fd = (mlp_objective(input, hidden, tp, xs, ys, {}) -
                           mlp_objective(input, hidden, tm, xs, ys, {})) /
                          (2 * hm);
        const double denom = std::max({std::abs(fd), std::abs(mg[k]), 1e-8});
        const double rel = std::abs(mg[k] - fd) / denom;
        worst_mlp = std::max(worst_mlp, rel);
        ok &= rel < 1e-5;
    }
    {
        std::ostringstream oss;
        oss << "classifier worst relative error: " << worst_mlp;
        note(oss.str());
    }
    return ok;
}

// --------------------------------------------------------------------------
// 7. SCG suite
// --------------------------------------------------------------------------
bool scg_suite() {
    bool ok = true;

    const int n = 50;
    Rng rng(4200);
    std::vector<std::vector<double>> m(n, std::vector<double>(n));
    for (auto& row : m)
        for (auto& v : row) v = rng.normal();
    std::vector<std::vector<double>> a(n, std::vector<double>(n, 0.0));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            for (int k = 0; k < n; ++k) a[i][j] += m[k][i] * m[k][j] / n;
            if (i == j) a[i][j] += 1.0;
        }
    std::vector<double> x_star(n);
    for (auto& v : x_star) v = rng.uniform(-2.0, 2.0);

    const Objective f = [&](std::span<const double> w, std::span<double> g) {
        std::vector<double> d(n);
        for (int i = 0; i < n; ++i) d[i] = w[i] - x_star[i];
        double v = 0.0;
        for (int i = 0; i < n; ++i) {
            double ad = 0.0;
            for (int j = 0; j < n; ++j) ad += a[i][j] * d[j];
            v += 0.5 * d[i] * ad;
            if (!g.empty()) g[i] = ad;
        }
        return v;
    };
    ScgConfig cfg;
    cfg.max_iter = 200;
    cfg.grad_tol = 1e-12;
    const ScgResult res = scg_minimize(f, std::vector<double>(n, 0.0), cfg);
    ok &= res.trace.size() <= 200;

    std::vector<double> b(n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) b[i] += a[i][j] * x_star[j];
    std::vector<std::vector<double>> aa = a;
    std::vector<double> bb = b;
    for (int col = 0; col < n; ++col) {
        int pivot = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(aa[r][col]) > std::abs(aa[pivot][col])) pivot = r;
        std::swap(aa[col], aa[pivot]);
        std::swap(bb[col], bb[pivot]);
        for (int r = col + 1; r < n; ++r) {
            const double fct = aa[r][col] / aa[col][col];
            for (int c = col; c < n; ++c) aa[r][c] -= fct * aa[col][c];
            bb[r] -= fct * bb[col];
        }
    }
    std::vector<double> direct(n);
    for (int r = n - 1; r >= 0; --r) {
        double s = bb[r];
        for (int c = r + 1; c < n; ++c) s -= aa[r][c] * direct[c];
        direct[r] = s / aa[r][r];
    }
    double max_err = 0.0;
    for (int i = 0; i < n; ++i) max_err = std::max(max_err, std::abs(res.x[i] - direct[i]));
    ok &= max_err < 1e-8;
    {
        std::ostringstream oss;
        oss << "quadratic vs direct solve: max error " << max_err << " in " << res.trace.size()
            << " iterations";
        note(oss.str());
    }

    double last = res.initial_value;
    for (const auto& t : res.trace) {
        if (t.success) {
            ok &= t.value <= last;
            last = t.value;
        }
        ok &= t.lambda >= 0.0;
    }

    std::vector<std::vector<double>> xs;
    std::vector<Label> ys;
    Rng brng(4201);
    for (int i = 0; i < 100; ++i) {
        xs.push_back({-2.0 + 0.5 * brng.normal(), 0.5 * brng.normal()});
        ys.push_back(Label::healthy);
        xs.push_back({2.0 + 0.5 * brng.normal(), 0.5 * brng.normal()});
        ys.push_back(Label::cancerous);
    }
    MlpConfig mcfg;
    mcfg.scg.max_iter = 150;
    const MlpClassifier clf = train_classifier(xs, ys, 4202, mcfg);
    int correct = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) correct += clf.predict(xs[i]) == ys[i];
    const double acc = static_cast<double>(correct) / xs.size();
    ok &= acc >= 0.99;
    note("separable-blob train accuracy: " + std::to_string(acc));
    return ok;
}

// --------------------------------------------------------------------------
// 8. baseline texture suite
// --------------------------------------------------------------------------
bool baseline_suite() {
    bool ok = true;

    Tensor3f flat(kPatchChannels, 16, 16);
    for (auto& v : flat.v) v = 4.5f;
    const auto cf = glcm_features(flat, 0, {0, 1});
    ok &= cf[0] == 0.0 && cf[2] == 1.0 && cf[3] == 1.0 && cf[4] == 0.0;

    Tensor3f cb(kPatchChannels, 16, 16);
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 16; ++c) cb.at(0, r, c) = (r + c) % 2 ? 7.0f : 3.0f;
    const auto cbf = glcm_features(cb, 0, {0, 1});
    ok &= std::abs(cbf[0] - 225.0) < 1e-12;
    ok &= std::abs(cbf[2] - 0.5) < 1e-12;

    Rng rng(4300);
    for (int it = 0; it < 12; ++it) {
        Tensor3f p(kPatchChannels, 32, 32);
        for (auto& v : p.v) v = static_cast<float>(rng.uniform(-2.0, 5.0));
        for (const auto& offset : kGlcmOffsets) {
            const int h = p.h, wdt = p.w;
            const float* ch = p.channel(0);
            float lo = ch[0], hi = ch[0];
            for (int i = 1; i < h * wdt; ++i) {
                lo = std::min(lo, ch[i]);
                hi = std::max(hi, ch[i]);
            }
            auto lev = [&](float v) {
                const int q = static_cast<int>((static_cast<double>(v) - lo) /
                                               (static_cast<double>(hi) - lo) * kGlcmLevels);
                return std::min(std::max(q, 0), kGlcmLevels - 1);
            };
            std::vector<double> mat(kGlcmLevels * kGlcmLevels, 0.0);
            double total = 0.0;
            for (int r = 0; r < h; ++r)
                for (int c = 0; c < wdt; ++c) {
                    const int r2 = r + offset[0], c2 = c + offset[1];
                    if (r2 < 0 || r2 >= h || c2 < 0 || c2 >= wdt) continue;
                    mat[lev(ch[r * wdt + c]) * kGlcmLevels + lev(ch[r2 * wdt + c2])] += 1.0;
                    mat[lev(ch[r2 * wdt + c2]) * kGlcmLevels + lev(ch[r * wdt + c])] += 1.0;
                    total += 2.0;
                }
            double sum = 0.0;
            for (auto& v : mat) {
                v /= total;
                sum += v;
            }
            ok &= std::abs(sum - 1.0) < 1e-12;

            double mu = 0, var = 0;
            std::vector<double> marg(kGlcmLevels, 0.0);
            for (int i = 0; i < kGlcmLevels; ++i)
                for (int j = 0; j < kGlcmLevels; ++j) marg[i] += mat[i * kGlcmLevels + j];
            for (int i = 0; i < kGlcmLevels; ++i) mu += i * marg[i];
            for (int i = 0; i < kGlcmLevels; ++i) var += (i - mu) * (i - mu) * marg[i];
            double contrast = 0, corr = 0, energy = 0, homog = 0, entropy = 0;
            for (int i = 0; i < kGlcmLevels; ++i)
                for (int j = 0; j < kGlcmLevels; ++j) {
                    const double pij = mat[i * kGlcmLevels + j];
                    if (pij == 0) continue;
                    contrast += pij * (i - j) * (i - j);
                    energy += pij * pij;
                    homog += pij / (1 + std::abs(i - j));
                    entropy -= pij * std::log2(pij);
                    if (var > 0) corr += (i - mu) * (j - mu) * pij / var;
                }
            const auto f = glcm_features(p, 0, offset);
            ok &= std::abs(f[0] - contrast) < 1e-10;
            ok &= std::abs(f[1] - corr) < 1e-10;
            ok &= std::abs(f[2] - energy) < 1e-10;
            ok &= std::abs(f[3] - homog) < 1e-10;
            ok &= std::abs(f[4] - entropy) < 1e-10;
        }
    }

    Tensor3f p(kPatchChannels, 32, 32);
    for (auto& v : p.v) v = static_cast<float>(rng.uniform(0.0, 9.0));
    const Tensor3f r90 = rotate_patch90(p);
    for (int ch = 0; ch < kPatchChannels; ++ch) {
        const auto f01 = glcm_features(p, ch, {0, 1});
        const auto f10 = glcm_features(r90, ch, {1, 0});
        for (int k = 0; k < kGlcmFeatureCount; ++k) ok &= f01[k] == f10[k];
    }
    return ok;
}

// --------------------------------------------------------------------------
// 9. statistics suite
// --------------------------------------------------------------------------
double t_density(double x, double df) {
    const double c =
        std::exp(std::lgamma((df + 1) / 2) - std::lgamma(df / 2)) / std::sqrt(df * std::acos(-1.0));
    return c * std::pow(1.0 + x * x / df, -(df + 1) / 2);
}

double simpson(double a, double b, double df, int n) {
    const double h = (b - a) / n;
    double s = t_density(a, df) + t_density(b, df);
    for (int i = 1; i < n; ++i) s += t_density(a + i * h, df) * (i % 2 ? 4.0 : 2.0);
    return s * h / 3.0;
}

bool statistics_suite() {
    bool ok = true;
    const Metrics m = compute_metrics({64, 82, 18, 36});
    ok &= *m.sensitivity == 0.64 && *m.specificity == 0.82 && *m.accuracy == 0.73;

    const FisherReport fc = fisher_criterion({{-1.0}, {1.0}}, {{1.0}, {3.0}});
    ok &= fc.per_dimension[0] == 2.0;

    const PairedTestResult t =
        paired_test(std::vector<double>{2, 4, 6}, std::vector<double>{1, 2, 3});
    ok &= std::abs(t.t - 2.0 * std::sqrt(3.0)) < 1e-12;
    ok &= t.df == 2.0;
    const double oracle_p = 2.0 * (0.5 - simpson(0.0, std::abs(t.t), 2.0, 1 << 16));
    ok &= std::abs(t.p - oracle_p) < 1e-9;
    ok &= std::abs(t.p - 0.0742) < 1e-4;
    {
        std::ostringstream oss;
        oss << "paired test on [1,2,3]: t = " << t.t << ", p = " << t.p << " (oracle " << oracle_p
            << ")";
        note(oss.str());
    }
    return ok;
}

// --------------------------------------------------------------------------
// 10. end-to-end phantom experiment
// --------------------------------------------------------------------------
RunConfig e2e_config(const fs::path& out_dir) {
    RunConfig cfg;
    cfg.out_dir = out_dir;
    cfg.threads = 1;
    cfg.phantom.n_patients = 20;
    cfg.phantom.noise_sigma = 8.0;
    cfg.phantom.seed = 7;
    cfg.discovery.profile = "desk";
    cfg.discovery.desk_divisor = 8;
    cfg.discovery.psi_init = 0.75;
    cfg.discovery.seed = 11;
    cfg.discovery.max_iter = 5;
    cfg.discovery_max_families = 3;
    cfg.lopo_seed = 17;
    cfg.lopo_train_rotations = false;
    cfg.mlp_max_iter = 80;
    return cfg;
}

void run_pipeline(const RunConfig& cfg) {
    stage_phantom(cfg);
    stage_candidates(cfg);
    stage_discover(cfg);
    stage_sequence(cfg);
    stage_baseline(cfg);
    stage_lopo(cfg);
    (void)stage_report(cfg);
}

bool files_equal(const fs::path& a, const fs::path& b) {
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    if (!fa || !fb) return false;
    const std::string da((std::istreambuf_iterator<char>(fa)), {});
    const std::string db((std::istreambuf_iterator<char>(fb)), {});
    return da == db;
}

bool end_to_end() {
    bool ok = true;
    const fs::path base = fs::temp_directory_path() / "radq_acceptance";
    fs::remove_all(base);
    const RunConfig cfg = e2e_config(base / "run1");

    run_pipeline(cfg);

    json report;
    std::ifstream(cfg.out_dir / "report" / "report.json") >> report;
    const double drs_acc = report["pooled"]["drs"]["metrics"]["accuracy"].get<double>();
    const double base_acc = report["pooled"]["baseline"]["metrics"]["accuracy"].get<double>();
    const double drs_fc = report["fisher_criterion"]["drs"]["aggregate_mean"].get<double>();
    const double base_fc = report["fisher_criterion"]["baseline"]["aggregate_mean"].get<double>();
    {
        std::ostringstream oss;
        oss << "pooled accuracy: drs " << drs_acc << ", baseline " << base_acc;
        note(oss.str());
        std::ostringstream o2;
        o2 << "aggregate FC: drs " << drs_fc << ", baseline " << base_fc;
        note(o2.str());
    }
    ok &= drs_acc >= 0.80;
    ok &= drs_acc > 0.5;
    ok &= base_acc > 0.5;
    ok &= drs_fc > 0.0;

    bool audit_ok = true;
    for (const std::string pair : {"drs", "baseline"}) {
        const auto records = read_feature_csv(
            cfg.out_dir / (pair == "drs" ? "sequences/drs_sequences.csv"
                                         : "baseline/texture_sequences.csv"));
        const auto folds = read_fold_results(cfg.out_dir / "lopo" / ("folds_" + pair + ".jsonl"));
        audit_ok &= folds.size() == 20;
        try {
            audit_lopo_leakage(records, folds);
        } catch (const std::exception& e) {
            note(std::string("leakage audit failed: ") + e.what());
            audit_ok = false;
        }
    }
    ok &= audit_ok;
    if (audit_ok) note("leakage audit passed for both sequencers (20 folds each)");

    // full bit-exact reproducibility from (config, seeds)
    const RunConfig cfg2 = e2e_config(base / "run2");
    run_pipeline(cfg2);
    bool repro = true;
    for (const char* rel :
         {"cohort/cohort.json", "cohort/cases/p000/cdi.vol", "cohort/cases/p019/tumour_mask.vol",
          "candidates/candidates.jsonl", "candidates/patches.bin", "model/sequencer.json",
          "model/discovery_log.json", "sequences/drs_sequences.csv",
          "baseline/texture_sequences.csv", "lopo/folds_drs.jsonl", "lopo/folds_baseline.jsonl",
          "report/fc.csv", "report/metrics.csv"}) {
        const bool same = files_equal(cfg.out_dir / rel, cfg2.out_dir / rel);
        if (!same) note(std::string("reproducibility mismatch: ") + rel);
        repro &= same;
    }
    // report.json echoes out_dir; compare with that one key normalized
    json r1, r2;
    std::ifstream(cfg.out_dir / "report" / "report.json") >> r1;
    std::ifstream(cfg2.out_dir / "report" / "report.json") >> r2;
    r1["config"]["out_dir"] = "";
    r2["config"]["out_dir"] = "";
    repro &= (r1 == r2);
    ok &= repro;
    if (repro) note("second full run is bit-identical");

    fs::remove_all(base);
    return ok;
}

} // namespace

int main() {
    criterion(1, "signal-model oracles", signal_model_oracles);
    criterion(2, "CDI threshold mask suite", mask_suite);
    criterion(3, "rotation augmentation suite", augmentation_suite);
    criterion(4, "sequencer structural suite (desk profile)", sequencer_structural_suite);
    criterion(5, "random-field autocorrelation suite", random_field_suite);
    criterion(6, "gradient suite", gradient_suite);
    criterion(7, "scaled conjugate gradient suite", scg_suite);
    criterion(8, "baseline texture suite", baseline_suite);
    criterion(9, "statistics suite", statistics_suite);
    criterion(10, "end-to-end phantom experiment", end_to_end);

    if (g_failures == 0)
        std::printf("acceptance: all 10 criteria passed\n");
    else
        std::printf("acceptance: %d criteria FAILED\n", g_failures);
    return g_failures;
}
