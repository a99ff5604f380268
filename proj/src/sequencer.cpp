#include "radq/sequencer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace radq {

using nlohmann::json;

void LayerPlan::validate() const {
    if (conv_channels.empty()) throw ConfigError("layer plan: no conv layers");
    for (int c : conv_channels)
        if (c < 1) throw ConfigError("layer plan: conv channel counts must be >= 1");
    if (fc_widths[0] < 1 || fc_widths[1] < 1) throw ConfigError("layer plan: fc widths must be >= 1");
    if (input_channels < 1) throw ConfigError("layer plan: input_channels must be >= 1");
    if (patch_size < kFieldSize) throw ConfigError("layer plan: patch_size too small");
    if (profile != "paper" && profile != "desk" && profile != "custom")
        throw ConfigError("layer plan: unknown profile '" + profile + "'");
    if (profile != "custom") {
        const LayerPlan canonical = make_plan(profile, desk_divisor);
        if (conv_channels != canonical.conv_channels || fc_widths != canonical.fc_widths)
            throw ConfigError("layer plan: channel counts do not match the '" + profile + "' profile");
    }
}

LayerPlan make_plan(const std::string& profile, int desk_divisor) {
    static const std::vector<int> kPaperChannels{64,  64,  128, 128, 256, 256, 256, 256, 512,
                                                 512, 512, 512, 512, 512, 512, 512, 2000};
    LayerPlan plan;
    plan.profile = profile;
    plan.desk_divisor = desk_divisor;
    if (profile == "paper") {
        plan.conv_channels = kPaperChannels;
    } else if (profile == "desk") {
        if (desk_divisor < 1) throw ConfigError("desk_divisor must be >= 1");
        for (int c : kPaperChannels) plan.conv_channels.push_back(std::max(1, c / desk_divisor));
    } else {
        throw ConfigError("make_plan: unknown profile '" + profile + "'");
    }
    return plan;
}

void SequencerModel::validate() const {
    plan.validate();
    if (conv.size() != static_cast<std::size_t>(plan.depth()))
        throw ConfigError("model: conv parameter count does not match the plan");
    for (std::size_t l = 0; l < conv.size(); ++l) {
        const double psi = conv[l].psi;
        if (!(psi >= kPsiMin && psi <= kPsiMax))
            throw ConfigError("model: psi out of bounds at layer " + std::to_string(l));
        if (!std::isfinite(conv[l].gain) || !std::isfinite(conv[l].bias))
            throw ConfigError("model: non-finite scalars at layer " + std::to_string(l));
    }
    if (global_psi)
        for (std::size_t l = 1; l < conv.size(); ++l)
            if (conv[l].psi != conv[0].psi)
                throw ConfigError("model: global_psi set but per-layer psi values differ");
    for (const FcLayerParams& f : fc)
        if (!std::isfinite(f.gain) || !std::isfinite(f.bias))
            throw ConfigError("model: non-finite fc scalars");
}

namespace {
// Rescales the gain inits so a reference patch keeps unit activation RMS
// through the whole stack (smoothed fields have nonzero sums, which would
// otherwise amplify the rectified activations exponentially with depth).
void calibrate_gains(SequencerModel& m);
} // namespace

SequencerModel make_model(const LayerPlan& plan, std::uint64_t seed, double psi_init, bool global_psi) {
    plan.validate();
    if (!(psi_init >= kPsiMin && psi_init <= kPsiMax)) throw ConfigError("psi_init out of bounds");
    SequencerModel m;
    m.plan = plan;
    m.seed = seed;
    m.global_psi = global_psi;
    m.conv.resize(plan.depth());
    for (int l = 0; l < plan.depth(); ++l) {
        m.conv[l].psi = psi_init;
        const double fan_in = static_cast<double>(plan.layer_in(l)) * kFieldSize * kFieldSize;
        m.conv[l].gain = kGainInitScale / std::sqrt(fan_in);
        m.conv[l].bias = 0.0;
    }
    m.fc[0].gain = 1.0 / std::sqrt(static_cast<double>(plan.conv_channels.back()));
    m.fc[1].gain = 1.0 / std::sqrt(static_cast<double>(plan.fc_widths[0]));
    m.fc[0].bias = m.fc[1].bias = 0.0;
    calibrate_gains(m);
    return m;
}

std::size_t trained_scalar_count(const SequencerModel& m) {
    const std::size_t layers = m.conv.size();
    const std::size_t psi_count = m.global_psi ? 1 : layers;
    return psi_count + 2 * layers + 2 * m.fc.size();
}

std::size_t realized_weight_count(const LayerPlan& plan) {
    std::size_t total = 0;
    for (int l = 0; l < plan.depth(); ++l)
        total += static_cast<std::size_t>(plan.conv_channels[l]) * plan.layer_in(l) * kFieldSize *
                 kFieldSize;
    total += static_cast<std::size_t>(plan.fc_widths[0]) * plan.conv_channels.back();
    total += static_cast<std::size_t>(plan.fc_widths[1]) * plan.fc_widths[0];
    return total;
}

namespace {

constexpr const char* kModelFormat = "sequencer-v1";

json model_to_json(const SequencerModel& m) {
    json j;
    j["format_version"] = kModelFormat;
    j["profile"] = m.plan.profile;
    j["desk_divisor"] = m.plan.desk_divisor;
    j["conv_channels"] = m.plan.conv_channels;
    j["fc_widths"] = m.plan.fc_widths;
    j["input_channels"] = m.plan.input_channels;
    j["patch_size"] = m.plan.patch_size;
    j["seed"] = m.seed;
    j["global_psi"] = m.global_psi;
    json conv = json::array();
    for (const ConvLayerParams& c : m.conv)
        conv.push_back({{"psi", c.psi}, {"gain", c.gain}, {"bias", c.bias}});
    j["conv"] = conv;
    j["fc"] = {{{"gain", m.fc[0].gain}, {"bias", m.fc[0].bias}},
               {{"gain", m.fc[1].gain}, {"bias", m.fc[1].bias}}};
    return j;
}

} // namespace

std::uint64_t SequencerModel::content_hash() const { return hash_tag(model_to_json(*this).dump()); }

void save_model(const SequencerModel& m, const std::filesystem::path& path) {
    m.validate();
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ParseError("cannot write model file '" + path.string() + "'");
    out << model_to_json(m).dump(2) << '\n';
}

SequencerModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingInputError("missing model file '" + path.string() + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError("'" + path.string() + "': " + e.what());
    }
    SequencerModel m;
    try {
        const auto version = j.at("format_version").get<std::string>();
        if (version != kModelFormat)
            throw ParseError("'" + path.string() + "': unknown model format version '" + version + "'");
        m.plan.profile = j.at("profile").get<std::string>();
        m.plan.desk_divisor = j.at("desk_divisor").get<int>();
        m.plan.conv_channels = j.at("conv_channels").get<std::vector<int>>();
        m.plan.fc_widths = j.at("fc_widths").get<std::array<int, 2>>();
        m.plan.input_channels = j.at("input_channels").get<int>();
        m.plan.patch_size = j.at("patch_size").get<int>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.global_psi = j.at("global_psi").get<bool>();
        for (const auto& c : j.at("conv"))
            m.conv.push_back({c.at("psi").get<double>(), c.at("gain").get<double>(),
                              c.at("bias").get<double>()});
        const auto& fc = j.at("fc");
        for (int i = 0; i < 2; ++i)
            m.fc[i] = {fc.at(i).at("gain").get<double>(), fc.at(i).at("bias").get<double>()};
    } catch (const json::exception& e) {
        throw ParseError("'" + path.string() + "': " + e.what());
    }
    try {
        m.validate();
    } catch (const ConfigError& e) {
        throw ParseError("'" + path.string() + "': " + e.what());
    }
    return m;
}

// ---------------------------------------------------------------------------
// Realization
// ---------------------------------------------------------------------------

void psi_kernel(double psi, std::array<double, kFieldSize * kFieldSize>& k,
                std::array<double, kFieldSize * kFieldSize>* dk_dpsi) {
    std::array<double, kFieldSize * kFieldSize> e{}, de{};
    double sum = 0.0, dsum = 0.0;
    const double inv2psi2 = 1.0 / (2.0 * psi * psi);
    for (int u = -2; u <= 2; ++u) {
        for (int v = -2; v <= 2; ++v) {
            const int i = (u + 2) * kFieldSize + (v + 2);
            const double r2 = static_cast<double>(u * u + v * v);
            e[i] = std::exp(-r2 * inv2psi2);
            de[i] = e[i] * r2 / (psi * psi * psi); // 0 * large == 0 after underflow
            sum += e[i];
            dsum += de[i];
        }
    }
    for (int i = 0; i < kFieldSize * kFieldSize; ++i) {
        k[i] = e[i] / sum;
        if (dk_dpsi) (*dk_dpsi)[i] = (de[i] * sum - e[i] * dsum) / (sum * sum);
    }
}

namespace {

// Smooth one 5x5 slice with the kernel, reflecting at the field border.
template <class T>
void smooth_slice(const T* src, const std::array<double, kFieldSize * kFieldSize>& k, T* dst) {
    for (int u = 0; u < kFieldSize; ++u) {
        for (int v = 0; v < kFieldSize; ++v) {
            double acc = 0.0;
            for (int p = -2; p <= 2; ++p) {
                const int su = reflect_index(u + p, kFieldSize);
                for (int q = -2; q <= 2; ++q) {
                    const int sv = reflect_index(v + q, kFieldSize);
                    acc += k[(p + 2) * kFieldSize + (q + 2)] *
                           static_cast<double>(src[su * kFieldSize + sv]);
                }
            }
            dst[u * kFieldSize + v] = static_cast<T>(acc);
        }
    }
}

// Draw the base white noise for one conv field, identical across compute types.
template <class T>
void draw_field_noise(std::uint64_t seed, int layer, int field, int cin, T* dst) {
    Rng rng(derive_seed(seed, "conv_field", static_cast<std::uint64_t>(layer),
                        static_cast<std::uint64_t>(field)));
    for (int i = 0; i < cin * kFieldSize * kFieldSize; ++i) dst[i] = static_cast<T>(rng.normal());
}

} // namespace

std::vector<double> realize_field_bank(const LayerPlan& plan, int layer, std::uint64_t seed, double psi) {
    plan.validate();
    if (layer < 0 || layer >= plan.depth()) throw ConfigError("realize_field_bank: layer out of range");
    if (!(psi >= kPsiMin && psi <= kPsiMax)) throw ConfigError("realize_field_bank: psi out of bounds");

    const int cout = plan.conv_channels[layer];
    const int cin = plan.layer_in(layer);
    const int field_elems = cin * kFieldSize * kFieldSize;

    std::array<double, kFieldSize * kFieldSize> k{};
    psi_kernel(psi, k, nullptr);

    std::vector<double> bank(static_cast<std::size_t>(cout) * field_elems);
    std::vector<double> noise(field_elems);
    for (int f = 0; f < cout; ++f) {
        draw_field_noise(seed, layer, f, cin, noise.data());
        double* out = bank.data() + static_cast<std::size_t>(f) * field_elems;
        for (int i = 0; i < cin; ++i)
            smooth_slice(noise.data() + i * kFieldSize * kFieldSize, k,
                         out + i * kFieldSize * kFieldSize);
        double ss = 0.0;
        for (int i = 0; i < field_elems; ++i) ss += out[i] * out[i];
        const double rms = std::max(std::sqrt(ss / field_elems), 1e-30);
        for (int i = 0; i < field_elems; ++i) out[i] /= rms;
    }
    return bank;
}

template <class T>
void NetWeights<T>::init(const SequencerModel& m) {
    plan = m.plan;
    const int depth = plan.depth();
    base.resize(depth);
    what.resize(depth);
    dwhat_dpsi.assign(depth, {});
    for (int l = 0; l < depth; ++l) {
        const std::size_t n =
            static_cast<std::size_t>(plan.conv_channels[l]) * plan.layer_in(l) * kFieldSize * kFieldSize;
        base[l].resize(n);
        const int field_elems = plan.layer_in(l) * kFieldSize * kFieldSize;
        for (int f = 0; f < plan.conv_channels[l]; ++f)
            draw_field_noise(m.seed, l, f, plan.layer_in(l),
                             base[l].data() + static_cast<std::size_t>(f) * field_elems);
    }
    // FC rows: fixed unit-RMS noise, no spatial structure to correlate.
    for (int j = 0; j < 2; ++j) {
        const int out_dim = plan.fc_widths[j];
        const int in_dim = j == 0 ? plan.conv_channels.back() : plan.fc_widths[0];
        fc_what[j].resize(static_cast<std::size_t>(out_dim) * in_dim);
        for (int row = 0; row < out_dim; ++row) {
            Rng rng(derive_seed(m.seed, "fc_row", static_cast<std::uint64_t>(j),
                                static_cast<std::uint64_t>(row)));
            T* dst = fc_what[j].data() + static_cast<std::size_t>(row) * in_dim;
            double ss = 0.0;
            for (int i = 0; i < in_dim; ++i) {
                const double z = rng.normal();
                dst[i] = static_cast<T>(z);
                ss += z * z;
            }
            const double rms = std::max(std::sqrt(ss / in_dim), 1e-30);
            for (int i = 0; i < in_dim; ++i) dst[i] = static_cast<T>(static_cast<double>(dst[i]) / rms);
        }
    }
    realize(m, false);
}

template <class T>
void NetWeights<T>::realize(const SequencerModel& m, bool with_dpsi) {
    const int depth = plan.depth();
    gain.resize(depth);
    bias.resize(depth);
    std::array<double, kFieldSize * kFieldSize> k{}, dk{};
    std::vector<T> smoothed, dsm;
    for (int l = 0; l < depth; ++l) {
        gain[l] = static_cast<T>(m.conv[l].gain);
        bias[l] = static_cast<T>(m.conv[l].bias);
        psi_kernel(m.conv[l].psi, k, with_dpsi ? &dk : nullptr);

        const int cin = plan.layer_in(l);
        const int field_elems = cin * kFieldSize * kFieldSize;
        const int cout = plan.conv_channels[l];
        what[l].resize(base[l].size());
        if (with_dpsi) dwhat_dpsi[l].resize(base[l].size());
        smoothed.resize(field_elems);
        dsm.resize(field_elems);

        for (int f = 0; f < cout; ++f) {
            const T* src = base[l].data() + static_cast<std::size_t>(f) * field_elems;
            for (int i = 0; i < cin; ++i)
                smooth_slice(src + i * kFieldSize * kFieldSize, k,
                             smoothed.data() + i * kFieldSize * kFieldSize);
            double ss = 0.0;
            for (int i = 0; i < field_elems; ++i)
                ss += static_cast<double>(smoothed[i]) * static_cast<double>(smoothed[i]);
            const double rms = std::max(std::sqrt(ss / field_elems), 1e-30);
            T* dst = what[l].data() + static_cast<std::size_t>(f) * field_elems;
            for (int i = 0; i < field_elems; ++i)
                dst[i] = static_cast<T>(static_cast<double>(smoothed[i]) / rms);

            if (with_dpsi) {
                // d(s / rms(s))/dpsi = ds/rms - s * mean(s .* ds) / rms^3
                for (int i = 0; i < cin; ++i)
                    smooth_slice(src + i * kFieldSize * kFieldSize, dk,
                                 dsm.data() + i * kFieldSize * kFieldSize);
                double sds = 0.0;
                for (int i = 0; i < field_elems; ++i)
                    sds += static_cast<double>(smoothed[i]) * static_cast<double>(dsm[i]);
                const double mean_sds = sds / field_elems;
                T* gd = dwhat_dpsi[l].data() + static_cast<std::size_t>(f) * field_elems;
                for (int i = 0; i < field_elems; ++i)
                    gd[i] = static_cast<T>(static_cast<double>(dsm[i]) / rms -
                                           static_cast<double>(smoothed[i]) * mean_sds /
                                               (rms * rms * rms));
            }
        }
    }
    for (int j = 0; j < 2; ++j) {
        fc_gain[j] = static_cast<T>(m.fc[j].gain);
        fc_bias[j] = static_cast<T>(m.fc[j].bias);
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

template <class T>
Tensor3<T> median_pool3(const Tensor3<T>& in, std::vector<signed char>* argmed) {
    Tensor3<T> out(in.c, in.h, in.w);
    if (argmed) argmed->assign(in.size(), 0);
    struct Entry {
        T value;
        signed char offset;
    };
    Entry win[9];
    for (int ci = 0; ci < in.c; ++ci) {
        const T* src = in.channel(ci);
        T* dst = out.channel(ci);
        for (int r = 0; r < in.h; ++r) {
            for (int c = 0; c < in.w; ++c) {
                int n = 0;
                for (int dr = -1; dr <= 1; ++dr) {
                    const int rr = reflect_index(r + dr, in.h);
                    for (int dc = -1; dc <= 1; ++dc) {
                        const int cc = reflect_index(c + dc, in.w);
                        win[n] = {src[rr * in.w + cc], static_cast<signed char>(n)};
                        ++n;
                    }
                }
                // insertion sort by (value, offset)
                for (int i = 1; i < 9; ++i) {
                    const Entry key = win[i];
                    int j = i - 1;
                    while (j >= 0 &&
                           (win[j].value > key.value ||
                            (win[j].value == key.value && win[j].offset > key.offset))) {
                        win[j + 1] = win[j];
                        --j;
                    }
                    win[j + 1] = key;
                }
                int pick = 4;
                while (pick > 0 && win[pick - 1].value == win[pick].value) --pick; // tie: lowest offset
                dst[r * in.w + c] = win[4].value;
                if (argmed) (*argmed)[out.idx(ci, r, c)] = win[pick].offset;
            }
        }
    }
    return out;
}

namespace {

// One kernel row applied to one image row: 5-tap stencil with the column
// boundary (zero padding) peeled off. Needs W >= 5.
template <class T>
inline void stencil_row5(const T* __restrict xr, T* __restrict yr, int W, T w0, T w1, T w2, T w3,
                         T w4) {
    yr[0] += w2 * xr[0] + w3 * xr[1] + w4 * xr[2];
    yr[1] += w1 * xr[0] + w2 * xr[1] + w3 * xr[2] + w4 * xr[3];
    for (int c = 2; c < W - 2; ++c)
        yr[c] += w0 * xr[c - 2] + w1 * xr[c - 1] + w2 * xr[c] + w3 * xr[c + 1] + w4 * xr[c + 2];
    yr[W - 2] += w0 * xr[W - 4] + w1 * xr[W - 3] + w2 * xr[W - 2] + w3 * xr[W - 1];
    yr[W - 1] += w0 * xr[W - 3] + w1 * xr[W - 2] + w2 * xr[W - 1];
}

// y[o] = b + sum_i w[o,i] (*) x[i], zero padding, 5x5, same size.
template <class T>
void conv5_forward(const T* __restrict x, int cin, const T* __restrict w, T g, int cout,
                   T* __restrict y, int H, int W, T b) {
    const int HW = H * W;
    for (int o = 0; o < cout; ++o) {
        T* yo = y + static_cast<std::size_t>(o) * HW;
        std::fill(yo, yo + HW, b);
        for (int i = 0; i < cin; ++i) {
            const T* xi = x + static_cast<std::size_t>(i) * HW;
            const T* wf = w + (static_cast<std::size_t>(o) * cin + i) * kFieldSize * kFieldSize;
            for (int ku = 0; ku < kFieldSize; ++ku) {
                const int dy = ku - 2;
                const int r0 = std::max(0, -dy), r1 = std::min(H, H - dy);
                const T* wr = wf + ku * kFieldSize;
                const T w0 = g * wr[0], w1 = g * wr[1], w2 = g * wr[2], w3 = g * wr[3],
                        w4 = g * wr[4];
                for (int r = r0; r < r1; ++r)
                    stencil_row5(xi + static_cast<std::size_t>(r + dy) * W,
                                 yo + static_cast<std::size_t>(r) * W, W, w0, w1, w2, w3, w4);
            }
        }
    }
}

// dx[i] = sum_o w[o,i] (*T) dy[o]: the transpose is a conv with the kernel
// flipped in both directions.
template <class T>
void conv5_backward_data(const T* __restrict dy, int cout, const T* __restrict w, T g, int cin,
                         T* __restrict dx, int H, int W) {
    const int HW = H * W;
    std::fill(dx, dx + static_cast<std::size_t>(cin) * HW, T(0));
    for (int i = 0; i < cin; ++i) {
        T* dxi = dx + static_cast<std::size_t>(i) * HW;
        for (int o = 0; o < cout; ++o) {
            const T* dyo = dy + static_cast<std::size_t>(o) * HW;
            const T* wf = w + (static_cast<std::size_t>(o) * cin + i) * kFieldSize * kFieldSize;
            for (int ku = 0; ku < kFieldSize; ++ku) {
                const int dyoff = ku - 2;
                const int r0 = std::max(0, -dyoff), r1 = std::min(H, H - dyoff);
                const T* wr = wf + (kFieldSize - 1 - ku) * kFieldSize; // flipped row
                const T w0 = g * wr[4], w1 = g * wr[3], w2 = g * wr[2], w3 = g * wr[1],
                        w4 = g * wr[0];
                for (int r = r0; r < r1; ++r)
                    stencil_row5(dyo + static_cast<std::size_t>(r + dyoff) * W,
                                 dxi + static_cast<std::size_t>(r) * W, W, w0, w1, w2, w3, w4);
            }
        }
    }
}

// dw[o,i,ku,kv] = sum_{r,c} dy[o][r][c] * x[i][r+ku-2][c+kv-2]  (pre-gain weights).
template <class T>
void conv5_backward_weights(const T* __restrict dy, int cout, const T* __restrict x, int cin,
                            T* __restrict dw, int H, int W) {
    const int HW = H * W;
    for (int o = 0; o < cout; ++o) {
        const T* dyo = dy + static_cast<std::size_t>(o) * HW;
        for (int i = 0; i < cin; ++i) {
            const T* xi = x + static_cast<std::size_t>(i) * HW;
            T* wf = dw + (static_cast<std::size_t>(o) * cin + i) * kFieldSize * kFieldSize;
            for (int ku = 0; ku < kFieldSize; ++ku) {
                const int dyoff = ku - 2;
                const int r0 = std::max(0, -dyoff), r1 = std::min(H, H - dyoff);
                for (int kv = 0; kv < kFieldSize; ++kv) {
                    const int dxoff = kv - 2;
                    const int c0 = std::max(0, -dxoff), c1 = std::min(W, W - dxoff);
                    const int span = c1 - c0;
                    // 8 accumulator lanes in fixed summation order: bit-stable
                    // and wide enough for the vectorizer.
                    T lane[8] = {};
                    T tail = T(0);
                    for (int r = r0; r < r1; ++r) {
                        const T* __restrict dyr = dyo + static_cast<std::size_t>(r) * W + c0;
                        const T* __restrict xr =
                            xi + static_cast<std::size_t>(r + dyoff) * W + dxoff + c0;
                        int c = 0;
                        for (; c + 8 <= span; c += 8)
                            for (int j = 0; j < 8; ++j) lane[j] += dyr[c + j] * xr[c + j];
                        for (; c < span; ++c) tail += dyr[c] * xr[c];
                    }
                    wf[ku * kFieldSize + kv] =
                        (((lane[0] + lane[1]) + (lane[2] + lane[3])) +
                         ((lane[4] + lane[5]) + (lane[6] + lane[7]))) +
                        tail;
                }
            }
        }
    }
}

} // namespace

template <class T>
std::vector<T> net_forward(const NetWeights<T>& w, const Tensor3<T>& patch, NetTape<T>* tape) {
    const LayerPlan& plan = w.plan;
    if (patch.c != plan.input_channels || patch.h != plan.patch_size || patch.w != plan.patch_size)
        throw NumericError("net_forward: patch shape mismatch");

    const int H = plan.patch_size, W = plan.patch_size;
    const int depth = plan.depth();
    if (tape) {
        tape->x.assign(static_cast<std::size_t>(depth) + 1, {});
        tape->sign.assign(depth, {});
        tape->argmed.assign(depth, {});
        tape->x[0] = patch;
    }

    Tensor3<T> cur = patch;
    Tensor3<T> conv_out;
    for (int l = 0; l < depth; ++l) {
        const int cout = plan.conv_channels[l];
        conv_out = Tensor3<T>(cout, H, W);
        conv5_forward(cur.v.data(), plan.layer_in(l), w.what[l].data(), w.gain[l], cout,
                      conv_out.v.data(), H, W, w.bias[l]);
        if (tape) {
            auto& sgn = tape->sign[l];
            sgn.resize(conv_out.size());
            for (std::size_t i = 0; i < conv_out.size(); ++i) {
                const T v = conv_out.v[i];
                sgn[i] = v > T(0) ? 1 : (v < T(0) ? -1 : 0);
                conv_out.v[i] = avreu(v);
            }
        } else {
            for (T& v : conv_out.v) v = avreu(v);
        }
        cur = median_pool3(conv_out, tape ? &tape->argmed[l] : nullptr);
        if (tape) tape->x[static_cast<std::size_t>(l) + 1] = cur;
    }

    // Global spatial average -> FC stack.
    const int c_final = plan.conv_channels.back();
    std::vector<T> vec(c_final);
    const T inv_hw = T(1) / static_cast<T>(H * W);
    for (int ci = 0; ci < c_final; ++ci) {
        T acc = T(0);
        const T* p = cur.channel(ci);
        for (int i = 0; i < H * W; ++i) acc += p[i];
        vec[ci] = acc * inv_hw;
    }
    if (tape) tape->gap = vec;

    for (int j = 0; j < 2; ++j) {
        const int out_dim = plan.fc_widths[j];
        const int in_dim = static_cast<int>(vec.size());
        std::vector<T> t(out_dim), a(out_dim);
        std::vector<signed char> sgn(tape ? out_dim : 0);
        for (int row = 0; row < out_dim; ++row) {
            const T* wr = w.fc_what[j].data() + static_cast<std::size_t>(row) * in_dim;
            T acc = T(0);
            for (int i = 0; i < in_dim; ++i) acc += wr[i] * vec[i];
            t[row] = acc;
            const T z = w.fc_gain[j] * acc + w.fc_bias[j];
            if (tape) sgn[row] = z > T(0) ? 1 : (z < T(0) ? -1 : 0);
            a[row] = avreu(z);
        }
        if (tape) {
            tape->fc_t[j] = t;
            tape->fc_a[j] = a;
            tape->fc_sign[j] = std::move(sgn);
        }
        vec = std::move(a);
    }
    return vec;
}

template <class T>
void net_backward(const NetWeights<T>& w, const NetTape<T>& tape, std::span<const T> dseq,
                  ParamGrad& pg, std::vector<T>& scratch_dw) {
    const LayerPlan& plan = w.plan;
    const int depth = plan.depth();
    const int H = plan.patch_size, W = plan.patch_size;
    const int HW = H * W;
    pg.resize(depth);

    // FC layers, top down.
    std::vector<T> dvec(dseq.begin(), dseq.end());
    for (int j = 1; j >= 0; --j) {
        const int out_dim = plan.fc_widths[j];
        const int in_dim = j == 0 ? plan.conv_channels.back() : plan.fc_widths[0];
        const std::vector<T>& in_vec = j == 0 ? tape.gap : tape.fc_a[0];
        (void)in_vec;
        std::vector<T> din(in_dim, T(0));
        double dgain = 0.0, dbias = 0.0;
        for (int row = 0; row < out_dim; ++row) {
            const T dz = dvec[row] * static_cast<T>(tape.fc_sign[j][row]);
            if (dz == T(0)) continue;
            dgain += static_cast<double>(dz) * static_cast<double>(tape.fc_t[j][row]);
            dbias += static_cast<double>(dz);
            const T scaled = w.fc_gain[j] * dz;
            const T* wr = w.fc_what[j].data() + static_cast<std::size_t>(row) * in_dim;
            for (int i = 0; i < in_dim; ++i) din[i] += scaled * wr[i];
        }
        pg.fc_gain[j] += dgain;
        pg.fc_bias[j] += dbias;
        dvec = std::move(din);
    }

    // Global average pool backward.
    const int c_final = plan.conv_channels.back();
    Tensor3<T> dcur(c_final, H, W);
    const T inv_hw = T(1) / static_cast<T>(HW);
    for (int ci = 0; ci < c_final; ++ci) {
        const T g = dvec[ci] * inv_hw;
        T* p = dcur.channel(ci);
        std::fill(p, p + HW, g);
    }

    // Conv layers, reversed.
    for (int l = depth - 1; l >= 0; --l) {
        const int cout = plan.conv_channels[l];
        const int cin = plan.layer_in(l);

        // median pool backward: route to the chosen window element.
        Tensor3<T> dy(cout, H, W);
        const auto& argmed = tape.argmed[l];
        for (int ci = 0; ci < cout; ++ci) {
            const T* dsrc = dcur.channel(ci);
            T* ddst = dy.channel(ci);
            for (int r = 0; r < H; ++r) {
                for (int c = 0; c < W; ++c) {
                    const T g = dsrc[r * W + c];
                    if (g == T(0)) continue;
                    const int o = argmed[dy.idx(ci, r, c)];
                    const int rr = reflect_index(r + o / 3 - 1, H);
                    const int cc = reflect_index(c + o % 3 - 1, W);
                    ddst[rr * W + cc] += g;
                }
            }
        }
        // AVReU backward + bias gradient.
        const auto& sgn = tape.sign[l];
        double dbias = 0.0;
        for (std::size_t i = 0; i < dy.size(); ++i) {
            dy.v[i] *= static_cast<T>(sgn[i]);
            dbias += static_cast<double>(dy.v[i]);
        }
        pg.bias[l] += dbias;

        // Weight gradients -> psi and gain scalars.
        const std::size_t bank = w.what[l].size();
        scratch_dw.resize(bank);
        conv5_backward_weights(dy.v.data(), cout, tape.x[l].v.data(), cin, scratch_dw.data(), H, W);
        double dgain = 0.0, dpsi = 0.0;
        const T* what = w.what[l].data();
        const T* dwhat = w.dwhat_dpsi[l].empty() ? nullptr : w.dwhat_dpsi[l].data();
        for (std::size_t i = 0; i < bank; ++i) {
            dgain += static_cast<double>(scratch_dw[i]) * static_cast<double>(what[i]);
            if (dwhat)
                dpsi += static_cast<double>(scratch_dw[i]) * static_cast<double>(dwhat[i]);
        }
        pg.gain[l] += dgain;
        pg.psi[l] += dpsi * static_cast<double>(w.gain[l]);

        if (l > 0) {
            Tensor3<T> dx(cin, H, W);
            conv5_backward_data(dy.v.data(), cout, what, w.gain[l], cin, dx.v.data(), H, W);
            dcur = std::move(dx);
        }
    }
}

namespace {

void calibrate_gains(SequencerModel& m) {
    NetWeights<float> w;
    w.init(m);

    Rng rng(derive_seed(m.seed, "gain_calib"));
    Tensor3<float> cur(m.plan.input_channels, m.plan.patch_size, m.plan.patch_size);
    for (float& v : cur.v) v = static_cast<float>(rng.normal());

    auto rms = [](const auto& vals) {
        double ss = 0.0;
        for (auto v : vals) ss += static_cast<double>(v) * static_cast<double>(v);
        return std::max(std::sqrt(ss / vals.size()), 1e-12);
    };

    const int H = m.plan.patch_size, W = m.plan.patch_size;
    for (int l = 0; l < m.plan.depth(); ++l) {
        Tensor3<float> out(m.plan.conv_channels[l], H, W);
        // conv is linear in gain: probe at gain 1, then rescale.
        conv5_forward(cur.v.data(), m.plan.layer_in(l), w.what[l].data(), 1.0f,
                      m.plan.conv_channels[l], out.v.data(), H, W, 0.0f);
        m.conv[l].gain = 1.0 / rms(out.v);
        for (float& v : out.v) v = avreu(static_cast<float>(v * m.conv[l].gain));
        cur = median_pool3(out, nullptr);
    }

    std::vector<float> vec(m.plan.conv_channels.back());
    const float inv_hw = 1.0f / static_cast<float>(H * W);
    for (int ci = 0; ci < m.plan.conv_channels.back(); ++ci) {
        float acc = 0.0f;
        const float* p = cur.channel(ci);
        for (int i = 0; i < H * W; ++i) acc += p[i];
        vec[ci] = acc * inv_hw;
    }
    for (int j = 0; j < 2; ++j) {
        const int out_dim = m.plan.fc_widths[j];
        const int in_dim = static_cast<int>(vec.size());
        std::vector<float> t(out_dim);
        for (int row = 0; row < out_dim; ++row) {
            const float* wr = w.fc_what[j].data() + static_cast<std::size_t>(row) * in_dim;
            float acc = 0.0f;
            for (int i = 0; i < in_dim; ++i) acc += wr[i] * vec[i];
            t[row] = acc;
        }
        m.fc[j].gain = 1.0 / rms(t);
        for (int row = 0; row < out_dim; ++row)
            t[row] = avreu(static_cast<float>(t[row] * m.fc[j].gain));
        vec = std::move(t);
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Discovery problem
// ---------------------------------------------------------------------------

namespace {

double squash_psi(double u) {
    const double s = 1.0 / (1.0 + std::exp(-u));
    return kPsiMin + (kPsiMax - kPsiMin) * s;
}

double squash_psi_dpsi_du(double u) {
    const double s = 1.0 / (1.0 + std::exp(-u));
    return (kPsiMax - kPsiMin) * s * (1.0 - s);
}

double unsquash_psi(double psi) {
    const double s = (psi - kPsiMin) / (kPsiMax - kPsiMin);
    const double sc = std::clamp(s, 1e-12, 1.0 - 1e-12);
    return std::log(sc / (1.0 - sc));
}

} // namespace

template <class T>
DiscoveryProblem<T>::DiscoveryProblem(const SequencerModel& base, std::span<const Candidate> batch,
                                      PsiMode mode, int threads)
    : base_(base), mode_(mode), threads_(std::max(1, threads)) {
    base_.validate();
    if (batch.empty()) throw ConfigError("discovery: empty candidate batch");
    weights_.init(base_);
    patches_.reserve(batch.size());
    labels_.reserve(batch.size());
    for (const Candidate& c : batch) {
        if (c.patch.c != base_.plan.input_channels || c.patch.h != base_.plan.patch_size)
            throw ConfigError("discovery: candidate patch shape does not match the plan");
        patches_.push_back(c.patch.template cast<T>());
        labels_.push_back(c.label);
    }
}

template <class T>
std::size_t DiscoveryProblem<T>::dim() const {
    const std::size_t layers = base_.conv.size();
    const std::size_t psi_count = base_.global_psi ? 1 : layers;
    const std::size_t head = 2 * static_cast<std::size_t>(base_.plan.fc_widths[1]) + 2;
    return psi_count + 2 * layers + 4 + head;
}

template <class T>
std::vector<double> DiscoveryProblem<T>::pack(const SequencerModel& m, const DiscoveryHead& head) const {
    std::vector<double> x;
    x.reserve(dim());
    const std::size_t layers = m.conv.size();
    if (m.global_psi) {
        x.push_back(mode_ == PsiMode::raw ? m.conv[0].psi : unsquash_psi(m.conv[0].psi));
    } else {
        for (std::size_t l = 0; l < layers; ++l)
            x.push_back(mode_ == PsiMode::raw ? m.conv[l].psi : unsquash_psi(m.conv[l].psi));
    }
    for (std::size_t l = 0; l < layers; ++l) x.push_back(m.conv[l].gain);
    for (std::size_t l = 0; l < layers; ++l) x.push_back(m.conv[l].bias);
    for (int j = 0; j < 2; ++j) {
        x.push_back(m.fc[j].gain);
        x.push_back(m.fc[j].bias);
    }
    x.insert(x.end(), head.w.begin(), head.w.end());
    x.push_back(head.b[0]);
    x.push_back(head.b[1]);
    return x;
}

template <class T>
void DiscoveryProblem<T>::unpack(std::span<const double> x, SequencerModel& m,
                                 DiscoveryHead& head) const {
    m = base_;
    const std::size_t layers = m.conv.size();
    std::size_t i = 0;
    if (m.global_psi) {
        const double psi = mode_ == PsiMode::raw ? x[i] : squash_psi(x[i]);
        ++i;
        for (std::size_t l = 0; l < layers; ++l) m.conv[l].psi = psi;
    } else {
        for (std::size_t l = 0; l < layers; ++l, ++i)
            m.conv[l].psi = mode_ == PsiMode::raw ? x[i] : squash_psi(x[i]);
    }
    for (std::size_t l = 0; l < layers; ++l, ++i) m.conv[l].gain = x[i];
    for (std::size_t l = 0; l < layers; ++l, ++i) m.conv[l].bias = x[i];
    for (int j = 0; j < 2; ++j) {
        m.fc[j].gain = x[i++];
        m.fc[j].bias = x[i++];
    }
    const std::size_t head_w = 2 * static_cast<std::size_t>(m.plan.fc_widths[1]);
    head.w.assign(x.begin() + i, x.begin() + i + head_w);
    i += head_w;
    head.b = {x[i], x[i + 1]};
}

template <class T>
double DiscoveryProblem<T>::eval(std::span<const double> x, std::span<double> grad) {
    const bool want_grad = !grad.empty();
    SequencerModel m;
    DiscoveryHead head;
    unpack(x, m, head);
    weights_.realize(m, want_grad);

    const std::size_t n = patches_.size();
    const int fdim = base_.plan.fc_widths[1];
    const std::size_t layers = base_.conv.size();

    struct Slot {
        double loss = 0.0;
        ParamGrad pg;
        std::vector<double> dhead; // 2*fdim + 2
    };
    std::vector<Slot> slots(n);

    const int workers = std::max(1, std::min<int>(threads_, static_cast<int>(n)));
    parallel_for(static_cast<std::size_t>(workers), workers, [&](std::size_t wk) {
        const std::size_t lo = n * wk / workers;
        const std::size_t hi = n * (wk + 1) / workers;
        NetTape<T> tape;
        std::vector<T> scratch;
        std::vector<T> dseq(fdim);
        for (std::size_t s = lo; s < hi; ++s) {
            Slot& slot = slots[s];
            const std::vector<T> seq =
                net_forward(weights_, patches_[s], want_grad ? &tape : nullptr);

            // softmax head in double
            double z0 = head.b[0], z1 = head.b[1];
            for (int k = 0; k < fdim; ++k) {
                z0 += head.w[k] * static_cast<double>(seq[k]);
                z1 += head.w[fdim + k] * static_cast<double>(seq[k]);
            }
            const double zmax = std::max(z0, z1);
            const double e0 = std::exp(z0 - zmax), e1 = std::exp(z1 - zmax);
            const double zsum = e0 + e1;
            const bool cancer = labels_[s] == Label::cancerous;
            slot.loss = -((cancer ? z1 : z0) - zmax - std::log(zsum));

            if (want_grad) {
                const double p0 = e0 / zsum, p1 = e1 / zsum;
                const double g0 = p0 - (cancer ? 0.0 : 1.0);
                const double g1 = p1 - (cancer ? 1.0 : 0.0);
                slot.dhead.assign(2 * static_cast<std::size_t>(fdim) + 2, 0.0);
                for (int k = 0; k < fdim; ++k) {
                    slot.dhead[k] = g0 * static_cast<double>(seq[k]);
                    slot.dhead[fdim + k] = g1 * static_cast<double>(seq[k]);
                    dseq[k] = static_cast<T>(g0 * head.w[k] + g1 * head.w[fdim + k]);
                }
                slot.dhead[2 * fdim] = g0;
                slot.dhead[2 * fdim + 1] = g1;
                net_backward(weights_, tape, std::span<const T>(dseq), slot.pg, scratch);
            }
        }
    });

    // Fixed-order reduction: candidate index order, independent of threading.
    double total = 0.0;
    for (const Slot& s : slots) total += s.loss;
    const double inv_n = 1.0 / static_cast<double>(n);

    if (want_grad) {
        std::fill(grad.begin(), grad.end(), 0.0);
        const std::size_t psi_count = base_.global_psi ? 1 : layers;
        for (const Slot& s : slots) {
            std::size_t i = 0;
            if (base_.global_psi) {
                double acc = 0.0;
                for (std::size_t l = 0; l < layers; ++l) acc += s.pg.psi[l];
                grad[i++] += acc;
            } else {
                for (std::size_t l = 0; l < layers; ++l, ++i) grad[i] += s.pg.psi[l];
            }
            for (std::size_t l = 0; l < layers; ++l, ++i) grad[i] += s.pg.gain[l];
            for (std::size_t l = 0; l < layers; ++l, ++i) grad[i] += s.pg.bias[l];
            for (int j = 0; j < 2; ++j) {
                grad[i++] += s.pg.fc_gain[j];
                grad[i++] += s.pg.fc_bias[j];
            }
            for (std::size_t k = 0; k < s.dhead.size(); ++k) grad[i + k] += s.dhead[k];
        }
        for (double& g : grad) g *= inv_n;
        if (mode_ == PsiMode::squashed) {
            for (std::size_t i = 0; i < psi_count; ++i) grad[i] *= squash_psi_dpsi_du(x[i]);
        }
    }
    return total * inv_n;
}

DiscoveryResult discover(std::span<const Candidate> train, const DiscoveryConfig& cfg) {
    if (train.empty()) throw ConfigError("discover: empty train set");
    bool has_cancer = false, has_healthy = false;
    for (const Candidate& c : train) {
        has_cancer |= c.label == Label::cancerous;
        has_healthy |= c.label == Label::healthy;
    }
    if (!has_cancer || !has_healthy) throw ConfigError("discover: train set must contain both labels");

    const LayerPlan plan = make_plan(cfg.profile, cfg.desk_divisor);
    SequencerModel model = make_model(plan, cfg.seed, cfg.psi_init, cfg.global_psi);
    DiscoveryHead head;
    head.w.assign(2 * static_cast<std::size_t>(plan.fc_widths[1]), 0.0);

    DiscoveryProblem<float> problem(model, train, DiscoveryProblem<float>::PsiMode::squashed,
                                    cfg.threads);
    const std::vector<double> x0 = problem.pack(model, head);

    ScgConfig scg;
    scg.max_iter = cfg.max_iter;
    scg.grad_tol = cfg.grad_tol;
    scg.sigma = cfg.scg_sigma;
    const Objective obj = [&](std::span<const double> x, std::span<double> g) {
        return problem.eval(x, g);
    };
    ScgResult res = scg_minimize(obj, x0, scg);
    if (res.status == ScgStatus::aborted_non_finite)
        throw NumericError("discover: objective became non-finite; see the discovery trace");

    DiscoveryResult out;
    problem.unpack(res.x, out.model, head); // head discarded after discovery
    out.model.validate();
    out.trace = std::move(res.trace);
    out.initial_loss = res.initial_value;
    out.final_loss = res.value;
    out.status = res.status;
    return out;
}

std::vector<RadiomicSequence> sequence_batch(const SequencerModel& m, std::span<const Candidate> cands,
                                             int threads) {
    m.validate();
    NetWeights<float> weights;
    weights.init(m);
    const std::uint64_t hash = m.content_hash();

    std::vector<RadiomicSequence> out(cands.size());
    parallel_for(cands.size(), std::max(1, threads), [&](std::size_t i) {
        const Candidate& c = cands[i];
        const Tensor3<float>& patch = c.patch;
        const std::vector<float> seq = net_forward(weights, patch, static_cast<NetTape<float>*>(nullptr));
        out[i] = {c.patient_id, c.source_index, c.rotation_index, c.label, seq, hash};
    });
    return out;
}

// explicit instantiations: float for production, double for gradient oracles
template struct NetWeights<float>;
template struct NetWeights<double>;
template Tensor3<float> median_pool3<float>(const Tensor3<float>&, std::vector<signed char>*);
template Tensor3<double> median_pool3<double>(const Tensor3<double>&, std::vector<signed char>*);
template std::vector<float> net_forward<float>(const NetWeights<float>&, const Tensor3<float>&,
                                               NetTape<float>*);
template std::vector<double> net_forward<double>(const NetWeights<double>&, const Tensor3<double>&,
                                                 NetTape<double>*);
template void net_backward<float>(const NetWeights<float>&, const NetTape<float>&,
                                  std::span<const float>, ParamGrad&, std::vector<float>&);
template void net_backward<double>(const NetWeights<double>&, const NetTape<double>&,
                                   std::span<const double>, ParamGrad&, std::vector<double>&);
template class DiscoveryProblem<float>;
template class DiscoveryProblem<double>;

} // namespace radq
