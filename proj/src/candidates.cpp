#include "radq/candidates.hpp"

#include "radq/error.hpp"
#include "radq/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <set>

#include <nlohmann/json.hpp>

namespace radq {

using nlohmann::json;

void ExtractConfig::validate() const {
    if (patch_size < 8 || patch_size % 2 != 0) throw ConfigError("patch_size must be even and >= 8");
    if (healthy_grid_stride < 1) throw ConfigError("healthy_grid_stride must be >= 1");
    if (tumour_dilation < 0) throw ConfigError("tumour_dilation must be >= 0");
}

CandidateMask threshold_cdi(const Volume& cdi) {
    cdi.validate();
    const auto [lo, hi] = std::minmax_element(cdi.data.begin(), cdi.data.end());
    if (*lo == *hi) throw NumericError("threshold_cdi: constant volume, threshold degenerate");
    const double threshold = static_cast<double>(*hi) / 2.0;

    CandidateMask out;
    out.cdi_max = static_cast<double>(*hi);
    out.mask = Volume("cdi_mask", cdi.nx, cdi.ny, cdi.nz, cdi.voxel_size_mm);
    for (std::size_t i = 0; i < cdi.data.size(); ++i)
        out.mask.data[i] = static_cast<double>(cdi.data[i]) > threshold ? 1.0f : 0.0f;
    return out;
}

namespace {

// Per-slice mean and population std of a channel over the prostate voxels.
struct SliceStats {
    double mean = 0.0;
    double std = 0.0;
    bool any = false;
};

std::vector<SliceStats> slice_stats(const Volume& channel, const Volume& prostate) {
    std::vector<SliceStats> stats(channel.nz);
    for (int z = 0; z < channel.nz; ++z) {
        double sum = 0.0, sum2 = 0.0;
        std::size_t n = 0;
        for (int y = 0; y < channel.ny; ++y)
            for (int x = 0; x < channel.nx; ++x)
                if (prostate.at(x, y, z) == 1.0f) {
                    const double v = channel.at(x, y, z);
                    sum += v;
                    sum2 += v * v;
                    ++n;
                }
        if (n > 0) {
            const double mean = sum / static_cast<double>(n);
            const double var = std::max(0.0, sum2 / static_cast<double>(n) - mean * mean);
            stats[z] = {mean, std::sqrt(var), true};
        }
    }
    return stats;
}

Tensor3f extract_patch(const std::array<const Volume*, kPatchChannels>& channels,
                       const std::vector<std::vector<SliceStats>>& stats, std::array<int, 3> centroid,
                       int size, std::array<bool, kPatchChannels>& zero_variance) {
    const int half = size / 2;
    const int z = centroid[2];
    Tensor3f patch(kPatchChannels, size, size);
    for (int ci = 0; ci < kPatchChannels; ++ci) {
        const Volume& vol = *channels[ci];
        const SliceStats& st = stats[ci][z];
        const bool degenerate = !st.any || st.std == 0.0;
        zero_variance[ci] = degenerate;
        for (int r = 0; r < size; ++r) {
            const int y = reflect_index(centroid[1] + r - half, vol.ny);
            for (int c = 0; c < size; ++c) {
                const int x = reflect_index(centroid[0] + c - half, vol.nx);
                const double v = vol.at(x, y, z);
                patch.at(ci, r, c) = degenerate ? 0.0f : static_cast<float>((v - st.mean) / st.std);
            }
        }
    }
    return patch;
}

} // namespace

std::vector<Candidate> extract_candidates(const PatientCase& pc, const CandidateMask& mask,
                                          const ExtractConfig& cfg) {
    cfg.validate();
    if (!mask.mask.same_dims(pc.prostate_mask)) throw NumericError("extract_candidates: mask dims mismatch");
    const int nx = pc.prostate_mask.nx, ny = pc.prostate_mask.ny, nz = pc.prostate_mask.nz;

    bool any_prostate = false;
    for (float v : pc.prostate_mask.data) any_prostate |= (v == 1.0f);
    if (!any_prostate) throw NumericError("extract_candidates: empty prostate mask");

    const std::array<const Volume*, kPatchChannels> channels{&pc.t2w, &pc.adc, &pc.chb_dwi, &pc.cdi};
    std::vector<std::vector<SliceStats>> stats;
    stats.reserve(kPatchChannels);
    for (const Volume* v : channels) stats.push_back(slice_stats(*v, pc.prostate_mask));

    std::vector<Candidate> out;
    int next_index = 0;

    auto add_candidate = [&](std::array<int, 3> centroid, Label label) {
        Candidate cand;
        cand.patient_id = pc.patient_id;
        cand.source_index = next_index++;
        cand.centroid = centroid;
        cand.label = label;
        cand.rotation_index = 0;
        cand.patch = extract_patch(channels, stats, centroid, cfg.patch_size, cand.zero_variance_channel);
        out.push_back(std::move(cand));
    };

    // (a) per-slice 8-connected components of mask & prostate.
    std::vector<int> comp_label(static_cast<std::size_t>(nx) * ny, -1);
    std::vector<std::size_t> stack;
    for (int z = 0; z < nz; ++z) {
        std::fill(comp_label.begin(), comp_label.end(), -1);
        auto in_mask = [&](int x, int y) {
            return mask.mask.at(x, y, z) == 1.0f && pc.prostate_mask.at(x, y, z) == 1.0f;
        };
        int comp_id = 0;
        for (int y = 0; y < ny; ++y) {
            for (int x = 0; x < nx; ++x) {
                const std::size_t flat = static_cast<std::size_t>(y) * nx + x;
                if (!in_mask(x, y) || comp_label[flat] >= 0) continue;
                // flood fill
                stack.clear();
                stack.push_back(flat);
                comp_label[flat] = comp_id;
                std::size_t sum_x = 0, sum_y = 0, count = 0, in_tumour = 0;
                while (!stack.empty()) {
                    const std::size_t cur = stack.back();
                    stack.pop_back();
                    const int cy = static_cast<int>(cur / nx), cx = static_cast<int>(cur % nx);
                    sum_x += cx;
                    sum_y += cy;
                    ++count;
                    if (pc.tumour_mask.at(cx, cy, z) == 1.0f) ++in_tumour;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int nx2 = cx + dx, ny2 = cy + dy;
                            if (nx2 < 0 || nx2 >= nx || ny2 < 0 || ny2 >= ny) continue;
                            const std::size_t nflat = static_cast<std::size_t>(ny2) * nx + nx2;
                            if (comp_label[nflat] < 0 && in_mask(nx2, ny2)) {
                                comp_label[nflat] = comp_id;
                                stack.push_back(nflat);
                            }
                        }
                }
                const int cx0 = static_cast<int>(
                    std::floor(static_cast<double>(sum_x) / static_cast<double>(count) + 0.5));
                const int cy0 = static_cast<int>(
                    std::floor(static_cast<double>(sum_y) / static_cast<double>(count) + 0.5));
                const Label label = 2 * in_tumour >= count ? Label::cancerous : Label::healthy;
                add_candidate({cx0, cy0, z}, label);
                ++comp_id;
            }
        }
    }

    // (b) healthy grid over prostate \ dilated tumour. The dilation also spans
    // one slice vertically: the tumour boundary blends across slices, so
    // directly adjacent z-neighbours are not clean healthy tissue.
    const int dil = cfg.tumour_dilation;
    auto near_tumour = [&](int x, int y, int z) {
        for (int dz = -1; dz <= 1; ++dz) {
            const int zz = z + dz;
            if (zz < 0 || zz >= nz) continue;
            for (int dy = -dil; dy <= dil; ++dy)
                for (int dx = -dil; dx <= dil; ++dx) {
                    const int xx = x + dx, yy = y + dy;
                    if (xx < 0 || xx >= nx || yy < 0 || yy >= ny) continue;
                    if (pc.tumour_mask.at(xx, yy, zz) == 1.0f) return true;
                }
        }
        return false;
    };
    const int offset = cfg.healthy_grid_stride / 2;
    for (int z = 0; z < nz; ++z)
        for (int y = offset; y < ny; y += cfg.healthy_grid_stride)
            for (int x = offset; x < nx; x += cfg.healthy_grid_stride)
                if (pc.prostate_mask.at(x, y, z) == 1.0f && !near_tumour(x, y, z))
                    add_candidate({x, y, z}, Label::healthy);

    return out;
}

namespace {

// Odd 45-degree multiples: bilinear sampling from the reflect-padded patch.
Tensor3f rotate_bilinear(const Tensor3f& in, int k) {
    const int n = in.h;
    const int pad = 7; // 32 -> 46; covers the sqrt(2) * 15.5 support of a corner
    const int np = n + 2 * pad;
    Tensor3f padded(in.c, np, np);
    for (int ci = 0; ci < in.c; ++ci)
        for (int r = 0; r < np; ++r)
            for (int c = 0; c < np; ++c)
                padded.at(ci, r, c) = in.at(ci, reflect_index(r - pad, n), reflect_index(c - pad, n));

    const double theta = k * 45.0 * std::numbers::pi / 180.0;
    const double ct = std::cos(theta), st = std::sin(theta);
    const double m = (n - 1) / 2.0;
    const double mp = (np - 1) / 2.0;

    Tensor3f out(in.c, n, n);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            const double dr = r - m, dc = c - m;
            const double src_r = mp + ct * dr + st * dc;
            const double src_c = mp - st * dr + ct * dc;
            const int r0 = static_cast<int>(std::floor(src_r));
            const int c0 = static_cast<int>(std::floor(src_c));
            const double fr = src_r - r0, fc = src_c - c0;
            for (int ci = 0; ci < in.c; ++ci) {
                const double v00 = padded.at(ci, r0, c0);
                const double v01 = padded.at(ci, r0, c0 + 1);
                const double v10 = padded.at(ci, r0 + 1, c0);
                const double v11 = padded.at(ci, r0 + 1, c0 + 1);
                out.at(ci, r, c) = static_cast<float>((1 - fr) * ((1 - fc) * v00 + fc * v01) +
                                                      fr * ((1 - fc) * v10 + fc * v11));
            }
        }
    }
    return out;
}

} // namespace

Tensor3f rotate_patch90(const Tensor3f& in) {
    Tensor3f out(in.c, in.h, in.w);
    for (int ci = 0; ci < in.c; ++ci)
        for (int r = 0; r < in.h; ++r)
            for (int c = 0; c < in.w; ++c)
                out.at(ci, r, c) = in.at(ci, c, in.w - 1 - r);
    return out;
}

std::vector<Candidate> augment_rotations(std::span<const Candidate> cands) {
    std::vector<Candidate> out;
    out.reserve(cands.size() * 8);
    for (const Candidate& src : cands) {
        if (src.rotation_index != 0)
            throw ConfigError("augment_rotations: input candidate already augmented");
        for (int k = 0; k < 8; ++k) {
            Candidate c = src;
            c.rotation_index = k;
            if (k == 0) {
                // bit-identical copy
            } else if (k % 2 == 0) {
                for (int q = 0; q < k / 2; ++q) c.patch = rotate_patch90(c.patch);
            } else {
                c.patch = rotate_bilinear(src.patch, k);
            }
            out.push_back(std::move(c));
        }
    }
    return out;
}

std::vector<Candidate> balance_families(std::span<const Candidate> cands, std::uint64_t seed,
                                        bool rotation0_only) {
    // Group into rotation families.
    std::map<std::pair<std::string, int>, std::vector<const Candidate*>> families;
    for (const Candidate& c : cands) families[c.family_key()].push_back(&c);

    std::vector<std::pair<std::string, int>> healthy_keys, cancer_keys;
    for (const auto& [key, members] : families) {
        (members.front()->label == Label::cancerous ? cancer_keys : healthy_keys).push_back(key);
    }
    if (cancer_keys.empty()) throw NumericError("balance: no cancerous candidates");
    if (healthy_keys.empty()) throw NumericError("balance: no healthy candidates");

    // Subsample the majority class; keys are already sorted (std::map order).
    auto subsample = [&](std::vector<std::pair<std::string, int>>& keys, std::size_t target) {
        Rng rng(derive_seed(seed, "balance"));
        rng.shuffle(keys);
        keys.resize(target);
        std::sort(keys.begin(), keys.end());
    };
    const std::size_t target = std::min(healthy_keys.size(), cancer_keys.size());
    if (healthy_keys.size() > target) subsample(healthy_keys, target);
    if (cancer_keys.size() > target) subsample(cancer_keys, target);

    std::set<std::pair<std::string, int>> keep(healthy_keys.begin(), healthy_keys.end());
    keep.insert(cancer_keys.begin(), cancer_keys.end());

    std::vector<Candidate> out;
    for (const auto& [key, members] : families) {
        if (!keep.count(key)) continue;
        std::vector<const Candidate*> sorted = members;
        std::sort(sorted.begin(), sorted.end(), [](const Candidate* a, const Candidate* b) {
            return a->rotation_index < b->rotation_index;
        });
        for (const Candidate* c : sorted) {
            if (rotation0_only && c->rotation_index != 0) continue;
            out.push_back(*c);
        }
    }
    return out;
}

BalancedSplit balance_split(std::span<const Candidate> train_pool, std::span<const Candidate> test_pool,
                            std::uint64_t seed) {
    BalancedSplit split;
    split.train = balance_families(train_pool, derive_seed(seed, "train"), false);
    split.test = balance_families(test_pool, derive_seed(seed, "test"), true);
    return split;
}

namespace {
constexpr const char* kCandidatesFormat = "candidates-v1";
} // namespace

void save_candidates(std::span<const Candidate> cands, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream blob(dir / "patches.bin", std::ios::binary | std::ios::trunc);
    std::ofstream index(dir / "candidates.jsonl", std::ios::trunc);
    if (!blob || !index) throw ParseError("cannot open candidate outputs in '" + dir.string() + "'");

    std::uint64_t offset = 0;
    int patch_size = cands.empty() ? 0 : cands.front().patch.h;
    for (const Candidate& c : cands) {
        if (c.patch.c != kPatchChannels || c.patch.h != patch_size || c.patch.w != patch_size)
            throw ParseError("save_candidates: inconsistent patch shape");
        json j;
        j["patient_id"] = c.patient_id;
        j["source_index"] = c.source_index;
        j["centroid"] = c.centroid;
        j["label"] = c.label == Label::cancerous ? "cancerous" : "healthy";
        j["rotation_index"] = c.rotation_index;
        j["zero_variance_channel"] = c.zero_variance_channel;
        j["offset"] = offset;
        index << j.dump() << '\n';

        static_assert(sizeof(float) == 4);
        blob.write(reinterpret_cast<const char*>(c.patch.v.data()),
                   static_cast<std::streamsize>(c.patch.v.size() * 4));
        offset += c.patch.v.size() * 4;
    }
    json meta;
    meta["format"] = kCandidatesFormat;
    meta["count"] = cands.size();
    meta["channels"] = kPatchChannels;
    meta["patch_size"] = patch_size;
    std::ofstream mf(dir / "candidates_meta.json", std::ios::trunc);
    mf << meta.dump(2) << '\n';
    if (!blob || !index || !mf) throw ParseError("I/O failure writing candidates to '" + dir.string() + "'");
}

std::vector<Candidate> load_candidates(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "candidates_meta.json");
    if (!mf) throw MissingInputError("missing '" + (dir / "candidates_meta.json").string() + "'");
    json meta;
    try {
        mf >> meta;
    } catch (const json::exception& e) {
        throw ParseError("candidates_meta.json: " + std::string(e.what()));
    }
    if (meta.at("format").get<std::string>() != kCandidatesFormat)
        throw ParseError("unknown candidates format");
    const auto count = meta.at("count").get<std::uint64_t>();
    const int patch_size = meta.at("patch_size").get<int>();
    const int channels = meta.at("channels").get<int>();
    if (channels != kPatchChannels) throw ParseError("unexpected candidate channel count");

    std::ifstream blob(dir / "patches.bin", std::ios::binary);
    std::ifstream index(dir / "candidates.jsonl");
    if (!blob) throw MissingInputError("missing '" + (dir / "patches.bin").string() + "'");
    if (!index) throw MissingInputError("missing '" + (dir / "candidates.jsonl").string() + "'");

    std::vector<Candidate> out;
    out.reserve(count);
    std::string line;
    while (std::getline(index, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError("candidates.jsonl: " + std::string(e.what()));
        }
        Candidate c;
        c.patient_id = j.at("patient_id").get<std::string>();
        c.source_index = j.at("source_index").get<int>();
        c.centroid = j.at("centroid").get<std::array<int, 3>>();
        c.label = j.at("label").get<std::string>() == "cancerous" ? Label::cancerous : Label::healthy;
        c.rotation_index = j.at("rotation_index").get<int>();
        c.zero_variance_channel = j.at("zero_variance_channel").get<std::array<bool, kPatchChannels>>();
        c.patch = Tensor3f(kPatchChannels, patch_size, patch_size);
        blob.seekg(static_cast<std::streamoff>(j.at("offset").get<std::uint64_t>()));
        blob.read(reinterpret_cast<char*>(c.patch.v.data()),
                  static_cast<std::streamsize>(c.patch.v.size() * 4));
        if (static_cast<std::size_t>(blob.gcount()) != c.patch.v.size() * 4)
            throw ParseError("patches.bin: payload length mismatch");
        if (!c.patch.all_finite()) throw ParseError("patches.bin: non-finite patch values");
        out.push_back(std::move(c));
    }
    if (out.size() != count) throw ParseError("candidates.jsonl: record count mismatch");
    return out;
}

} // namespace radq
