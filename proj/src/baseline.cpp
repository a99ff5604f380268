#include "radq/baseline.hpp"

#include "radq/error.hpp"

#include <algorithm>
#include <cmath>

namespace radq {

std::array<double, kFirstOrderCount> first_order(std::span<const float> values) {
    if (values.empty()) throw NumericError("first_order: empty input");
    const double n = static_cast<double>(values.size());

    double sum = 0.0;
    for (float v : values) sum += v;
    const double mean = sum / n;

    double m2 = 0.0, m3 = 0.0, m4 = 0.0;
    for (float v : values) {
        const double d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    const double sd = std::sqrt(m2);
    const double skewness = m2 > 0.0 ? m3 / (sd * sd * sd) : 0.0;
    const double kurtosis = m2 > 0.0 ? m4 / (m2 * m2) - 3.0 : 0.0;

    std::vector<float> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const std::size_t half = sorted.size() / 2;
    const double median = sorted.size() % 2 == 1
                              ? sorted[half]
                              : 0.5 * (static_cast<double>(sorted[half - 1]) + sorted[half]);

    // Shannon entropy over a 32-bin histogram spanning the value range.
    double entropy = 0.0;
    const float lo = sorted.front(), hi = sorted.back();
    if (hi > lo) {
        constexpr int kBins = 32;
        std::array<std::size_t, kBins> hist{};
        for (float v : values) {
            int bin = static_cast<int>((static_cast<double>(v) - lo) / (hi - lo) * kBins);
            bin = std::clamp(bin, 0, kBins - 1);
            ++hist[bin];
        }
        for (std::size_t c : hist)
            if (c > 0) {
                const double p = static_cast<double>(c) / n;
                entropy -= p * std::log2(p);
            }
    }
    return {mean, sd, skewness, kurtosis, median, entropy};
}

std::array<double, kGlcmFeatureCount> glcm_features(const Tensor3f& patch, int channel,
                                                    std::array<int, 2> offset) {
    const int h = patch.h, w = patch.w;
    const float* p = patch.channel(channel);

    float lo = p[0], hi = p[0];
    for (int i = 1; i < h * w; ++i) {
        lo = std::min(lo, p[i]);
        hi = std::max(hi, p[i]);
    }
    // Quantize to kGlcmLevels over the min-max range; a constant patch maps to
    // a single level (legal: single-cell GLCM).
    auto level = [&](float v) {
        if (hi <= lo) return 0;
        int q = static_cast<int>((static_cast<double>(v) - lo) / (static_cast<double>(hi) - lo) * kGlcmLevels);
        return std::clamp(q, 0, kGlcmLevels - 1);
    };

    std::array<double, kGlcmLevels * kGlcmLevels> glcm{};
    const int dr = offset[0], dc = offset[1];
    double total = 0.0;
    for (int r = 0; r < h; ++r) {
        const int r2 = r + dr;
        if (r2 < 0 || r2 >= h) continue;
        for (int c = 0; c < w; ++c) {
            const int c2 = c + dc;
            if (c2 < 0 || c2 >= w) continue;
            const int a = level(p[r * w + c]);
            const int b = level(p[r2 * w + c2]);
            glcm[a * kGlcmLevels + b] += 1.0;
            glcm[b * kGlcmLevels + a] += 1.0;
            total += 2.0;
        }
    }
    if (total == 0.0) throw NumericError("glcm_features: offset leaves no voxel pairs");
    for (double& g : glcm) g /= total;

    // Marginals (symmetric GLCM: equal along both axes).
    std::array<double, kGlcmLevels> marginal{};
    for (int i = 0; i < kGlcmLevels; ++i)
        for (int j = 0; j < kGlcmLevels; ++j) marginal[i] += glcm[i * kGlcmLevels + j];
    double mu = 0.0;
    for (int i = 0; i < kGlcmLevels; ++i) mu += i * marginal[i];
    double var = 0.0;
    for (int i = 0; i < kGlcmLevels; ++i) var += (i - mu) * (i - mu) * marginal[i];

    double contrast = 0.0, correlation = 0.0, energy = 0.0, homogeneity = 0.0, entropy = 0.0;
    for (int i = 0; i < kGlcmLevels; ++i) {
        for (int j = 0; j < kGlcmLevels; ++j) {
            const double pij = glcm[i * kGlcmLevels + j];
            if (pij == 0.0) continue;
            contrast += pij * (i - j) * (i - j);
            energy += pij * pij;
            homogeneity += pij / (1.0 + std::abs(i - j));
            entropy -= pij * std::log2(pij);
            if (var > 0.0) correlation += (i - mu) * (j - mu) * pij / var;
        }
    }
    if (var <= 0.0) correlation = 0.0;
    return {contrast, correlation, energy, homogeneity, entropy};
}

std::vector<double> texture_sequence(const Candidate& cand) {
    if (cand.patch.c != kPatchChannels) throw NumericError("texture_sequence: unexpected channel count");
    std::vector<double> out;
    out.reserve(kTextureSequenceLength);
    const int plane = cand.patch.h * cand.patch.w;
    for (int ci = 0; ci < kPatchChannels; ++ci) {
        const auto fo = first_order(std::span<const float>(cand.patch.channel(ci), plane));
        out.insert(out.end(), fo.begin(), fo.end());
        for (const auto& offset : kGlcmOffsets) {
            const auto gf = glcm_features(cand.patch, ci, offset);
            out.insert(out.end(), gf.begin(), gf.end());
        }
    }
    return out;
}

const std::vector<std::string>& texture_feature_names() {
    static const std::vector<std::string> names = [] {
        const std::array<const char*, kPatchChannels> channels{"t2w", "adc", "chb_dwi", "cdi"};
        const std::array<const char*, kFirstOrderCount> fo{"mean",     "std",    "skewness",
                                                           "kurtosis", "median", "entropy"};
        const std::array<const char*, kGlcmFeatureCount> gf{"contrast", "correlation", "energy",
                                                            "homogeneity", "entropy"};
        std::vector<std::string> out;
        for (const char* ch : channels) {
            for (const char* f : fo) out.push_back(std::string(ch) + ".fo." + f);
            for (const auto& offset : kGlcmOffsets) {
                const std::string tag = "(" + std::to_string(offset[0]) + "," + std::to_string(offset[1]) + ")";
                for (const char* f : gf) out.push_back(std::string(ch) + ".glcm" + tag + "." + f);
            }
        }
        return out;
    }();
    return names;
}

} // namespace radq
