#pragma once

#include "radq/candidates.hpp"

#include <array>
#include <span>
#include <string>
#include <vector>

namespace radq {

// Hand-crafted texture sequencer ("texture-baseline-v1"): per channel
// 6 first-order statistics plus 5 GLCM features at 4 offsets -> 26 features,
// 104 across the 4 modalities.
constexpr int kFirstOrderCount = 6;
constexpr int kGlcmFeatureCount = 5;
constexpr int kGlcmLevels = 16;
inline constexpr std::array<std::array<int, 2>, 4> kGlcmOffsets{{{0, 1}, {1, 0}, {1, 1}, {1, -1}}};
constexpr int kTextureSequenceLength =
    kPatchChannels * (kFirstOrderCount + kGlcmFeatureCount * static_cast<int>(kGlcmOffsets.size()));

// mean, population std, skewness, excess kurtosis, median, Shannon entropy
// (bits, 32-bin histogram over the value range). Skewness/kurtosis are 0 for
// constant input.
std::array<double, kFirstOrderCount> first_order(std::span<const float> values);

// Symmetric normalized GLCM over kGlcmLevels gray levels quantized on the
// patch's own min-max range; offset is (row, col) displacement.
// Features: contrast, correlation, energy, homogeneity, entropy (bits).
std::array<double, kGlcmFeatureCount> glcm_features(const Tensor3f& patch, int channel,
                                                    std::array<int, 2> offset);

std::vector<double> texture_sequence(const Candidate& cand);

// Fixed, ordered feature names matching texture_sequence output.
const std::vector<std::string>& texture_feature_names();

} // namespace radq
