#pragma once

#include "radq/tensor.hpp"
#include "radq/volume.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace radq {

enum class Label : int { healthy = 0, cancerous = 1 };

constexpr int kPatchChannels = 4; // channel order: t2w, adc, chb_dwi, cdi

struct CandidateMask {
    Volume mask;
    double cdi_max = 0.0;
};

// Binary mask of voxels with CDI(x) > cdi_max / 2 (strict).
// Throws NumericError on a constant volume (degenerate threshold).
CandidateMask threshold_cdi(const Volume& cdi);

struct Candidate {
    std::string patient_id;
    int source_index = 0; // ordinal among the patient's unaugmented candidates
    std::array<int, 3> centroid{}; // voxel coordinates (x, y, z)
    Label label = Label::healthy;
    int rotation_index = 0; // k means k * 45 degrees CCW
    Tensor3f patch;         // kPatchChannels x size x size, z-scored per channel
    std::array<bool, kPatchChannels> zero_variance_channel{};

    // Rotation family identity: all rotations of one source share this key.
    std::pair<std::string, int> family_key() const { return {patient_id, source_index}; }
};

struct ExtractConfig {
    int patch_size = 32;
    int healthy_grid_stride = 12;
    int tumour_dilation = 2; // in-plane Chebyshev dilation excluded from the healthy grid

    void validate() const;
};

// Per-slice 8-connected components of mask & prostate become candidates
// (cancerous iff >= 50% of component voxels lie in tumour_mask), plus healthy
// candidates on a regular grid over prostate \ dilated tumour. Patches are
// reflected at slice edges and z-scored over the prostate voxels of their slice.
std::vector<Candidate> extract_candidates(const PatientCase& pc, const CandidateMask& mask,
                                          const ExtractConfig& cfg = {});

// 8 candidates per input at k*45 degrees CCW, k = 0..7. Multiples of 90 are
// exact index permutations; odd multiples are sampled bilinearly from the
// patch reflect-padded to (size + 14)^2. Inputs must be unaugmented.
std::vector<Candidate> augment_rotations(std::span<const Candidate> cands);

// 90 degrees CCW about the patch center: out[r][c] = in[c][n-1-r]. Lossless.
Tensor3f rotate_patch90(const Tensor3f& patch);

// Family-granular class balancing: the majority class is subsampled (seeded,
// without replacement, keys sorted first) to the minority family count. All
// rotations of a kept family stay together; rotation0_only restricts the
// output to originals (evaluation sets). Throws if either class is absent.
std::vector<Candidate> balance_families(std::span<const Candidate> cands, std::uint64_t seed,
                                        bool rotation0_only = false);

struct BalancedSplit {
    std::vector<Candidate> train; // balanced, rotations kept
    std::vector<Candidate> test;  // balanced, rotation 0 only
};

BalancedSplit balance_split(std::span<const Candidate> train_pool, std::span<const Candidate> test_pool,
                            std::uint64_t seed);

// Binary patch blob + JSONL index.
void save_candidates(std::span<const Candidate> cands, const std::filesystem::path& dir);
std::vector<Candidate> load_candidates(const std::filesystem::path& dir);

} // namespace radq
