#pragma once

#include "radq/candidates.hpp"
#include "radq/learn.hpp"
#include "radq/phantom.hpp"
#include "radq/sequencer.hpp"

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json_fwd.hpp>

namespace radq {

// Whole-run configuration consumed by the CLI subcommands. Every stage reads
// prior-stage outputs from out_dir and never mutates them.
struct RunConfig {
    std::filesystem::path out_dir = "run";
    int threads = 1;

    PhantomConfig phantom;
    ExtractConfig candidates;

    DiscoveryConfig discovery;
    std::size_t discovery_max_families = 16; // per class, rotation families

    std::uint64_t lopo_seed = 0;
    bool lopo_train_rotations = true;
    int mlp_hidden = 100;
    int mlp_max_iter = 300;

    void validate() const;
    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j); // rejects unknown keys
    static RunConfig from_file(const std::filesystem::path& path);

    std::uint64_t config_hash() const;
};

// Stage entry points (the CLI is a thin argv adapter over these).
void stage_phantom(const RunConfig& cfg);
void stage_candidates(const RunConfig& cfg);
void stage_discover(const RunConfig& cfg);
void stage_sequence(const RunConfig& cfg);
void stage_baseline(const RunConfig& cfg);
void stage_lopo(const RunConfig& cfg);
nlohmann::json stage_report(const RunConfig& cfg);

// Feature tables written by stage_sequence / stage_baseline.
void write_feature_csv(const std::filesystem::path& path, const std::vector<FeatureRecord>& records,
                       const std::vector<std::string>& feature_names);
std::vector<FeatureRecord> read_feature_csv(const std::filesystem::path& path);

// Fold results written by stage_lopo.
std::vector<FoldResult> read_fold_results(const std::filesystem::path& path);

} // namespace radq
