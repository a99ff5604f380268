#include "radq/error.hpp"
#include "radq/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

namespace {

using radq::RunConfig;

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    int threads = -1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "run configuration JSON");
    cmd->add_option("--out", args.out_dir, "run output directory");
    cmd->add_option("--threads", args.threads, "worker thread cap (1 is bit-identical to N)");
}

RunConfig resolve_config(const CommonArgs& args) {
    RunConfig cfg;
    if (!args.config_path.empty()) cfg = RunConfig::from_file(args.config_path);
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    if (args.threads >= 0) cfg.threads = args.threads;
    cfg.validate();
    return cfg;
}

void record_timing(const RunConfig& cfg, const std::string& stage, double seconds) {
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream out(cfg.out_dir / "timings.jsonl", std::ios::app);
    out << nlohmann::json{{"stage", stage}, {"seconds", seconds}}.dump() << '\n';
}

int run_stage(const std::string& name, const RunConfig& cfg, const std::function<void()>& fn) {
    const auto start = std::chrono::steady_clock::now();
    fn();
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    record_timing(cfg, name, seconds);
    std::cerr << "[radq] " << name << " done in " << seconds << " s\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"radq: phantom MP-MRI radiomic sequencer pipeline"};
    app.require_subcommand(1);

    CommonArgs common;

    std::optional<int> patients;
    std::optional<std::uint64_t> phantom_seed;
    std::optional<double> noise_sigma;
    auto* cmd_phantom = app.add_subcommand("phantom", "generate the synthetic cohort");
    add_common(cmd_phantom, common);
    cmd_phantom->add_option("--patients", patients, "number of synthetic patients");
    cmd_phantom->add_option("--seed", phantom_seed, "cohort seed");
    cmd_phantom->add_option("--noise", noise_sigma, "additive DWI noise sigma");

    std::optional<int> stride;
    auto* cmd_candidates = app.add_subcommand("candidates", "detect and extract tumour candidates");
    add_common(cmd_candidates, common);
    cmd_candidates->add_option("--stride", stride, "healthy sampling grid stride");

    std::optional<std::uint64_t> discover_seed;
    std::optional<std::string> profile;
    std::optional<int> iters;
    auto* cmd_discover = app.add_subcommand("discover", "discover the radiomic sequencer");
    add_common(cmd_discover, common);
    cmd_discover->add_option("--seed", discover_seed, "discovery seed");
    cmd_discover->add_option("--profile", profile, "architecture profile: paper|desk");
    cmd_discover->add_option("--iters", iters, "SCG iteration budget");

    auto* cmd_sequence = app.add_subcommand("sequence", "emit discovered radiomic sequences");
    add_common(cmd_sequence, common);

    auto* cmd_baseline = app.add_subcommand("baseline", "emit hand-crafted texture sequences");
    add_common(cmd_baseline, common);

    std::optional<std::uint64_t> lopo_seed;
    auto* cmd_lopo = app.add_subcommand("lopo", "leave-one-patient-out evaluation");
    add_common(cmd_lopo, common);
    cmd_lopo->add_option("--seed", lopo_seed, "fold balancing / classifier seed");

    auto* cmd_report = app.add_subcommand("report", "assemble the comparison report");
    add_common(cmd_report, common);

    auto* cmd_run = app.add_subcommand("run", "run every stage in order");
    add_common(cmd_run, common);

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg = resolve_config(common);
        if (cmd_phantom->parsed()) {
            if (patients) cfg.phantom.n_patients = *patients;
            if (phantom_seed) cfg.phantom.seed = *phantom_seed;
            if (noise_sigma) cfg.phantom.noise_sigma = *noise_sigma;
            cfg.validate();
            return run_stage("phantom", cfg, [&] { radq::stage_phantom(cfg); });
        }
        if (cmd_candidates->parsed()) {
            if (stride) cfg.candidates.healthy_grid_stride = *stride;
            cfg.validate();
            return run_stage("candidates", cfg, [&] { radq::stage_candidates(cfg); });
        }
        if (cmd_discover->parsed()) {
            if (discover_seed) cfg.discovery.seed = *discover_seed;
            if (profile) cfg.discovery.profile = *profile;
            if (iters) cfg.discovery.max_iter = *iters;
            cfg.validate();
            return run_stage("discover", cfg, [&] { radq::stage_discover(cfg); });
        }
        if (cmd_sequence->parsed()) return run_stage("sequence", cfg, [&] { radq::stage_sequence(cfg); });
        if (cmd_baseline->parsed()) return run_stage("baseline", cfg, [&] { radq::stage_baseline(cfg); });
        if (cmd_lopo->parsed()) {
            if (lopo_seed) cfg.lopo_seed = *lopo_seed;
            return run_stage("lopo", cfg, [&] { radq::stage_lopo(cfg); });
        }
        if (cmd_report->parsed()) return run_stage("report", cfg, [&] { (void)radq::stage_report(cfg); });
        if (cmd_run->parsed()) {
            run_stage("phantom", cfg, [&] { radq::stage_phantom(cfg); });
            run_stage("candidates", cfg, [&] { radq::stage_candidates(cfg); });
            run_stage("discover", cfg, [&] { radq::stage_discover(cfg); });
            run_stage("sequence", cfg, [&] { radq::stage_sequence(cfg); });
            run_stage("baseline", cfg, [&] { radq::stage_baseline(cfg); });
            run_stage("lopo", cfg, [&] { radq::stage_lopo(cfg); });
            run_stage("report", cfg, [&] { (void)radq::stage_report(cfg); });
            return 0;
        }
    } catch (const radq::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const radq::MissingInputError& e) {
        std::cerr << "missing input: " << e.what() << '\n';
        return 3;
    } catch (const radq::NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
