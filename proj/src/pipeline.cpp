#include "radq/pipeline.hpp"

#include "radq/baseline.hpp"
#include "radq/error.hpp"
#include "radq/eval.hpp"
#include "radq/json_util.hpp"
#include "radq/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace radq {

using nlohmann::json;

namespace {

constexpr const char* kCdiVersion = "cdi-product-v1";
constexpr const char* kBaselineVersion = "texture-baseline-v1";
constexpr const char* kPipelineVersion = "radq-pipeline-v1";

json versions_json() {
    return json{{"pipeline", kPipelineVersion},
                {"cdi", kCdiVersion},
                {"baseline", kBaselineVersion},
                {"model", "sequencer-v1"},
                {"volume", "vol-v1"}};
}

void write_provenance(const RunConfig& cfg, const std::filesystem::path& dir, const std::string& stage) {
    json j;
    j["stage"] = stage;
    j["config_hash"] = cfg.config_hash();
    j["config"] = cfg.to_json();
    j["seeds"] = {{"cohort", cfg.phantom.seed}, {"discovery", cfg.discovery.seed}, {"lopo", cfg.lopo_seed}};
    j["versions"] = versions_json();
    std::ofstream out(dir / "provenance.json", std::ios::trunc);
    if (!out) throw ParseError("cannot write provenance in '" + dir.string() + "'");
    out << j.dump(2) << '\n';
}

void require_exists(const std::filesystem::path& p, const std::string& what) {
    if (!std::filesystem::exists(p))
        throw MissingInputError("missing " + what + ": '" + p.string() +
                                "' (run the producing stage first)");
}

std::string format_float(float v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
    return buf;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

void RunConfig::validate() const {
    if (out_dir.empty()) throw ConfigError("run config: out_dir must not be empty");
    if (threads < 0) throw ConfigError("run config: threads must be >= 0");
    phantom.validate();
    candidates.validate();
    if (discovery.profile != "paper" && discovery.profile != "desk")
        throw ConfigError("run config: discovery.profile must be 'paper' or 'desk'");
    if (discovery.desk_divisor < 1) throw ConfigError("run config: discovery.desk_divisor must be >= 1");
    if (!(discovery.psi_init >= kPsiMin && discovery.psi_init <= kPsiMax))
        throw ConfigError("run config: discovery.psi_init out of bounds");
    if (discovery.max_iter < 1) throw ConfigError("run config: discovery.max_iter must be >= 1");
    if (discovery_max_families < 1) throw ConfigError("run config: discovery_max_families must be >= 1");
    if (mlp_hidden < 1) throw ConfigError("run config: mlp_hidden must be >= 1");
    if (mlp_max_iter < 1) throw ConfigError("run config: mlp_max_iter must be >= 1");
}

json RunConfig::to_json() const {
    json j;
    j["out_dir"] = out_dir.string();
    j["threads"] = threads;
    j["phantom"] = phantom_config_to_json(phantom);
    j["candidates"] = {{"patch_size", candidates.patch_size},
                       {"healthy_grid_stride", candidates.healthy_grid_stride},
                       {"tumour_dilation", candidates.tumour_dilation}};
    j["discovery"] = {{"profile", discovery.profile},
                      {"desk_divisor", discovery.desk_divisor},
                      {"psi_init", discovery.psi_init},
                      {"global_psi", discovery.global_psi},
                      {"seed", discovery.seed},
                      {"max_iter", discovery.max_iter},
                      {"grad_tol", discovery.grad_tol},
                      {"scg_sigma", discovery.scg_sigma},
                      {"max_families_per_class", discovery_max_families}};
    j["lopo"] = {{"seed", lopo_seed},
                 {"train_rotations", lopo_train_rotations},
                 {"mlp_hidden", mlp_hidden},
                 {"mlp_max_iter", mlp_max_iter}};
    return j;
}

RunConfig RunConfig::from_json(const json& j) {
    reject_unknown_keys(j, {"out_dir", "threads", "phantom", "candidates", "discovery", "lopo"},
                        "run config");
    RunConfig cfg;
    try {
        if (j.contains("out_dir")) cfg.out_dir = j["out_dir"].get<std::string>();
        if (j.contains("threads")) cfg.threads = j["threads"].get<int>();
        if (j.contains("phantom")) cfg.phantom = phantom_config_from_json(j["phantom"]);
        if (j.contains("candidates")) {
            const json& c = j["candidates"];
            reject_unknown_keys(c, {"patch_size", "healthy_grid_stride", "tumour_dilation"},
                                "candidates config");
            if (c.contains("patch_size")) cfg.candidates.patch_size = c["patch_size"].get<int>();
            if (c.contains("healthy_grid_stride"))
                cfg.candidates.healthy_grid_stride = c["healthy_grid_stride"].get<int>();
            if (c.contains("tumour_dilation"))
                cfg.candidates.tumour_dilation = c["tumour_dilation"].get<int>();
        }
        if (j.contains("discovery")) {
            const json& d = j["discovery"];
            reject_unknown_keys(d,
                                {"profile", "desk_divisor", "psi_init", "global_psi", "seed", "max_iter",
                                 "grad_tol", "scg_sigma", "max_families_per_class"},
                                "discovery config");
            if (d.contains("profile")) cfg.discovery.profile = d["profile"].get<std::string>();
            if (d.contains("desk_divisor")) cfg.discovery.desk_divisor = d["desk_divisor"].get<int>();
            if (d.contains("psi_init")) cfg.discovery.psi_init = d["psi_init"].get<double>();
            if (d.contains("global_psi")) cfg.discovery.global_psi = d["global_psi"].get<bool>();
            if (d.contains("seed")) cfg.discovery.seed = d["seed"].get<std::uint64_t>();
            if (d.contains("max_iter")) cfg.discovery.max_iter = d["max_iter"].get<int>();
            if (d.contains("grad_tol")) cfg.discovery.grad_tol = d["grad_tol"].get<double>();
            if (d.contains("scg_sigma")) cfg.discovery.scg_sigma = d["scg_sigma"].get<double>();
            if (d.contains("max_families_per_class"))
                cfg.discovery_max_families = d["max_families_per_class"].get<std::size_t>();
        }
        if (j.contains("lopo")) {
            const json& l = j["lopo"];
            reject_unknown_keys(l, {"seed", "train_rotations", "mlp_hidden", "mlp_max_iter"},
                                "lopo config");
            if (l.contains("seed")) cfg.lopo_seed = l["seed"].get<std::uint64_t>();
            if (l.contains("train_rotations")) cfg.lopo_train_rotations = l["train_rotations"].get<bool>();
            if (l.contains("mlp_hidden")) cfg.mlp_hidden = l["mlp_hidden"].get<int>();
            if (l.contains("mlp_max_iter")) cfg.mlp_max_iter = l["mlp_max_iter"].get<int>();
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("run config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingInputError("missing config file '" + path.string() + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("'" + path.string() + "': " + e.what());
    }
    return from_json(j);
}

std::uint64_t RunConfig::config_hash() const { return hash_tag(to_json().dump()); }

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

void stage_phantom(const RunConfig& cfg) {
    cfg.validate();
    const auto dir = cfg.out_dir / "cohort";
    const Cohort cohort = generate_cohort(cfg.phantom);
    save_cohort_tree(cohort, dir);
    std::ofstream summary(dir / "cohort_summary.json", std::ios::trunc);
    summary << cohort_summary(cohort.cases).dump(2) << '\n';
    write_provenance(cfg, dir, "phantom");
}

void stage_candidates(const RunConfig& cfg) {
    cfg.validate();
    const auto cohort_dir = cfg.out_dir / "cohort";
    require_exists(cohort_dir / "cohort.json", "cohort manifest");
    const Cohort cohort = load_cohort_tree(cohort_dir);

    std::vector<Candidate> all;
    json summary = json::array();
    for (const PatientCase& pc : cohort.cases) {
        const CandidateMask mask = threshold_cdi(pc.cdi);
        const std::vector<Candidate> sources = extract_candidates(pc, mask, cfg.candidates);
        const std::vector<Candidate> augmented = augment_rotations(sources);

        std::size_t cancer = 0;
        for (const Candidate& c : sources) cancer += c.label == Label::cancerous;
        summary.push_back({{"patient_id", pc.patient_id},
                           {"sources", sources.size()},
                           {"cancerous_sources", cancer},
                           {"healthy_sources", sources.size() - cancer},
                           {"cdi_max", mask.cdi_max}});
        all.insert(all.end(), augmented.begin(), augmented.end());
    }

    const auto dir = cfg.out_dir / "candidates";
    save_candidates(all, dir);
    std::ofstream sf(dir / "candidates_summary.json", std::ios::trunc);
    sf << summary.dump(2) << '\n';
    write_provenance(cfg, dir, "candidates");
}

namespace {

// Balanced discovery batch: equal rotation families per class, capped per
// class with a seeded selection.
std::vector<Candidate> discovery_batch(const std::vector<Candidate>& all, std::size_t max_families,
                                       std::uint64_t seed) {
    std::vector<Candidate> balanced = balance_families(all, derive_seed(seed, "discovery_balance"));
    std::map<std::pair<std::string, int>, Label> family_labels;
    for (const Candidate& c : balanced) family_labels[c.family_key()] = c.label;

    std::vector<std::pair<std::string, int>> healthy, cancer;
    for (const auto& [key, label] : family_labels)
        (label == Label::cancerous ? cancer : healthy).push_back(key);
    const std::size_t keep_n = std::min(max_families, std::min(healthy.size(), cancer.size()));

    Rng rng(derive_seed(seed, "discovery_cap"));
    rng.shuffle(healthy);
    rng.shuffle(cancer);
    healthy.resize(keep_n);
    cancer.resize(keep_n);
    std::set<std::pair<std::string, int>> keep(healthy.begin(), healthy.end());
    keep.insert(cancer.begin(), cancer.end());

    std::vector<Candidate> out;
    for (const Candidate& c : balanced)
        if (keep.count(c.family_key())) out.push_back(c);
    return out;
}

} // namespace

void stage_discover(const RunConfig& cfg) {
    cfg.validate();
    const auto cand_dir = cfg.out_dir / "candidates";
    require_exists(cand_dir / "candidates_meta.json", "candidate set");
    const std::vector<Candidate> all = load_candidates(cand_dir);

    DiscoveryConfig dcfg = cfg.discovery;
    dcfg.threads = cfg.threads;
    const std::vector<Candidate> batch =
        discovery_batch(all, cfg.discovery_max_families, cfg.discovery.seed);
    if (batch.empty()) throw NumericError("discover: candidate balancing produced an empty batch");

    const DiscoveryResult result = discover(batch, dcfg);

    const auto dir = cfg.out_dir / "model";
    std::filesystem::create_directories(dir);
    save_model(result.model, dir / "sequencer.json");

    json log;
    log["batch_size"] = batch.size();
    log["initial_loss"] = result.initial_loss;
    log["final_loss"] = result.final_loss;
    log["status"] = static_cast<int>(result.status);
    json trace = json::array();
    for (const ScgIterRecord& r : result.trace)
        trace.push_back({{"iter", r.iter},
                         {"value", r.value},
                         {"grad_norm", r.grad_norm},
                         {"lambda", r.lambda},
                         {"success", r.success}});
    log["trace"] = trace;
    std::ofstream lf(dir / "discovery_log.json", std::ios::trunc);
    lf << log.dump(2) << '\n';
    write_provenance(cfg, dir, "discover");
}

void write_feature_csv(const std::filesystem::path& path, const std::vector<FeatureRecord>& records,
                       const std::vector<std::string>& feature_names) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ParseError("cannot write '" + path.string() + "'");
    out << "patient_id,source_index,rotation_index,label";
    for (const std::string& n : feature_names) out << ',' << n;
    out << '\n';
    for (const FeatureRecord& r : records) {
        out << r.patient_id << ',' << r.source_index << ',' << r.rotation_index << ','
            << (r.label == Label::cancerous ? "cancerous" : "healthy");
        for (double v : r.features) out << ',' << format_double(v);
        out << '\n';
    }
    if (!out) throw ParseError("I/O failure writing '" + path.string() + "'");
}

std::vector<FeatureRecord> read_feature_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingInputError("missing feature table '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw ParseError("'" + path.string() + "': empty file");

    std::vector<FeatureRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        FeatureRecord r;
        std::size_t pos = 0;
        int col = 0;
        while (pos <= line.size()) {
            const std::size_t next = line.find(',', pos);
            const std::string_view field(line.data() + pos,
                                         (next == std::string::npos ? line.size() : next) - pos);
            switch (col) {
            case 0: r.patient_id = std::string(field); break;
            case 1: r.source_index = std::stoi(std::string(field)); break;
            case 2: r.rotation_index = std::stoi(std::string(field)); break;
            case 3: r.label = field == "cancerous" ? Label::cancerous : Label::healthy; break;
            default: {
                double v = 0.0;
                const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
                if (res.ec != std::errc{})
                    throw ParseError("'" + path.string() + "': bad numeric field '" +
                                     std::string(field) + "'");
                r.features.push_back(v);
            }
            }
            ++col;
            if (next == std::string::npos) break;
            pos = next + 1;
        }
        out.push_back(std::move(r));
    }
    return out;
}

namespace {

void write_feature_jsonl(const std::filesystem::path& path, const std::vector<FeatureRecord>& records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ParseError("cannot write '" + path.string() + "'");
    for (const FeatureRecord& r : records) {
        json j;
        j["patient_id"] = r.patient_id;
        j["source_index"] = r.source_index;
        j["rotation_index"] = r.rotation_index;
        j["label"] = r.label == Label::cancerous ? "cancerous" : "healthy";
        j["values"] = r.features;
        out << j.dump() << '\n';
    }
}

std::vector<std::string> numbered_names(const std::string& prefix, int n) {
    std::vector<std::string> names;
    names.reserve(n);
    for (int i = 0; i < n; ++i) names.push_back(prefix + std::to_string(i));
    return names;
}

} // namespace

void stage_sequence(const RunConfig& cfg) {
    cfg.validate();
    const auto cand_dir = cfg.out_dir / "candidates";
    const auto model_path = cfg.out_dir / "model" / "sequencer.json";
    require_exists(cand_dir / "candidates_meta.json", "candidate set");
    require_exists(model_path, "discovered sequencer model");

    const std::vector<Candidate> all = load_candidates(cand_dir);
    const SequencerModel model = load_model(model_path);

    // Sequence what evaluation needs: originals always, rotations only when
    // classifier training uses them.
    std::vector<Candidate> wanted;
    for (const Candidate& c : all)
        if (cfg.lopo_train_rotations || c.rotation_index == 0) wanted.push_back(c);

    const std::vector<RadiomicSequence> seqs = sequence_batch(model, wanted, cfg.threads);
    std::vector<FeatureRecord> records;
    records.reserve(seqs.size());
    for (const RadiomicSequence& s : seqs) {
        FeatureRecord r;
        r.patient_id = s.patient_id;
        r.source_index = s.source_index;
        r.rotation_index = s.rotation_index;
        r.label = s.label;
        r.features.assign(s.values.begin(), s.values.end());
        records.push_back(std::move(r));
    }

    const auto dir = cfg.out_dir / "sequences";
    std::filesystem::create_directories(dir);
    write_feature_csv(dir / "drs_sequences.csv", records,
                      numbered_names("f", model.plan.fc_widths[1]));
    write_feature_jsonl(dir / "drs_sequences.jsonl", records);
    json meta;
    meta["model_hash"] = model.content_hash();
    meta["count"] = records.size();
    std::ofstream mf(dir / "sequences_meta.json", std::ios::trunc);
    mf << meta.dump(2) << '\n';
    write_provenance(cfg, dir, "sequence");
}

void stage_baseline(const RunConfig& cfg) {
    cfg.validate();
    const auto cand_dir = cfg.out_dir / "candidates";
    require_exists(cand_dir / "candidates_meta.json", "candidate set");
    const std::vector<Candidate> all = load_candidates(cand_dir);

    std::vector<FeatureRecord> records;
    for (const Candidate& c : all) {
        if (!cfg.lopo_train_rotations && c.rotation_index != 0) continue;
        FeatureRecord r;
        r.patient_id = c.patient_id;
        r.source_index = c.source_index;
        r.rotation_index = c.rotation_index;
        r.label = c.label;
        r.features = texture_sequence(c);
        records.push_back(std::move(r));
    }

    const auto dir = cfg.out_dir / "baseline";
    std::filesystem::create_directories(dir);
    write_feature_csv(dir / "texture_sequences.csv", records, texture_feature_names());
    write_feature_jsonl(dir / "texture_sequences.jsonl", records);
    write_provenance(cfg, dir, "baseline");
}

namespace {

json fold_to_json(const FoldResult& f) {
    json j;
    j["test_patient"] = f.test_patient;
    j["skipped"] = f.skipped;
    j["tp"] = f.counts.tp;
    j["tn"] = f.counts.tn;
    j["fp"] = f.counts.fp;
    j["fn"] = f.counts.fn;
    json preds = json::array();
    for (const PredictionRecord& p : f.predictions)
        preds.push_back({{"patient_id", p.patient_id},
                         {"source_index", p.source_index},
                         {"truth", p.truth == Label::cancerous ? "cancerous" : "healthy"},
                         {"predicted", p.predicted == Label::cancerous ? "cancerous" : "healthy"},
                         {"p_cancerous", p.p_cancerous}});
    j["predictions"] = preds;
    json fams = json::array();
    for (const auto& [pid, src] : f.train_families) fams.push_back({{"patient_id", pid}, {"source_index", src}});
    j["train_families"] = fams;
    return j;
}

FoldResult fold_from_json(const json& j) {
    FoldResult f;
    f.test_patient = j.at("test_patient").get<std::string>();
    f.skipped = j.at("skipped").get<bool>();
    f.counts.tp = j.at("tp").get<long>();
    f.counts.tn = j.at("tn").get<long>();
    f.counts.fp = j.at("fp").get<long>();
    f.counts.fn = j.at("fn").get<long>();
    for (const auto& p : j.at("predictions")) {
        PredictionRecord pr;
        pr.patient_id = p.at("patient_id").get<std::string>();
        pr.source_index = p.at("source_index").get<int>();
        pr.truth = p.at("truth").get<std::string>() == "cancerous" ? Label::cancerous : Label::healthy;
        pr.predicted =
            p.at("predicted").get<std::string>() == "cancerous" ? Label::cancerous : Label::healthy;
        pr.p_cancerous = p.at("p_cancerous").get<double>();
        f.predictions.push_back(std::move(pr));
    }
    for (const auto& fam : j.at("train_families"))
        f.train_families.emplace_back(fam.at("patient_id").get<std::string>(),
                                      fam.at("source_index").get<int>());
    return f;
}

void write_folds(const std::filesystem::path& path, const std::vector<FoldResult>& folds) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ParseError("cannot write '" + path.string() + "'");
    for (const FoldResult& f : folds) out << fold_to_json(f).dump() << '\n';
}

std::vector<FoldResult> read_folds(const std::filesystem::path& path) { return read_fold_results(path); }

} // namespace

std::vector<FoldResult> read_fold_results(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingInputError("missing fold results '" + path.string() + "'");
    std::vector<FoldResult> folds;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            folds.push_back(fold_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw ParseError("'" + path.string() + "': " + e.what());
        }
    }
    return folds;
}

void stage_lopo(const RunConfig& cfg) {
    cfg.validate();
    const auto seq_path = cfg.out_dir / "sequences" / "drs_sequences.csv";
    const auto base_path = cfg.out_dir / "baseline" / "texture_sequences.csv";
    require_exists(seq_path, "discovered-sequencer sequences");
    require_exists(base_path, "baseline sequences");

    LopoConfig lcfg;
    lcfg.train_rotations = cfg.lopo_train_rotations;
    lcfg.mlp.hidden = cfg.mlp_hidden;
    lcfg.mlp.scg.max_iter = cfg.mlp_max_iter;

    const auto dir = cfg.out_dir / "lopo";
    std::filesystem::create_directories(dir);

    for (const auto& [input, output] : {std::pair{seq_path, dir / "folds_drs.jsonl"},
                                        std::pair{base_path, dir / "folds_baseline.jsonl"}}) {
        const std::vector<FeatureRecord> records = read_feature_csv(input);
        if (cfg.lopo_train_rotations) {
            bool any_rotated = false;
            for (const FeatureRecord& r : records) any_rotated |= r.rotation_index != 0;
            if (!any_rotated)
                throw MissingInputError("lopo.train_rotations is set but '" + input.string() +
                                        "' holds originals only; re-run the sequence/baseline stages");
        }
        const std::vector<FoldResult> folds = run_lopo(records, cfg.lopo_seed, lcfg);
        audit_lopo_leakage(records, folds);
        write_folds(output, folds);
    }
    write_provenance(cfg, dir, "lopo");
}

namespace {

json metrics_to_json(const Metrics& m) {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    return json{{"sensitivity", opt(m.sensitivity)},
                {"specificity", opt(m.specificity)},
                {"accuracy", opt(m.accuracy)}};
}

struct SequencerEval {
    std::vector<FoldResult> folds;
    ConfusionCounts pooled;
    Metrics pooled_metrics;
    FisherReport fisher;
};

SequencerEval evaluate_sequencer(const std::filesystem::path& folds_path,
                                 const std::filesystem::path& features_path) {
    SequencerEval ev;
    ev.folds = read_folds(folds_path);
    for (const FoldResult& f : ev.folds)
        if (!f.skipped) ev.pooled += f.counts;
    ev.pooled_metrics = compute_metrics(ev.pooled);

    const std::vector<FeatureRecord> records = read_feature_csv(features_path);
    std::vector<std::vector<double>> healthy, cancer;
    for (const FeatureRecord& r : records) {
        if (r.rotation_index != 0) continue;
        (r.label == Label::cancerous ? cancer : healthy).push_back(r.features);
    }
    ev.fisher = fisher_criterion(healthy, cancer);
    return ev;
}

json paired_to_json(const PairedTestResult& r) {
    if (r.status == PairedTestStatus::degenerate) return json{{"status", "degenerate"}};
    return json{{"status", "ok"}, {"t", r.t}, {"df", r.df}, {"p", r.p}};
}

} // namespace

json stage_report(const RunConfig& cfg) {
    cfg.validate();
    const auto lopo_dir = cfg.out_dir / "lopo";
    require_exists(lopo_dir / "folds_drs.jsonl", "LOPO fold results");

    SequencerEval drs = evaluate_sequencer(lopo_dir / "folds_drs.jsonl",
                                           cfg.out_dir / "sequences" / "drs_sequences.csv");
    SequencerEval base = evaluate_sequencer(lopo_dir / "folds_baseline.jsonl",
                                            cfg.out_dir / "baseline" / "texture_sequences.csv");

    // Paired per-fold metric series over folds evaluated by both sequencers.
    std::vector<double> drs_sens, drs_spec, drs_acc, base_sens, base_spec, base_acc;
    json fold_rows = json::array();
    for (std::size_t i = 0; i < drs.folds.size(); ++i) {
        const FoldResult& fd = drs.folds[i];
        const FoldResult& fb = base.folds[i];
        if (fd.test_patient != fb.test_patient)
            throw NumericError("report: fold order mismatch between sequencers");
        json row;
        row["test_patient"] = fd.test_patient;
        row["skipped"] = fd.skipped;
        if (!fd.skipped) {
            const Metrics md = compute_metrics(fd.counts);
            const Metrics mb = compute_metrics(fb.counts);
            row["drs"] = metrics_to_json(md);
            row["baseline"] = metrics_to_json(mb);
            if (md.sensitivity && mb.sensitivity && md.specificity && mb.specificity && md.accuracy &&
                mb.accuracy) {
                drs_sens.push_back(*md.sensitivity);
                drs_spec.push_back(*md.specificity);
                drs_acc.push_back(*md.accuracy);
                base_sens.push_back(*mb.sensitivity);
                base_spec.push_back(*mb.specificity);
                base_acc.push_back(*mb.accuracy);
            }
        }
        fold_rows.push_back(row);
    }

    json report;
    report["config"] = cfg.to_json();
    report["seeds"] = {{"cohort", cfg.phantom.seed},
                       {"discovery", cfg.discovery.seed},
                       {"lopo", cfg.lopo_seed}};
    report["versions"] = versions_json();
    report["folds"] = fold_rows;
    report["pooled"] = {
        {"drs",
         {{"tp", drs.pooled.tp},
          {"tn", drs.pooled.tn},
          {"fp", drs.pooled.fp},
          {"fn", drs.pooled.fn},
          {"metrics", metrics_to_json(drs.pooled_metrics)}}},
        {"baseline",
         {{"tp", base.pooled.tp},
          {"tn", base.pooled.tn},
          {"fp", base.pooled.fp},
          {"fn", base.pooled.fn},
          {"metrics", metrics_to_json(base.pooled_metrics)}}}};
    report["fisher_criterion"] = {{"drs",
                                   {{"aggregate_mean", drs.fisher.aggregate_mean},
                                    {"max", drs.fisher.max_defined},
                                    {"defined_dimensions", drs.fisher.defined_count}}},
                                  {"baseline",
                                   {{"aggregate_mean", base.fisher.aggregate_mean},
                                    {"max", base.fisher.max_defined},
                                    {"defined_dimensions", base.fisher.defined_count}}}};
    if (drs_sens.size() >= 2) {
        report["paired_tests"] = {{"sensitivity", paired_to_json(paired_test(drs_sens, base_sens))},
                                  {"specificity", paired_to_json(paired_test(drs_spec, base_spec))},
                                  {"accuracy", paired_to_json(paired_test(drs_acc, base_acc))}};
    } else {
        report["paired_tests"] = nullptr;
    }

    const auto dir = cfg.out_dir / "report";
    std::filesystem::create_directories(dir);
    std::ofstream rf(dir / "report.json", std::ios::trunc);
    rf << report.dump(2) << '\n';

    // metrics.csv: one row per sequencer x fold plus pooled rows.
    {
        std::ofstream mf(dir / "metrics.csv", std::ios::trunc);
        mf << "sequencer,fold,tp,tn,fp,fn,sensitivity,specificity,accuracy\n";
        auto emit = [&](const std::string& name, const std::string& fold, const ConfusionCounts& c) {
            const Metrics m = compute_metrics(c);
            auto opt = [](const std::optional<double>& v) {
                return v ? format_double(*v) : std::string("nan");
            };
            mf << name << ',' << fold << ',' << c.tp << ',' << c.tn << ',' << c.fp << ',' << c.fn << ','
               << opt(m.sensitivity) << ',' << opt(m.specificity) << ',' << opt(m.accuracy) << '\n';
        };
        for (const FoldResult& f : drs.folds)
            if (!f.skipped) emit("drs", f.test_patient, f.counts);
        for (const FoldResult& f : base.folds)
            if (!f.skipped) emit("baseline", f.test_patient, f.counts);
        emit("drs", "pooled", drs.pooled);
        emit("baseline", "pooled", base.pooled);
    }
    // fc.csv: per-dimension Fisher scores.
    {
        std::ofstream ff(dir / "fc.csv", std::ios::trunc);
        ff << "sequencer,dimension,fc,infinite\n";
        auto emit = [&](const std::string& name, const FisherReport& rep) {
            for (std::size_t d = 0; d < rep.per_dimension.size(); ++d)
                ff << name << ',' << d << ','
                   << (rep.infinite_dimension[d] ? std::string("inf") : format_double(rep.per_dimension[d]))
                   << ',' << (rep.infinite_dimension[d] ? 1 : 0) << '\n';
        };
        emit("drs", drs.fisher);
        emit("baseline", base.fisher);
    }
    write_provenance(cfg, dir, "report");
    return report;
}

} // namespace radq
