#pragma once

#include "radq/candidates.hpp"
#include "radq/eval.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace radq {

// Differentiable objective: returns the value and, when grad is non-empty,
// fills it with the gradient at x (grad.size() == x.size()).
using Objective = std::function<double(std::span<const double> x, std::span<double> grad)>;

struct ScgConfig {
    double sigma = 1e-5;       // second-order probe step
    double lambda_init = 1e-6; // initial scale parameter
    double grad_tol = 1e-6;
    int max_iter = 200;
};

struct ScgIterRecord {
    int iter = 0;
    double value = 0.0;
    double grad_norm = 0.0;
    double lambda = 0.0;
    bool success = false;
};

enum class ScgStatus { converged, max_iterations, aborted_non_finite, stalled };

struct ScgResult {
    std::vector<double> x; // best parameters seen
    double value = 0.0;
    double initial_value = 0.0;
    ScgStatus status = ScgStatus::max_iterations;
    std::vector<ScgIterRecord> trace;
};

// Scaled conjugate gradient minimization (Moller's algorithm). Success steps
// never increase the objective; non-finite objectives abort with the trace
// collected so far.
ScgResult scg_minimize(const Objective& f, std::vector<double> x0, const ScgConfig& cfg);

// Feedforward classifier: one tanh hidden layer, softmax over 2 classes,
// all weights trained. Inputs standardized by train-set statistics.
struct MlpConfig {
    int hidden = 100;
    ScgConfig scg{.max_iter = 300};
};

struct MlpClassifier {
    int input_dim = 0;
    int hidden = 100;
    std::vector<double> w1, b1; // hidden x input, hidden
    std::vector<double> w2, b2; // 2 x hidden, 2
    std::vector<double> feat_mean, feat_std;

    std::array<double, 2> predict_probs(std::span<const double> x) const; // sums to 1
    Label predict(std::span<const double> x) const;
};

MlpClassifier train_classifier(const std::vector<std::vector<double>>& features,
                               const std::vector<Label>& labels, std::uint64_t seed,
                               const MlpConfig& cfg = {});

// The classifier training objective (mean cross-entropy over standardized
// inputs) exposed for gradient checks. Parameter layout: w1, b1, w2, b2.
std::size_t mlp_param_count(int input_dim, int hidden);
double mlp_objective(int input_dim, int hidden, std::span<const double> theta,
                     const std::vector<std::vector<double>>& inputs, const std::vector<Label>& labels,
                     std::span<double> grad);

// One feature vector per candidate, as consumed by the LOPO harness.
struct FeatureRecord {
    std::string patient_id;
    int source_index = 0;
    Label label = Label::healthy;
    int rotation_index = 0;
    std::vector<double> features;
};

struct PredictionRecord {
    std::string patient_id;
    int source_index = 0;
    int rotation_index = 0;
    Label truth = Label::healthy;
    Label predicted = Label::healthy;
    double p_cancerous = 0.0;
};

struct FoldResult {
    std::string test_patient;
    bool skipped = false; // fold had no cancerous test candidates
    ConfusionCounts counts;
    std::vector<PredictionRecord> predictions;
    // Rotation families actually used for training, for the leakage audit.
    std::vector<std::pair<std::string, int>> train_families;
};

struct LopoConfig {
    bool train_rotations = true; // include augmented candidates in train folds
    MlpConfig mlp;
};

// Leave-one-patient-out: per fold the train pool (all other patients) and the
// held-out patient's originals are balanced at family granularity, a fresh
// classifier is trained, and test predictions are recorded. Folds without
// cancerous test candidates are skipped and flagged.
std::vector<FoldResult> run_lopo(const std::vector<FeatureRecord>& records, std::uint64_t seed,
                                 const LopoConfig& cfg = {});

// Train/test partition audit: no patient in both sides of a fold, rotation
// families intact. Throws NumericError on violation.
void audit_lopo_leakage(const std::vector<FeatureRecord>& records,
                        const std::vector<FoldResult>& folds);

} // namespace radq
