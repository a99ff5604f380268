#pragma once

#include "radq/candidates.hpp"
#include "radq/error.hpp"
#include "radq/learn.hpp"
#include "radq/parallel.hpp"
#include "radq/rng.hpp"
#include "radq/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace radq {

constexpr double kPsiMin = 1e-3;
constexpr double kPsiMax = 5.0;
constexpr int kFieldSize = 5;
// Provisional gain init before the per-layer calibration pass in make_model
// (see calibrate_gains): 1/sqrt(fan_in) scaled for rectified activations.
constexpr double kGainInitScale = 1.25;

struct LayerPlan {
    std::vector<int> conv_channels; // receptive-field count per conv layer
    std::array<int, 2> fc_widths{1000, 500};
    int input_channels = kPatchChannels;
    int patch_size = 32;
    std::string profile = "desk"; // "paper" | "desk" | "custom"
    int desk_divisor = 8;

    int depth() const { return static_cast<int>(conv_channels.size()); }
    int layer_in(int l) const { return l == 0 ? input_channels : conv_channels[l - 1]; }
    void validate() const;
};

// "paper" uses the full channel plan (64,64,128,128,256x4,512x8,2000);
// "desk" divides channel counts by desk_divisor and keeps the FC widths.
LayerPlan make_plan(const std::string& profile, int desk_divisor = 8);

struct ConvLayerParams {
    double psi = 0.75;
    double gain = 0.0;
    double bias = 0.0;
};

struct FcLayerParams {
    double gain = 0.0;
    double bias = 0.0;
};

struct SequencerModel {
    LayerPlan plan;
    std::uint64_t seed = 0;
    bool global_psi = false;
    std::vector<ConvLayerParams> conv; // one per conv layer
    std::array<FcLayerParams, 2> fc{};

    void validate() const;       // psi bounds, plan consistency
    std::uint64_t content_hash() const;
};

SequencerModel make_model(const LayerPlan& plan, std::uint64_t seed, double psi_init = 0.75,
                          bool global_psi = false);

// Trained scalars (psi + gain + bias per conv layer, gain + bias per FC layer),
// excluding the discovery head.
std::size_t trained_scalar_count(const SequencerModel& m);
// Stochastically realized connection weights (conv field banks + FC matrices).
std::size_t realized_weight_count(const LayerPlan& plan);

void save_model(const SequencerModel& m, const std::filesystem::path& path);
SequencerModel load_model(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Field realization.
//
// Each receptive field starts from fixed white noise (keyed by seed, layer and
// field index), every 5x5 spatial slice is smoothed with a truncated Gaussian
// kernel of bandwidth psi (reflected at the field border), and the field is
// normalized to unit RMS. The base noise never changes during discovery, so
// realized weights are differentiable in psi through the kernel.
// ---------------------------------------------------------------------------

// Gaussian smoothing kernel over the 5x5 support, normalized to sum 1, plus
// its derivative with respect to psi.
void psi_kernel(double psi, std::array<double, kFieldSize * kFieldSize>& k,
                std::array<double, kFieldSize * kFieldSize>* dk_dpsi);

// Standalone bank for one layer: flat (c_out, c_in, 5, 5), unit-RMS per field,
// before gain. Throws ConfigError when psi is out of bounds.
std::vector<double> realize_field_bank(const LayerPlan& plan, int layer, std::uint64_t seed, double psi);

// Realized weights for the whole network, templated on the compute scalar.
template <class T>
struct NetWeights {
    LayerPlan plan;
    // conv layer l: flat (c_out, c_in, 5, 5)
    std::vector<std::vector<T>> base;
    std::vector<std::vector<T>> what;       // unit-RMS fields
    std::vector<std::vector<T>> dwhat_dpsi; // filled when realized with gradients
    std::vector<T> gain, bias;
    // fc layer: flat (out, in), rows unit-RMS
    std::array<std::vector<T>, 2> fc_what;
    std::array<T, 2> fc_gain{}, fc_bias{};

    void init(const SequencerModel& m);                    // draw base noise, realize
    void realize(const SequencerModel& m, bool with_dpsi); // refresh after param changes
};

// Per-candidate intermediates for backpropagation.
template <class T>
struct NetTape {
    std::vector<Tensor3<T>> x;                  // x[0] = patch, x[l+1] = layer l output
    std::vector<std::vector<signed char>> sign; // sign of conv pre-activation
    std::vector<std::vector<signed char>> argmed; // window offset chosen by median pool
    std::vector<T> gap;                           // global average pool output
    std::array<std::vector<T>, 2> fc_t;           // pre-gain dot products
    std::array<std::vector<T>, 2> fc_a;           // post-AVReU activations
    std::array<std::vector<signed char>, 2> fc_sign;
};

// Absolute value rectification unit.
template <class T>
inline T avreu(T x) {
    return x < T(0) ? -x : x;
}

// 3x3 median filter, stride 1, reflection padding; output dims equal input.
template <class T>
Tensor3<T> median_pool3(const Tensor3<T>& in, std::vector<signed char>* argmed = nullptr);

// Full forward pass: 17x (conv -> bias -> AVReU -> median pool), global
// average pool, two realized FC layers with AVReU. Returns the sequence
// (length fc_widths[1]). tape may be null for inference.
template <class T>
std::vector<T> net_forward(const NetWeights<T>& w, const Tensor3<T>& patch,
                           NetTape<T>* tape = nullptr);

// Gradients of the trained scalars for one candidate, accumulated in double.
struct ParamGrad {
    std::vector<double> psi, gain, bias; // per conv layer
    std::array<double, 2> fc_gain{}, fc_bias{};

    void resize(int layers) {
        psi.assign(layers, 0.0);
        gain.assign(layers, 0.0);
        bias.assign(layers, 0.0);
        fc_gain = {0.0, 0.0};
        fc_bias = {0.0, 0.0};
    }
};

// Backward pass from d(loss)/d(sequence); scratch holds the largest per-layer
// weight-gradient buffer and is reused across candidates.
template <class T>
void net_backward(const NetWeights<T>& w, const NetTape<T>& tape, std::span<const T> dseq,
                  ParamGrad& pg, std::vector<T>& scratch_dw);

// ---------------------------------------------------------------------------
// Discovery: SCG on mean cross-entropy of a softmax head over the sequence.
// The head is an artifact of discovery and is discarded from the final model.
// ---------------------------------------------------------------------------

struct DiscoveryHead {
    std::vector<double> w; // 2 x fc_widths[1]
    std::array<double, 2> b{};
};

// Packs {psi, gain, bias, fc gain/bias, head} into one parameter vector.
// PsiMode::raw exposes psi directly (finite-difference checks);
// PsiMode::squashed optimizes an unconstrained variable mapped into
// (kPsiMin, kPsiMax) through a logistic so realized psi always stays in bounds.
template <class T>
class DiscoveryProblem {
public:
    enum class PsiMode { raw, squashed };

    DiscoveryProblem(const SequencerModel& base, std::span<const Candidate> batch, PsiMode mode,
                     int threads);

    std::size_t dim() const;
    std::vector<double> pack(const SequencerModel& m, const DiscoveryHead& head) const;
    void unpack(std::span<const double> x, SequencerModel& m, DiscoveryHead& head) const;

    // Mean cross-entropy over the batch; fills grad when non-empty.
    double eval(std::span<const double> x, std::span<double> grad);

    const SequencerModel& base_model() const { return base_; }

private:
    SequencerModel base_;
    PsiMode mode_;
    int threads_;
    NetWeights<T> weights_;
    std::vector<Tensor3<T>> patches_;
    std::vector<Label> labels_;
};

struct DiscoveryConfig {
    std::string profile = "desk";
    int desk_divisor = 8;
    double psi_init = 0.75;
    bool global_psi = false;
    std::uint64_t seed = 0; // fixes every stochastic receptive-field realization
    int max_iter = 12;
    double grad_tol = 1e-6;
    double scg_sigma = 1e-3;
    int threads = 1;
};

struct DiscoveryResult {
    SequencerModel model;
    std::vector<ScgIterRecord> trace;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    ScgStatus status = ScgStatus::max_iterations;
};

// Non-finite losses abort with NumericError; the train set must contain both
// labels (balanced by the caller).
DiscoveryResult discover(std::span<const Candidate> train, const DiscoveryConfig& cfg);

struct RadiomicSequence {
    std::string patient_id;
    int source_index = 0;
    int rotation_index = 0;
    Label label = Label::healthy;
    std::vector<float> values;
    std::uint64_t model_hash = 0;
};

// Order-preserving batch forward (float path).
std::vector<RadiomicSequence> sequence_batch(const SequencerModel& m, std::span<const Candidate> cands,
                                             int threads = 1);

} // namespace radq
