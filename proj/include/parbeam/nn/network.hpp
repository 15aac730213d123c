#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "parbeam/nn/tape.hpp"
#include "parbeam/nn/tensor.hpp"

namespace parbeam::nn {

enum class LayerKind { Conv3x3, Conv1x1, ReLU, MaxPool2, TConv2x2s2, BatchNorm, Concat, Add };
enum class Mode { Train, Eval };

std::string to_string(LayerKind k);

inline constexpr double kBatchNormEps = 1e-5;

/// One node of the layer DAG. Node 0 is the network input; layer i is node i+1.
struct LayerSpec {
    LayerKind kind = LayerKind::ReLU;
    std::vector<int> inputs;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    int level = 0; ///< spatial size is the input size divided by 2^level
    std::size_t param_offset = 0;
    std::size_t param_count = 0;
    int bn_index = -1; ///< slot in the running statistics, batchnorm only
};

/// Per batchnorm layer, in layer order.
struct BatchStats {
    std::vector<std::vector<double>> mean, var;
};

/// Leaf handles of the parameter tensors bound to one tape, two per
/// parametrised layer (weight then bias, or scale then shift).
struct ParamVars {
    std::vector<Var> vars;
    std::vector<int> first; ///< index into vars per layer, -1 without parameters
};

struct Gradients {
    Tensor4 input;
    std::vector<double> params;
};

struct UNetConfig {
    int levels = 1;
    std::size_t base_channels = 4;
    bool batchnorm = false;
    std::size_t in_channels = 1;
    bool zero_final = true; ///< final 1x1 conv starts at zero, so F = I
    std::uint64_t seed = 0;
};

class Network {
public:
    Network(std::size_t in_channels, std::vector<LayerSpec> layers, int output, std::uint64_t seed);
    Network(const Network& o);
    Network& operator=(const Network& o);
    Network(Network&&) noexcept = default;
    Network& operator=(Network&&) noexcept = default;

    std::size_t in_channels() const { return in_channels_; }
    const std::vector<LayerSpec>& layers() const { return layers_; }
    int output_node() const { return output_; }
    std::size_t out_channels() const;
    /// Largest level reached; inputs must be divisible by 2^depth.
    int depth() const;

    std::size_t param_count() const { return params_.size(); }
    const std::vector<double>& params() const { return params_; }
    /// Throws InvalidArgument on a size mismatch.
    void set_params(std::span<const double> p);
    /// Zeroes the parameters of the last parametrised layer.
    void zero_final_layer();

    bool has_batchnorm() const { return !running_mean_.empty(); }
    const std::vector<std::vector<double>>& running_mean() const { return running_mean_; }
    const std::vector<std::vector<double>>& running_var() const { return running_var_; }
    void set_running_stats(std::vector<std::vector<double>> mean, std::vector<std::vector<double>> var);
    /// running = (1 - momentum) running + momentum batch.
    void update_running_stats(const BatchStats& batch, double momentum = 0.1);

    ParamVars bind(Tape& t, bool requires_grad = true) const;
    std::vector<double> gather_grad(const Tape& t, const ParamVars& pv) const;

    /// Records the forward pass on t.
    Var forward(Tape& t, Var x, const ParamVars& pv, Mode m, BatchStats* stats = nullptr) const;
    /// Records the forward pass and the directional derivative along e,
    /// both as tape values. Returns {output, tangent}.
    std::pair<Var, Var> forward_tangent(Tape& t, Var x, Var e, const ParamVars& pv, Mode m,
                                        BatchStats* stats = nullptr) const;

    /// Pure evaluation.
    Tensor4 apply(const Tensor4& x, Mode m = Mode::Eval) const;
    /// Evaluates and keeps the recording for one later backward call.
    Tensor4 forward(const Tensor4& x, Mode m = Mode::Eval);
    /// Gradients of <upstream, output> from the recorded forward. Throws
    /// ContractViolation when no forward is recorded.
    Gradients backward(const Tensor4& upstream);
    Tensor4 jvp(const Tensor4& x, const Tensor4& e, Mode m = Mode::Eval) const;
    /// Parameter gradient of <upstream, jvp(x, e)>.
    std::vector<double> second_order_param_grad(const Tensor4& x, const Tensor4& e, const Tensor4& upstream,
                                                Mode m = Mode::Eval) const;

    /// Shapes per node (input first) from the layer metadata.
    std::vector<Shape> declared_shapes(const Shape& input) const;
    /// Shapes per node observed during an evaluation.
    std::vector<Shape> runtime_shapes(const Tensor4& x, Mode m = Mode::Eval) const;

    UNetConfig unet{}; ///< builder settings, kept for checkpoints

private:
    struct Cache;
    void check_input(const Shape& s) const;
    std::vector<Var> run(Tape& t, Var x, const Var* e, const ParamVars& pv, Mode m, BatchStats* stats,
                         std::vector<Var>* tangents) const;

    std::size_t in_channels_;
    std::vector<LayerSpec> layers_;
    int output_;
    std::vector<double> params_;
    std::vector<std::vector<double>> running_mean_, running_var_;
    std::shared_ptr<Cache> cache_;
};

/// Incremental DAG construction; each call returns the new node id.
class NetBuilder {
public:
    explicit NetBuilder(std::size_t in_channels);
    int input() const { return 0; }
    int conv3(int from, std::size_t out_channels);
    int conv1(int from, std::size_t out_channels);
    int relu(int from);
    int maxpool(int from);
    int tconv(int from, std::size_t out_channels);
    int batchnorm(int from);
    int concat(int a, int b);
    int add(int a, int b);
    std::size_t channels(int node) const;
    Network build(int output, std::uint64_t seed) const;

private:
    int push(LayerSpec s);
    std::size_t in_channels_;
    std::vector<LayerSpec> layers_;
    std::vector<std::size_t> channels_;
    std::vector<int> levels_;
    std::size_t params_ = 0;
};

/// Encoder/decoder with skip concatenations wrapped as I + C. Levels in
/// {1, 2, 3}; batchnorm, when enabled, follows each pooling and each
/// concatenation.
Network build_mini_unet(const UNetConfig& cfg);

/// Parameter count of build_mini_unet from the channel plan.
std::size_t mini_unet_param_count(const UNetConfig& cfg);

struct AdamState {
    std::vector<double> m, v;
    long step = 0;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    explicit AdamState(std::size_t n = 0, double lr = 1e-3) : m(n, 0.0), v(n, 0.0), lr(lr) {}
};

/// Bias-corrected Adam update in place. Throws TrainingDiverged on a
/// non-finite gradient and InvalidArgument on size mismatch.
void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads);

/// PBTK1 kind 2 with a 1 x P payload, plus `<path>.json` holding the
/// builder config and running statistics.
void save_checkpoint(const std::filesystem::path& path, const Network& net);
Network load_checkpoint(const std::filesystem::path& path);

} // namespace parbeam::nn
