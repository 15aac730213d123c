#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "parbeam/core.hpp"
#include "parbeam/nn/network.hpp"
#include "parbeam/radon.hpp"
#include "parbeam/simulate.hpp"
#include "parbeam/solvers.hpp"

namespace parbeam {

/// Projector, its operator view and the spectral norm, shared by the schemes.
struct RadonContext {
    std::shared_ptr<const Projector> proj;
    std::shared_ptr<const ProjectorOperator> op;
    double sigma_max = 0.0;

    const Geometry& geometry() const { return proj->geometry(); }
    std::size_t side() const { return static_cast<std::size_t>(proj->geometry().image_side()); }
};

/// Estimates sigma_max with the internal power-method settings.
RadonContext make_radon_context(const Geometry& geom);

// ---- image network -------------------------------------------------------

/// Applies the network to (N, C, side, side) after zero padding to the next
/// multiple of 2^depth and crops the result back.
nn::Var apply_net(nn::Tape& t, const nn::Network& net, nn::Var x, const nn::ParamVars& pv, nn::Mode m,
                  nn::BatchStats* stats = nullptr);
std::pair<nn::Var, nn::Var> apply_net_tangent(nn::Tape& t, const nn::Network& net, nn::Var x, nn::Var e,
                                              const nn::ParamVars& pv, nn::Mode m);
Image apply_net(const nn::Network& net, const Image& img, nn::Mode m = nn::Mode::Eval);

/// Packs images into one (N, 1, side, side) batch.
nn::Tensor4 stack_images(const std::vector<const Image*>& imgs);
nn::Tensor4 stack_sinograms(const std::vector<const Sinogram*>& sinos);
Image unstack_image(const nn::Tensor4& t, std::size_t n, const Geometry& geom);

/// Convolution weights (not biases or batchnorm parameters), concatenated.
std::vector<double> kernel_weights(const nn::Network& net);

// ---- postprocessing objective -------------------------------------------

struct PostLossConfig {
    double tau1 = 100.0;
    double tau2 = -1.0; ///< < 0 picks 1/N for an N x N image
    double tau3 = 1.0;
    double tau4 = 1e-3;
    double gamma = 0.1; ///< weight of the mean TV of the difference
    double eps = 1e-2;  ///< log-sparsity offset

    void validate() const;
    double resolved_tau2(std::size_t side) const { return tau2 < 0.0 ? 1.0 / static_cast<double>(side) : tau2; }
};

/// Unweighted terms: mean squared difference, mean TV of the difference,
/// mean squared sinogram difference, mean log-sparsity of the output and
/// mean squared kernel weight.
struct PostTerms {
    double fid = 0.0, tvdiff = 0.0, radon = 0.0, logsp = 0.0, kernel = 0.0;
};

struct PostLoss {
    double total = 0.0;
    PostTerms raw;
    PostTerms weighted; ///< contributions; total is their sum
};

/// Evaluates the objective for one output image. Throws InvalidArgument on
/// shape mismatch or an invalid config.
PostLoss post_loss(const Image& out, const Image& truth, const Sinogram& expected, const RadonContext& ctx,
                   const nn::Network& net, const PostLossConfig& cfg);

// ---- unrolled scheme -----------------------------------------------------

struct UnrolledConfig {
    int s = 1;       ///< Landweber steps per network call
    int depth = 4;   ///< D
    int p_init = 6;  ///< Landweber steps from zero for the default start
    double gamma_a = 2.0;
    double gamma_s = 0.01;
    double gamma_g = 0.03;
    double omega = 0.0; ///< <= 0 picks 1/sigma^2

    void validate() const;
    /// Throws InvalidArgument unless 0 < omega < 2/sigma^2.
    double resolved_omega(const RadonContext& ctx) const;
};

/// L^p(0) for the data g.
Image landweber_start(const RadonContext& ctx, const UnrolledConfig& cfg, const Sinogram& g);

/// f(k+1) = F(L^s(f(k))) for k = 0..K-1; returns f(1)..f(K). Without f0
/// the start is landweber_start.
std::vector<Image> unrolled_apply(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                                  const Sinogram& g, const std::optional<Image>& f0, int K);

/// Per-depth terms, already weighted.
struct UnrolledLoss {
    double total = 0.0;
    std::vector<double> fid;       ///< gamma_a^k mean (H(f(k)) - truth)^2
    std::vector<double> support;   ///< gamma_s mean (R C(L^s f(k)))^2
    std::vector<double> inputgrad; ///< gamma_g mean (dH(f(k)) along the unit direction to the truth)^2
    double support_sum() const;
    double inputgrad_sum() const;
};

struct UnrolledLossGrad {
    UnrolledLoss loss;
    std::vector<double> grad; ///< d total / d params
};

UnrolledLoss unrolled_loss(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                           const Sinogram& g, const Image& truth, const std::optional<Image>& f0 = std::nullopt);
UnrolledLossGrad unrolled_loss_grad(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                                    const Sinogram& g, const Image& truth,
                                    const std::optional<Image>& f0 = std::nullopt);

// ---- training ------------------------------------------------------------

struct TrainSchedule {
    int epochs = 30;
    std::size_t batch_size = 8;
    double lr = 1e-3;
    double lr_decay = 0.5;  ///< factor applied every decay_every epochs
    int decay_every = 10;
    long max_steps = 0;     ///< 0 means no limit
    std::uint64_t seed = 0; ///< minibatch shuffling
    std::optional<std::filesystem::path> checkpoint_dir;
    std::optional<std::filesystem::path> log_path;

    void validate() const;
    double lr_at(int epoch) const;
};

struct TrainLogRow {
    long step = 0;
    int epoch = 0;
    double total = 0.0;
    std::vector<double> terms;
};

struct SchemeState {
    nn::Network net;   ///< parameters with the best validation MAE-HU
    nn::Network last;  ///< parameters after the final step
    nn::AdamState adam;
    int epoch = 0;
    long step = 0;
    std::vector<std::string> columns{}; ///< names of TrainLogRow::terms
    std::vector<TrainLogRow> trace{};
    double initial_val_mae_hu = 0.0;
    std::vector<double> val_mae_hu{}; ///< after each epoch
    int best_epoch = 0;             ///< 1-based
    double best_val_mae_hu = 0.0;
    std::vector<std::filesystem::path> checkpoints{};

    std::string log_csv() const;
};

inline constexpr const char* kBestCheckpoint = "best.pbtk";
inline constexpr const char* kLastCheckpoint = "last.pbtk";
inline constexpr const char* kLastGoodCheckpoint = "last_good.pbtk";

/// Mean MAE-HU of the network applied to each sample input.
double validate_post(const nn::Network& net, const std::vector<Sample>& val, const HuScale& hu);

/// Minibatch Adam on post_loss. Samples must carry FBP inputs. Throws
/// TrainingDiverged (after saving the last good parameters when a
/// checkpoint directory is set) on a non-finite loss or gradient.
SchemeState train_postprocess(const RadonContext& ctx, const std::vector<Sample>& train,
                              const std::vector<Sample>& val, const nn::Network& net, const PostLossConfig& cfg,
                              const TrainSchedule& schedule, const HuScale& hu = HuScale{});

/// Mean MAE-HU of depth-D iterates started from each sample input.
double validate_unrolled(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                         const std::vector<Sample>& val, const HuScale& hu);

/// Minibatch Adam on the unrolled objective, starting every sample at its
/// stored input (L^p(0) for ART datasets).
SchemeState train_unrolled(const RadonContext& ctx, const std::vector<Sample>& train, const std::vector<Sample>& val,
                           const nn::Network& net, const UnrolledConfig& cfg, const TrainSchedule& schedule,
                           const HuScale& hu = HuScale{});

// ---- evaluation ----------------------------------------------------------

struct DepthCurve {
    std::vector<double> mae_hu, rel_error, ssim; ///< entry k-1 is depth k
    int argmin = 0;                             ///< 1-based argmin of mae_hu
    std::string to_csv() const;
};

/// Per-depth means over the samples for K_max unrolled iterations. Throws
/// InvalidArgument when K_max < cfg.depth or the set is empty.
DepthCurve semi_convergence_eval(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                                 const std::vector<Sample>& samples, int K_max, const HuScale& hu = HuScale{});

/// Median over random unit-free Gaussian directions e of
/// ||H(f + eps e) - H(f)|| / (eps ||e||) with H = F o L^s.
double lipschitz_probe(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                       const Sinogram& g, const Image& f, int probes, double eps, std::uint64_t seed);

/// Median of lipschitz_probe over samples and depths 0..D-1.
double median_lipschitz(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                        const std::vector<Sample>& samples, int probes, double eps, std::uint64_t seed);

/// Mean over samples and depths 0..D-1 of mean (R C(L^s f(k)))^2.
double support_leakage(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                       const std::vector<Sample>& samples);

/// Share of ||C(L^s f(k))||^2 lying in the support space (ker R)^perp, summed
/// over samples and depths 0..D-1. Returns 0 when C changes nothing.
double support_energy_fraction(const RadonContext& ctx, const SvdOracle& oracle, const UnrolledConfig& cfg,
                               const nn::Network& net, const std::vector<Sample>& samples);

/// ||f(k+1) - f(k)|| for k = 0..K-1 along the unrolled iteration.
std::vector<double> step_norms(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                               const Sample& sample, int K);

} // namespace parbeam
