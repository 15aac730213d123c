#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

namespace parbeam::cli {

/// Every setting of one invocation. Commands resolve "auto" values before
/// echoing, so the echoed JSON replays the run exactly.
struct RunConfig {
    std::string command;

    int p = 40;
    int q = 16;
    double radius = 1.0;
    std::uint64_t seed = 0;
    std::string out = "out";

    // simulate
    std::size_t phantoms = 8;
    std::string phantom = "random";
    double snr_db = 40.0; ///< <= 0 uses i0 directly
    double i0 = 1e5;
    double sigma_th = 1e-4;
    std::string input = "fbp";
    int art_steps = 6;

    // reconstruct
    std::string method = "fbp";
    std::string data;
    std::size_t index = 0;
    std::string sino;
    std::string truth;
    int iters = 50;
    std::string omega = "auto";
    double lambda = 2e-4;
    std::size_t block_size = 1;
    std::string weight = "exact";
    double fbp_cutoff = 0.0;
    double nltv_gamma = 0.03;
    double nltv_delta = 0.05;
    double nltv_h0 = 0.05;
    int nltv_window = 1;

    // train / eval
    std::string scheme = "post";
    std::size_t samples = 0; ///< 0 uses the whole dataset
    double val_fraction = 0.2;
    int epochs = 30;
    std::size_t batch = 8;
    double lr = 1e-3;
    double lr_decay = 0.5;
    int decay_every = 10;
    long max_steps = 0;
    int levels = 2;
    std::size_t base = 8;
    std::string batchnorm = "auto";
    double tau1 = 100.0;
    double tau2 = -1.0;
    double tau3 = 1.0;
    double tau4 = 1e-3;
    double gamma = 0.1;
    double eps = 1e-2;
    int s = 1;
    int depth = 4;
    int p_init = 6;
    double gamma_a = 2.0;
    double gamma_s = 0.01;
    double gamma_g = 0.03;
    std::string checkpoint;
    int depths = 6;

    // sweep
    int trials = 10;
};

nlohmann::json to_json(const RunConfig& c);
/// Throws parbeam::InvalidArgument on unknown keys or wrong types.
RunConfig from_json(const nlohmann::json& j);

/// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kRuntimeError = 1;
inline constexpr int kUsageError = 2;

/// Full command line without the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace parbeam::cli
