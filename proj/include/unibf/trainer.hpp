#pragma once

// Unsupervised mini-batch training: minimize the negative mean sum rate of
// the beams produced by the network, with fresh (h, P) draws every step.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unibf/channel.hpp"
#include "unibf/model.hpp"

namespace unibf::trainer {

struct TrainConfig {
  model::ModelDims dims;
  channel::ChannelConfig channel;
  channel::PowerGrid grid = channel::PowerGrid::standard();
  std::size_t batch_size = 256;
  std::size_t steps = 20000;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  std::size_t eval_every = 1000;
  std::size_t val_per_level = 1000;
  double clip_norm = 10.0;
  /// Train at a single power level; the network then has no power input.
  std::optional<double> fixed_power_db;
  /// Cycle through these samples instead of drawing fresh ones.
  std::vector<channel::ChannelSample> fixed_dataset;
  /// Written after every evaluation and at the end when non-empty.
  std::filesystem::path checkpoint_path;
  /// Samples per step whose beam power is checked against P.
  std::size_t power_check_samples = 4;

  /// Copies M, K into the channel config and the fixed-power flag into dims,
  /// then validates. Throws ConfigError.
  void finalize();
  /// Stable hash of every field that influences the trained parameters.
  std::uint64_t fingerprint() const;
};

struct AdamState {
  std::vector<ad::Tensor> m;
  std::vector<ad::Tensor> v;
  std::uint64_t step = 0;

  static AdamState zeros_like(const model::NetworkParams& params);
};

struct LossGraph {
  ad::Var loss;
  ad::Var sum_rates;  // B x 1
  model::GraphOutput out;
};

/// -(1/B) sum_b sum_k log2(1 + SINR_k) for the batch, fully recorded.
LossGraph batch_loss(ad::Tape& tape, const model::NetworkParams& params,
                     const model::Batch& batch, model::Mode mode = model::Mode::train);

/// Bias-corrected Adam descent step. `grads` must hold every trainable tensor.
void adam_step(model::NetworkParams& params, const ad::GradMap& grads,
               AdamState& state, const TrainConfig& cfg);

/// Level-major validation samples drawn from the validation stream.
std::vector<channel::ChannelSample> validation_set(const TrainConfig& cfg);

/// Mean sum rate of the model per grid level over a level-major sample set
/// holding `per_level` samples per level.
std::vector<double> mean_rate_per_level(const model::NetworkParams& params,
                                        std::span<const channel::ChannelSample> samples,
                                        std::size_t levels, std::size_t per_level);

struct LogRow {
  std::size_t step = 0;
  double loss = 0.0;
  std::vector<double> val_sum_rate;
};

struct TrainResult {
  model::NetworkParams params;
  std::vector<LogRow> log;
};

/// "step,loss,val_sr_p0,val_sr_p5,..."
std::string log_header(const channel::PowerGrid& grid);
std::string format_log_row(const LogRow& row);

using ProgressFn = std::function<void(const LogRow&)>;

/// Runs the full loop. When `log_out` is given, the CSV header and every row
/// are streamed to it as they are produced. Throws NumericError on a
/// non-finite loss (naming the step and the first offending sample).
TrainResult train_loop(const TrainConfig& cfg, std::ostream* log_out = nullptr,
                       const ProgressFn& progress = {});

}  // namespace unibf::trainer
