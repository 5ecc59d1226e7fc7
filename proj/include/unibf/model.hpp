#pragma once

// Fully-connected trunk and the three output heads.
//
//   x0 -> [affine -> batch norm -> ReLU] x L -> affine -> u -> head -> beams
//
// DBL: u holds the K beams directly and is rescaled to total power P.
// FL:  u = [u_p, u_q]; p, q = P * softmax(.), beams recovered from the
//      uplink-downlink duality structure v_k = sqrt(p_k) d_k,
//      d_k ~ (I + sum_j q_j h_j h_j^H)^{-1} h_k.
// SFL: u = u_p and q := p.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "unibf/autodiff.hpp"
#include "unibf/beams.hpp"
#include "unibf/channel.hpp"

namespace unibf::model {

enum class HeadKind : std::uint8_t { dbl = 0, fl = 1, sfl = 2 };

std::string_view head_name(HeadKind head);
/// "dbl" | "fl" | "sfl"; throws ConfigError.
HeadKind parse_head(std::string_view name);

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.99;
inline constexpr std::size_t kDefaultWidth = 320;
inline constexpr std::size_t kDefaultDepth = 5;

struct ModelDims {
  std::size_t num_antennas = 4;  // M
  std::size_t num_users = 4;     // K
  std::vector<std::size_t> hidden =
      std::vector<std::size_t>(kDefaultDepth, kDefaultWidth);
  HeadKind head = HeadKind::sfl;
  /// false: the model was trained at one power level and x0 omits P.
  bool power_feature = true;
  double fixed_power_db = 0.0;

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  void validate() const;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

struct DenseLayer {
  ad::Tensor weight;  // in x out
  ad::Tensor bias;    // 1 x out
};

struct NormLayer {
  ad::Tensor gain;
  ad::Tensor shift;
  ad::Tensor running_mean;
  ad::Tensor running_var;
};

struct NetworkParams {
  ModelDims dims;
  std::vector<DenseLayer> hidden;
  std::vector<NormLayer> norms;
  DenseLayer output;
  std::uint64_t config_fingerprint = 0;

  /// Trainable tensors in a fixed order: W1 b1 gamma1 beta1 ... W{L+1} b{L+1}.
  std::vector<std::pair<std::string, ad::Tensor*>> trainable();
  std::vector<std::pair<std::string, const ad::Tensor*>> trainable() const;
  std::size_t num_trainable_values() const;
};

/// Glorot-uniform weights, zero biases, unit gains, running stats (0, 1).
NetworkParams init_params(const ModelDims& dims, std::uint64_t seed);

/// [re(h_1..h_K), im(h_1..h_K), P_dB]; the power entry is omitted when
/// `power_feature` is false. Throws NumericError on non-finite input.
std::vector<double> build_input(const channel::ChannelSample& sample,
                                bool power_feature = true);

/// Inverse of the CSI part of build_input.
std::vector<linalg::CVec> channels_from_input(std::span<const double> x0,
                                              std::size_t m, std::size_t k);

// ----------------------------------------------------- per-sample heads

/// P * softmax(z), max-shifted.
std::vector<double> scaled_softmax(std::span<const double> z, double power);

/// v_k = sqrt(P / sum_j ||u_j||^2) u_k. Throws DomainError if u == 0.
BeamStack head_dbl(std::span<const linalg::CVec> u, double power);

/// v_k = sqrt(p_k) d_k with d_k the normalized solution of
/// (I + sum_j q_j h_j h_j^H) d = h_k. Throws DomainError on a zero channel.
BeamStack recover_beams(std::span<const linalg::CVec> h,
                        std::span<const double> p, std::span<const double> q,
                        std::vector<linalg::CVec>* directions = nullptr);

/// u has 2K entries [u_p, u_q].
BeamStack head_fl(std::span<const double> u, std::span<const linalg::CVec> h,
                  double power, DualityFeature* feature = nullptr);

/// u has K entries; q := p.
BeamStack head_sfl(std::span<const double> u, std::span<const linalg::CVec> h,
                   double power, DualityFeature* feature = nullptr);

// ---------------------------------------------------------- batched graph

enum class Mode { train, eval };

struct Batch {
  ad::Tensor x0;     // B x input_dim
  ad::Tensor h;      // B x 2KM, packed
  ad::Tensor power;  // B x 1, linear

  std::size_t size() const noexcept { return h.rows; }
};

Batch make_batch(std::span<const channel::ChannelSample> samples,
                 const ModelDims& dims);

struct GraphOutput {
  ad::Var u;
  ad::Var beams;  // B x 2KM
  ad::Var p;      // FL/SFL only
  ad::Var q;      // FL/SFL only
  ad::Var h;
  ad::Var power;
  /// batch_norm_train nodes, one per hidden layer (train mode only).
  std::vector<ad::Var> norm_nodes;
};

/// Records the trunk and head. Train mode registers the trainable tensors as
/// (borrowed) tape parameters and uses batch statistics; eval mode treats
/// everything as constants and uses running statistics.
GraphOutput build_forward(ad::Tape& tape, const NetworkParams& params,
                          const Batch& batch, Mode mode);

/// Trunk only: returns the pre-activation u.
ad::Var forward_trunk(ad::Tape& tape, const NetworkParams& params, ad::Var x0,
                      Mode mode, std::vector<ad::Var>* norm_nodes = nullptr);

/// Head on a recorded u. p_out/q_out receive the softmax nodes for FL/SFL.
ad::Var apply_head(ad::Tape& tape, HeadKind head, ad::Var u, ad::Var h,
                   ad::Var power, std::size_t m, std::size_t k,
                   ad::Var* p_out = nullptr, ad::Var* q_out = nullptr);

std::vector<BeamStack> unpack_beams(const ad::Tensor& beams,
                                    const ad::Tensor& power, std::size_t m,
                                    std::size_t k);

/// Eval-mode inference.
std::vector<BeamStack> infer(const NetworkParams& params,
                             std::span<const channel::ChannelSample> samples);
BeamStack infer_one(const NetworkParams& params,
                    const channel::ChannelSample& sample);

/// Folds batch statistics of a train-mode pass into the running statistics.
void update_running_stats(NetworkParams& params, const ad::Tape& tape,
                          std::span<const ad::Var> norm_nodes);

// --------------------------------------------------------- parameter files
//
// Little-endian binary:
//   "UNIBFNET" | u32 version | u32 M | u32 K | u8 head | u8 power_feature |
//   f64 fixed_power_db | u64 config_fingerprint | u32 L | u32 width[L] |
//   per hidden layer: W, b, gain, shift, running_mean, running_var |
//   output W, b
// Every tensor blob is its row-major f64 values; shapes follow from the dims.

inline constexpr std::uint32_t kParamsVersion = 1;

void save_params(std::ostream& out, const NetworkParams& params);
void save_params(const std::filesystem::path& path, const NetworkParams& params);

/// Throws ParseError (byte offset) on truncation or corruption, ConfigError
/// if `expected_head` is given and differs from the stored head.
NetworkParams load_params(std::istream& in,
                          std::optional<HeadKind> expected_head = std::nullopt);
NetworkParams load_params(const std::filesystem::path& path,
                          std::optional<HeadKind> expected_head = std::nullopt);

}  // namespace unibf::model
