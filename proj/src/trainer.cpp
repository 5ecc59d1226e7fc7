#include "unibf/trainer.hpp"

#include <charconv>
#include <cmath>
#include <ostream>
#include <sstream>

#include "unibf/error.hpp"
#include "unibf/metrics.hpp"
#include "unibf/simd/kernels.hpp"

namespace unibf::trainer {

namespace {

std::string fmt(double v) {
  char buf[32];
  const auto res =
      std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

std::string level_tag(double db) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), db);
  std::string s(buf, res.ptr);
  for (char& c : s) {
    if (c == '.') c = '_';
    if (c == '-') c = 'm';
  }
  return s;
}

class Fnv {
 public:
  void add(std::string_view s) {
    for (unsigned char c : s) {
      h_ ^= c;
      h_ *= 0x100000001b3ULL;
    }
    h_ ^= 0xff;
    h_ *= 0x100000001b3ULL;
  }
  void add(double v) { add(fmt(v)); }
  void add(std::uint64_t v) { add(std::to_string(v)); }
  std::uint64_t value() const noexcept { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

}  // namespace

void TrainConfig::finalize() {
  channel.num_antennas = dims.num_antennas;
  channel.num_users = dims.num_users;
  dims.power_feature = !fixed_power_db.has_value();
  dims.fixed_power_db = fixed_power_db.value_or(0.0);
  dims.validate();
  channel.validate();
  grid.validate();
  if (batch_size < 2) throw ConfigError("batch size must be at least 2");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam eps must be > 0");
  if (!(clip_norm > 0.0)) throw ConfigError("clip norm must be > 0");
  if (eval_every == 0) throw ConfigError("eval_every must be positive");
  if (val_per_level == 0) throw ConfigError("validation set must be non-empty");
  if (fixed_power_db && !std::isfinite(*fixed_power_db))
    throw ConfigError("fixed power must be finite");
  for (const auto& s : fixed_dataset)
    if (s.num_users() != dims.num_users || s.num_antennas() != dims.num_antennas)
      throw ConfigError("fixed dataset dimensions differ from the model");
}

std::uint64_t TrainConfig::fingerprint() const {
  Fnv h;
  h.add("unibf-train-v1");
  h.add(std::uint64_t{dims.num_antennas});
  h.add(std::uint64_t{dims.num_users});
  for (std::size_t w : dims.hidden) h.add(std::uint64_t{w});
  h.add(model::head_name(dims.head));
  h.add(channel.cell_radius);
  h.add(channel.ref_distance);
  h.add(channel.pathloss_exp);
  h.add(channel.noise_power);
  h.add(channel.min_bs_distance);
  h.add(grid.to_string());
  h.add(std::uint64_t{batch_size});
  h.add(std::uint64_t{steps});
  h.add(learning_rate);
  h.add(beta1);
  h.add(beta2);
  h.add(adam_eps);
  h.add(seed);
  h.add(clip_norm);
  h.add(fixed_power_db ? fmt(*fixed_power_db) : std::string("universal"));
  h.add(std::uint64_t{fixed_dataset.size()});
  for (const auto& s : fixed_dataset) {
    h.add(s.power_db);
    for (const auto& hk : s.h)
      for (std::size_t i = 0; i < hk.size(); ++i) {
        h.add(hk.re[i]);
        h.add(hk.im[i]);
      }
  }
  return h.value();
}

AdamState AdamState::zeros_like(const model::NetworkParams& params) {
  AdamState s;
  for (const auto& [name, t] : params.trainable()) {
    s.m.emplace_back(t->rows, t->cols);
    s.v.emplace_back(t->rows, t->cols);
  }
  return s;
}

LossGraph batch_loss(ad::Tape& tape, const model::NetworkParams& params,
                     const model::Batch& batch, model::Mode mode) {
  LossGraph g;
  g.out = model::build_forward(tape, params, batch, mode);
  g.sum_rates = metrics::sum_rate_graph(tape, g.out.h, g.out.beams,
                                        params.dims.num_antennas,
                                        params.dims.num_users);
  g.loss = metrics::negative_mean_rate(tape, g.sum_rates);
  return g;
}

void adam_step(model::NetworkParams& params, const ad::GradMap& grads,
               AdamState& state, const TrainConfig& cfg) {
  auto tensors = params.trainable();
  if (state.m.size() != tensors.size())
    throw ShapeError("adam_step: optimizer state does not match parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const simd::AdamCoeffs c{cfg.learning_rate,
                           cfg.beta1,
                           cfg.beta2,
                           cfg.adam_eps,
                           1.0 - std::pow(cfg.beta1, t),
                           1.0 - std::pow(cfg.beta2, t)};
  const auto& kt = simd::kernels();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    ad::Tensor& p = *tensors[i].second;
    const ad::Tensor& g = grads.at(tensors[i].first);
    if (!g.same_shape(p) || !state.m[i].same_shape(p))
      throw ShapeError("adam_step: shape mismatch for " + tensors[i].first);
    kt.adam(p.data.data(), g.data.data(), state.m[i].data.data(),
            state.v[i].data.data(), p.size(), c);
  }
}

std::vector<channel::ChannelSample> validation_set(const TrainConfig& cfg) {
  auto rng = channel::make_stream(cfg.seed, channel::streams::kValidation);
  std::vector<channel::ChannelSample> out;
  out.reserve(cfg.grid.size() * cfg.val_per_level);
  for (double db : cfg.grid.levels_db)
    for (std::size_t n = 0; n < cfg.val_per_level; ++n)
      out.push_back(channel::draw_sample_at(rng, cfg.channel, db));
  return out;
}

std::vector<double> mean_rate_per_level(const model::NetworkParams& params,
                                        std::span<const channel::ChannelSample> samples,
                                        std::size_t levels, std::size_t per_level) {
  if (samples.size() != levels * per_level)
    throw ShapeError("mean_rate_per_level: sample count mismatch");
  std::vector<double> out(levels, 0.0);
  for (std::size_t l = 0; l < levels; ++l) {
    const auto chunk = samples.subspan(l * per_level, per_level);
    const model::Batch batch = model::make_batch(chunk, params.dims);
    ad::Tape tape(false);
    const LossGraph g = batch_loss(tape, params, batch, model::Mode::eval);
    out[l] = -tape.value(g.loss)(0, 0);
  }
  return out;
}

std::string log_header(const channel::PowerGrid& grid) {
  std::string s = "step,loss";
  for (double db : grid.levels_db) s += ",val_sr_p" + level_tag(db);
  return s;
}

std::string format_log_row(const LogRow& row) {
  std::string s = std::to_string(row.step) + "," + fmt(row.loss);
  for (double v : row.val_sum_rate) s += "," + fmt(v);
  return s;
}

namespace {

void check_power(const model::Batch& batch, const ad::Tensor& beams,
                 std::size_t count, std::size_t step) {
  const std::size_t n = std::min(count, beams.rows);
  for (std::size_t r = 0; r < n; ++r) {
    double total = 0.0;
    for (double x : beams.row(r)) total += x * x;
    const double p = batch.power(r, 0);
    if (!(std::abs(total - p) <= 1e-9 * p))
      throw NumericError("step " + std::to_string(step) + ": beam power " +
                         fmt(total) + " of sample " + std::to_string(r) +
                         " differs from the budget " + fmt(p));
  }
}

[[noreturn]] void report_non_finite(const ad::Tape& tape, const LossGraph& g,
                                    std::size_t step) {
  const ad::Tensor& rates = tape.value(g.sum_rates);
  for (std::size_t r = 0; r < rates.rows; ++r)
    if (!std::isfinite(rates(r, 0)))
      throw NumericError("non-finite loss at step " + std::to_string(step) +
                         " (first offending sample: " + std::to_string(r) + ")");
  throw NumericError("non-finite loss at step " + std::to_string(step));
}

}  // namespace

TrainResult train_loop(const TrainConfig& cfg_in, std::ostream* log_out,
                       const ProgressFn& progress) {
  TrainConfig cfg = cfg_in;
  cfg.finalize();

  TrainResult res;
  res.params = model::init_params(cfg.dims, cfg.seed);
  res.params.config_fingerprint = cfg.fingerprint();
  AdamState adam = AdamState::zeros_like(res.params);

  const auto val = validation_set(cfg);
  auto rng = channel::make_stream(cfg.seed, channel::streams::kTrain);
  std::size_t cursor = 0;
  std::vector<channel::ChannelSample> samples(cfg.batch_size);

  if (log_out) *log_out << log_header(cfg.grid) << '\n';

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (auto& s : samples) {
      if (!cfg.fixed_dataset.empty()) {
        s = cfg.fixed_dataset[cursor];
        cursor = (cursor + 1) % cfg.fixed_dataset.size();
      } else if (cfg.fixed_power_db) {
        s = channel::draw_sample_at(rng, cfg.channel, *cfg.fixed_power_db);
      } else {
        s = channel::draw_sample(rng, cfg.channel, cfg.grid);
      }
    }
    const model::Batch batch = model::make_batch(samples, cfg.dims);

    ad::Tape tape;
    const LossGraph g = batch_loss(tape, res.params, batch);
    const double loss = tape.value(g.loss)(0, 0);
    if (!std::isfinite(loss)) report_non_finite(tape, g, step);
    check_power(batch, tape.value(g.out.beams), cfg.power_check_samples, step);

    model::update_running_stats(res.params, tape, g.out.norm_nodes);
    ad::GradMap grads = tape.backward(g.loss);
    const double norm = grads.global_norm();
    if (!std::isfinite(norm))
      throw NumericError("non-finite gradient at step " + std::to_string(step));
    if (norm > cfg.clip_norm) grads.scale(cfg.clip_norm / norm);
    adam_step(res.params, grads, adam, cfg);

    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      LogRow row{step, loss,
                 mean_rate_per_level(res.params, val, cfg.grid.size(),
                                     cfg.val_per_level)};
      if (log_out) *log_out << format_log_row(row) << '\n' << std::flush;
      if (progress) progress(row);
      res.log.push_back(std::move(row));
      if (!cfg.checkpoint_path.empty())
        model::save_params(cfg.checkpoint_path, res.params);
    }
  }
  return res;
}

}  // namespace unibf::trainer
