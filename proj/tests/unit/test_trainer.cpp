#include <doctest.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <sstream>

#include "unibf/baselines.hpp"
#include "unibf/error.hpp"
#include "unibf/metrics.hpp"
#include "unibf/trainer.hpp"

using namespace unibf;
using namespace unibf::trainer;

namespace {

model::ModelDims small_dims(model::HeadKind head, std::size_t m, std::size_t k) {
  model::ModelDims d;
  d.num_antennas = m;
  d.num_users = k;
  d.hidden = {6, 5};
  d.head = head;
  return d;
}

std::vector<channel::ChannelSample> draw(std::size_t n, std::size_t m, std::size_t k,
                                         std::uint64_t seed) {
  channel::ChannelConfig cfg;
  cfg.num_antennas = m;
  cfg.num_users = k;
  auto rng = channel::make_stream(seed, 500);
  std::vector<channel::ChannelSample> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(channel::draw_sample(rng, cfg, channel::PowerGrid::standard()));
  return out;
}

double loss_of(const model::NetworkParams& p, const model::Batch& b, model::Mode mode) {
  ad::Tape t(false);
  const LossGraph g = batch_loss(t, p, b, mode);
  return t.value(g.loss)(0, 0);
}

// Worst relative deviation of the taped gradient from central differences.
double grad_check(model::NetworkParams params, const model::Batch& batch) {
  ad::Tape tape;
  const LossGraph g = batch_loss(tape, params, batch);
  const ad::GradMap grads = tape.backward(g.loss);

  ad::NamedTensors named;
  for (const auto& [name, t] : params.trainable()) named.emplace_back(name, *t);
  auto fn = [&](const ad::NamedTensors& values) {
    model::NetworkParams q = params;
    auto slots = q.trainable();
    for (std::size_t i = 0; i < slots.size(); ++i) *slots[i].second = values[i].second;
    return loss_of(q, batch, model::Mode::train);
  };
  const ad::GradMap fd = ad::finite_diff_grad(fn, named, 1e-6);

  double worst = 0.0;
  for (const auto& [name, t] : named) {
    const ad::Tensor& a = grads.at(name);
    const ad::Tensor& b = fd.at(name);
    // Hidden biases precede batch normalization: exact zero gradient.
    if (name.size() > 1 && name[0] == 'b' && std::isdigit(static_cast<unsigned char>(name[1])) &&
        name != "b" + std::to_string(params.hidden.size() + 1)) {
      for (double x : a.data) CHECK(std::abs(x) <= 1e-12);
      for (double x : b.data) CHECK(std::abs(x) <= 1e-8);
      continue;
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double scale = std::max({std::abs(a.data[i]), std::abs(b.data[i]), 1e-7});
      worst = std::max(worst, std::abs(a.data[i] - b.data[i]) / scale);
    }
  }
  return worst;
}

TrainConfig tiny_config(model::HeadKind head) {
  TrainConfig cfg;
  cfg.dims = small_dims(head, 2, 2);
  cfg.dims.hidden = {16, 16};
  cfg.batch_size = 16;
  cfg.steps = 100;
  cfg.eval_every = 25;
  cfg.val_per_level = 8;
  cfg.seed = 11;
  return cfg;
}

}  // namespace

TEST_CASE("Adam with a zero gradient leaves parameters unchanged") {
  TrainConfig cfg;
  auto params = model::init_params(small_dims(model::HeadKind::sfl, 2, 2), 1);
  const auto before = params;
  AdamState st = AdamState::zeros_like(params);
  for (auto& m : st.m) std::fill(m.data.begin(), m.data.end(), 0.5);
  for (auto& v : st.v) std::fill(v.data.begin(), v.data.end(), 0.25);
  ad::GradMap zero;
  for (const auto& [name, t] : params.trainable()) zero.add(name, ad::Tensor(t->rows, t->cols));
  AdamState fresh = AdamState::zeros_like(params);
  adam_step(params, zero, fresh, cfg);
  auto a = params.trainable();
  auto b = before.trainable();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].second->data == b[i].second->data);

  model::NetworkParams other = before;
  adam_step(other, zero, st, cfg);
  CHECK(st.step == 1);
  for (const auto& m : st.m)
    for (double x : m.data) CHECK(x == doctest::Approx(0.5 * cfg.beta1).epsilon(1e-15));
  for (const auto& v : st.v)
    for (double x : v.data) CHECK(x == doctest::Approx(0.25 * cfg.beta2).epsilon(1e-15));
}

TEST_CASE("first Adam step has magnitude close to the learning rate") {
  TrainConfig cfg;
  auto params = model::init_params(small_dims(model::HeadKind::dbl, 2, 2), 2);
  const auto before = params;
  ad::GradMap g;
  double sign = 1.0;
  for (const auto& [name, t] : params.trainable()) {
    ad::Tensor gt(t->rows, t->cols);
    for (std::size_t i = 0; i < gt.size(); ++i) {
      gt.data[i] = sign * (0.01 + 0.37 * i);
      sign = -sign;
    }
    g.add(name, gt);
  }
  AdamState st = AdamState::zeros_like(params);
  adam_step(params, g, st, cfg);
  auto a = params.trainable();
  auto b = before.trainable();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const ad::Tensor& gt = g.at(a[i].first);
    for (std::size_t j = 0; j < gt.size(); ++j) {
      const double delta = a[i].second->data[j] - b[i].second->data[j];
      CHECK(delta * gt.data[j] < 0.0);
      CHECK(std::abs(delta) == doctest::Approx(cfg.learning_rate).epsilon(1e-5));
    }
  }
}

TEST_CASE("Adam minimizes a quadratic bowl") {
  TrainConfig cfg;
  model::ModelDims d = small_dims(model::HeadKind::dbl, 1, 1);
  d.hidden = {1};
  auto params = model::init_params(d, 3);
  for (auto& [name, t] : params.trainable()) std::fill(t->data.begin(), t->data.end(), 1.0);
  AdamState st = AdamState::zeros_like(params);
  std::size_t steps = 0;
  auto worst = [&] {
    double w = 0.0;
    for (const auto& [name, t] : params.trainable())
      for (double x : t->data) w = std::max(w, std::abs(x));
    return w;
  };
  while (worst() >= 1e-3 && steps < 5000) {
    ad::GradMap g;
    for (const auto& [name, t] : params.trainable()) {
      ad::Tensor gt = *t;
      for (double& x : gt.data) x *= 2.0;
      g.add(name, gt);
    }
    adam_step(params, g, st, cfg);
    ++steps;
  }
  MESSAGE("bowl converged after ", steps, " steps");
  CHECK(worst() < 1e-3);
}

TEST_CASE("adam_step rejects mismatched state") {
  TrainConfig cfg;
  auto params = model::init_params(small_dims(model::HeadKind::sfl, 2, 2), 4);
  AdamState st;
  CHECK_THROWS_AS(adam_step(params, ad::GradMap{}, st, cfg), ShapeError);
}

TEST_CASE("identical samples give the single-sample loss") {
  for (auto head : {model::HeadKind::dbl, model::HeadKind::fl, model::HeadKind::sfl}) {
    const auto dims = small_dims(head, 3, 2);
    auto params = model::init_params(dims, 5);
    // Collapsed batch statistics leave only the output bias.
    if (head == model::HeadKind::dbl)
      std::fill(params.output.bias.data.begin(), params.output.bias.data.end(), 0.1);
    const auto one = draw(1, 3, 2, 6);
    const std::vector<channel::ChannelSample> many(8, one[0]);
    const double l1 = loss_of(params, model::make_batch(one, dims), model::Mode::eval);
    const double l8 = loss_of(params, model::make_batch(many, dims), model::Mode::eval);
    CHECK(l8 == doctest::Approx(l1).epsilon(1e-13));
    const double lt = loss_of(params, model::make_batch(many, dims), model::Mode::train);
    INFO("head ", model::head_name(head), " train loss ", lt);
    CHECK(std::isfinite(lt));
  }
}

TEST_CASE("SFL with zero output at K = 1 gives the single-user rate") {
  const auto dims = small_dims(model::HeadKind::sfl, 3, 1);
  auto params = model::init_params(dims, 7);
  std::fill(params.output.weight.data.begin(), params.output.weight.data.end(), 0.0);
  std::fill(params.output.bias.data.begin(), params.output.bias.data.end(), 0.0);
  const auto samples = draw(32, 3, 1, 8);
  double expect = 0.0;
  for (const auto& s : samples) expect -= std::log2(1.0 + s.power * linalg::norm2(s.h[0]));
  expect /= samples.size();
  for (auto mode : {model::Mode::eval, model::Mode::train})
    CHECK(loss_of(params, model::make_batch(samples, dims), mode) ==
          doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("batch_loss gradient matches finite differences") {
  for (auto head : {model::HeadKind::dbl, model::HeadKind::fl, model::HeadKind::sfl}) {
    INFO(std::string(model::head_name(head)));
    const auto dims = small_dims(head, 2, 2);
    const auto params = model::init_params(dims, 9);
    const auto batch = model::make_batch(draw(4, 2, 2, 10), dims);
    CHECK(grad_check(params, batch) <= 1e-4);
  }
}

TEST_CASE("full-width SFL pipeline gradient") {
  model::ModelDims dims = small_dims(model::HeadKind::sfl, 2, 2);
  dims.hidden = {12, 12, 12};
  const auto params = model::init_params(dims, 12);
  const auto batch = model::make_batch(draw(4, 2, 2, 13), dims);
  CHECK(grad_check(params, batch) <= 1e-5);
}

TEST_CASE("training configuration validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.finalize());
  CHECK(cfg.channel.num_users == cfg.dims.num_users);
  auto expect_bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    CHECK_THROWS_AS(c.finalize(), ConfigError);
  };
  expect_bad([](TrainConfig& c) { c.batch_size = 1; });
  expect_bad([](TrainConfig& c) { c.learning_rate = 0.0; });
  expect_bad([](TrainConfig& c) { c.beta1 = 1.0; });
  expect_bad([](TrainConfig& c) { c.beta2 = -0.1; });
  expect_bad([](TrainConfig& c) { c.adam_eps = 0.0; });
  expect_bad([](TrainConfig& c) { c.clip_norm = 0.0; });
  expect_bad([](TrainConfig& c) { c.eval_every = 0; });
  expect_bad([](TrainConfig& c) { c.val_per_level = 0; });
  expect_bad([](TrainConfig& c) { c.fixed_power_db = std::numeric_limits<double>::infinity(); });
  expect_bad([](TrainConfig& c) { c.dims.hidden.clear(); });
  expect_bad([](TrainConfig& c) { c.fixed_dataset = draw(2, 3, 3, 1); });

  TrainConfig fixed;
  fixed.fixed_power_db = 10.0;
  fixed.finalize();
  CHECK_FALSE(fixed.dims.power_feature);
  CHECK(fixed.dims.fixed_power_db == 10.0);
}

TEST_CASE("fingerprint tracks only training-relevant fields") {
  const TrainConfig base;
  TrainConfig same = base;
  same.eval_every = 7;
  same.val_per_level = 3;
  same.checkpoint_path = "x.bin";
  CHECK(same.fingerprint() == base.fingerprint());
  TrainConfig lr = base;
  lr.learning_rate = 2e-3;
  CHECK(lr.fingerprint() != base.fingerprint());
  TrainConfig seed = base;
  seed.seed = 2;
  CHECK(seed.fingerprint() != base.fingerprint());
  TrainConfig head = base;
  head.dims.head = model::HeadKind::fl;
  CHECK(head.fingerprint() != base.fingerprint());
  TrainConfig fixed = base;
  fixed.fixed_power_db = 0.0;
  CHECK(fixed.fingerprint() != base.fingerprint());
}

TEST_CASE("log format") {
  CHECK(log_header(channel::PowerGrid::standard()) ==
        "step,loss,val_sr_p0,val_sr_p5,val_sr_p10,val_sr_p15,val_sr_p20,val_sr_p25,val_sr_p30");
  CHECK(log_header(channel::PowerGrid{{-5.0, 2.5}}) == "step,loss,val_sr_pm5,val_sr_p2_5");
  CHECK(format_log_row({3, -1.5, {2.0, 0.25}}) == "3,-1.5,2,0.25");
  CHECK(format_log_row({1, 0.1, {}}) == "1,0.10000000000000001");
}

TEST_CASE("a seed-fixed run is bit-reproducible") {
  const TrainConfig cfg = tiny_config(model::HeadKind::sfl);
  std::ostringstream a, b;
  const TrainResult ra = train_loop(cfg, &a);
  const TrainResult rb = train_loop(cfg, &b);
  CHECK(a.str() == b.str());
  CHECK(ra.log.size() == 4);
  CHECK(ra.params.config_fingerprint == cfg.fingerprint());
  auto pa = ra.params.trainable();
  auto pb = rb.params.trainable();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].second->data == pb[i].second->data);
  std::size_t lines = 0;
  for (char c : a.str()) lines += c == '\n';
  CHECK(lines == 5);

  TrainConfig other = cfg;
  other.seed = 12;
  std::ostringstream c;
  train_loop(other, &c);
  CHECK(c.str() != a.str());
}

TEST_CASE("progress callback and checkpoint") {
  TrainConfig cfg = tiny_config(model::HeadKind::fl);
  cfg.steps = 30;
  cfg.eval_every = 10;
  const auto path = std::filesystem::temp_directory_path() / "unibf_trainer_ckpt.bin";
  std::filesystem::remove(path);
  cfg.checkpoint_path = path;
  std::vector<std::size_t> seen;
  const TrainResult r = train_loop(cfg, nullptr, [&](const LogRow& row) { seen.push_back(row.step); });
  CHECK(seen == std::vector<std::size_t>{10, 20, 30});
  const auto loaded = model::load_params(path);
  CHECK(loaded.output.weight.data == r.params.output.weight.data);
  std::filesystem::remove(path);
}

TEST_CASE("fixed dataset and fixed power modes") {
  TrainConfig cfg = tiny_config(model::HeadKind::sfl);
  cfg.steps = 20;
  cfg.eval_every = 20;
  cfg.fixed_dataset = draw(5, 2, 2, 14);
  const TrainResult a = train_loop(cfg);
  const TrainResult b = train_loop(cfg);
  CHECK(a.log[0].loss == b.log[0].loss);

  TrainConfig fp = tiny_config(model::HeadKind::sfl);
  fp.steps = 20;
  fp.eval_every = 20;
  fp.fixed_power_db = 10.0;
  const TrainResult c = train_loop(fp);
  CHECK_FALSE(c.params.dims.power_feature);
  CHECK(c.params.hidden[0].weight.rows == 8);
}

TEST_CASE("non-finite input aborts training") {
  TrainConfig cfg = tiny_config(model::HeadKind::sfl);
  cfg.steps = 5;
  cfg.fixed_dataset = draw(4, 2, 2, 15);
  cfg.fixed_dataset[2].h[1].re[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(train_loop(cfg), NumericError);
}

TEST_CASE("validation set and per-level rates") {
  TrainConfig cfg = tiny_config(model::HeadKind::dbl);
  cfg.finalize();
  const auto val = validation_set(cfg);
  REQUIRE(val.size() == 7 * 8);
  for (std::size_t i = 0; i < val.size(); ++i)
    CHECK(val[i].power_db == cfg.grid.levels_db[i / 8]);
  CHECK(val == validation_set(cfg));
  const auto params = model::init_params(cfg.dims, 1);
  const auto rates = mean_rate_per_level(params, val, 7, 8);
  for (std::size_t l = 0; l < 7; ++l) {
    double s = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
      const auto& x = val[l * 8 + i];
      s += metrics::sum_rate(x.h, model::infer_one(params, x));
    }
    CHECK(rates[l] == doctest::Approx(s / 8).epsilon(1e-10));
  }
  CHECK_THROWS_AS(mean_rate_per_level(params, val, 7, 9), ShapeError);
}

TEST_CASE("SFL with two users approaches WMMSE at 20 dB" * doctest::test_suite("training")) {
  TrainConfig cfg;
  cfg.dims.num_antennas = 2;
  cfg.dims.num_users = 2;
  cfg.dims.head = model::HeadKind::sfl;
  cfg.steps = 2000;
  cfg.eval_every = 2000;
  cfg.val_per_level = 200;
  cfg.seed = 21;
  const TrainResult r = train_loop(cfg);
  cfg.finalize();
  const auto val = validation_set(cfg);
  const std::size_t level = 4;
  REQUIRE(cfg.grid.levels_db[level] == 20.0);
  double w = 0.0;
  for (std::size_t i = 0; i < cfg.val_per_level; ++i) {
    const auto& s = val[level * cfg.val_per_level + i];
    w += metrics::sum_rate(s.h, baselines::wmmse(s.h, s.power).beams);
  }
  w /= cfg.val_per_level;
  const double sfl = r.log.back().val_sum_rate[level];
  MESSAGE("SFL ", sfl, " WMMSE ", w);
  CHECK(sfl >= 0.95 * w);
}
