#include "unibf/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "unibf/error.hpp"
#include "unibf/experiments.hpp"
#include "unibf/simd/kernels.hpp"
#include "unibf/trainer.hpp"

#ifndef UNIBF_CODE_FINGERPRINT
#define UNIBF_CODE_FINGERPRINT "unknown"
#endif

namespace unibf::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string code_fingerprint() { return UNIBF_CODE_FINGERPRINT; }

fs::path resolve_out(const std::string& out) {
  fs::path p(out);
  if (p.is_relative())
    if (const char* dir = std::getenv(kOutDirEnv); dir && *dir) p = fs::path(dir) / p;
  return p;
}

fs::path manifest_path(const fs::path& out) {
  fs::path p = out;
  return p.replace_extension(".manifest.json");
}

fs::path log_path(const fs::path& out) {
  fs::path p = out;
  return p.replace_extension(".log.csv");
}

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void prepare_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::ofstream open_out(const fs::path& p) {
  prepare_parent(p);
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Error("cannot open " + p.string() + " for writing");
  return f;
}

class Manifest {
 public:
  Manifest(std::string command, const std::vector<std::string>& args)
      : started_(utc_now()) {
    doc_["command"] = std::move(command);
    doc_["argv"] = args;
    doc_["code_fingerprint"] = code_fingerprint();
    doc_["isa"] = std::string(simd::isa_name(simd::active_isa()));
    doc_["config"] = json::object();
    doc_["outputs"] = json::array();
  }
  json& config() { return doc_["config"]; }
  void seed(std::uint64_t s) { doc_["seed"] = s; }
  void output(const fs::path& p) { doc_["outputs"].push_back(p.string()); }
  void write(const fs::path& out) {
    doc_["started_utc"] = started_;
    doc_["finished_utc"] = utc_now();
    const fs::path mp = manifest_path(out);
    auto f = open_out(mp);
    f << doc_.dump(2) << '\n';
    if (!f) throw Error("failed writing " + mp.string());
  }

 private:
  std::string started_;
  json doc_;
};

struct Common {
  std::size_t m = 4;
  std::size_t k = 4;
  std::string pgrid = "0:5:30";
  std::uint64_t seed = 1;
  std::string out;
};

void add_dims(CLI::App* app, Common& c) {
  app->add_option("--m", c.m, "Transmit antennas M")->check(CLI::PositiveNumber);
  app->add_option("--k", c.k, "Users K")->check(CLI::PositiveNumber);
  app->add_option("--pgrid", c.pgrid, "Power grid in dB: lo:step:hi or a list");
}

void add_out(CLI::App* app, Common& c, const std::string& what) {
  app->add_option("--out", c.out, what)->required();
}

channel::ChannelConfig channel_config(const Common& c) {
  channel::ChannelConfig cfg;
  cfg.num_antennas = c.m;
  cfg.num_users = c.k;
  cfg.validate();
  return cfg;
}

struct TestSetOpts {
  std::string test_set;
  std::uint64_t test_seed = 7;
  std::size_t samples = 1000;
};

void add_test_set(CLI::App* app, TestSetOpts& t) {
  app->add_option("--test-set", t.test_set, "Dataset file to evaluate on");
  app->add_option("--test-seed", t.test_seed, "Seed of the generated test set");
  app->add_option("--samples", t.samples, "Generated samples per power level")
      ->check(CLI::PositiveNumber);
}

experiments::TestSet load_test_set(const TestSetOpts& t, const Common& c, json& cfg) {
  if (!t.test_set.empty()) {
    cfg["test_set"] = t.test_set;
    return experiments::test_set_from(channel::read_dataset(fs::path(t.test_set)));
  }
  cfg["test_seed"] = t.test_seed;
  cfg["samples_per_level"] = t.samples;
  cfg["M"] = c.m;
  cfg["K"] = c.k;
  cfg["pgrid"] = c.pgrid;
  return experiments::make_test_set(t.test_seed, channel_config(c),
                                    channel::PowerGrid::parse(c.pgrid), t.samples);
}

/// "label=path" or "path" (label = file stem).
experiments::Method load_model_method(const std::string& spec) {
  std::string label, path = spec;
  if (const auto eq = spec.find('='); eq != std::string::npos) {
    label = spec.substr(0, eq);
    path = spec.substr(eq + 1);
  }
  if (label.empty()) label = fs::path(path).stem().string();
  return experiments::Method::from_model(label, model::load_params(fs::path(path)));
}

std::vector<std::string> split_commas(const std::vector<std::string>& items) {
  std::vector<std::string> out;
  for (const auto& it : items) {
    std::stringstream ss(it);
    std::string tok;
    while (std::getline(ss, tok, ','))
      if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

// ------------------------------------------------------------------ train

struct TrainOpts {
  Common c;
  std::string head;
  std::size_t steps = 20000;
  std::size_t batch = 256;
  double lr = 1e-3;
  std::size_t eval_every = 1000;
  std::size_t val_per_level = 1000;
  std::optional<double> fixed_p;
  std::string train_set;
  std::size_t width = model::kDefaultWidth;
  std::size_t depth = model::kDefaultDepth;
  double clip = 10.0;
  bool quiet = false;
};

int cmd_train(const TrainOpts& o, const std::vector<std::string>& args,
              std::ostream& out) {
  if (o.fixed_p && !o.train_set.empty())
    throw ConfigError("--fixed-p and --train-set cannot be combined");
  trainer::TrainConfig cfg;
  cfg.dims.num_antennas = o.c.m;
  cfg.dims.num_users = o.c.k;
  cfg.dims.head = model::parse_head(o.head);
  cfg.dims.hidden.assign(o.depth, o.width);
  cfg.grid = channel::PowerGrid::parse(o.c.pgrid);
  cfg.steps = o.steps;
  cfg.batch_size = o.batch;
  cfg.learning_rate = o.lr;
  cfg.seed = o.c.seed;
  cfg.eval_every = o.eval_every;
  cfg.val_per_level = o.val_per_level;
  cfg.clip_norm = o.clip;
  cfg.fixed_power_db = o.fixed_p;
  if (!o.train_set.empty()) {
    auto ds = channel::read_dataset(fs::path(o.train_set));
    if (ds.num_antennas != o.c.m || ds.num_users != o.c.k)
      throw ShapeError("training set is M=" + std::to_string(ds.num_antennas) +
                       ", K=" + std::to_string(ds.num_users) + " but --m/--k ask for M=" +
                       std::to_string(o.c.m) + ", K=" + std::to_string(o.c.k));
    cfg.fixed_dataset = std::move(ds.samples);
  }
  cfg.finalize();

  const fs::path params_path = resolve_out(o.c.out);
  const fs::path log = log_path(params_path);
  Manifest man("train", args);
  auto& jc = man.config();
  jc["head"] = o.head;
  jc["M"] = o.c.m;
  jc["K"] = o.c.k;
  jc["pgrid"] = cfg.grid.to_string();
  jc["steps"] = cfg.steps;
  jc["batch"] = cfg.batch_size;
  jc["learning_rate"] = cfg.learning_rate;
  jc["adam_betas"] = {cfg.beta1, cfg.beta2};
  jc["adam_eps"] = cfg.adam_eps;
  jc["eval_every"] = cfg.eval_every;
  jc["val_per_level"] = cfg.val_per_level;
  jc["clip_norm"] = cfg.clip_norm;
  jc["hidden"] = cfg.dims.hidden;
  jc["fixed_p_db"] = o.fixed_p ? json(*o.fixed_p) : json(nullptr);
  jc["train_set"] = o.train_set.empty() ? json(nullptr) : json(o.train_set);
  jc["config_fingerprint"] = cfg.fingerprint();
  man.seed(cfg.seed);

  auto log_file = open_out(log);
  prepare_parent(params_path);
  const auto res = trainer::train_loop(cfg, &log_file, [&](const trainer::LogRow& row) {
    if (!o.quiet)
      out << "step " << row.step << " loss " << experiments::format_number(row.loss)
          << '\n' << std::flush;
  });
  log_file.close();
  model::save_params(params_path, res.params);
  man.output(params_path);
  man.output(log);
  man.write(params_path);
  return 0;
}

// ------------------------------------------------------------------- eval

struct EvalOpts {
  Common c;
  TestSetOpts t;
  std::vector<std::string> models;
  std::vector<std::string> baselines;
  std::size_t threads = 1;
};

std::vector<experiments::Method> collect_methods(const std::vector<std::string>& models,
                                                 const std::vector<std::string>& baselines) {
  std::vector<experiments::Method> methods;
  for (const auto& m : models) methods.push_back(load_model_method(m));
  for (const auto& b : split_commas(baselines))
    methods.push_back(experiments::Method::from_baseline(experiments::parse_baseline(b)));
  if (methods.empty()) throw ConfigError("give at least one --model or --baseline");
  return methods;
}

int cmd_eval(const EvalOpts& o, const std::vector<std::string>& args) {
  const auto methods = collect_methods(o.models, o.baselines);
  Manifest man("eval", args);
  const auto ts = load_test_set(o.t, o.c, man.config());
  man.config()["models"] = o.models;
  man.config()["baselines"] = split_commas(o.baselines);
  man.config()["threads"] = o.threads;
  man.seed(o.t.test_seed);
  const auto table = experiments::average_rates(methods, ts, o.threads);
  const fs::path out = resolve_out(o.c.out);
  auto f = open_out(out);
  experiments::write_csv(f, table);
  f.close();
  man.output(out);
  man.write(out);
  return 0;
}

// ------------------------------------------------------------------ bench

struct BenchOpts {
  Common c;
  TestSetOpts t;
  std::vector<std::string> models;
  std::vector<std::string> baselines;
  std::size_t warmup = 10;
};

int cmd_bench(const BenchOpts& o, const std::vector<std::string>& args) {
  const auto methods = collect_methods(o.models, o.baselines);
  Manifest man("bench", args);
  const auto ts = load_test_set(o.t, o.c, man.config());
  man.config()["models"] = o.models;
  man.config()["baselines"] = split_commas(o.baselines);
  man.config()["warmup"] = o.warmup;
  man.config()["threads"] = 1;
  man.seed(o.t.test_seed);
  std::vector<experiments::TimingStats> rows;
  for (const auto& m : methods) {
    auto r = experiments::time_method(m, ts, o.warmup);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  const fs::path out = resolve_out(o.c.out);
  auto f = open_out(out);
  experiments::write_timing_csv(f, rows);
  f.close();
  man.output(out);
  man.write(out);
  return 0;
}

// ----------------------------------------------------------------- ablate

struct AblateOpts {
  Common c;
  TestSetOpts t;
  std::string universal;
  std::vector<std::string> fixed;
  std::size_t threads = 1;
};

int cmd_ablate(const AblateOpts& o, const std::vector<std::string>& args) {
  std::vector<experiments::Method> methods;
  methods.push_back(load_model_method(o.universal));
  if (!methods.front().model()->dims.power_feature)
    throw ConfigError("--universal model was trained at a fixed power");
  std::vector<double> fixed_db;
  for (const auto& spec : o.fixed) {
    auto m = load_model_method(spec);
    const auto& d = m.model()->dims;
    if (d.power_feature)
      throw ConfigError("--fixed model '" + m.label + "' is universal");
    if (spec.find('=') == std::string::npos)
      m.label = "fixed_p" + experiments::format_number(d.fixed_power_db);
    fixed_db.push_back(d.fixed_power_db);
    methods.push_back(std::move(m));
  }

  Manifest man("ablate", args);
  const auto ts = load_test_set(o.t, o.c, man.config());
  man.config()["universal"] = o.universal;
  man.config()["fixed"] = o.fixed;
  man.config()["threads"] = o.threads;
  man.seed(o.t.test_seed);

  auto table = experiments::average_rates(methods, ts, o.threads);
  if (!fixed_db.empty()) {
    const double nan = std::nan("");
    table.columns.push_back("per_p");
    table.columns.push_back(methods.front().label + "/per_p");
    for (std::size_t l = 0; l < table.levels_db.size(); ++l) {
      double per_p = nan;
      for (std::size_t i = 0; i < fixed_db.size(); ++i)
        if (fixed_db[i] == table.levels_db[l]) per_p = table.values[l][i + 1];
      table.values[l].push_back(per_p);
      table.values[l].push_back(table.values[l][0] / per_p);
    }
  }
  const fs::path out = resolve_out(o.c.out);
  auto f = open_out(out);
  experiments::write_csv(f, table);
  f.close();
  man.output(out);
  man.write(out);
  return 0;
}

// --------------------------------------------------------------- gen-data

struct GenOpts {
  Common c;
  std::size_t count = 1000;
  bool per_level = false;
  std::optional<double> fixed_p;
};

int cmd_gen(const GenOpts& o, const std::vector<std::string>& args) {
  if (o.fixed_p && o.per_level)
    throw ConfigError("--fixed-p and --per-level cannot be combined");
  const auto cfg = channel_config(o.c);
  auto grid = channel::PowerGrid::parse(o.c.pgrid);
  if (o.fixed_p) grid = channel::PowerGrid{{*o.fixed_p}};
  auto rng = channel::make_stream(o.c.seed, channel::streams::kDataset);
  std::vector<channel::ChannelSample> samples;
  if (o.per_level) {
    for (double db : grid.levels_db)
      for (std::size_t i = 0; i < o.count; ++i)
        samples.push_back(channel::draw_sample_at(rng, cfg, db));
  } else {
    for (std::size_t i = 0; i < o.count; ++i)
      samples.push_back(channel::draw_sample(rng, cfg, grid));
  }
  const fs::path out = resolve_out(o.c.out);
  prepare_parent(out);
  channel::write_dataset(out, samples, grid);

  Manifest man("gen-data", args);
  man.config()["M"] = o.c.m;
  man.config()["K"] = o.c.k;
  man.config()["pgrid"] = grid.to_string();
  man.config()["count"] = o.count;
  man.config()["per_level"] = o.per_level;
  man.seed(o.c.seed);
  man.output(out);
  man.write(out);
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Universal deep-learning MISO beamforming"};
  app.name("unibf");
  app.require_subcommand(1);

  TrainOpts train;
  auto* tr = app.add_subcommand("train", "Train a beamforming network");
  add_dims(tr, train.c);
  add_out(tr, train.c, "Parameter file to write");
  tr->add_option("--head", train.head, "dbl | fl | sfl")->required();
  tr->add_option("--steps", train.steps, "Training steps")->check(CLI::PositiveNumber);
  tr->add_option("--batch", train.batch, "Mini-batch size (>= 2)");
  tr->add_option("--lr", train.lr, "Adam learning rate");
  tr->add_option("--seed", train.c.seed, "Seed for init, batches and validation");
  tr->add_option("--eval-every", train.eval_every, "Validation period in steps");
  tr->add_option("--val-per-level", train.val_per_level, "Validation samples per level");
  tr->add_option("--fixed-p", train.fixed_p,
                 "Train at one power level (dB) without the power input");
  tr->add_option("--train-set", train.train_set, "Cycle through a fixed dataset");
  tr->add_option("--width", train.width, "Hidden width")->check(CLI::PositiveNumber);
  tr->add_option("--depth", train.depth, "Hidden layers")->check(CLI::PositiveNumber);
  tr->add_option("--clip", train.clip, "Gradient clipping norm");
  tr->add_flag("--quiet", train.quiet, "No progress lines");

  EvalOpts ev;
  auto* e = app.add_subcommand("eval", "Average sum rate per power level");
  add_dims(e, ev.c);
  add_out(e, ev.c, "CSV file to write");
  add_test_set(e, ev.t);
  e->add_option("--model", ev.models, "Parameter file, optionally label=path");
  e->add_option("--baseline", ev.baselines, "wmmse, zf, mrt (comma-separated)");
  e->add_option("--threads", ev.threads, "Worker threads")->check(CLI::PositiveNumber);

  BenchOpts bn;
  auto* b = app.add_subcommand("bench", "Single-sample solve time per power level");
  add_dims(b, bn.c);
  add_out(b, bn.c, "CSV file to write");
  add_test_set(b, bn.t);
  b->add_option("--model", bn.models, "Parameter file, optionally label=path");
  b->add_option("--baseline", bn.baselines, "wmmse, zf, mrt (comma-separated)");
  b->add_option("--warmup", bn.warmup, "Untimed solves per level");

  AblateOpts ab;
  auto* a = app.add_subcommand("ablate", "Universal vs fixed-power models");
  add_dims(a, ab.c);
  add_out(a, ab.c, "CSV file to write");
  add_test_set(a, ab.t);
  a->add_option("--universal", ab.universal, "Universal parameter file")->required();
  a->add_option("--fixed", ab.fixed, "Fixed-power parameter files");
  a->add_option("--threads", ab.threads, "Worker threads")->check(CLI::PositiveNumber);

  GenOpts gd;
  auto* g = app.add_subcommand("gen-data", "Write a channel dataset");
  add_dims(g, gd.c);
  add_out(g, gd.c, "Dataset file to write");
  g->add_option("--count", gd.count, "Samples (per level with --per-level)")
      ->check(CLI::PositiveNumber);
  g->add_option("--seed", gd.c.seed, "Dataset seed");
  g->add_flag("--per-level", gd.per_level, "Draw --count samples at every level");
  g->add_option("--fixed-p", gd.fixed_p, "Single power level (dB)");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();  // program name
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& ex) {
    err << "usage error: " << ex.what() << '\n'
        << "run 'unibf --help' for usage\n";
    return 2;
  }

  try {
    if (tr->parsed()) return cmd_train(train, args, out);
    if (e->parsed()) return cmd_eval(ev, args);
    if (b->parsed()) return cmd_bench(bn, args);
    if (a->parsed()) return cmd_ablate(ab, args);
    if (g->parsed()) return cmd_gen(gd, args);
  } catch (const ConfigError& ex) {
    err << "usage error: " << ex.what() << '\n';
    return 2;
  } catch (const ParseError& ex) {
    err << "error: " << ex.what() << " (at " << ex.location() << ")\n";
    return 1;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return 1;
  }
  return 2;
}

int run(int argc, char** argv) {
  return run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}

}  // namespace unibf::cli
