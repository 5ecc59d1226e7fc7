#include "unibf/experiments.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>
#include <thread>

#include "unibf/error.hpp"
#include "unibf/metrics.hpp"

namespace unibf::experiments {

TestSet make_test_set(std::uint64_t seed, const channel::ChannelConfig& cfg,
                      const channel::PowerGrid& grid, std::size_t per_level) {
  cfg.validate();
  grid.validate();
  if (per_level == 0) throw ConfigError("test set needs at least one sample per level");
  TestSet ts;
  ts.grid = grid;
  ts.num_antennas = cfg.num_antennas;
  ts.num_users = cfg.num_users;
  auto flat = channel::make_test_set(seed, cfg, grid, per_level);
  ts.levels.resize(grid.size());
  for (std::size_t i = 0; i < flat.size(); ++i)
    ts.levels[i / per_level].push_back(std::move(flat[i]));
  return ts;
}

TestSet test_set_from(const channel::Dataset& ds) {
  TestSet ts;
  ts.grid = ds.grid;
  ts.num_antennas = ds.num_antennas;
  ts.num_users = ds.num_users;
  ts.levels.resize(ds.grid.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    const auto it = std::find(ds.grid.levels_db.begin(), ds.grid.levels_db.end(),
                              s.power_db);
    if (it == ds.grid.levels_db.end())
      throw ShapeError("test set record " + std::to_string(i + 1) +
                       " has power " + format_number(s.power_db) +
                       " dB, which is not on the dataset grid");
    ts.levels[static_cast<std::size_t>(it - ds.grid.levels_db.begin())].push_back(s);
  }
  return ts;
}

std::string_view baseline_name(Baseline b) {
  switch (b) {
    case Baseline::wmmse: return "wmmse";
    case Baseline::zf: return "zf";
    case Baseline::mrt: return "mrt";
  }
  return "?";
}

Baseline parse_baseline(std::string_view name) {
  if (name == "wmmse") return Baseline::wmmse;
  if (name == "zf") return Baseline::zf;
  if (name == "mrt") return Baseline::mrt;
  throw ConfigError("unknown baseline '" + std::string(name) +
                    "' (expected wmmse, zf or mrt)");
}

Method Method::from_model(std::string label, model::NetworkParams params) {
  return Method{std::move(label), std::move(params)};
}

Method Method::from_baseline(Baseline b) {
  return Method{std::string(baseline_name(b)), b};
}

void check_compatible(const Method& m, const TestSet& ts) {
  if (const auto* p = m.model()) {
    if (p->dims.num_antennas != ts.num_antennas || p->dims.num_users != ts.num_users)
      throw ShapeError("model '" + m.label + "' is M=" +
                       std::to_string(p->dims.num_antennas) + ", K=" +
                       std::to_string(p->dims.num_users) +
                       " but the test set is M=" + std::to_string(ts.num_antennas) +
                       ", K=" + std::to_string(ts.num_users));
  } else if (std::get<Baseline>(m.impl) == Baseline::zf &&
             ts.num_users > ts.num_antennas) {
    throw ShapeError("zf needs K <= M");
  }
}

BeamStack solve_one(const Method& m, const channel::ChannelSample& s) {
  if (const auto* p = m.model()) return model::infer_one(*p, s);
  switch (std::get<Baseline>(m.impl)) {
    case Baseline::wmmse: return baselines::wmmse(s.h, s.power).beams;
    case Baseline::zf: return baselines::zf_waterfilling(s.h, s.power);
    case Baseline::mrt: return baselines::mrt_poweropt(s.h, s.power);
  }
  throw std::logic_error("solve_one: unreachable");
}

namespace {

constexpr std::size_t kInferChunk = 1024;

void rates_into(const Method& m, std::span<const channel::ChannelSample> samples,
                std::span<double> out) {
  if (const auto* p = m.model()) {
    for (std::size_t i = 0; i < samples.size(); i += kInferChunk) {
      const auto chunk = samples.subspan(i, std::min(kInferChunk, samples.size() - i));
      const auto beams = model::infer(*p, chunk);
      for (std::size_t j = 0; j < chunk.size(); ++j)
        out[i + j] = metrics::sum_rate(chunk[j].h, beams[j]);
    }
    return;
  }
  for (std::size_t i = 0; i < samples.size(); ++i)
    out[i] = metrics::sum_rate(samples[i].h, solve_one(m, samples[i]));
}

}  // namespace

std::vector<double> sample_rates(const Method& m,
                                 std::span<const channel::ChannelSample> samples,
                                 std::size_t threads) {
  std::vector<double> out(samples.size());
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(samples.size(), 1));
  if (threads == 1) {
    rates_into(m, samples, out);
    return out;
  }
  const std::size_t per = (samples.size() + threads - 1) / threads;
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t begin = t * per;
    if (begin >= samples.size()) break;
    const std::size_t count = std::min(per, samples.size() - begin);
    pool.emplace_back([&, t, begin, count] {
      try {
        rates_into(m, samples.subspan(begin, count),
                   std::span(out).subspan(begin, count));
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

std::size_t RateTable::column(std::string_view name) const {
  const auto it = std::find(columns.begin(), columns.end(), name);
  return it == columns.end() ? std::string::npos
                             : static_cast<std::size_t>(it - columns.begin());
}

double RateTable::at(std::size_t level, std::string_view name) const {
  const std::size_t c = column(name);
  if (c == std::string::npos) throw ConfigError("no column '" + std::string(name) + "'");
  return values.at(level).at(c);
}

RateTable average_rates(std::span<const Method> methods, const TestSet& ts,
                        std::size_t threads) {
  for (const auto& m : methods) check_compatible(m, ts);
  RateTable t;
  t.levels_db = ts.grid.levels_db;
  for (const auto& m : methods) t.columns.push_back(m.label);
  std::size_t wmmse_col = std::string::npos;
  for (std::size_t i = 0; i < methods.size(); ++i)
    if (!methods[i].model() && std::get<Baseline>(methods[i].impl) == Baseline::wmmse)
      wmmse_col = i;
  if (wmmse_col != std::string::npos)
    for (std::size_t i = 0; i < methods.size(); ++i)
      if (i != wmmse_col) t.columns.push_back(methods[i].label + "/wmmse");

  const double nan = std::numeric_limits<double>::quiet_NaN();
  t.values.assign(ts.levels.size(), std::vector<double>(t.columns.size(), nan));
  for (std::size_t l = 0; l < ts.levels.size(); ++l) {
    const auto& samples = ts.levels[l];
    if (samples.empty()) continue;
    for (std::size_t i = 0; i < methods.size(); ++i) {
      const auto r = sample_rates(methods[i], samples, threads);
      double s = 0.0;
      for (double v : r) s += v;
      t.values[l][i] = s / static_cast<double>(r.size());
    }
    if (wmmse_col != std::string::npos) {
      std::size_t c = methods.size();
      for (std::size_t i = 0; i < methods.size(); ++i)
        if (i != wmmse_col) t.values[l][c++] = t.values[l][i] / t.values[l][wmmse_col];
    }
  }
  return t;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_csv(std::ostream& out, const RateTable& table) {
  out << "p_db";
  for (const auto& c : table.columns) out << ',' << c;
  out << '\n';
  for (std::size_t l = 0; l < table.levels_db.size(); ++l) {
    out << format_number(table.levels_db[l]);
    for (double v : table.values[l]) out << ',' << format_number(v);
    out << '\n';
  }
}

std::vector<TimingStats> time_method(const Method& m, const TestSet& ts,
                                     std::size_t warmup) {
  using clock = std::chrono::steady_clock;
  check_compatible(m, ts);
  std::vector<TimingStats> rows;
  for (std::size_t l = 0; l < ts.levels.size(); ++l) {
    const auto& samples = ts.levels[l];
    for (std::size_t i = 0; i < std::min(warmup, samples.size()); ++i) {
      volatile double sink = solve_one(m, samples[i]).total_power();
      (void)sink;
    }
    std::vector<double> t(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto t0 = clock::now();
      const BeamStack b = solve_one(m, samples[i]);
      const auto t1 = clock::now();
      volatile double sink = b.total_power();
      (void)sink;
      t[i] = std::chrono::duration<double>(t1 - t0).count();
    }
    TimingStats st;
    st.method = m.label;
    st.power_db = ts.grid.levels_db[l];
    st.samples = t.size();
    if (!t.empty()) {
      double s = 0.0;
      for (double v : t) s += v;
      st.mean_s = s / static_cast<double>(t.size());
      double ss = 0.0;
      for (double v : t) ss += (v - st.mean_s) * (v - st.mean_s);
      st.std_s = t.size() > 1 ? std::sqrt(ss / static_cast<double>(t.size() - 1)) : 0.0;
      const std::size_t groups = std::min<std::size_t>(10, t.size());
      std::vector<double> means;
      for (std::size_t g = 0; g < groups; ++g) {
        const std::size_t b = g * t.size() / groups;
        const std::size_t e = (g + 1) * t.size() / groups;
        double gs = 0.0;
        for (std::size_t i = b; i < e; ++i) gs += t[i];
        means.push_back(gs / static_cast<double>(e - b));
      }
      std::sort(means.begin(), means.end());
      st.median_of_means_s = means.size() % 2
                                 ? means[means.size() / 2]
                                 : 0.5 * (means[means.size() / 2 - 1] +
                                          means[means.size() / 2]);
    }
    rows.push_back(std::move(st));
  }
  return rows;
}

void write_timing_csv(std::ostream& out, std::span<const TimingStats> rows) {
  out << "method,p_db,samples,mean_s,std_s,median_of_means_s\n";
  for (const auto& r : rows)
    out << r.method << ',' << format_number(r.power_db) << ',' << r.samples << ','
        << format_number(r.mean_s) << ',' << format_number(r.std_s) << ','
        << format_number(r.median_of_means_s) << '\n';
}

}  // namespace unibf::experiments
