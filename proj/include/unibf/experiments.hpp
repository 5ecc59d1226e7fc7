#pragma once

// Evaluation harness shared by the CLI and the acceptance suite: test sets
// grouped by power level, methods (trained models or baselines), rate tables
// and single-sample timing.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "unibf/baselines.hpp"
#include "unibf/channel.hpp"
#include "unibf/model.hpp"

namespace unibf::experiments {

struct TestSet {
  channel::PowerGrid grid;
  std::size_t num_antennas = 0;
  std::size_t num_users = 0;
  /// levels[i] holds the samples drawn at grid.levels_db[i].
  std::vector<std::vector<channel::ChannelSample>> levels;
};

/// `per_level` samples per grid level from the test-set seed namespace.
TestSet make_test_set(std::uint64_t seed, const channel::ChannelConfig& cfg,
                      const channel::PowerGrid& grid, std::size_t per_level);

/// Groups a dataset by power level. Throws ShapeError if a sample's level is
/// not on the dataset grid.
TestSet test_set_from(const channel::Dataset& ds);

enum class Baseline { wmmse, zf, mrt };

std::string_view baseline_name(Baseline b);
/// Throws ConfigError for unknown names.
Baseline parse_baseline(std::string_view name);

struct Method {
  std::string label;
  std::variant<model::NetworkParams, Baseline> impl;

  static Method from_model(std::string label, model::NetworkParams params);
  static Method from_baseline(Baseline b);

  const model::NetworkParams* model() const {
    return std::get_if<model::NetworkParams>(&impl);
  }
};

/// Throws ShapeError if a model's dims disagree with the test set.
void check_compatible(const Method& m, const TestSet& ts);

/// Sum rate of every sample. `threads` > 1 splits the samples into
/// contiguous chunks; results do not depend on the thread count.
std::vector<double> sample_rates(const Method& m,
                                 std::span<const channel::ChannelSample> samples,
                                 std::size_t threads = 1);

/// Beams for one sample (the unit timed by the benchmark).
BeamStack solve_one(const Method& m, const channel::ChannelSample& sample);

struct RateTable {
  std::vector<double> levels_db;
  std::vector<std::string> columns;
  /// values[level][column]; NaN renders as an empty cell.
  std::vector<std::vector<double>> values;

  /// Index of `name`, or npos.
  std::size_t column(std::string_view name) const;
  double at(std::size_t level, std::string_view name) const;
};

/// Mean sum rate per level, one column per method, plus "<label>/wmmse"
/// ratio columns when a WMMSE method is present.
RateTable average_rates(std::span<const Method> methods, const TestSet& ts,
                        std::size_t threads = 1);

/// "p_db,<columns...>" then one row per level.
void write_csv(std::ostream& out, const RateTable& table);
std::string format_number(double v);

struct TimingStats {
  std::string method;
  double power_db = 0.0;
  std::size_t samples = 0;
  double mean_s = 0.0;
  double std_s = 0.0;
  /// Median of the means of 10 contiguous groups.
  double median_of_means_s = 0.0;
};

/// Single-threaded wall-clock time of solve_one per sample; the first
/// `warmup` solves of each level are excluded.
std::vector<TimingStats> time_method(const Method& m, const TestSet& ts,
                                     std::size_t warmup = 10);

void write_timing_csv(std::ostream& out, std::span<const TimingStats> rows);

}  // namespace unibf::experiments
