#pragma once

// Channel and power-budget sampling for a single-cell MISO downlink.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "unibf/complex_linalg.hpp"

namespace unibf {

/// Receiver noise power. Every SINR in the library is normalized to it.
inline constexpr double kNoisePower = 1.0;

double db_to_linear(double db);
double linear_to_db(double linear);

}  // namespace unibf

namespace unibf::channel {

struct ChannelConfig {
  double cell_radius = 100.0;     // m
  double ref_distance = 30.0;     // m, d0
  double pathloss_exp = 3.0;      // alpha
  std::size_t num_antennas = 4;   // M
  std::size_t num_users = 4;      // K
  double noise_power = kNoisePower;
  double min_bs_distance = 1.0;   // m, exclusion zone around the BS

  /// Throws ConfigError on non-positive dimensions or lengths.
  void validate() const;
};

/// Finite ascending set of transmit power levels in dB.
struct PowerGrid {
  std::vector<double> levels_db;

  /// {0, 5, ..., 30} dB
  static PowerGrid standard();
  /// "lo:step:hi" or a comma-separated list. Throws ConfigError.
  static PowerGrid parse(const std::string& text);

  std::size_t size() const noexcept { return levels_db.size(); }
  /// Throws ConfigError if empty, unsorted or repeated.
  void validate() const;
  bool contains(double db) const;
  std::string to_string() const;
};

struct ChannelSample {
  std::vector<linalg::CVec> h;  // K rows of length M
  double power_db = 0.0;
  double power = 1.0;           // db_to_linear(power_db)

  std::size_t num_users() const noexcept { return h.size(); }
  std::size_t num_antennas() const noexcept {
    return h.empty() ? 0 : h.front().size();
  }

  friend bool operator==(const ChannelSample&, const ChannelSample&) = default;
};

/// Geometry behind a drawn sample (never persisted).
struct DrawDetail {
  std::vector<double> distances;
  std::vector<double> rho;
};

/// 1 / (1 + (d / d0)^alpha)
double path_loss(double distance, const ChannelConfig& cfg);

/// M i.i.d. CN(0, 1) entries.
linalg::CVec small_scale_fading(std::mt19937_64& rng, std::size_t m);

/// Users uniform over the annulus [min_bs_distance, cell_radius); power
/// level uniform over the grid.
ChannelSample draw_sample(std::mt19937_64& rng, const ChannelConfig& cfg,
                          const PowerGrid& grid, DrawDetail* detail = nullptr);

/// Same geometry and fading with a fixed power level.
ChannelSample draw_sample_at(std::mt19937_64& rng, const ChannelConfig& cfg,
                             double power_db, DrawDetail* detail = nullptr);

/// Independent generator for (seed, stream). Streams partition the seed
/// space: training, validation and test sets use distinct stream ids.
std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t stream);

namespace streams {
inline constexpr std::uint64_t kTrain = 1;
inline constexpr std::uint64_t kValidation = 2;
inline constexpr std::uint64_t kInit = 3;
inline constexpr std::uint64_t kDataset = 4;
inline constexpr std::uint64_t kBaseline = 5;
/// Test set for grid level i uses kTestBase + i.
inline constexpr std::uint64_t kTestBase = 1000;
}  // namespace streams

/// `count` samples per grid level, level-major.
std::vector<ChannelSample> make_test_set(std::uint64_t seed,
                                         const ChannelConfig& cfg,
                                         const PowerGrid& grid,
                                         std::size_t count);

// Dataset files: one JSON header line {"format","version","M","K","grid_db"}
// followed by one record per line: the power in dB, then the K*M channel
// entries (user-major) as "re im" pairs, all printed with 17 significant
// digits.

inline constexpr int kDatasetVersion = 1;

struct Dataset {
  std::size_t num_antennas = 0;
  std::size_t num_users = 0;
  PowerGrid grid;
  std::vector<ChannelSample> samples;
};

void write_dataset(std::ostream& out, std::span<const ChannelSample> samples,
                   const PowerGrid& grid);
void write_dataset(const std::filesystem::path& path,
                   std::span<const ChannelSample> samples,
                   const PowerGrid& grid);

/// Throws ParseError (with 1-based line number) on malformed content,
/// version or shape mismatch, and on an empty dataset.
Dataset read_dataset(std::istream& in);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace unibf::channel
