#include "unibf/channel.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "unibf/error.hpp"

namespace unibf {

double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }
double linear_to_db(double linear) { return 10.0 * std::log10(linear); }

}  // namespace unibf

namespace unibf::channel {

using linalg::CVec;

void ChannelConfig::validate() const {
  if (num_antennas == 0 || num_users == 0)
    throw ConfigError("channel: M and K must be positive");
  if (!(cell_radius > 0.0) || !(ref_distance > 0.0) || !(pathloss_exp > 0.0))
    throw ConfigError("channel: radius, d0 and alpha must be positive");
  if (!(min_bs_distance >= 0.0) || !(min_bs_distance < cell_radius))
    throw ConfigError("channel: min_bs_distance must lie in [0, radius)");
  if (!(noise_power > 0.0)) throw ConfigError("channel: noise power must be > 0");
}

PowerGrid PowerGrid::standard() { return PowerGrid{{0, 5, 10, 15, 20, 25, 30}}; }

namespace {

double parse_double(std::string_view s, const std::string& what) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v))
    throw ConfigError("invalid number '" + std::string(s) + "' in " + what);
  return v;
}

std::string format17(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v,
                                 std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

}  // namespace

PowerGrid PowerGrid::parse(const std::string& text) {
  PowerGrid g;
  if (text.find(':') != std::string::npos) {
    std::vector<double> parts;
    std::stringstream ss(text);
    std::string tok;
    while (std::getline(ss, tok, ':')) parts.push_back(parse_double(tok, "power grid"));
    if (parts.size() != 3 || !(parts[1] > 0.0) || parts[2] < parts[0])
      throw ConfigError("power grid range must be lo:step:hi with step > 0");
    const auto n = static_cast<std::size_t>(
        std::floor((parts[2] - parts[0]) / parts[1] + 1e-9));
    for (std::size_t i = 0; i <= n; ++i)
      g.levels_db.push_back(parts[0] + static_cast<double>(i) * parts[1]);
  } else {
    std::stringstream ss(text);
    std::string tok;
    while (std::getline(ss, tok, ','))
      g.levels_db.push_back(parse_double(tok, "power grid"));
  }
  g.validate();
  return g;
}

void PowerGrid::validate() const {
  if (levels_db.empty()) throw ConfigError("power grid is empty");
  for (std::size_t i = 0; i < levels_db.size(); ++i) {
    if (!std::isfinite(levels_db[i]))
      throw ConfigError("power grid level is not finite");
    if (i > 0 && !(levels_db[i] > levels_db[i - 1]))
      throw ConfigError("power grid must be strictly ascending");
  }
}

bool PowerGrid::contains(double db) const {
  return std::find(levels_db.begin(), levels_db.end(), db) != levels_db.end();
}

std::string PowerGrid::to_string() const {
  std::string s;
  for (std::size_t i = 0; i < levels_db.size(); ++i) {
    if (i) s += ',';
    s += format17(levels_db[i]);
  }
  return s;
}

double path_loss(double distance, const ChannelConfig& cfg) {
  return 1.0 / (1.0 + std::pow(distance / cfg.ref_distance, cfg.pathloss_exp));
}

CVec small_scale_fading(std::mt19937_64& rng, std::size_t m) {
  std::normal_distribution<double> gauss(0.0, std::numbers::sqrt2 / 2.0);
  CVec v(m);
  for (std::size_t i = 0; i < m; ++i) {
    v.re[i] = gauss(rng);
    v.im[i] = gauss(rng);
  }
  return v;
}

namespace {

ChannelSample draw_channels(std::mt19937_64& rng, const ChannelConfig& cfg,
                            DrawDetail* detail) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double r0 = cfg.min_bs_distance * cfg.min_bs_distance;
  const double r1 = cfg.cell_radius * cfg.cell_radius;
  ChannelSample s;
  s.h.reserve(cfg.num_users);
  if (detail) {
    detail->distances.clear();
    detail->rho.clear();
  }
  for (std::size_t k = 0; k < cfg.num_users; ++k) {
    // Area-uniform radius over the annulus; the angle does not affect rho.
    const double d = std::sqrt(r0 + unit(rng) * (r1 - r0));
    const double rho = path_loss(d, cfg);
    CVec hk = small_scale_fading(rng, cfg.num_antennas);
    const double amp = std::sqrt(rho);
    for (std::size_t m = 0; m < hk.size(); ++m) {
      hk.re[m] *= amp;
      hk.im[m] *= amp;
    }
    s.h.push_back(std::move(hk));
    if (detail) {
      detail->distances.push_back(d);
      detail->rho.push_back(rho);
    }
  }
  return s;
}

}  // namespace

ChannelSample draw_sample(std::mt19937_64& rng, const ChannelConfig& cfg,
                          const PowerGrid& grid, DrawDetail* detail) {
  ChannelSample s = draw_channels(rng, cfg, detail);
  std::uniform_int_distribution<std::size_t> level(0, grid.size() - 1);
  s.power_db = grid.levels_db[level(rng)];
  s.power = db_to_linear(s.power_db);
  return s;
}

ChannelSample draw_sample_at(std::mt19937_64& rng, const ChannelConfig& cfg,
                             double power_db, DrawDetail* detail) {
  ChannelSample s = draw_channels(rng, cfg, detail);
  s.power_db = power_db;
  s.power = db_to_linear(power_db);
  return s;
}

std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

std::vector<ChannelSample> make_test_set(std::uint64_t seed,
                                         const ChannelConfig& cfg,
                                         const PowerGrid& grid,
                                         std::size_t count) {
  std::vector<ChannelSample> out;
  out.reserve(count * grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    auto rng = make_stream(seed, streams::kTestBase + i);
    for (std::size_t n = 0; n < count; ++n)
      out.push_back(draw_sample_at(rng, cfg, grid.levels_db[i]));
  }
  return out;
}

// ----------------------------------------------------------------- dataset

void write_dataset(std::ostream& out, std::span<const ChannelSample> samples,
                   const PowerGrid& grid) {
  if (samples.empty()) throw DomainError("write_dataset: no samples");
  const std::size_t k = samples.front().num_users();
  const std::size_t m = samples.front().num_antennas();
  nlohmann::json header = {{"format", "unibf-dataset"},
                           {"version", kDatasetVersion},
                           {"M", m},
                           {"K", k},
                           {"grid_db", grid.levels_db}};
  out << header.dump() << '\n';
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const ChannelSample& s = samples[i];
    if (s.num_users() != k || s.num_antennas() != m)
      throw ShapeError("write_dataset: sample " + std::to_string(i) +
                       " has a different shape");
    std::string line = format17(s.power_db);
    for (const CVec& hk : s.h)
      for (std::size_t e = 0; e < m; ++e) {
        line += ' ';
        line += format17(hk.re[e]);
        line += ' ';
        line += format17(hk.im[e]);
      }
    out << line << '\n';
  }
  if (!out) throw Error("write_dataset: stream write failed");
}

void write_dataset(const std::filesystem::path& path,
                   std::span<const ChannelSample> samples,
                   const PowerGrid& grid) {
  std::ofstream f(path);
  if (!f) throw Error("write_dataset: cannot open " + path.string());
  write_dataset(f, samples, grid);
}

Dataset read_dataset(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError("empty dataset: no header", 1);
  ++line_no;

  Dataset ds;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.at("format").get<std::string>() != "unibf-dataset")
      throw ParseError("not a unibf dataset", line_no);
    const int version = header.at("version").get<int>();
    if (version != kDatasetVersion)
      throw ParseError("dataset version " + std::to_string(version) +
                           " unsupported (expected " +
                           std::to_string(kDatasetVersion) + ")",
                       line_no);
    ds.num_antennas = header.at("M").get<std::size_t>();
    ds.num_users = header.at("K").get<std::size_t>();
    ds.grid.levels_db = header.at("grid_db").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed dataset header: ") + e.what(),
                     line_no);
  }
  if (ds.num_antennas == 0 || ds.num_users == 0)
    throw ParseError("dataset header has zero dimensions", line_no);

  const std::size_t expected = 1 + 2 * ds.num_antennas * ds.num_users;
  std::vector<double> values;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    values.clear();
    const char* p = line.data();
    const char* end = line.data() + line.size();
    while (p < end) {
      while (p < end && *p == ' ') ++p;
      if (p == end) break;
      double v = 0.0;
      const auto [next, ec] = std::from_chars(p, end, v);
      if (ec != std::errc() || (next < end && *next != ' '))
        throw ParseError("malformed number in record at line " +
                             std::to_string(line_no),
                         line_no);
      values.push_back(v);
      p = next;
    }
    if (values.size() != expected)
      throw ParseError("record at line " + std::to_string(line_no) + " has " +
                           std::to_string(values.size()) +
                           " values; header K=" + std::to_string(ds.num_users) +
                           ", M=" + std::to_string(ds.num_antennas) +
                           " needs " + std::to_string(expected),
                       line_no);
    ChannelSample s;
    s.power_db = values[0];
    s.power = db_to_linear(s.power_db);
    std::size_t idx = 1;
    for (std::size_t k = 0; k < ds.num_users; ++k) {
      CVec hk(ds.num_antennas);
      for (std::size_t e = 0; e < ds.num_antennas; ++e) {
        hk.re[e] = values[idx++];
        hk.im[e] = values[idx++];
      }
      s.h.push_back(std::move(hk));
    }
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw ParseError("empty dataset: no records", line_no);
  return ds;
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("read_dataset: cannot open " + path.string());
  return read_dataset(f);
}

}  // namespace unibf::channel
