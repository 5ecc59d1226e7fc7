#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "unibf/error.hpp"
#include "unibf/experiments.hpp"
#include "unibf/metrics.hpp"

using namespace unibf;
using namespace unibf::experiments;

namespace {

channel::ChannelConfig small_channel() {
  channel::ChannelConfig cfg;
  cfg.num_antennas = 3;
  cfg.num_users = 2;
  return cfg;
}

model::NetworkParams small_model(model::HeadKind head) {
  model::ModelDims d;
  d.num_antennas = 3;
  d.num_users = 2;
  d.hidden = {8, 8};
  d.head = head;
  return model::init_params(d, 3);
}

}  // namespace

TEST_CASE("test sets are grouped by level") {
  const auto grid = channel::PowerGrid::parse("0,10,20");
  const TestSet ts = experiments::make_test_set(4, small_channel(), grid, 6);
  REQUIRE(ts.levels.size() == 3);
  for (std::size_t l = 0; l < 3; ++l) {
    CHECK(ts.levels[l].size() == 6);
    for (const auto& s : ts.levels[l]) CHECK(s.power_db == grid.levels_db[l]);
  }
  CHECK(experiments::make_test_set(4, small_channel(), grid, 6).levels == ts.levels);
  CHECK_THROWS_AS(experiments::make_test_set(4, small_channel(), grid, 0), ConfigError);

  channel::Dataset ds;
  ds.grid = grid;
  ds.num_antennas = 3;
  ds.num_users = 2;
  ds.samples = {ts.levels[2][0], ts.levels[0][0], ts.levels[2][1]};
  const TestSet g = test_set_from(ds);
  CHECK(g.levels[0].size() == 1);
  CHECK(g.levels[1].empty());
  CHECK(g.levels[2].size() == 2);
  CHECK(g.levels[2][1] == ts.levels[2][1]);
  ds.grid = channel::PowerGrid::parse("0,20");
  ds.samples.push_back(ts.levels[1][0]);
  CHECK_THROWS_AS(test_set_from(ds), ShapeError);
}

TEST_CASE("baseline names") {
  for (auto b : {Baseline::wmmse, Baseline::zf, Baseline::mrt})
    CHECK(parse_baseline(baseline_name(b)) == b);
  CHECK_THROWS_AS(parse_baseline("mmse"), ConfigError);
}

TEST_CASE("compatibility checks") {
  const TestSet ts = experiments::make_test_set(1, small_channel(), channel::PowerGrid{{10.0}}, 2);
  model::ModelDims d;
  d.hidden = {4};
  CHECK_THROWS_AS(check_compatible(Method::from_model("x", model::init_params(d, 1)), ts),
                  ShapeError);
  CHECK_NOTHROW(check_compatible(Method::from_baseline(Baseline::zf), ts));
  channel::ChannelConfig wide = small_channel();
  wide.num_users = 4;
  const TestSet wt = experiments::make_test_set(1, wide, channel::PowerGrid{{10.0}}, 2);
  CHECK_THROWS_AS(check_compatible(Method::from_baseline(Baseline::zf), wt), ShapeError);
  CHECK_NOTHROW(check_compatible(Method::from_baseline(Baseline::mrt), wt));
}

TEST_CASE("sample rates do not depend on the thread count") {
  const TestSet ts = experiments::make_test_set(2, small_channel(), channel::PowerGrid{{20.0}}, 37);
  const auto& s = ts.levels[0];
  for (const Method& m : {Method::from_baseline(Baseline::wmmse),
                          Method::from_model("sfl", small_model(model::HeadKind::sfl))}) {
    const auto one = sample_rates(m, s, 1);
    REQUIRE(one.size() == s.size());
    for (std::size_t t : {2u, 3u, 8u, 100u}) CHECK(sample_rates(m, s, t) == one);
    for (std::size_t i = 0; i < s.size(); ++i)
      CHECK(one[i] == doctest::Approx(metrics::sum_rate(s[i].h, solve_one(m, s[i])))
                          .epsilon(1e-12));
  }
}

TEST_CASE("rate table with ratio columns") {
  const TestSet ts = experiments::make_test_set(3, small_channel(), channel::PowerGrid::parse("0,20"), 20);
  const std::vector<Method> methods = {
      Method::from_model("fl", small_model(model::HeadKind::fl)),
      Method::from_baseline(Baseline::wmmse), Method::from_baseline(Baseline::zf)};
  const RateTable t = average_rates(methods, ts, 2);
  CHECK(t.columns == std::vector<std::string>{"fl", "wmmse", "zf", "fl/wmmse", "zf/wmmse"});
  for (std::size_t l = 0; l < 2; ++l) {
    double w = 0.0;
    for (const auto& s : ts.levels[l]) w += metrics::sum_rate(s.h, baselines::wmmse(s.h, s.power).beams);
    w /= 20;
    CHECK(t.at(l, "wmmse") == doctest::Approx(w).epsilon(1e-12));
    CHECK(t.at(l, "zf/wmmse") == doctest::Approx(t.at(l, "zf") / w).epsilon(1e-12));
    CHECK(t.at(l, "fl/wmmse") == doctest::Approx(t.at(l, "fl") / w).epsilon(1e-12));
  }
  CHECK(t.column("mrt") == std::string::npos);
  CHECK_THROWS_AS(t.at(0, "mrt"), ConfigError);

  const RateTable plain = average_rates(std::span(methods).first(1), ts);
  CHECK(plain.columns == std::vector<std::string>{"fl"});
}

TEST_CASE("CSV output") {
  RateTable t;
  t.levels_db = {0.0, 2.5};
  t.columns = {"a", "b"};
  t.values = {{1.5, std::numeric_limits<double>::quiet_NaN()}, {0.1, 10.0}};
  std::ostringstream out;
  write_csv(out, t);
  CHECK(out.str() == "p_db,a,b\n0,1.5,\n2.5,0.1,10\n");
  CHECK(format_number(std::numeric_limits<double>::quiet_NaN()).empty());
  CHECK(format_number(-3.0) == "-3");

  std::vector<TimingStats> rows(1);
  rows[0].method = "wmmse";
  rows[0].power_db = 20.0;
  rows[0].samples = 5;
  rows[0].mean_s = 0.5;
  rows[0].std_s = 0.25;
  rows[0].median_of_means_s = 0.125;
  std::ostringstream tc;
  write_timing_csv(tc, rows);
  CHECK(tc.str() ==
        "method,p_db,samples,mean_s,std_s,median_of_means_s\nwmmse,20,5,0.5,0.25,0.125\n");
}

TEST_CASE("timing rows cover every level") {
  const TestSet ts = experiments::make_test_set(5, small_channel(), channel::PowerGrid::parse("0,30"), 12);
  const auto rows = time_method(Method::from_baseline(Baseline::mrt), ts, 2);
  REQUIRE(rows.size() == 2);
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK(rows[l].method == "mrt");
    CHECK(rows[l].power_db == ts.grid.levels_db[l]);
    CHECK(rows[l].samples == 12);
    CHECK(rows[l].mean_s > 0.0);
    CHECK(rows[l].std_s >= 0.0);
    CHECK(rows[l].median_of_means_s > 0.0);
  }
}
