#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "unibf/autodiff.hpp"
#include "unibf/error.hpp"

using namespace unibf;
using namespace unibf::ad;

namespace {

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

Tensor random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c,
                     double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(r, c);
  for (auto& x : t.data) x = u(rng);
  return t;
}

// Scalar test loss: mean of the output weighted by a fixed random tensor.
Var weighted(Tape& t, Var y, const Tensor& w) {
  return mean(t, mul(t, y, t.constant(w)));
}

struct GradCheck {
  double worst = 0.0;
  std::size_t coords = 0;
};

GradCheck check_grad(const Builder& build, const NamedTensors& params,
                     double floor = 1e-7) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& [name, t] : params) vars.push_back(tape.parameter(name, t));
  const GradMap g = tape.backward(build(tape, vars));

  const ScalarFn f = [&](const NamedTensors& ps) {
    Tape t(false);
    std::vector<Var> vs;
    for (const auto& [name, v] : ps) vs.push_back(t.constant(v));
    return t.value(build(t, vs))(0, 0);
  };
  const GradMap fd = finite_diff_grad(f, params, 1e-6);

  GradCheck out;
  for (const auto& [name, t] : params) {
    const Tensor& a = g.at(name);
    const Tensor& b = fd.at(name);
    REQUIRE(a.same_shape(b));
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double err = std::abs(a.data[i] - b.data[i]) /
                         std::max({std::abs(a.data[i]), std::abs(b.data[i]), floor});
      out.worst = std::max(out.worst, err);
      ++out.coords;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("record produces the documented forward values") {
  Tape t;
  const Var x = t.constant(Tensor(1, 2, {-1.0, 2.0}));
  CHECK(t.value(relu(t, x)) == Tensor(1, 2, {0.0, 2.0}));

  std::mt19937_64 rng(1);
  const Tensor xv = random_tensor(rng, 3, 4);
  Tensor eye(4, 4);
  for (std::size_t i = 0; i < 4; ++i) eye(i, i) = 1.0;
  const Var y = affine(t, t.constant(xv), t.constant(eye), t.constant(Tensor(1, 4)));
  CHECK(t.value(y) == xv);

  // A = 2I (n = 2) packed as re block then im block.
  Tensor a(1, 8);
  a(0, 0) = 2.0;
  a(0, 3) = 2.0;
  const Tensor b = random_tensor(rng, 1, 4);
  const Var s = hpd_solve(t, t.constant(a), t.constant(b));
  for (std::size_t i = 0; i < 4; ++i) CHECK(t.value(s)(0, i) == doctest::Approx(b(0, i) / 2));
  CHECK(t.factors(s).size() == 1);
  CHECK(t.factors(s).front().size() == 2);
}

TEST_CASE("documented gradients") {
  SUBCASE("norm2 gives 2x in split form") {
    Tape t;
    const Tensor xv(1, 4, {1.0, -2.0, 0.5, 3.0});
    const Var x = t.parameter("x", xv);
    const GradMap g = t.backward(norm2(t, x, 2));
    for (std::size_t i = 0; i < 4; ++i) CHECK(g.at("x").data[i] == 2.0 * xv.data[i]);
  }
  SUBCASE("log2(1 + s) at s = 1") {
    Tape t;
    const Var s = t.parameter("s", Tensor(1, 1, {1.0}));
    const GradMap g = t.backward(log2(t, add_scalar(t, s, 1.0)));
    CHECK(g.at("s")(0, 0) == doctest::Approx(1.0 / (2.0 * std::log(2.0))).epsilon(1e-12));
    CHECK(g.at("s")(0, 0) == doctest::Approx(0.7213).epsilon(1e-4));
  }
}

TEST_CASE("finite differences of simple functions") {
  const ScalarFn sq = [](const NamedTensors& p) {
    return p[0].second(0, 0) * p[0].second(0, 0);
  };
  CHECK(finite_diff_grad(sq, {{"t", Tensor(1, 1, {3.0})}}).at("t")(0, 0) ==
        doctest::Approx(6.0).epsilon(1e-9));
  const ScalarFn c = [](const NamedTensors&) { return 4.0; };
  const GradMap g = finite_diff_grad(c, {{"t", Tensor(2, 3, 1.0)}});
  for (double v : g.at("t").data) CHECK(v == 0.0);
  const ScalarFn bad = [](const NamedTensors&) { return std::nan(""); };
  CHECK_THROWS_AS(finite_diff_grad(bad, {{"t", Tensor(1, 1)}}), NumericError);
}

TEST_CASE("every primitive matches central differences") {
  std::mt19937_64 rng(42);
  const double tol = 1e-5;
  auto run = [&](const std::string& label, const Builder& b, const NamedTensors& ps) {
    const GradCheck r = check_grad(b, ps);
    INFO(label, " worst relative error ", r.worst, " over ", r.coords);
    CHECK(r.worst <= tol);
  };

  {
    const Tensor w = random_tensor(rng, 3, 5);
    run("affine", [&](Tape& t, const auto& v) { return weighted(t, affine(t, v[0], v[1], v[2]), w); },
        {{"x", random_tensor(rng, 3, 4)}, {"W", random_tensor(rng, 4, 5)}, {"b", random_tensor(rng, 1, 5)}});
  }
  {
    Tensor x = random_tensor(rng, 4, 6);
    for (auto& v : x.data)
      while (std::abs(v) < 1e-4) v = std::uniform_real_distribution<double>(-1, 1)(rng);
    const Tensor w = random_tensor(rng, 4, 6);
    run("relu", [&](Tape& t, const auto& v) { return weighted(t, relu(t, v[0]), w); }, {{"x", x}});
  }
  {
    const Tensor w = random_tensor(rng, 6, 3);
    run("batch_norm_train",
        [&](Tape& t, const auto& v) { return weighted(t, batch_norm_train(t, v[0], v[1], v[2], 1e-5), w); },
        {{"x", random_tensor(rng, 6, 3)}, {"gamma", random_tensor(rng, 1, 3)}, {"beta", random_tensor(rng, 1, 3)}});
  }
  {
    const Tensor w = random_tensor(rng, 4, 3);
    run("batch_norm_eval",
        [&](Tape& t, const auto& v) {
          return weighted(t, batch_norm_eval(t, v[0], v[1], v[2], v[3], v[4], 1e-5), w);
        },
        {{"x", random_tensor(rng, 4, 3)}, {"gamma", random_tensor(rng, 1, 3)},
         {"beta", random_tensor(rng, 1, 3)}, {"mean", random_tensor(rng, 1, 3)},
         {"var", random_tensor(rng, 1, 3, 0.5, 2.0)}});
  }
  {
    const Tensor w = random_tensor(rng, 3, 4);
    run("scaled_softmax",
        [&](Tape& t, const auto& v) { return weighted(t, scaled_softmax(t, v[0], v[1]), w); },
        {{"z", random_tensor(rng, 3, 4, -3, 3)}, {"P", random_tensor(rng, 3, 1, 0.5, 5.0)}});
  }
  {
    // M = 3, K = 2
    const Tensor w = random_tensor(rng, 2, 18);
    run("gram", [&](Tape& t, const auto& v) { return weighted(t, gram(t, v[0], v[1], 3, 1.0), w); },
        {{"h", random_tensor(rng, 2, 12)}, {"q", random_tensor(rng, 2, 2, 0.1, 3.0)}});
  }
  {
    const Tensor w = random_tensor(rng, 2, 12);
    run("hpd_solve",
        [&](Tape& t, const auto& v) {
          return weighted(t, hpd_solve(t, gram(t, v[0], v[1], 3, 1.0), v[2]), w);
        },
        {{"h", random_tensor(rng, 2, 12)}, {"q", random_tensor(rng, 2, 2, 0.1, 3.0)},
         {"rhs", random_tensor(rng, 2, 12)}});
  }
  {
    const Tensor w = random_tensor(rng, 2, 6);
    run("hdot", [&](Tape& t, const auto& v) { return weighted(t, hdot(t, v[0], v[1], 3), w); },
        {{"a", random_tensor(rng, 2, 6)}, {"b", random_tensor(rng, 2, 18)}});
  }
  {
    const Tensor w = random_tensor(rng, 2, 3);
    run("norm2", [&](Tape& t, const auto& v) { return weighted(t, norm2(t, v[0], 2), w); },
        {{"x", random_tensor(rng, 2, 12)}});
  }
  {
    const Tensor w = random_tensor(rng, 2, 12);
    run("scale_groups", [&](Tape& t, const auto& v) { return weighted(t, scale_groups(t, v[0], v[1]), w); },
        {{"x", random_tensor(rng, 2, 12)}, {"s", random_tensor(rng, 2, 3)}});
  }
  for (bool broadcast : {false, true}) {
    const Tensor w = random_tensor(rng, 3, 4);
    const std::size_t bc = broadcast ? 1 : 4;
    const NamedTensors ps = {{"a", random_tensor(rng, 3, 4)},
                             {"b", random_tensor(rng, 3, bc, 0.5, 2.0)}};
    run("add", [&](Tape& t, const auto& v) { return weighted(t, add(t, v[0], v[1]), w); }, ps);
    run("sub", [&](Tape& t, const auto& v) { return weighted(t, sub(t, v[0], v[1]), w); }, ps);
    run("mul", [&](Tape& t, const auto& v) { return weighted(t, mul(t, v[0], v[1]), w); }, ps);
    run("div", [&](Tape& t, const auto& v) { return weighted(t, div(t, v[0], v[1]), w); }, ps);
  }
  {
    const Tensor w = random_tensor(rng, 3, 4);
    const NamedTensors ps = {{"x", random_tensor(rng, 3, 4, 0.2, 3.0)}};
    run("sqrt", [&](Tape& t, const auto& v) { return weighted(t, sqrt(t, v[0]), w); }, ps);
    run("log2", [&](Tape& t, const auto& v) { return weighted(t, log2(t, v[0]), w); }, ps);
    run("add_scalar", [&](Tape& t, const auto& v) { return weighted(t, add_scalar(t, v[0], 2.5), w); }, ps);
    run("scale", [&](Tape& t, const auto& v) { return weighted(t, scale(t, v[0], -1.5), w); }, ps);
  }
  {
    const Tensor w = random_tensor(rng, 3, 5);
    run("gather", [&](Tape& t, const auto& v) { return weighted(t, gather(t, v[0], {3, 0, 3, 1, 2}), w); },
        {{"x", random_tensor(rng, 3, 4)}});
    const Tensor w2 = random_tensor(rng, 3, 2);
    run("slice", [&](Tape& t, const auto& v) { return weighted(t, slice(t, v[0], 1, 2), w2); },
        {{"x", random_tensor(rng, 3, 4)}});
    run("group_sum", [&](Tape& t, const auto& v) { return weighted(t, group_sum(t, v[0], 3), w2); },
        {{"x", random_tensor(rng, 3, 6)}});
    const Tensor w3 = random_tensor(rng, 3, 7);
    run("concat", [&](Tape& t, const auto& v) { return weighted(t, concat(t, v[0], v[1]), w3); },
        {{"a", random_tensor(rng, 3, 4)}, {"b", random_tensor(rng, 3, 3)}});
    run("mean", [&](Tape& t, const auto& v) { return mean(t, v[0]); }, {{"x", random_tensor(rng, 3, 4)}});
  }
}

TEST_CASE("scaled softmax gradient of the coordinate sum vanishes") {
  std::mt19937_64 rng(3);
  Tape t;
  const Var z = t.parameter("z", random_tensor(rng, 4, 5, -2, 2));
  const Var p = t.constant(random_tensor(rng, 4, 1, 1.0, 10.0));
  const Var y = scaled_softmax(t, z, p);
  const GradMap g = t.backward(mean(t, group_sum(t, y, 5)));
  for (double v : g.at("z").data) CHECK(std::abs(v) < 1e-15);
}

TEST_CASE("recording and non-recording tapes agree bit for bit") {
  std::mt19937_64 rng(8);
  const Tensor h = random_tensor(rng, 3, 16), q = random_tensor(rng, 3, 2, 0.1, 2.0);
  auto build = [&](Tape& t) {
    const Var hv = t.constant(h);
    const Var a = gram(t, hv, t.constant(q), 4, 1.0);
    const Var x = hpd_solve(t, a, hv);
    return t.value(norm2(t, hdot(t, hv, x, 4), 1));
  };
  Tape rec(true), plain(false);
  CHECK(build(rec) == build(plain));
}

TEST_CASE("tape misuse is reported") {
  Tape t;
  const Var a = t.constant(Tensor(2, 3));
  const Var b = t.constant(Tensor(3, 3));
  CHECK_THROWS_AS(add(t, a, b), ShapeError);
  CHECK_THROWS_AS(affine(t, a, b, t.constant(Tensor(1, 2))), ShapeError);
  CHECK_THROWS_AS(t.record(Op::kCount, {}), std::invalid_argument);
  CHECK_THROWS_AS(t.record(Op::leaf, {}), std::invalid_argument);
  CHECK_THROWS_AS(gather(t, a, {5}), ShapeError);

  Tape u;
  const Var x = u.parameter("x", Tensor(1, 1, {2.0}));
  const Var l = mean(u, mul(u, x, x));
  u.backward(l);
  CHECK_THROWS_AS(mean(u, x), std::logic_error);
}

TEST_CASE("borrowed leaves read the caller's tensor") {
  Tensor w(1, 2, {1.0, 2.0});
  Tape t;
  const Var v = t.parameter_ref("w", w);
  CHECK(&t.value(v) == &w);
  const GradMap g = t.backward(mean(t, mul(t, v, v)));
  CHECK(g.at("w") == Tensor(1, 2, {1.0, 2.0}));
}
