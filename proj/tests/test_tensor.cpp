#include <cmath>
#include <map>
#include <random>

#include "doctest.h"
#include "u2u/autograd.hpp"
#include "u2u/gradcheck.hpp"

using namespace u2u;

namespace {

Tensor<double> rand_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  return uniform_tensor<double>(std::move(shape), lo, hi, rng);
}

// Values kept away from zero so kinked ops (relu, abs, max) stay smooth
// within the finite-difference step.
Tensor<double> rand_tensor_offzero(Shape shape, std::mt19937_64& rng) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> mag(0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.data) v = (sign(rng) ? 1.0 : -1.0) * mag(rng);
  return t;
}

NodePtr<double> weighted_sum(const NodePtr<double>& x, std::mt19937_64& rng) {
  auto w = make_constant(rand_tensor(x->value.shape, rng, 0.2, 1.0));
  return sum_all(mul(x, w));
}

using Params = std::map<std::string, Tensor<double>>;
using Builder = std::function<NodePtr<double>(const ParamMap<double>&)>;

void expect_grad_ok(const Params& params, const Builder& build, double tol = 1e-4) {
  auto report = grad_check(params, build, tol);
  CAPTURE(report.worst());
  CHECK(report.pass());
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("softmax of uniform inputs is uniform") {
  auto x = make_constant(Tensor<float>({4}, {0.f, 0.f, 0.f, 0.f}));
  auto y = softmax(x, 0);
  for (int i = 0; i < 4; ++i) CHECK(y->value[i] == doctest::Approx(0.25).epsilon(1e-7));
}

TEST_CASE("matmul against hand multiplication") {
  auto a = make_constant(Tensor<float>({2, 2}, {1, 2, 3, 4}));
  auto b = make_constant(Tensor<float>({2, 1}, {5, 6}));
  auto c = matmul(a, b);
  CHECK(c->value.shape == Shape{2, 1});
  CHECK(c->value[0] == 17.f);
  CHECK(c->value[1] == 39.f);
}

TEST_CASE("masked softmax zeroes masked positions and renormalizes") {
  auto x = make_constant(Tensor<float>({3}, {0.3f, -1.2f, 5.0f}));
  Tensor<float> mask({3}, {1.f, 1.f, 0.f});
  auto y = softmax(x, 0, &mask);
  CHECK(y->value[2] == 0.0f);
  CHECK(y->value[0] + y->value[1] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("softmax over a fully masked axis is rejected") {
  auto x = make_constant(Tensor<float>({2, 2}, {1.f, 2.f, 3.f, 4.f}));
  Tensor<float> mask({2, 2}, {1.f, 1.f, 0.f, 0.f});
  CHECK_THROWS_AS(softmax(x, 1, &mask), std::invalid_argument);
}

TEST_CASE("shape mismatch reports both shapes") {
  auto a = make_constant(Tensor<float>({2, 3}));
  auto b = make_constant(Tensor<float>({4, 2}));
  try {
    matmul(a, b);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("backward of x*x at x=3 gives 6") {
  auto x = make_leaf(Tensor<double>::scalar(3.0), true, "x");
  auto y = mul(x, x);
  backward(y);
  CHECK(x->grad[0] == doctest::Approx(6.0));
}

TEST_CASE("gradient of sum(softmax(x)) is identically zero") {
  auto x = make_leaf(Tensor<double>({5}, {0.3, -0.7, 1.1, 0.0, 2.2}), true, "x");
  auto y = sum_all(softmax(x, 0));
  backward(y);
  for (int i = 0; i < 5; ++i) CHECK(std::fabs(x->grad[i]) < 1e-12);
}

TEST_CASE("backward rejects non-scalar outputs") {
  auto x = make_leaf(Tensor<double>({3}, {1, 2, 3}), true, "x");
  auto y = mul(x, x);
  CHECK_THROWS_AS(backward(y), std::invalid_argument);
}

TEST_CASE("random five-parameter composite matches finite differences") {
  std::mt19937_64 rng(7);
  Params params;
  params["a"] = rand_tensor({2, 3}, rng);
  params["b"] = rand_tensor({3, 2}, rng);
  params["c"] = rand_tensor({2, 2}, rng);
  params["d"] = rand_tensor({4}, rng);
  params["e"] = Tensor<double>::scalar(0.37);
  expect_grad_ok(params, [](const ParamMap<double>& p) {
    auto m = matmul(p.get("a"), p.get("b"));
    auto t = tanh(add(m, p.get("c")));
    auto flat = reshape(t, {4});
    auto s = sigmoid(mul(flat, p.get("d")));
    return sum_all(mul(s, p.get("e")));
  });
}

TEST_CASE("zero-parameter constant graph yields an empty report") {
  auto report = grad_check(
      {}, [](const ParamMap<double>&) { return make_constant(Tensor<double>::scalar(1.0)); }, 1e-4);
  CHECK(report.entries.empty());
  CHECK(report.pass());
}

TEST_CASE("per-op gradients match central finite differences on seeded shapes") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    CAPTURE(seed);
    std::mt19937_64 rng(seed);
    const std::int64_t m = 1 + static_cast<std::int64_t>(rng() % 3);
    const std::int64_t k = 1 + static_cast<std::int64_t>(rng() % 3);
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng() % 3);

    SUBCASE("") {}  // keep doctest quiet about loop structure

    {  // matmul
      Params p{{"a", rand_tensor({m, k}, rng)}, {"b", rand_tensor({k, n}, rng)}};
      std::mt19937_64 wr(seed * 31 + 1);
      expect_grad_ok(p, [&wr](const ParamMap<double>& pm) {
        std::mt19937_64 local = wr;
        return weighted_sum(matmul(pm.get("a"), pm.get("b")), local);
      });
    }
    {  // add / sub / mul with same-shape, scalar, and suffix broadcasts
      Params p{{"a", rand_tensor({m, n}, rng)},
               {"b", rand_tensor({m, n}, rng)},
               {"s", Tensor<double>::scalar(0.7)},
               {"row", rand_tensor({n}, rng)}};
      std::mt19937_64 wr(seed * 31 + 2);
      expect_grad_ok(p, [&wr](const ParamMap<double>& pm) {
        std::mt19937_64 local = wr;
        auto x = add(pm.get("a"), pm.get("b"));
        x = sub(x, pm.get("row"));
        x = mul(x, pm.get("s"));
        x = add(x, pm.get("row"));
        x = mul(x, pm.get("b"));
        x = sub(x, pm.get("s"));
        return weighted_sum(x, local);
      });
    }
    {  // unary chain: exp, log, tanh, sigmoid, mul_scalar
      Params p{{"x", rand_tensor({m, n}, rng, 0.4, 1.6)}};
      std::mt19937_64 wr(seed * 31 + 3);
      expect_grad_ok(p, [&wr](const ParamMap<double>& pm) {
        std::mt19937_64 local = wr;
        auto x = log(pm.get("x"));
        x = tanh(x);
        x = sigmoid(mul_scalar(x, 1.7));
        x = exp(x);
        return weighted_sum(x, local);
      });
    }
    {  // relu and abs away from the kink
      Params p{{"x", rand_tensor_offzero({m, n}, rng)}};
      std::mt19937_64 wr(seed * 31 + 4);
      expect_grad_ok(p, [&wr](const ParamMap<double>& pm) {
        std::mt19937_64 local = wr;
        return weighted_sum(add(relu(pm.get("x")), abs(pm.get("x"))), local);
      });
    }
    {  // softmax (axis 1), masked softmax (axis 0)
      Params p{{"x", rand_tensor({m + 1, n + 1}, rng)}};
      Tensor<double> mask({m + 1, n + 1});
      for (std::int64_t i = 0; i < mask.size(); ++i) mask[i] = 1.0;
      mask[mask.size() - 1] = 0.0;
      mask[0] = (m > 0) ? 0.0 : 1.0;  // keep at least one valid entry per column
      std::mt19937_64 wr(seed * 31 + 5);
      expect_grad_ok(p, [&wr, mask](const ParamMap<double>& pm) {
        std::mt19937_64 local = wr;
        auto s1 = softmax(pm.get("x"), 1);
        auto s0 = softmax(pm.get("x"), 0, &mask);
        return add(weighted_sum(s1, local), weighted_sum(s0, local));
      });
    }
    {  // reductions, transpose, reshape, slice, concat
      Params p{{"x", rand_tensor({m + 1, n + 1}, rng)}, {"y", rand_tensor({m + 1, n + 1}, rng)}};
      std::mt19937_64 wr(seed * 31 + 6);
      expect_grad_ok(p, [&wr, m, n](const ParamMap<double>& pm) {
        std::mt19937_64 local = wr;
        auto cat = concat<double>({pm.get("x"), pm.get("y")}, 0);
        auto sl = slice(cat, 0, 1, m + 1);
        auto tr = transpose(sl);
        auto mx = max_reduce(tr, 1);
        auto sm = sum_reduce(tr, 0);
        auto joined = concat<double>({reshape(mx, {n + 1}), reshape(sm, {m + 1})}, 0);
        return weighted_sum(joined, local);
      });
    }
    {  // embedding lookup
      const std::int64_t V = 5, D = 3;
      Params p{{"table", rand_tensor({V, D}, rng)}};
      std::vector<std::int64_t> ids{0, 3, 3, 1};
      std::mt19937_64 wr(seed * 31 + 7);
      expect_grad_ok(p, [&wr, ids](const ParamMap<double>& pm) {
        std::mt19937_64 local = wr;
        return weighted_sum(embedding_lookup(pm.get("table"), ids), local);
      });
    }
    {  // dropout with a fixed seed is a fixed linear map
      Params p{{"x", rand_tensor({m, n + 2}, rng)}};
      std::mt19937_64 wr(seed * 31 + 8);
      expect_grad_ok(p, [&wr, seed](const ParamMap<double>& pm) {
        std::mt19937_64 local = wr;
        std::mt19937_64 drop_rng(seed * 977 + 5);
        return weighted_sum(dropout(pm.get("x"), 0.4, drop_rng), local);
      });
    }
    {  // conv1d over a short sequence
      const std::int64_t L = 5, C = 2, F = 3;
      const int win = 3;
      Params p{{"x", rand_tensor({L, C}, rng)},
               {"w", rand_tensor({win * C, F}, rng)},
               {"b", rand_tensor({F}, rng)}};
      std::mt19937_64 wr(seed * 31 + 9);
      expect_grad_ok(p, [&wr, win](const ParamMap<double>& pm) {
        std::mt19937_64 local = wr;
        return weighted_sum(conv1d_valid(pm.get("x"), pm.get("w"), pm.get("b"), win), local);
      });
    }
    {  // sigmoid cross-entropy from logit, both labels
      Params p{{"z", rand_tensor({1}, rng, -2.0, 2.0)}};
      expect_grad_ok(p, [](const ParamMap<double>& pm) {
        return add(sigmoid_ce_with_logit(pm.get("z"), 1.0),
                   sigmoid_ce_with_logit(pm.get("z"), 0.0));
      });
    }
  }
}

TEST_CASE("lstm step chain matches finite differences (two sequences, time 3, dim 4)") {
  const std::int64_t D = 4, H = 3, steps = 3;
  std::mt19937_64 rng(11);
  Params params;
  params["wx"] = rand_tensor({D, 4 * H}, rng, -0.5, 0.5);
  params["wh"] = rand_tensor({H, 4 * H}, rng, -0.5, 0.5);
  params["b"] = rand_tensor({4 * H}, rng, -0.2, 0.2);
  for (int s = 0; s < 2; ++s) {
    for (int t = 0; t < steps; ++t) {
      params["x" + std::to_string(s) + std::to_string(t)] = rand_tensor({D}, rng);
    }
  }
  expect_grad_ok(
      params,
      [steps, H](const ParamMap<double>& p) {
        NodePtr<double> total;
        for (int s = 0; s < 2; ++s) {
          auto h = make_constant(Tensor<double>(Shape{H}));
          auto c = make_constant(Tensor<double>(Shape{H}));
          for (int t = 0; t < steps; ++t) {
            auto hc = lstm_step(p.get("x" + std::to_string(s) + std::to_string(t)), h, c,
                                p.get("wx"), p.get("wh"), p.get("b"));
            h = slice(hc, 0, 0, H);
            c = slice(hc, 0, H, H);
          }
          auto part = sum_all(tanh(h));
          total = total ? add(total, part) : part;
        }
        return total;
      },
      1e-3);
}

TEST_CASE("self-attention with distance prior matches finite differences") {
  const std::int64_t L = 4, E = 3;
  std::mt19937_64 rng(23);
  Params params;
  params["u"] = rand_tensor({L, E}, rng);
  params["w"] = Tensor<double>::scalar(0.3);
  params["b"] = Tensor<double>::scalar(-0.2);
  Tensor<double> d2({L, L});
  for (std::int64_t i = 0; i < L; ++i)
    for (std::int64_t j = 0; j < L; ++j) d2.at2(i, j) = static_cast<double>((j - i) * (j - i));
  expect_grad_ok(
      params,
      [d2](const ParamMap<double>& p) {
        auto u = p.get("u");
        auto logits = matmul(u, transpose(u));
        auto prior = mul_scalar(abs(add(mul(p.get("w"), make_constant(d2)), p.get("b"))), -1.0);
        auto attn = softmax(add(logits, prior), 1);
        auto out = matmul(attn, u);
        std::mt19937_64 wr(91);
        return weighted_sum(out, wr);
      },
      1e-3);
}

TEST_CASE("forward results are bit-identical across runs with the same seed") {
  auto run = [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto x = make_constant(uniform_tensor<float>({6, 5}, -1.f, 1.f, rng));
    std::mt19937_64 drop_rng(seed + 1);
    auto y = dropout(tanh(x), 0.3, drop_rng);
    auto s = softmax(y, 1);
    return s->value.data;
  };
  auto a = run(42);
  auto b = run(42);
  CHECK(a == b);
  auto c = run(43);
  CHECK(a != c);
}

TEST_CASE("dropout keeps expectation via inverted scaling") {
  std::mt19937_64 rng(5);
  auto x = make_constant(Tensor<float>({10000}, std::vector<float>(10000, 1.f)));
  auto y = dropout(x, 0.2, rng);
  double sum = 0;
  std::int64_t zeros = 0;
  for (std::int64_t i = 0; i < y->value.size(); ++i) {
    sum += y->value[i];
    if (y->value[i] == 0.f) ++zeros;
    else CHECK(y->value[i] == doctest::Approx(1.f / 0.8f));
  }
  CHECK(sum / 10000.0 == doctest::Approx(1.0).epsilon(0.03));
  CHECK(zeros > 1500);
  CHECK(zeros < 2500);
}

}  // TEST_SUITE
