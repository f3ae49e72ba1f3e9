#include <doctest.h>

#include <cmath>
#include <random>

#include "phyformer/adam.hpp"
#include "phyformer/autodiff.hpp"
#include "phyformer/errors.hpp"
#include "phyformer/grad_check.hpp"

using namespace phyformer;
using ad::Tape;
using ad::Var;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Naive triple loop, independent of the Eigen-backed kernel.
Tensor loop_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      long double acc = 0;
      for (std::size_t k = 0; k < a.dim(1); ++k) acc += (long double)a.at(i, k) * b.at(k, j);
      c.at(i, j) = static_cast<double>(acc);
    }
  return c;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("matmul") {
  Tape tape;
  auto a = tape.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  auto eye = tape.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  CHECK(ad::matmul(a, eye).value() == Tensor::matrix({{1, 2}, {3, 4}}));

  auto b = tape.constant(Tensor::matrix({{5, 6}, {7, 8}}));
  CHECK(ad::matmul(a, b).value() == Tensor::matrix({{19, 22}, {43, 50}}));

  std::mt19937_64 rng(7);
  auto x = random_tensor({3, 4}, rng);
  auto y = random_tensor({4, 2}, rng);
  auto got = ad::matmul(tape.constant(x), tape.constant(y)).value();
  CHECK(max_abs_diff(got, loop_matmul(x, y)) < 1e-12);

  CHECK_THROWS_AS(ad::matmul(tape.constant(x), tape.constant(x)), ShapeError);
}

TEST_CASE("softmax_lastdim") {
  Tape tape;
  auto p = ad::softmax_lastdim(tape.constant(Tensor::vector({0, 0}))).value();
  CHECK(p[0] == doctest::Approx(0.5));
  CHECK(p[1] == doctest::Approx(0.5));

  auto big = ad::softmax_lastdim(tape.constant(Tensor::vector({1000, 0}))).value();
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] < 1e-300);

  auto q = ad::softmax_lastdim(tape.constant(Tensor::vector({1, 2, 3}))).value();
  long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(q[i] - static_cast<double>(std::exp((long double)(i + 1)) / z)) < 1e-12);
  }
}

TEST_CASE("softmax rows sum to one") {
  std::mt19937_64 rng(11);
  Tape tape;
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({5, 1 + static_cast<std::size_t>(trial % 9)}, rng, -30, 30);
    auto p = ad::softmax_lastdim(tape.constant(x)).value();
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double s = 0;
      for (std::size_t c = 0; c < p.cols(); ++c) s += p.at(r, c);
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("layer_norm") {
  Tape tape;
  auto one3 = tape.constant(Tensor::vector({1, 1, 1}));
  auto zero3 = tape.constant(Tensor::vector({0, 0, 0}));
  auto c = ad::layer_norm(tape.constant(Tensor::vector({5, 5, 5})), one3, zero3, 1e-5).value();
  for (double v : c.data()) CHECK(v == 0.0);

  auto one2 = tape.constant(Tensor::vector({1, 1}));
  auto zero2 = tape.constant(Tensor::vector({0, 0}));
  auto y = ad::layer_norm(tape.constant(Tensor::vector({1, 3})), one2, zero2, 0.0).value();
  CHECK(y[0] == doctest::Approx(-1.0));
  CHECK(y[1] == doctest::Approx(1.0));

  auto one1 = tape.constant(Tensor::vector({1}));
  auto zero1 = tape.constant(Tensor::vector({0}));
  CHECK_THROWS_AS(ad::layer_norm(tape.constant(Tensor::vector({4})), one1, zero1, 0.0), NumericError);
  CHECK_THROWS_AS(ad::layer_norm(tape.constant(Tensor::vector({4, 2})), one3, zero3, 1e-5), ShapeError);

  // Two-pass statistics oracle with affine parameters.
  std::mt19937_64 rng(3);
  auto x = random_tensor({4, 12}, rng, -5, 5);
  auto g = random_tensor({12}, rng);
  auto b = random_tensor({12}, rng);
  const double eps = 1e-5;
  auto out = ad::layer_norm(tape.constant(x), tape.constant(g), tape.constant(b), eps).value();
  for (std::size_t r = 0; r < 4; ++r) {
    long double mu = 0;
    for (std::size_t j = 0; j < 12; ++j) mu += x.at(r, j);
    mu /= 12;
    long double var = 0;
    for (std::size_t j = 0; j < 12; ++j) var += (x.at(r, j) - mu) * (x.at(r, j) - mu);
    var /= 12;
    for (std::size_t j = 0; j < 12; ++j) {
      const double want = static_cast<double>((x.at(r, j) - mu) / std::sqrt(var + eps) * g[j] + b[j]);
      CHECK(std::abs(out.at(r, j) - want) < 1e-12);
    }
  }
}

TEST_CASE("layer_norm output statistics") {
  std::mt19937_64 rng(5);
  Tape tape;
  auto ones = tape.constant(Tensor({16}, 1.0));
  auto zeros = tape.constant(Tensor({16}, 0.0));
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_tensor({6, 16}, rng, -10, 10);
    auto y = ad::layer_norm(tape.constant(x), ones, zeros, 1e-12).value();
    for (std::size_t r = 0; r < 6; ++r) {
      double mu = 0, var = 0;
      for (std::size_t j = 0; j < 16; ++j) mu += y.at(r, j);
      mu /= 16;
      for (std::size_t j = 0; j < 16; ++j) var += (y.at(r, j) - mu) * (y.at(r, j) - mu);
      var /= 16;
      CHECK(std::abs(mu) < 1e-10);
      CHECK(std::abs(var - 1.0) < 1e-8);
    }
  }
}

TEST_CASE("backward basics") {
  {
    Tape tape;
    auto x = tape.param(Tensor::scalar(3.0));
    auto grads = ad::backward(tape, ad::mul(x, x));
    CHECK(grads[x].item() == doctest::Approx(6.0));
  }
  {
    Tape tape;
    auto unused = tape.param(Tensor::scalar(5.0));
    auto x = tape.param(Tensor({1, 1}, 0.0));
    auto logits = ad::concat_cols(std::vector<Var>{x, tape.constant(Tensor({1, 1}, 0.0))});
    auto p0 = ad::slice_cols(ad::softmax_lastdim(logits), 0, 1);
    auto grads = ad::backward(tape, p0);
    CHECK(grads[x].item() == doctest::Approx(0.25));
    CHECK(grads[unused].item() == 0.0);
  }
  {
    Tape tape;
    auto x = tape.param(Tensor::vector({1, 2}));
    CHECK_THROWS_AS(ad::backward(tape, ad::square(x)), ContractError);
  }
}

TEST_CASE("non-finite values are rejected") {
  Tape tape;
  auto big = tape.constant(Tensor::scalar(1e200));
  CHECK_THROWS_AS(ad::mul(big, big), NumericError);
  CHECK_THROWS_AS(tape.constant(Tensor::scalar(std::nan(""))), NumericError);
}

TEST_CASE("2-layer MLP gradients match finite differences") {
  std::mt19937_64 rng(42);
  std::vector<Tensor> params = {random_tensor({16, 32}, rng, -0.25, 0.25), random_tensor({32}, rng),
                                random_tensor({32, 1}, rng, -0.2, 0.2), random_tensor({1}, rng)};
  const Tensor input = random_tensor({8, 16}, rng);
  auto loss = [&](Tape& tape, std::span<const Var> p) {
    auto h = ad::relu(ad::add_bias(ad::matmul(tape.constant(input), p[0]), p[1]));
    auto out = ad::add_bias(ad::matmul(h, p[2]), p[3]);
    return ad::mean(ad::square(out));
  };
  GradCheckOptions opts;
  opts.n_coords = 1 << 20;  // all 577 coordinates
  auto report = grad_check(loss, params, opts);
  CHECK(report.n_checked == 16 * 32 + 32 + 32 + 1);
  CHECK(report.max_rel_err < 1e-6);
  CHECK(report.pass);
}

TEST_CASE("every primitive passes a gradient check") {
  std::mt19937_64 rng(9);
  std::vector<Tensor> params = {random_tensor({6, 8}, rng), random_tensor({6, 8}, rng),
                                random_tensor({8}, rng, 0.5, 1.5), random_tensor({8}, rng),
                                random_tensor({8, 8}, rng)};
  const Tensor target = random_tensor({6, 8}, rng);
  Tensor bits({6, 8});
  for (auto& v : bits.data()) v = rng() % 2;
  Tensor mask({6, 8}, 1.0);
  mask[3] = 0.0;
  mask[17] = 0.0;

  auto loss = [&](Tape& tape, std::span<const Var> p) {
    auto a = ad::layer_norm(p[0], p[2], p[3], 1e-5);
    auto b = ad::sub(ad::mul(a, p[1]), ad::scale(p[0], 0.3));
    auto c = ad::matmul(ad::softmax_lastdim(b), ad::transpose(p[4]));
    auto att = ad::attention(c, p[0], p[1], 2, 2);
    auto halves = std::vector<Var>{ad::slice_cols(att, 4, 4), ad::slice_cols(att, 0, 4)};
    auto d = ad::add(ad::concat_cols(halves), ad::slice_rows(ad::concat_cols(std::vector<Var>{c}), 0, 6));
    auto l1 = ad::mse_loss(d, target, &mask);
    auto l2 = ad::bce_with_logits(ad::relu(d), bits, &mask);
    auto l3 = ad::mean(ad::square(ad::add_bias(d, p[3])));
    return ad::add(ad::add(l1, l2), ad::scale(ad::sum(l3), 0.1));
  };
  GradCheckOptions opts;
  opts.n_coords = 1 << 20;
  auto report = grad_check(loss, params, opts);
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("fused attention equals composition of primitives") {
  std::mt19937_64 rng(21);
  const std::size_t n_seq = 3, n_tok = 5, heads = 2, d = 8, dh = d / heads;
  auto qv = random_tensor({n_seq * n_tok, d}, rng);
  auto kv = random_tensor({n_seq * n_tok, d}, rng);
  auto vv = random_tensor({n_seq * n_tok, d}, rng);
  Tape tape;
  auto q = tape.constant(qv), k = tape.constant(kv), v = tape.constant(vv);
  auto fused = ad::attention(q, k, v, n_seq, heads).value();

  std::vector<Var> rows;
  for (std::size_t s = 0; s < n_seq; ++s) {
    std::vector<Var> cols;
    for (std::size_t h = 0; h < heads; ++h) {
      auto qs = ad::slice_cols(ad::slice_rows(q, s * n_tok, n_tok), h * dh, dh);
      auto ks = ad::slice_cols(ad::slice_rows(k, s * n_tok, n_tok), h * dh, dh);
      auto vs = ad::slice_cols(ad::slice_rows(v, s * n_tok, n_tok), h * dh, dh);
      auto p = ad::softmax_lastdim(ad::scale(ad::matmul(qs, ad::transpose(ks)), 1.0 / std::sqrt(double(dh))));
      cols.push_back(ad::matmul(p, vs));
    }
    rows.push_back(ad::concat_cols(cols));
  }
  for (std::size_t s = 0; s < n_seq; ++s) {
    const auto& block = rows[s].value();
    for (std::size_t i = 0; i < n_tok; ++i)
      for (std::size_t j = 0; j < d; ++j) CHECK(std::abs(block.at(i, j) - fused.at(s * n_tok + i, j)) < 1e-14);
  }
}

TEST_CASE("determinism") {
  std::mt19937_64 rng(1);
  auto x = random_tensor({12, 16}, rng);
  auto w = random_tensor({16, 16}, rng);
  auto run = [&] {
    Tape tape;
    auto h = ad::matmul(tape.param(x), tape.param(w));
    auto a = ad::attention(h, h, h, 3, 4);
    auto l = ad::mean(ad::square(a));
    return std::make_pair(a.value(), ad::backward(tape, l).at(1));
  };
  auto r1 = run();
  auto r2 = run();
  CHECK(r1.first == r2.first);
  CHECK(r1.second == r2.second);
}

TEST_CASE("adam_step") {
  SUBCASE("first step moves every parameter by lr") {
    std::vector<Tensor> params = {Tensor({3}, 0.5), Tensor({2, 2}, -1.0)};
    std::vector<Tensor> grads = {Tensor({3}, 1.0), Tensor({2, 2}, 1.0)};
    AdamState state;
    adam_step(params, grads, state);
    for (double v : params[0].data()) CHECK(v == doctest::Approx(0.5 - 1e-3).epsilon(1e-9));
    for (double v : params[1].data()) CHECK(v == doctest::Approx(-1.0 - 1e-3).epsilon(1e-9));
    CHECK(state.step() == 1);
  }
  SUBCASE("zero gradient leaves params unchanged") {
    std::vector<Tensor> params = {Tensor({4}, 2.0)};
    std::vector<Tensor> grads = {Tensor({4}, 0.0)};
    AdamState state;
    adam_step(params, grads, state);
    adam_step(params, grads, state);
    CHECK(params[0] == Tensor({4}, 2.0));
    CHECK(state.step() == 2);
  }
  SUBCASE("converges on a quadratic") {
    std::vector<Tensor> params = {Tensor::scalar(0.0)};
    AdamState state(AdamConfig{.lr = 0.1});
    for (int i = 0; i < 200; ++i) {
      std::vector<Tensor> grads = {Tensor::scalar(2.0 * (params[0][0] - 2.0))};
      adam_step(params, grads, state);
    }
    CHECK(std::abs(params[0][0] - 2.0) < 0.05);
  }
  SUBCASE("shape mismatch") {
    std::vector<Tensor> params = {Tensor({3}, 0.0)};
    std::vector<Tensor> grads = {Tensor({4}, 0.0)};
    AdamState state;
    CHECK_THROWS_AS(adam_step(params, grads, state), ShapeError);
  }
  CHECK_THROWS_AS(AdamState(AdamConfig{.beta1 = 1.0}), ConfigError);
}

TEST_CASE("grad_check harness") {
  SUBCASE("linear model agrees exactly") {
    std::vector<Tensor> params = {Tensor::scalar(1.7)};
    auto loss = [](Tape& tape, std::span<const Var> p) {
      return ad::sum(ad::mul(p[0], tape.constant(Tensor::scalar(3.0))));
    };
    auto report = grad_check(loss, params, {.tolerance = 1e-10});
    CHECK(report.pass);
    CHECK(report.max_rel_err < 1e-10);
  }
  SUBCASE("corrupted backward rule is caught") {
    std::vector<Tensor> params = {Tensor::vector({0.3, -1.2, 2.0})};
    auto loss = [](Tape& tape, std::span<const Var> p) {
      // square with a wrong derivative (x instead of 2x)
      Tensor out = p[0].value();
      for (auto& v : out.data()) v *= v;
      const Tensor& xv = p[0].value();
      auto y = tape.record(ad::Op::Custom, p.subspan(0, 1), std::move(out),
                           [&xv](const Tensor& g, std::span<Tensor* const> d) {
                             for (std::size_t i = 0; i < g.size(); ++i) (*d[0])[i] += xv[i] * g[i];
                           });
      return ad::sum(y);
    };
    auto report = grad_check(loss, params);
    CHECK_FALSE(report.pass);
    CHECK(report.max_rel_err > 0.1);
  }
}
