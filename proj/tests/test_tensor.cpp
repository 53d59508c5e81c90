#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "normlab/rng.hpp"
#include "normlab/tensor.hpp"

using namespace normlab;

namespace {

// Naive triple loop in the textbook i-j-p order; the independent reference
// for matmul. Must agree bit for bit (same per-element summation order).
Tensor matmul_naive(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += a.at(i, p) * b.at(p, j);
      c.at(i, j) = s;
    }
  return c;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

// Backward-vs-central-differences check on a scalar-valued tape function.
double grad_rel_err(const std::function<Tensor(const Tensor&, Tape&)>& f,
                    const Tensor& x0, double h = 1e-5) {
  Tensor x = x0.clone();
  x.set_requires_grad();
  Tape tape;
  Tensor loss = f(x, tape);
  backward(loss, tape);
  Tensor fd = finite_diff_grad(
      [&](const Tensor& probe) {
        Tape t;
        return f(probe, t).scalar();
      },
      x0, h);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double denom = std::max(std::abs(fd.at(i)), 1e-6);
    worst = std::max(worst, std::abs(x.grad()[i] - fd.at(i)) / denom);
  }
  return worst;
}

}  // namespace

TEST_CASE("matmul identity and hand cases") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor v({2, 1}, {3, 4});
  Tensor out = matmul(eye, v);
  CHECK(out.at(0, 0) == 3.0);
  CHECK(out.at(1, 0) == 4.0);

  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor ones({2, 1}, {1, 1});
  Tensor r = matmul(a, ones);
  CHECK(r.at(0, 0) == 3.0);
  CHECK(r.at(1, 0) == 7.0);
}

TEST_CASE("matmul matches naive triple loop exactly") {
  Rng rng(17);
  Tensor a = Tensor::uniform({5, 4}, -2.0, 2.0, rng);
  Tensor b = Tensor::uniform({4, 3}, -2.0, 2.0, rng);
  CHECK(max_abs_diff(matmul(a, b), matmul_naive(a, b)) == 0.0);

  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.uniform_int(16);
    const std::size_t k = 1 + rng.uniform_int(16);
    const std::size_t n = 1 + rng.uniform_int(16);
    Tensor x = Tensor::uniform({m, k}, -3.0, 3.0, rng);
    Tensor y = Tensor::uniform({k, n}, -3.0, 3.0, rng);
    CHECK(max_abs_diff(matmul(x, y), matmul_naive(x, y)) == 0.0);
  }
}

TEST_CASE("matmul rejects shape mismatch") {
  Tensor a({2, 3});
  Tensor b({2, 3});
  CHECK_THROWS_AS(matmul(a, b), std::invalid_argument);
}

TEST_CASE("softmax symmetry, shift invariance, direct formula") {
  Tensor flat({3}, {0, 0, 0});
  Tensor s = softmax_rows(flat);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(s.at(i) == Catch::Approx(1.0 / 3.0).margin(1e-15));

  Rng rng(3);
  Tensor row = Tensor::uniform({7}, -5.0, 5.0, rng);
  Tensor shifted({7});
  for (std::size_t i = 0; i < 7; ++i) shifted.at(i) = row.at(i) + 5.0;
  CHECK(max_abs_diff(softmax_rows(row), softmax_rows(shifted)) <= 1e-12);

  Tensor w({3}, {1, 2, 3});
  Tensor out = softmax_rows(w);
  long double z = 0.0;
  for (int i = 1; i <= 3; ++i) z += std::exp(static_cast<long double>(i));
  for (std::size_t i = 0; i < 3; ++i) {
    const double expect =
        static_cast<double>(std::exp(static_cast<long double>(i + 1)) / z);
    CHECK(out.at(i) == Catch::Approx(expect).margin(1e-15));
  }
}

TEST_CASE("softmax rows sum to one across wide random inputs") {
  Rng rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.uniform_int(15);
    Tensor row = Tensor::uniform({n}, -50.0, 50.0, rng);
    Tensor s = softmax_rows(row);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      total += s.at(i);
      CHECK(s.at(i) >= 0.0);
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
}

TEST_CASE("backward on sum and quadratic") {
  Tensor x({3}, {1.0, -2.0, 0.5});
  x.set_requires_grad();
  {
    Tape tape;
    Tensor loss = sum(x, &tape);
    backward(loss, tape);
    for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0);
  }
  x.zero_grad();
  {
    Tape tape;
    Tensor loss = scale(sum(mul(x, x, &tape), &tape), 0.5, &tape);
    backward(loss, tape);
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(x.grad()[i] == Catch::Approx(x.at(i)).margin(1e-15));
  }
}

TEST_CASE("backward rejects misuse") {
  Tensor x({2}, {1, 2});
  x.set_requires_grad();
  Tape tape;
  Tensor y = mul(x, x, &tape);
  CHECK_THROWS_AS(backward(y, tape), std::invalid_argument);  // not scalar
  Tensor loss = sum(y, &tape);
  backward(loss, tape);
  CHECK_THROWS_AS(backward(loss, tape), std::runtime_error);  // consumed
  Tape other;
  Tensor stray = sum(x, &other);
  Tape empty;
  CHECK_THROWS_AS(backward(stray, empty), std::invalid_argument);  // off-tape
}

TEST_CASE("finite differences on analytic cases") {
  Tensor x({4}, {0.3, -1.0, 2.0, 0.7});
  Tensor g = finite_diff_grad(
      [](const Tensor& t) {
        double s = 0.0;
        for (std::size_t i = 0; i < t.size(); ++i) s += t.at(i);
        return s;
      },
      x, 1e-5);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(g.at(i) == Catch::Approx(1.0).margin(1e-9));

  Tensor x0({1}, {3.0});
  Tensor gq = finite_diff_grad(
      [](const Tensor& t) { return t.at(0) * t.at(0); }, x0, 1e-5);
  CHECK(std::abs(gq.at(0) - 6.0) <= 1e-8);
}

TEST_CASE("backward matches finite differences on layered composition") {
  Rng rng(101);
  Tensor x0 = Tensor::uniform({2, 6}, -1.0, 1.0, rng);
  Tensor w1 = Tensor::uniform({6, 5}, -1.0, 1.0, rng);
  Tensor w2 = Tensor::uniform({5, 4}, -1.0, 1.0, rng);
  CHECK(grad_rel_err(
            [&](const Tensor& x, Tape& t) {
              Tensor h1 = matmul(x, w1, &t);
              Tensor h2 = softmax_rows(h1, &t);
              Tensor h3 = matmul(h2, w2, &t);
              return sum(mul(h3, h3, &t), &t);
            },
            x0) <= 1e-6);
}

TEST_CASE("gradcheck battery over all primitives") {
  Rng rng(2024);
  const double tol = 1e-5;

  // matmul / matmul_nt chain
  {
    Tensor x0 = Tensor::uniform({2, 3}, -1.0, 1.0, rng);
    Tensor b = Tensor::uniform({3, 4}, -1.0, 1.0, rng);
    Tensor c = Tensor::uniform({2, 4}, -1.0, 1.0, rng);
    CHECK(grad_rel_err(
              [&](const Tensor& x, Tape& t) {
                Tensor y = matmul(x, b, &t);
                Tensor z = mul(y, c, &t);
                Tensor nt = matmul_nt(z, y, &t);
                return sum(nt, &t);
              },
              x0) <= tol);
  }
  // add / sub / scale / scale_rows / relu / mean
  {
    Tensor x0 = Tensor::uniform({3, 3}, 0.2, 1.2, rng);
    Tensor other = Tensor::uniform({3, 3}, -1.0, 1.0, rng);
    std::vector<double> factors = {0.5, -1.5, 2.0};
    CHECK(grad_rel_err(
              [&](const Tensor& x, Tape& t) {
                Tensor a = add(x, other, &t);
                Tensor s = sub(a, other, &t);
                Tensor sc = scale(s, 1.7, &t);
                Tensor sr = scale_rows(sc, factors, &t);
                Tensor r = relu(sr, &t);
                return mean(r, &t);
              },
              x0) <= tol);
  }
  // linear with bias
  {
    Tensor x0 = Tensor::uniform({4, 3}, -1.0, 1.0, rng);
    Tensor w = Tensor::uniform({3, 5}, -1.0, 1.0, rng);
    Tensor b = Tensor::uniform({5}, -0.5, 0.5, rng);
    w.set_requires_grad();
    b.set_requires_grad();
    CHECK(grad_rel_err(
              [&](const Tensor& x, Tape& t) {
                return sum(linear(x, w, b, &t), &t);
              },
              x0) <= tol);
    // weight gradient against finite differences as well
    w.zero_grad();
    Tape tape;
    Tensor l = linear(x0, w, b, &tape);
    Tensor loss = sum(mul(l, l, &tape), &tape);
    backward(loss, tape);
    Tensor fd_w = finite_diff_grad(
        [&](const Tensor& probe) {
          Tape t;
          Tensor l = linear(x0, probe, b, &t);
          return sum(mul(l, l, &t), &t).scalar();
        },
        w, 1e-5);
    for (std::size_t i = 0; i < w.size(); ++i)
      CHECK(std::abs(w.grad()[i] - fd_w.at(i)) <=
            tol * std::max(1.0, std::abs(fd_w.at(i))));
  }
  // softmax variants
  {
    Tensor x0 = Tensor::uniform({3, 3}, -2.0, 2.0, rng);
    Tensor probe = Tensor::uniform({3, 3}, -1.0, 1.0, rng);
    CHECK(grad_rel_err(
              [&](const Tensor& x, Tape& t) {
                return sum(mul(softmax_rows(x, &t), probe, &t), &t);
              },
              x0) <= tol);
    CHECK(grad_rel_err(
              [&](const Tensor& x, Tape& t) {
                return sum(mul(softmax_causal(x, &t), probe, &t), &t);
              },
              x0) <= tol);
  }
  // normalisation layers
  {
    Tensor x0 = Tensor::uniform({3, 4}, 0.5, 1.5, rng);
    Tensor gain = Tensor::uniform({4}, 0.5, 1.5, rng);
    Tensor bias = Tensor::uniform({4}, -0.2, 0.2, rng);
    Tensor probe = Tensor::uniform({3, 4}, -1.0, 1.0, rng);
    gain.set_requires_grad();
    bias.set_requires_grad();
    CHECK(grad_rel_err(
              [&](const Tensor& x, Tape& t) {
                return sum(mul(rmsnorm_rows(x, gain, &t), probe, &t), &t);
              },
              x0) <= tol);
    CHECK(grad_rel_err(
              [&](const Tensor& x, Tape& t) {
                return sum(mul(layernorm_rows(x, gain, bias, &t), probe, &t),
                           &t);
              },
              x0) <= tol);
    gain.zero_grad();
    Tape tape;
    Tensor xg = x0.clone();
    Tensor loss = sum(mul(layernorm_rows(xg, gain, bias, &tape), probe, &tape),
                      &tape);
    backward(loss, tape);
    Tensor fd_gain = finite_diff_grad(
        [&](const Tensor& gp) {
          Tape t;
          return sum(mul(layernorm_rows(x0, gp, bias, &t), probe, &t), &t)
              .scalar();
        },
        gain, 1e-6);
    for (std::size_t i = 0; i < gain.size(); ++i)
      CHECK(std::abs(gain.grad()[i] - fd_gain.at(i)) <=
            tol * std::max(1.0, std::abs(fd_gain.at(i))));
  }
  // gather + cross entropy, checked against backward
  {
    Tensor table = Tensor::uniform({6, 4}, -1.0, 1.0, rng);
    table.set_requires_grad();
    std::vector<std::size_t> ids = {1, 3, 3, 0};
    std::vector<std::size_t> targets = {2, 0, 3, 1};
    std::vector<bool> mask = {true, true, false, true};
    Tape tape;
    Tensor logits = gather_rows(table, ids, &tape);
    Tensor loss = cross_entropy_masked(logits, targets, mask, &tape);
    backward(loss, tape);
    Tensor fd = finite_diff_grad(
        [&](const Tensor& probe) {
          Tape t;
          Tensor l = gather_rows(probe, ids, &t);
          return cross_entropy_masked(l, targets, mask, &t).scalar();
        },
        table, 1e-6);
    for (std::size_t i = 0; i < table.size(); ++i)
      CHECK(std::abs(table.grad()[i] - fd.at(i)) <=
            tol * std::max(1.0, std::abs(fd.at(i))));
  }
}

TEST_CASE("cross entropy ignores masked rows entirely") {
  Rng rng(5);
  Tensor logits = Tensor::uniform({4, 5}, -2.0, 2.0, rng);
  std::vector<std::size_t> targets = {1, 2, 3, 4};
  std::vector<bool> mask = {true, false, true, false};
  const double base = cross_entropy_masked(logits, targets, mask).scalar();
  Tensor tweaked = logits.clone();
  tweaked.at(1, 2) += 100.0;
  tweaked.at(3, 4) -= 50.0;
  std::vector<std::size_t> other_targets = {1, 0, 3, 0};
  CHECK(cross_entropy_masked(tweaked, other_targets, mask).scalar() == base);
}

TEST_CASE("tensors reject non-finite entries") {
  CHECK_THROWS_AS(Tensor({2}, {1.0, std::nan("")}), std::domain_error);
  CHECK_THROWS_AS(
      Tensor({1}, {std::numeric_limits<double>::infinity()}),
      std::domain_error);
}

TEST_CASE("rng streams are stable and derivable") {
  Rng a(42);
  Rng b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c = Rng(42).derive({7});
  Rng d = Rng(42).derive({8});
  CHECK(c.next_u64() != d.next_u64());
  double u = Rng(1).uniform();
  CHECK(u >= 0.0);
  CHECK(u < 1.0);
  // uniform_int stays in range and hits all residues eventually
  Rng e(9);
  std::vector<int> seen(5, 0);
  for (int i = 0; i < 500; ++i) seen[e.uniform_int(5)]++;
  for (int count : seen) CHECK(count > 0);
}
