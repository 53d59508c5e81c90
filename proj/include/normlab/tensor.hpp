#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "normlab/rng.hpp"

namespace normlab {

// Dense 64-bit float tensor with optional gradient buffer. Copies are shallow:
// a Tensor is a handle onto shared storage, so passing tensors through ops and
// tapes never duplicates the buffer. Values are treated as immutable once an
// op has consumed them; only grad accumulates.
class Tensor {
 public:
  struct Storage {
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
  };

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : s_(std::make_shared<Storage>()) {
    s_->shape = std::move(shape);
    s_->value.assign(count(s_->shape), 0.0);
  }

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : s_(std::make_shared<Storage>()) {
    if (count(shape) != data.size())
      throw std::invalid_argument("tensor: shape does not match data length");
    s_->shape = std::move(shape);
    s_->value = std::move(data);
    check_finite();
  }

  static Tensor zeros(std::vector<std::size_t> shape) {
    return Tensor(std::move(shape));
  }

  static Tensor full(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.s_->value) x = v;
    return t;
  }

  static Tensor uniform(std::vector<std::size_t> shape, double lo, double hi,
                        Rng& rng) {
    Tensor t(std::move(shape));
    for (double& x : t.s_->value) x = rng.uniform(lo, hi);
    return t;
  }

  bool defined() const { return s_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return s_->shape; }
  std::size_t size() const { return s_->value.size(); }
  std::size_t rows() const { return s_->shape.at(0); }
  std::size_t cols() const { return s_->shape.at(1); }

  double* data() { return s_->value.data(); }
  const double* data() const { return s_->value.data(); }
  std::vector<double>& values() { return s_->value; }
  const std::vector<double>& values() const { return s_->value; }

  double& at(std::size_t i) { return s_->value.at(i); }
  double at(std::size_t i) const { return s_->value.at(i); }
  double& at(std::size_t i, std::size_t j) {
    return s_->value[i * cols() + j];
  }
  double at(std::size_t i, std::size_t j) const {
    return s_->value[i * cols() + j];
  }

  double scalar() const {
    if (size() != 1) throw std::invalid_argument("tensor: not a scalar");
    return s_->value[0];
  }

  Tensor& set_requires_grad(bool b = true) {
    s_->requires_grad = b;
    return *this;
  }
  bool requires_grad() const { return s_ && s_->requires_grad; }

  // Grad lives in the shared storage, so it is reachable (and mutable)
  // through any handle; constness of a handle is shallow by design.
  bool has_grad() const { return s_ && !s_->grad.empty(); }
  std::vector<double>& grad() const {
    ensure_grad();
    return s_->grad;
  }
  void zero_grad() const {
    if (s_) s_->grad.assign(s_->value.size(), 0.0);
  }
  void drop_grad() const {
    if (s_) s_->grad.clear();
  }

  void accumulate_grad(const std::vector<double>& g) const {
    ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) s_->grad[i] += g[i];
  }

  Storage* storage() const { return s_.get(); }

  Tensor clone() const {
    Tensor t(s_->shape, s_->value);
    return t;
  }

  // NaN/Inf anywhere is a contract violation, surfaced eagerly.
  void check_finite() const {
    for (double v : s_->value)
      if (!std::isfinite(v))
        throw std::domain_error("tensor: non-finite entry");
  }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
  }

 private:
  void ensure_grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->value.size(), 0.0);
  }

  std::shared_ptr<Storage> s_;
};

// Reverse-mode tape. Ops append one closure per primitive; backward() replays
// them in reverse to accumulate grads into every reachable requires_grad leaf.
// Single-use: a consumed tape refuses a second backward.
class Tape {
 public:
  void record(Tensor out, std::function<void()> back) {
    outputs_.insert(out.storage());
    entries_.push_back(std::move(back));
  }

  bool contains(const Tensor& t) const {
    return outputs_.count(t.storage()) > 0;
  }

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  friend void backward(const Tensor& loss, Tape& tape, double seed);

 private:
  std::vector<std::function<void()>> entries_;
  std::unordered_set<const Tensor::Storage*> outputs_;
  bool consumed_ = false;
};

inline void backward(const Tensor& loss, Tape& tape, double seed = 1.0) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar");
  if (tape.consumed_) throw std::runtime_error("backward: tape already used");
  if (!tape.contains(loss))
    throw std::invalid_argument("backward: loss is not on this tape");
  tape.consumed_ = true;
  loss.grad()[0] += seed;
  for (auto it = tape.entries_.rbegin(); it != tape.entries_.rend(); ++it)
    (*it)();
}

namespace detail {

inline void want(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// C[m x n] += A[m x k] . B[k x n], ikj order: per output element the k-sum
// runs strictly left to right, bit-identical to the naive triple loop.
inline void mm_nn_acc(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m x n] += A[m x k] . B[n x k]^T (row-row dot products).
inline void mm_nt_acc(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const double* b0 = b + j * k;
      const double* b1 = b0 + k;
      const double* b2 = b1 + k;
      const double* b3 = b2 + k;
      double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ai[p];
        s0 += av * b0[p];
        s1 += av * b1[p];
        s2 += av * b2[p];
        s3 += av * b3[p];
      }
      ci[j] += s0;
      ci[j + 1] += s1;
      ci[j + 2] += s2;
      ci[j + 3] += s3;
    }
    for (; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

// C[k x n] += A[m x k]^T . B[m x n].
inline void mm_tn_acc(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops. Each takes an optional tape; with tape == nullptr the op is
// a pure function (used by the analysis code and by inference).
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  detail::want(a.shape().size() == 2 && b.shape().size() == 2,
               "matmul: operands must be 2-D");
  detail::want(a.cols() == b.rows(), "matmul: inner dimensions disagree");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out({m, n});
  detail::mm_nn_acc(a.data(), b.data(), out.data(), m, k, n);
  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad();
    tape->record(out, [a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const double* go = out.grad().data();
      if (a.requires_grad())
        detail::mm_nt_acc(go, b.data(), a.grad().data(), m, n, k);
      if (b.requires_grad())
        detail::mm_tn_acc(a.data(), go, b.grad().data(), m, k, n);
    });
  }
  return out;
}

// a . b^T for score-style products.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b,
                        Tape* tape = nullptr) {
  detail::want(a.shape().size() == 2 && b.shape().size() == 2,
               "matmul_nt: operands must be 2-D");
  detail::want(a.cols() == b.cols(), "matmul_nt: inner dimensions disagree");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out({m, n});
  detail::mm_nt_acc(a.data(), b.data(), out.data(), m, k, n);
  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad();
    tape->record(out, [a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const double* go = out.grad().data();
      if (a.requires_grad())
        detail::mm_nn_acc(go, b.data(), a.grad().data(), m, n, k);
      if (b.requires_grad())
        detail::mm_tn_acc(go, a.data(), b.grad().data(), m, n, k);
    });
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  detail::want(a.shape() == b.shape(), "add: shape mismatch");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    out.data()[i] = a.data()[i] + b.data()[i];
  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad();
    tape->record(out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      if (a.requires_grad()) a.accumulate_grad(out.grad());
      if (b.requires_grad()) b.accumulate_grad(out.grad());
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  detail::want(a.shape() == b.shape(), "sub: shape mismatch");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    out.data()[i] = a.data()[i] - b.data()[i];
  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad();
    tape->record(out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      if (a.requires_grad()) a.accumulate_grad(out.grad());
      if (b.requires_grad()) {
        auto& g = b.grad();
        const auto& go = out.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= go[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  detail::want(a.shape() == b.shape(), "mul: shape mismatch");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    out.data()[i] = a.data()[i] * b.data()[i];
  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad();
    tape->record(out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      if (a.requires_grad()) {
        auto& g = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        auto& g = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * a.data()[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c, Tape* tape = nullptr) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * c;
  if (tape && a.requires_grad()) {
    out.set_requires_grad();
    tape->record(out, [a, out, c]() mutable {
      if (!out.has_grad()) return;
      auto& g = a.grad();
      const auto& go = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * c;
    });
  }
  return out;
}

// Row i of the output is row i of the input scaled by factors[i].
inline Tensor scale_rows(const Tensor& a, const std::vector<double>& factors,
                         Tape* tape = nullptr) {
  detail::want(a.shape().size() == 2 && a.rows() == factors.size(),
               "scale_rows: factor count must equal row count");
  Tensor out(a.shape());
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.at(i, j) = a.at(i, j) * factors[i];
  if (tape && a.requires_grad()) {
    out.set_requires_grad();
    tape->record(out, [a, out, factors, n]() mutable {
      if (!out.has_grad()) return;
      auto& g = a.grad();
      const auto& go = out.grad();
      for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < n; ++j)
          g[i * n + j] += go[i * n + j] * factors[i];
    });
  }
  return out;
}

inline Tensor relu(const Tensor& a, Tape* tape = nullptr) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  if (tape && a.requires_grad()) {
    out.set_requires_grad();
    tape->record(out, [a, out]() mutable {
      if (!out.has_grad()) return;
      auto& g = a.grad();
      const auto& go = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (a.data()[i] > 0.0) g[i] += go[i];
    });
  }
  return out;
}

inline Tensor sum(const Tensor& a, Tape* tape = nullptr) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i];
  Tensor out({1}, {s});
  if (tape && a.requires_grad()) {
    out.set_requires_grad();
    tape->record(out, [a, out]() mutable {
      if (!out.has_grad()) return;
      auto& g = a.grad();
      for (double& v : g) v += out.grad()[0];
    });
  }
  return out;
}

inline Tensor mean(const Tensor& a, Tape* tape = nullptr) {
  Tensor s = sum(a, nullptr);
  const double inv = 1.0 / static_cast<double>(a.size());
  Tensor out({1}, {s.scalar() * inv});
  if (tape && a.requires_grad()) {
    out.set_requires_grad();
    tape->record(out, [a, out, inv]() mutable {
      if (!out.has_grad()) return;
      auto& g = a.grad();
      for (double& v : g) v += out.grad()[0] * inv;
    });
  }
  return out;
}

// y = x . W + b with W stored input-major [in x out]; b may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b,
                     Tape* tape = nullptr) {
  detail::want(x.shape().size() == 2 && w.shape().size() == 2,
               "linear: operands must be 2-D");
  detail::want(x.cols() == w.rows(), "linear: inner dimensions disagree");
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  Tensor out({m, n});
  if (b.defined()) {
    detail::want(b.size() == n, "linear: bias length mismatch");
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) = b.at(j);
  }
  detail::mm_nn_acc(x.data(), w.data(), out.data(), m, k, n);
  const bool need = x.requires_grad() || w.requires_grad() ||
                    (b.defined() && b.requires_grad());
  if (tape && need) {
    out.set_requires_grad();
    tape->record(out, [x, w, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const double* go = out.grad().data();
      if (x.requires_grad())
        detail::mm_nt_acc(go, w.data(), x.grad().data(), m, n, k);
      if (w.requires_grad())
        detail::mm_tn_acc(x.data(), go, w.grad().data(), m, k, n);
      if (b.defined() && b.requires_grad()) {
        auto& g = b.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += go[i * n + j];
      }
    });
  }
  return out;
}

// Row gather with scatter-add gradient; the embedding-lookup primitive.
inline Tensor gather_rows(const Tensor& table,
                          const std::vector<std::size_t>& ids,
                          Tape* tape = nullptr) {
  detail::want(table.shape().size() == 2, "gather_rows: table must be 2-D");
  const std::size_t n = table.cols();
  Tensor out({ids.size(), n});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    detail::want(ids[i] < table.rows(), "gather_rows: id out of range");
    const double* src = table.data() + ids[i] * n;
    double* dst = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) dst[j] = src[j];
  }
  if (tape && table.requires_grad()) {
    out.set_requires_grad();
    tape->record(out, [table, out, ids, n]() mutable {
      if (!out.has_grad()) return;
      auto& g = table.grad();
      const auto& go = out.grad();
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < n; ++j)
          g[ids[i] * n + j] += go[i * n + j];
    });
  }
  return out;
}

namespace detail {

// Stable softmax of src[0..n) into dst, max-subtracted, left-to-right sums.
inline void softmax_span(const double* src, double* dst, std::size_t n) {
  double mx = src[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, src[i]);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dst[i] = std::exp(src[i] - mx);
    total += dst[i];
  }
  const double inv = 1.0 / total;
  for (std::size_t i = 0; i < n; ++i) dst[i] *= inv;
}

// grad_in += s .* (grad_out - dot(grad_out, s)) for one row.
inline void softmax_span_grad(const double* s, const double* go, double* gi,
                              std::size_t n) {
  double dot = 0.0;
  for (std::size_t i = 0; i < n; ++i) dot += go[i] * s[i];
  for (std::size_t i = 0; i < n; ++i) gi[i] += s[i] * (go[i] - dot);
}

}  // namespace detail

// Softmax along the last axis of a 1-D or 2-D tensor.
inline Tensor softmax_rows(const Tensor& a, Tape* tape = nullptr) {
  detail::want(a.shape().size() == 1 || a.shape().size() == 2,
               "softmax_rows: expects 1-D or 2-D");
  a.check_finite();
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.size() / n;
  Tensor out(a.shape());
  for (std::size_t r = 0; r < rows; ++r)
    detail::softmax_span(a.data() + r * n, out.data() + r * n, n);
  if (tape && a.requires_grad()) {
    out.set_requires_grad();
    tape->record(out, [a, out, rows, n]() mutable {
      if (!out.has_grad()) return;
      for (std::size_t r = 0; r < rows; ++r)
        detail::softmax_span_grad(out.data() + r * n,
                                  out.grad().data() + r * n,
                                  a.grad().data() + r * n, n);
    });
  }
  return out;
}

// Causal softmax over a [T x T] score matrix: row i normalises over j <= i,
// entries above the diagonal are exactly zero.
inline Tensor softmax_causal(const Tensor& w, Tape* tape = nullptr) {
  detail::want(w.shape().size() == 2 && w.rows() == w.cols(),
               "softmax_causal: expects square score matrix");
  const std::size_t t = w.rows();
  Tensor out(w.shape());
  for (std::size_t i = 0; i < t; ++i)
    detail::softmax_span(w.data() + i * t, out.data() + i * t, i + 1);
  if (tape && w.requires_grad()) {
    out.set_requires_grad();
    tape->record(out, [w, out, t]() mutable {
      if (!out.has_grad()) return;
      for (std::size_t i = 0; i < t; ++i)
        detail::softmax_span_grad(out.data() + i * t,
                                  out.grad().data() + i * t,
                                  w.grad().data() + i * t, i + 1);
    });
  }
  return out;
}

// Summed cross entropy over rows where mask is true; the caller divides by
// the token count (so batch means stay exact across padding).
inline Tensor cross_entropy_masked(const Tensor& logits,
                                   const std::vector<std::size_t>& targets,
                                   const std::vector<bool>& mask,
                                   Tape* tape = nullptr) {
  detail::want(logits.shape().size() == 2, "cross_entropy: logits must be 2-D");
  detail::want(targets.size() == logits.rows() && mask.size() == targets.size(),
               "cross_entropy: row count mismatch");
  const std::size_t v = logits.cols();
  std::vector<double> probs(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (!mask[i]) continue;
    detail::softmax_span(logits.data() + i * v, probs.data() + i * v, v);
    total -= std::log(probs[i * v + targets[i]]);
  }
  Tensor out({1}, {total});
  if (tape && logits.requires_grad()) {
    out.set_requires_grad();
    tape->record(out, [logits, out, targets, mask, probs, v]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0];
      auto& gi = logits.grad();
      for (std::size_t i = 0; i < logits.rows(); ++i) {
        if (!mask[i]) continue;
        for (std::size_t j = 0; j < v; ++j)
          gi[i * v + j] += g * probs[i * v + j];
        gi[i * v + targets[i]] -= g;
      }
    });
  }
  return out;
}

namespace detail {

inline double row_l2(const double* z, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += z[i] * z[i];
  return std::sqrt(s);
}

}  // namespace detail

// Row-wise RMS normalisation: each row z becomes (sqrt(N)/|z|) * gain .* z.
// A zero-norm row is a degenerate input and raises rather than being fudged
// with an epsilon, so exact invariance tests stay exact.
inline Tensor rmsnorm_rows(const Tensor& x, const Tensor& gain,
                           Tape* tape = nullptr) {
  detail::want(x.shape().size() == 2 && gain.size() == x.cols(),
               "rmsnorm_rows: gain length must match row width");
  const std::size_t rows = x.rows(), n = x.cols();
  const double root_n = std::sqrt(static_cast<double>(n));
  Tensor out(x.shape());
  std::vector<double> inv_norm(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* z = x.data() + i * n;
    const double r = detail::row_l2(z, n);
    if (r == 0.0) throw std::domain_error("rmsnorm_rows: zero-norm input");
    inv_norm[i] = 1.0 / r;
    double* y = out.data() + i * n;
    const double c = root_n * inv_norm[i];
    for (std::size_t j = 0; j < n; ++j) y[j] = c * gain.at(j) * z[j];
  }
  if (tape && (x.requires_grad() || gain.requires_grad())) {
    out.set_requires_grad();
    tape->record(out, [x, gain, out, inv_norm, rows, n, root_n]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      for (std::size_t i = 0; i < rows; ++i) {
        const double* z = x.data() + i * n;
        const double* g = go.data() + i * n;
        const double c = root_n * inv_norm[i];
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * gain.at(j) * z[j];
        dot *= inv_norm[i] * inv_norm[i];
        if (x.requires_grad()) {
          auto& gx = x.grad();
          for (std::size_t j = 0; j < n; ++j)
            gx[i * n + j] += c * (gain.at(j) * g[j] - z[j] * dot);
        }
        if (gain.requires_grad()) {
          auto& gg = gain.grad();
          for (std::size_t j = 0; j < n; ++j) gg[j] += c * z[j] * g[j];
        }
      }
    });
  }
  return out;
}

// Row-wise LayerNorm: mean removal via the idempotent projector, then the
// RMS map, then an optional bias. Raises when a row is constant (z_perp = 0).
inline Tensor layernorm_rows(const Tensor& x, const Tensor& gain,
                             const Tensor& bias, Tape* tape = nullptr) {
  detail::want(x.shape().size() == 2 && gain.size() == x.cols(),
               "layernorm_rows: gain length must match row width");
  const std::size_t rows = x.rows(), n = x.cols();
  const double root_n = std::sqrt(static_cast<double>(n));
  Tensor out(x.shape());
  std::vector<double> centered(x.size());
  std::vector<double> inv_norm(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* z = x.data() + i * n;
    double m = 0.0;
    for (std::size_t j = 0; j < n; ++j) m += z[j];
    m /= static_cast<double>(n);
    double* u = centered.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) u[j] = z[j] - m;
    const double r = detail::row_l2(u, n);
    if (r == 0.0) throw std::domain_error("layernorm_rows: constant row");
    inv_norm[i] = 1.0 / r;
    const double c = root_n * inv_norm[i];
    double* y = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = c * gain.at(j) * u[j];
      if (bias.defined()) y[j] += bias.at(j);
    }
  }
  const bool need = x.requires_grad() || gain.requires_grad() ||
                    (bias.defined() && bias.requires_grad());
  if (tape && need) {
    out.set_requires_grad();
    tape->record(out, [x, gain, bias, out, centered, inv_norm, rows, n,
                       root_n]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      std::vector<double> tmp(n);
      for (std::size_t i = 0; i < rows; ++i) {
        const double* u = centered.data() + i * n;
        const double* g = go.data() + i * n;
        const double c = root_n * inv_norm[i];
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * gain.at(j) * u[j];
        dot *= inv_norm[i] * inv_norm[i];
        if (x.requires_grad()) {
          double tmean = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            tmp[j] = c * (gain.at(j) * g[j] - u[j] * dot);
            tmean += tmp[j];
          }
          tmean /= static_cast<double>(n);
          auto& gx = x.grad();
          for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += tmp[j] - tmean;
        }
        if (gain.requires_grad()) {
          auto& gg = gain.grad();
          for (std::size_t j = 0; j < n; ++j) gg[j] += c * u[j] * g[j];
        }
        if (bias.defined() && bias.requires_grad()) {
          auto& gb = bias.grad();
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[j];
        }
      }
    });
  }
  return out;
}

// Central finite differences, the model-independent gradient oracle.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                               const Tensor& x, double step) {
  if (step <= 0.0) throw std::invalid_argument("finite_diff_grad: step <= 0");
  Tensor probe = x.clone();
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + step;
    const double hi = f(probe);
    probe.data()[i] = orig - step;
    const double lo = f(probe);
    probe.data()[i] = orig;
    if (!std::isfinite(hi) || !std::isfinite(lo))
      throw std::domain_error("finite_diff_grad: non-finite evaluation");
    g.data()[i] = (hi - lo) / (2.0 * step);
  }
  return g;
}

}  // namespace normlab
