#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <set>
#include <stdexcept>
#include <vector>

#include "normlab/tensor.hpp"

// Attention heads under the three normalisation placements (no-norm,
// pre-norm, qkv-norm), plus the analytic perturbation propagators, the
// circuit-collapse predicates, and the subspace-interference calculators.
// Everything here is a pure function of its inputs; the trained model in
// model.hpp composes the same math through the tape and is cross-checked
// against these functions in the tests.

namespace normlab {

enum class NormVariant { kRms, kLayer };

// One normalisation layer: project onto the sphere of radius sqrt(N)
// (RMS), or do the same after removing the mean component (Layer), then
// stretch by a per-component gain.
struct NormKind {
  NormVariant variant = NormVariant::kRms;
  Tensor gain;  // length N; all-ones when untrained

  static NormKind rms(std::size_t n) {
    return {NormVariant::kRms, Tensor::full({n}, 1.0)};
  }
  static NormKind layer(std::size_t n) {
    return {NormVariant::kLayer, Tensor::full({n}, 1.0)};
  }
};

/// RMS: (sqrt(N)/|z|) diag(gain) z.  Layer: same applied to the mean-removed
/// z. Zero-norm input (or a constant row for Layer) raises domain_error.
inline Tensor normalize(const Tensor& z, const NormKind& kind) {
  detail::want(z.shape().size() == 1 && z.size() == kind.gain.size(),
               "normalize: gain length must match vector length");
  Tensor row({1, z.size()}, z.values());
  Tensor out = kind.variant == NormVariant::kRms
                   ? rmsnorm_rows(row, kind.gain)
                   : layernorm_rows(row, kind.gain, Tensor());
  return Tensor({z.size()}, out.values());
}

enum class StrategyKind { kNoNorm, kPreNorm, kQkvNorm };

// Where the normalisation layers sit relative to the head's linear maps.
// Pre-norm applies them to the input embeddings (x for the query path, y_t
// for the key and value paths); qkv-norm applies them to the latent q, k_t,
// v_t vectors after the linear maps. Each strategy carries exactly three
// parameter sets, one per path.
struct NormStrategy {
  StrategyKind kind = StrategyKind::kNoNorm;
  NormKind query_path;  // pre-norm: alpha_x on x;   qkv-norm: alpha_q on q
  NormKind key_path;    // pre-norm: alpha_y^K on y; qkv-norm: alpha_k on k
  NormKind value_path;  // pre-norm: alpha_y^V on y; qkv-norm: alpha_v on v

  static NormStrategy no_norm() { return {StrategyKind::kNoNorm, {}, {}, {}}; }
  static NormStrategy pre_norm(NormKind ax, NormKind ayk, NormKind ayv) {
    return {StrategyKind::kPreNorm, std::move(ax), std::move(ayk),
            std::move(ayv)};
  }
  static NormStrategy qkv_norm(NormKind aq, NormKind ak, NormKind av) {
    return {StrategyKind::kQkvNorm, std::move(aq), std::move(ak),
            std::move(av)};
  }
};

// Weights of a single attention head. No bias terms in q, k, v: key biases
// are nullified by the softmax and query biases only add score terms a
// constant direction in x can reproduce (see bias_invariance_check).
struct HeadWeights {
  Tensor w_q;  // [N_qkv x N_x]
  Tensor w_k;  // [N_qkv x N_y]
  Tensor w_v;  // [N_qkv x N_y]
  Tensor w_o;  // [N_x x N_qkv]
  NormStrategy strategy;

  std::size_t n_qkv() const { return w_q.rows(); }
  std::size_t n_x() const { return w_q.cols(); }
  std::size_t n_y() const { return w_k.cols(); }
};

namespace detail {

inline Tensor mat_vec(const Tensor& m, const Tensor& v) {
  Tensor col({v.size(), 1}, v.values());
  Tensor out = matmul(m, col);
  return Tensor({m.rows()}, out.values());
}

inline Tensor row_of(const Tensor& m, std::size_t i) {
  std::vector<double> v(m.data() + i * m.cols(), m.data() + (i + 1) * m.cols());
  return Tensor({m.cols()}, std::move(v));
}

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

inline double l2(const Tensor& a) { return std::sqrt(dot(a, a)); }

}  // namespace detail

/// Attention scores w_t for receiver x against senders Y (rows y_t), per the
/// head's strategy:
///   no-norm   x^T W_QK y_t
///   pre-norm  N(x; a_x)^T W_QK N(y_t; a_y^K)
///   qkv-norm  N(W_Q x; a_q)^T N(W_K y_t; a_k)
inline Tensor scores(const Tensor& x, const Tensor& y_rows,
                     const HeadWeights& h) {
  detail::want(x.size() == h.n_x(), "scores: receiver width mismatch");
  detail::want(y_rows.shape().size() == 2 && y_rows.cols() == h.n_y(),
               "scores: sender width mismatch");
  const std::size_t t_count = y_rows.rows();
  Tensor w({t_count});
  switch (h.strategy.kind) {
    case StrategyKind::kNoNorm: {
      Tensor q = detail::mat_vec(h.w_q, x);
      for (std::size_t t = 0; t < t_count; ++t) {
        Tensor k = detail::mat_vec(h.w_k, detail::row_of(y_rows, t));
        w.at(t) = detail::dot(q, k);
      }
      break;
    }
    case StrategyKind::kPreNorm: {
      Tensor q = detail::mat_vec(h.w_q, normalize(x, h.strategy.query_path));
      for (std::size_t t = 0; t < t_count; ++t) {
        Tensor yk = normalize(detail::row_of(y_rows, t), h.strategy.key_path);
        w.at(t) = detail::dot(q, detail::mat_vec(h.w_k, yk));
      }
      break;
    }
    case StrategyKind::kQkvNorm: {
      Tensor q =
          normalize(detail::mat_vec(h.w_q, x), h.strategy.query_path);
      for (std::size_t t = 0; t < t_count; ++t) {
        Tensor k = normalize(detail::mat_vec(h.w_k, detail::row_of(y_rows, t)),
                             h.strategy.key_path);
        w.at(t) = detail::dot(q, k);
      }
      break;
    }
  }
  return w;
}

/// Messages m_t emitted by each sender, one row per t:
///   no-norm   W_O W_V y_t
///   pre-norm  W_O W_V N(y_t; a_y^V)
///   qkv-norm  W_O N(W_V y_t; a_v)
inline Tensor messages(const Tensor& y_rows, const HeadWeights& h) {
  const std::size_t t_count = y_rows.rows();
  Tensor m({t_count, h.n_x()});
  for (std::size_t t = 0; t < t_count; ++t) {
    Tensor y = detail::row_of(y_rows, t);
    Tensor v;
    switch (h.strategy.kind) {
      case StrategyKind::kNoNorm:
        v = detail::mat_vec(h.w_v, y);
        break;
      case StrategyKind::kPreNorm:
        v = detail::mat_vec(h.w_v, normalize(y, h.strategy.value_path));
        break;
      case StrategyKind::kQkvNorm:
        v = normalize(detail::mat_vec(h.w_v, y), h.strategy.value_path);
        break;
    }
    Tensor msg = detail::mat_vec(h.w_o, v);
    for (std::size_t j = 0; j < h.n_x(); ++j) m.at(t, j) = msg.at(j);
  }
  return m;
}

namespace detail {

// Softmax restricted to the senders enabled by mask (empty mask = all).
inline Tensor masked_softmax(const Tensor& w, const std::vector<bool>& mask) {
  const std::size_t t_count = w.size();
  std::vector<std::size_t> open;
  for (std::size_t t = 0; t < t_count; ++t)
    if (mask.empty() || mask[t]) open.push_back(t);
  if (open.empty())
    throw std::invalid_argument("attention_update: all senders masked");
  std::vector<double> sub(open.size()), subout(open.size());
  for (std::size_t i = 0; i < open.size(); ++i) sub[i] = w.at(open[i]);
  softmax_span(sub.data(), subout.data(), sub.size());
  Tensor a({t_count});
  for (std::size_t i = 0; i < open.size(); ++i) a.at(open[i]) = subout[i];
  return a;
}

}  // namespace detail

/// Multi-head residual update x -> x + sum_h sum_t a_t^(h) m_t^(h). The
/// optional mask disables senders (a causal cutoff is mask[t] = t <= i).
inline Tensor attention_update(const Tensor& x, const Tensor& y_rows,
                               const std::vector<HeadWeights>& heads,
                               const std::vector<bool>& mask = {}) {
  Tensor out = x.clone();
  for (const HeadWeights& h : heads) {
    Tensor a = detail::masked_softmax(scores(x, y_rows, h), mask);
    Tensor m = messages(y_rows, h);
    for (std::size_t t = 0; t < y_rows.rows(); ++t)
      for (std::size_t j = 0; j < x.size(); ++j)
        out.at(j) += a.at(t) * m.at(t, j);
  }
  return out;
}

/// First-order propagation of perturbations (eps_q, eps_k rows, eps_m rows)
/// onto the update Delta x = sum_t a_t m_t:
///   E_a[m_t k~_t^T] eps_q + E_a[m~_t eps_k_t^T] q + E_a[eps_m_t]
/// with k~_t = k_t - E_a[k_t] and m~_t = m_t - E_a[m_t].
inline Tensor propagate_perturbation(const Tensor& a, const Tensor& q,
                                     const Tensor& k_rows,
                                     const Tensor& m_rows,
                                     const Tensor& eps_q,
                                     const Tensor& eps_k_rows,
                                     const Tensor& eps_m_rows) {
  const std::size_t t_count = a.size();
  const std::size_t d = q.size();
  const std::size_t n_x = m_rows.cols();
  detail::want(k_rows.rows() == t_count && m_rows.rows() == t_count &&
                   eps_k_rows.rows() == t_count &&
                   eps_m_rows.rows() == t_count,
               "propagate_perturbation: row counts disagree");
  detail::want(k_rows.cols() == d && eps_k_rows.cols() == d &&
                   eps_q.size() == d && eps_m_rows.cols() == n_x,
               "propagate_perturbation: widths disagree");

  std::vector<double> k_mean(d, 0.0), m_mean(n_x, 0.0);
  for (std::size_t t = 0; t < t_count; ++t) {
    for (std::size_t j = 0; j < d; ++j) k_mean[j] += a.at(t) * k_rows.at(t, j);
    for (std::size_t j = 0; j < n_x; ++j)
      m_mean[j] += a.at(t) * m_rows.at(t, j);
  }

  Tensor out({n_x});
  for (std::size_t t = 0; t < t_count; ++t) {
    double kq = 0.0, qk = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      kq += (k_rows.at(t, j) - k_mean[j]) * eps_q.at(j);
      qk += q.at(j) * eps_k_rows.at(t, j);
    }
    const double at = a.at(t);
    for (std::size_t j = 0; j < n_x; ++j) {
      out.at(j) += at * m_rows.at(t, j) * kq;
      out.at(j) += at * (m_rows.at(t, j) - m_mean[j]) * qk;
      out.at(j) += at * eps_m_rows.at(t, j);
    }
  }
  return out;
}

// Per-sender outcome of the critical-ratio collapse test.
enum class CollapseOutcome { kStable, kCollapses, kIndeterminate };

struct CollapseThresholdResult {
  std::vector<CollapseOutcome> outcomes;  // outcome[t_star] == kStable
  std::set<std::size_t> collapsing;
  std::set<std::size_t> indeterminate;
};

/// Critical-ratio test for sparse attention under multiplicative
/// perturbations q -> (1+kappa_q) q,  k_t -> (1+kappa_k[t]) k_t. Sender t
/// collapses the argmax when w_tstar/w_t crosses
///   lambda_w = (1 + kappa_q + kappa_k[t]) / (1 + kappa_q + kappa_k[t_star])
/// from the side fixed by the sign of w_t (1 + kappa_q + kappa_k[t_star]).
/// Senders with w_t == 0 make the ratio undefined and are reported as
/// indeterminate rather than guessed.
inline CollapseThresholdResult collapse_threshold(
    const Tensor& w, std::size_t t_star, double kappa_q,
    const Tensor& kappa_k) {
  const std::size_t t_count = w.size();
  detail::want(t_star < t_count && kappa_k.size() == t_count,
               "collapse_threshold: bad sender index or kappa length");
  CollapseThresholdResult res;
  res.outcomes.assign(t_count, CollapseOutcome::kStable);
  const double denom = 1.0 + kappa_q + kappa_k.at(t_star);
  for (std::size_t t = 0; t < t_count; ++t) {
    if (t == t_star) continue;
    if (w.at(t) == 0.0 || denom == 0.0) {
      res.outcomes[t] = CollapseOutcome::kIndeterminate;
      res.indeterminate.insert(t);
      continue;
    }
    const double lambda_w = (1.0 + kappa_q + kappa_k.at(t)) / denom;
    const double ratio = w.at(t_star) / w.at(t);
    const bool positive_branch = w.at(t) * denom > 0.0;
    const bool collapses =
        positive_branch ? (ratio < lambda_w) : (ratio > lambda_w);
    if (collapses) {
      res.outcomes[t] = CollapseOutcome::kCollapses;
      res.collapsing.insert(t);
    }
  }
  return res;
}

struct CollapseVerdict {
  std::size_t clean_argmax = 0;
  std::size_t perturbed_argmax = 0;
  bool collapsed = false;      // argmax moved to a different sender
  bool strict_sparse = false;  // perturbed distribution still sparse
};

namespace detail {

inline std::size_t argmax(const Tensor& a) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < a.size(); ++i)
    if (a.at(i) > a.at(best)) best = i;
  return best;
}

}  // namespace detail

/// Compares a clean and a perturbed attention distribution. Only sparse
/// clean distributions (max >= sparse_threshold) yield a verdict.
inline std::optional<CollapseVerdict> detect_collapse(
    const Tensor& a_clean, const Tensor& a_noisy,
    double sparse_threshold = 0.95) {
  detail::want(a_clean.size() == a_noisy.size(),
               "detect_collapse: length mismatch");
  const std::size_t clean_star = detail::argmax(a_clean);
  if (a_clean.at(clean_star) < sparse_threshold) return std::nullopt;
  CollapseVerdict v;
  v.clean_argmax = clean_star;
  v.perturbed_argmax = detail::argmax(a_noisy);
  v.collapsed = v.perturbed_argmax != v.clean_argmax;
  v.strict_sparse = a_noisy.at(v.perturbed_argmax) >= sparse_threshold;
  return v;
}

struct SeparabilityReport {
  double factor = 0.0;             // 1 / |sum_a x_a|
  std::vector<double> part_norms;  // |x_a| per part
  double max_cross_dot = 0.0;      // largest |x_a . x_b| over pairs
  bool pairwise_orthogonal = false;
  double max_norm_deviation = 0.0;  // vs reference norms, when supplied
  bool norms_match_reference = false;
};

/// Measures how a decomposition x = sum_a x_a would interfere through a
/// shared normalisation factor: reports 1/|sum x_a|, whether the parts are
/// pairwise orthogonal, and (optionally) whether each |x_a| matches a
/// reference norm. Orthogonal constant-norm parts keep the factor constant,
/// which is exactly the structure pre-norm separability needs.
inline SeparabilityReport interference_factor(
    const std::vector<Tensor>& parts,
    const std::vector<double>& reference_norms = {}, double tol = 1e-10) {
  if (parts.empty())
    throw std::invalid_argument("interference_factor: no parts");
  const std::size_t n = parts.front().size();
  Tensor total({n});
  SeparabilityReport rep;
  for (const Tensor& p : parts) {
    detail::want(p.size() == n, "interference_factor: part width mismatch");
    for (std::size_t j = 0; j < n; ++j) total.at(j) += p.at(j);
    rep.part_norms.push_back(detail::l2(p));
  }
  const double r = detail::l2(total);
  if (r == 0.0)
    throw std::domain_error("interference_factor: zero total norm");
  rep.factor = 1.0 / r;
  for (std::size_t i = 0; i < parts.size(); ++i)
    for (std::size_t j = i + 1; j < parts.size(); ++j)
      rep.max_cross_dot =
          std::max(rep.max_cross_dot, std::abs(detail::dot(parts[i], parts[j])));
  rep.pairwise_orthogonal = rep.max_cross_dot <= tol;
  if (!reference_norms.empty()) {
    detail::want(reference_norms.size() == parts.size(),
                 "interference_factor: reference norm count mismatch");
    for (std::size_t i = 0; i < parts.size(); ++i)
      rep.max_norm_deviation = std::max(
          rep.max_norm_deviation,
          std::abs(rep.part_norms[i] - reference_norms[i]));
    rep.norms_match_reference = rep.max_norm_deviation <= tol;
  }
  return rep;
}

struct BiasCheckInstance {
  Tensor x;       // receiver
  Tensor y_rows;  // senders
};

/// True iff adding the key bias b_k to every k_t leaves the attention
/// weights unchanged (within tol) on all instances. Holds for no-norm heads
/// because the bias contributes q^T b_k identically to every sender. The
/// same check with a query bias generally fails, since b_q^T W_K y_t varies
/// with t.
inline bool bias_invariance_check(const HeadWeights& h, const Tensor& b_k,
                                  const std::vector<BiasCheckInstance>& runs,
                                  bool bias_on_query = false,
                                  double tol = 1e-12) {
  detail::want(h.strategy.kind == StrategyKind::kNoNorm,
               "bias_invariance_check: no-norm heads only");
  detail::want(b_k.size() == h.n_qkv(),
               "bias_invariance_check: bias length mismatch");
  for (const auto& inst : runs) {
    Tensor q = detail::mat_vec(h.w_q, inst.x);
    const std::size_t t_count = inst.y_rows.rows();
    Tensor w_plain({t_count}), w_biased({t_count});
    for (std::size_t t = 0; t < t_count; ++t) {
      Tensor k = detail::mat_vec(h.w_k, detail::row_of(inst.y_rows, t));
      w_plain.at(t) = detail::dot(q, k);
      if (bias_on_query) {
        Tensor qb({q.size()});
        for (std::size_t j = 0; j < q.size(); ++j)
          qb.at(j) = q.at(j) + b_k.at(j);
        w_biased.at(t) = detail::dot(qb, k);
      } else {
        Tensor kb({k.size()});
        for (std::size_t j = 0; j < k.size(); ++j)
          kb.at(j) = k.at(j) + b_k.at(j);
        w_biased.at(t) = detail::dot(q, kb);
      }
    }
    Tensor a_plain = softmax_rows(w_plain);
    Tensor a_biased = softmax_rows(w_biased);
    for (std::size_t t = 0; t < t_count; ++t)
      if (std::abs(a_plain.at(t) - a_biased.at(t)) > tol) return false;
  }
  return true;
}

/// softmax(kappa * w): kappa acts as an inverse temperature, so entropy is
/// non-increasing in kappa, with the uniform and argmax distributions as the
/// kappa -> 0 and kappa -> inf limits.
inline Tensor temperature_probe(const Tensor& w, double kappa) {
  if (kappa <= 0.0)
    throw std::invalid_argument("temperature_probe: kappa must be positive");
  Tensor scaled({w.size()});
  for (std::size_t i = 0; i < w.size(); ++i) scaled.at(i) = kappa * w.at(i);
  return softmax_rows(scaled);
}

inline double entropy(const Tensor& dist) {
  double h = 0.0;
  for (std::size_t i = 0; i < dist.size(); ++i)
    if (dist.at(i) > 0.0) h -= dist.at(i) * std::log(dist.at(i));
  return h;
}

}  // namespace normlab
