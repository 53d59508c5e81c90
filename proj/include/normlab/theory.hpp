#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "normlab/attention.hpp"
#include "normlab/rng.hpp"
#include "normlab/tensor.hpp"

// Model-free verification battery for the perturbation-stability theory:
// every property draws random instances from a seeded stream and checks the
// analytic statement against an independent numeric route (finite
// differences, direct score recomputation, or exhaustive evaluation).

namespace normlab {

struct PropertyResult {
  std::string name;
  std::size_t trials = 0;
  double worst_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  // replay coordinates of the worst / failing instance
  std::uint64_t seed = 0;
  std::size_t failing_trial = 0;
};

struct PerturbationReport {
  std::vector<PropertyResult> properties;
  bool all_pass = true;

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& p : properties)
      arr.push_back({{"name", p.name},
                     {"trials", p.trials},
                     {"worst_err", p.worst_err},
                     {"tolerance", p.tolerance},
                     {"pass", p.pass},
                     {"seed", p.seed},
                     {"failing_trial", p.failing_trial}});
    return {{"kind", "theory_battery"}, {"properties", arr},
            {"all_pass", all_pass}};
  }
};

namespace theory {

inline Tensor rand_vec(std::size_t n, Rng& rng, double lo = -1.0,
                       double hi = 1.0) {
  return Tensor::uniform({n}, lo, hi, rng);
}

inline Tensor rand_rows(std::size_t r, std::size_t c, Rng& rng,
                        double lo = -1.0, double hi = 1.0) {
  return Tensor::uniform({r, c}, lo, hi, rng);
}

inline double l2(const Tensor& t) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += t.at(i) * t.at(i);
  return std::sqrt(s);
}

inline double linf_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

// Reference attention update for the finite-difference oracle.
inline Tensor delta_x_ref(const Tensor& q, const Tensor& k_rows,
                          const Tensor& m_rows) {
  const std::size_t t_count = k_rows.rows();
  Tensor w({t_count});
  for (std::size_t t = 0; t < t_count; ++t) {
    double s = 0.0;
    for (std::size_t j = 0; j < q.size(); ++j) s += q.at(j) * k_rows.at(t, j);
    w.at(t) = s;
  }
  Tensor a = softmax_rows(w);
  Tensor out({m_rows.cols()});
  for (std::size_t t = 0; t < t_count; ++t)
    for (std::size_t j = 0; j < m_rows.cols(); ++j)
      out.at(j) += a.at(t) * m_rows.at(t, j);
  return out;
}

// Gauss-Jordan inverse, used to build oblique projectors for the
// linearly-independent-subspace construction.
inline std::vector<std::vector<double>> invert(
    std::vector<std::vector<double>> m) {
  const std::size_t n = m.size();
  std::vector<std::vector<double>> inv(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) inv[i][i] = 1.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(m[r][col]) > std::abs(m[piv][col])) piv = r;
    std::swap(m[piv], m[col]);
    std::swap(inv[piv], inv[col]);
    const double d = m[col][col];
    if (d == 0.0) throw std::domain_error("invert: singular matrix");
    for (std::size_t j = 0; j < n; ++j) {
      m[col][j] /= d;
      inv[col][j] /= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = m[r][col];
      for (std::size_t j = 0; j < n; ++j) {
        m[r][j] -= f * m[col][j];
        inv[r][j] -= f * inv[col][j];
      }
    }
  }
  return inv;
}

using PropertyFn =
    std::function<PropertyResult(std::size_t trials, std::uint64_t seed)>;

inline PropertyResult run_property(
    const std::string& name, std::size_t trials, std::uint64_t seed,
    double tolerance,
    const std::function<double(std::size_t trial, Rng& rng)>& err_of_trial) {
  PropertyResult res;
  res.name = name;
  res.trials = trials;
  res.tolerance = tolerance;
  res.seed = seed;
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng = Rng(seed).derive({std::hash<std::string>{}(name), t});
    const double err = err_of_trial(t, rng);
    if (err > res.worst_err) {
      res.worst_err = err;
      res.failing_trial = t;
    }
  }
  res.pass = res.worst_err <= tolerance;
  return res;
}

// --- individual properties -------------------------------------------------

inline PropertyResult softmax_row_normalisation(std::size_t trials,
                                                std::uint64_t seed) {
  return run_property(
      "softmax-row-normalisation", std::max<std::size_t>(trials, 1000), seed,
      1e-12, [](std::size_t, Rng& rng) {
        const std::size_t n = 2 + rng.uniform_int(15);
        Tensor s = softmax_rows(rand_vec(n, rng, -50.0, 50.0));
        double total = 0.0, neg = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          total += s.at(i);
          neg = std::min(neg, s.at(i));
        }
        return std::max(std::abs(total - 1.0), -neg);
      });
}

inline PropertyResult softmax_shift_invariance(std::size_t trials,
                                               std::uint64_t seed) {
  return run_property(
      "softmax-shift-invariance", trials, seed, 1e-12,
      [](std::size_t, Rng& rng) {
        const std::size_t n = 2 + rng.uniform_int(10);
        Tensor w = rand_vec(n, rng, -5.0, 5.0);
        const double c = rng.uniform(-20.0, 20.0);
        Tensor shifted({n});
        for (std::size_t i = 0; i < n; ++i) shifted.at(i) = w.at(i) + c;
        return linf_diff(softmax_rows(w), softmax_rows(shifted));
      });
}

inline PropertyResult propagators_vs_finite_difference(std::size_t trials,
                                                       std::uint64_t seed) {
  return run_property(
      "theorem4-propagators-vs-fd", trials, seed, 1e-5,
      [](std::size_t, Rng& rng) {
        const std::size_t t_count = 2 + rng.uniform_int(7);
        const std::size_t d = 2 + rng.uniform_int(7);
        const std::size_t n_x = 2 + rng.uniform_int(5);
        Tensor q = rand_vec(d, rng);
        Tensor k = rand_rows(t_count, d, rng);
        Tensor m = rand_rows(t_count, n_x, rng);
        Tensor w({t_count});
        for (std::size_t t = 0; t < t_count; ++t) {
          double s = 0.0;
          for (std::size_t j = 0; j < d; ++j) s += q.at(j) * k.at(t, j);
          w.at(t) = s;
        }
        Tensor a = softmax_rows(w);
        const double eps = 1e-5;
        Tensor eq = rand_vec(d, rng, -eps, eps);
        Tensor ek = rand_rows(t_count, d, rng, -eps, eps);
        Tensor em = rand_rows(t_count, n_x, rng, -eps, eps);
        Tensor zq({d}), zk({t_count, d}), zm({t_count, n_x});
        auto shifted = [&](double sign, const Tensor& dq, const Tensor& dk,
                           const Tensor& dm) {
          Tensor qs = q.clone();
          Tensor ks = k.clone();
          Tensor ms = m.clone();
          for (std::size_t j = 0; j < d; ++j) qs.at(j) += sign * dq.at(j);
          for (std::size_t t = 0; t < t_count; ++t) {
            for (std::size_t j = 0; j < d; ++j)
              ks.at(t, j) += sign * dk.at(t, j);
            for (std::size_t j = 0; j < n_x; ++j)
              ms.at(t, j) += sign * dm.at(t, j);
          }
          return delta_x_ref(qs, ks, ms);
        };
        // each channel alone, then all three jointly
        double worst = 0.0;
        const std::array<std::array<const Tensor*, 3>, 4> channels = {{
            {&eq, &zk, &zm},
            {&zq, &ek, &zm},
            {&zq, &zk, &em},
            {&eq, &ek, &em},
        }};
        for (const auto& ch : channels) {
          Tensor predicted =
              propagate_perturbation(a, q, k, m, *ch[0], *ch[1], *ch[2]);
          Tensor hi = shifted(1.0, *ch[0], *ch[1], *ch[2]);
          Tensor lo = shifted(-1.0, *ch[0], *ch[1], *ch[2]);
          Tensor fd({n_x});
          for (std::size_t j = 0; j < n_x; ++j)
            fd.at(j) = (hi.at(j) - lo.at(j)) / 2.0;
          worst = std::max(
              worst, linf_diff(predicted, fd) / std::max(l2(fd), 1e-12));
        }
        return worst;
      });
}

inline PropertyResult sparse_limit(std::size_t trials, std::uint64_t seed) {
  return run_property(
      "theorem5-sparse-limit", trials, seed, 1e-10,
      [](std::size_t, Rng& rng) {
        const std::size_t t_count = 2 + rng.uniform_int(6);
        const std::size_t d = 2 + rng.uniform_int(6);
        const std::size_t n_x = 2 + rng.uniform_int(4);
        const std::size_t star = rng.uniform_int(t_count);
        Tensor w({t_count});
        for (std::size_t t = 0; t < t_count; ++t)
          w.at(t) = t == star ? 0.0 : -50.0;  // gap of 50
        Tensor a = softmax_rows(w);
        Tensor q = rand_vec(d, rng);
        Tensor k = rand_rows(t_count, d, rng);
        Tensor m = rand_rows(t_count, n_x, rng);
        Tensor eq = rand_vec(d, rng);
        Tensor ek = rand_rows(t_count, d, rng);
        Tensor em = rand_rows(t_count, n_x, rng);
        Tensor zq({d}), zk({t_count, d}), zm({t_count, n_x});
        double err = l2(propagate_perturbation(a, q, k, m, eq, zk, zm));
        err = std::max(err,
                       l2(propagate_perturbation(a, q, k, m, zq, ek, zm)));
        Tensor out = propagate_perturbation(a, q, k, m, zq, zk, em);
        for (std::size_t j = 0; j < n_x; ++j)
          err = std::max(err, std::abs(out.at(j) - em.at(star, j)));
        return err;
      });
}

inline PropertyResult isotropic_lemmas(std::size_t trials,
                                       std::uint64_t seed) {
  return run_property(
      "theorem6-isotropic-lemmas", trials, seed, 1e-12,
      [](std::size_t, Rng& rng) {
        const std::size_t t_count = 3 + rng.uniform_int(6);
        const std::size_t d = 2 + rng.uniform_int(6);
        const std::size_t n_x = 2 + rng.uniform_int(4);
        Tensor a = Tensor::full({t_count}, 1.0 / double(t_count));
        Tensor q = rand_vec(d, rng);
        Tensor m = rand_rows(t_count, n_x, rng);
        Tensor zq({d}), zk({t_count, d}), zm({t_count, n_x});
        double err = 0.0;
        {  // constant keys kill q-propagation
          Tensor base = rand_vec(d, rng);
          Tensor k_const({t_count, d});
          for (std::size_t t = 0; t < t_count; ++t)
            for (std::size_t j = 0; j < d; ++j) k_const.at(t, j) = base.at(j);
          Tensor eq = rand_vec(d, rng);
          err = std::max(
              err, l2(propagate_perturbation(a, q, k_const, m, eq, zk, zm)));
        }
        {  // mean-free message noise cancels
          Tensor k = rand_rows(t_count, d, rng);
          Tensor em = rand_rows(t_count, n_x, rng);
          for (std::size_t j = 0; j < n_x; ++j) {
            double mu = 0.0;
            for (std::size_t t = 0; t < t_count; ++t) mu += em.at(t, j);
            mu /= double(t_count);
            for (std::size_t t = 0; t < t_count; ++t) em.at(t, j) -= mu;
          }
          err = std::max(
              err, l2(propagate_perturbation(a, q, k, m, zq, zk, em)));
        }
        {  // zero query kills k-propagation
          Tensor k = rand_rows(t_count, d, rng);
          Tensor ek = rand_rows(t_count, d, rng);
          Tensor q0({d});
          err = std::max(
              err, l2(propagate_perturbation(a, q0, k, m, zq, ek, zm)));
        }
        return err;
      });
}

inline PropertyResult multiplicative_isotropic(std::size_t trials,
                                               std::uint64_t seed) {
  return run_property(
      "theorem8-multiplicative-isotropic", trials, seed, 1e-12,
      [](std::size_t, Rng& rng) {
        const std::size_t t_count = 4 + rng.uniform_int(6);
        const std::size_t d = 3 + rng.uniform_int(4);
        const std::size_t n_x = 2 + rng.uniform_int(4);
        Tensor a = Tensor::full({t_count}, 1.0 / double(t_count));
        const double w_val = rng.uniform(-1.0, 1.0);
        Tensor q = rand_vec(d, rng);
        double q2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) q2 += q.at(j) * q.at(j);
        Tensor k({t_count, d});
        for (std::size_t t = 0; t < t_count; ++t) {
          Tensor r = rand_vec(d, rng);
          double rq = 0.0;
          for (std::size_t j = 0; j < d; ++j) rq += r.at(j) * q.at(j);
          for (std::size_t j = 0; j < d; ++j)
            k.at(t, j) =
                (w_val / q2) * q.at(j) + r.at(j) - (rq / q2) * q.at(j);
        }
        Tensor m = rand_rows(t_count, n_x, rng);
        Tensor zq({d}), zk({t_count, d}), zm({t_count, n_x});
        Tensor kappa = rand_vec(t_count, rng, -0.2, 0.2);
        Tensor ek({t_count, d});
        for (std::size_t t = 0; t < t_count; ++t)
          for (std::size_t j = 0; j < d; ++j)
            ek.at(t, j) = kappa.at(t) * k.at(t, j);
        Tensor got = propagate_perturbation(a, q, k, m, zq, ek, zm);
        Tensor m_mean({n_x});
        for (std::size_t t = 0; t < t_count; ++t)
          for (std::size_t j = 0; j < n_x; ++j)
            m_mean.at(j) += m.at(t, j) / double(t_count);
        Tensor expect({n_x});
        for (std::size_t t = 0; t < t_count; ++t)
          for (std::size_t j = 0; j < n_x; ++j)
            expect.at(j) += w_val * (m.at(t, j) - m_mean.at(j)) *
                            kappa.at(t) / double(t_count);
        double err = linf_diff(got, expect);
        {  // identical kappa: exact zero
          Tensor ek_const({t_count, d});
          for (std::size_t t = 0; t < t_count; ++t)
            for (std::size_t j = 0; j < d; ++j)
              ek_const.at(t, j) = 0.07 * k.at(t, j);
          err = std::max(
              err, l2(propagate_perturbation(a, q, k, m, zq, ek_const, zm)));
        }
        {  // zero query: exact zero
          Tensor q0({d});
          err = std::max(err,
                         l2(propagate_perturbation(a, q0, k, m, zq, ek, zm)));
        }
        return err;
      });
}

inline PropertyResult multiplicative_isotropic_statistics(
    std::size_t trials, std::uint64_t seed) {
  // kappa independent of m~: the mean response decays like 1/sqrt(trials)
  PropertyResult res;
  res.name = "theorem8-independent-kappa-mean";
  res.trials = std::max<std::size_t>(trials * 100, 10000);
  res.seed = seed;
  Rng rng = Rng(seed).derive({0x7468656fULL});
  const std::size_t t_count = 8, d = 5, n_x = 3;
  Tensor a = Tensor::full({t_count}, 1.0 / double(t_count));
  Tensor q = rand_vec(d, rng);
  double q2 = 0.0;
  for (std::size_t j = 0; j < d; ++j) q2 += q.at(j) * q.at(j);
  const double w_val = 0.8;
  Tensor k({t_count, d});
  for (std::size_t t = 0; t < t_count; ++t) {
    Tensor r = rand_vec(d, rng);
    double rq = 0.0;
    for (std::size_t j = 0; j < d; ++j) rq += r.at(j) * q.at(j);
    for (std::size_t j = 0; j < d; ++j)
      k.at(t, j) = (w_val / q2) * q.at(j) + r.at(j) - (rq / q2) * q.at(j);
  }
  Tensor m = rand_rows(t_count, n_x, rng);
  Tensor zq({d}), zm({t_count, n_x});
  double acc = 0.0, acc2 = 0.0;
  for (std::size_t trial = 0; trial < res.trials; ++trial) {
    Tensor kappa = rand_vec(t_count, rng, -0.2, 0.2);
    Tensor ek({t_count, d});
    for (std::size_t t = 0; t < t_count; ++t)
      for (std::size_t j = 0; j < d; ++j)
        ek.at(t, j) = kappa.at(t) * k.at(t, j);
    const double r0 = propagate_perturbation(a, q, k, m, zq, ek, zm).at(0);
    acc += r0;
    acc2 += r0 * r0;
  }
  const double mean = acc / double(res.trials);
  const double var =
      std::max(acc2 / double(res.trials) - mean * mean, 1e-30);
  res.worst_err = std::abs(mean);
  res.tolerance = 5.0 * std::sqrt(var / double(res.trials));
  res.pass = res.worst_err <= res.tolerance;
  return res;
}

inline PropertyResult collapse_predicate_vs_recompute(std::size_t trials,
                                                      std::uint64_t seed) {
  // mismatches counted directly; boundary ties inside 1e-9 skipped
  return run_property(
      "theorem7-predicate-vs-recompute", std::max<std::size_t>(trials, 1000),
      seed, 0.0, [](std::size_t, Rng& rng) {
        const std::size_t t_count = 2 + rng.uniform_int(7);
        Tensor w = rand_vec(t_count, rng, -2.0, 2.0);
        std::size_t star = 0;
        for (std::size_t t = 1; t < t_count; ++t)
          if (w.at(t) > w.at(star)) star = t;
        const double kq = rng.uniform(-0.2, 0.2);
        Tensor kappa = rand_vec(t_count, rng, -0.2, 0.2);
        auto res = collapse_threshold(w, star, kq, kappa);
        double mism = 0.0;
        for (std::size_t t = 0; t < t_count; ++t) {
          if (t == star) continue;
          if (res.outcomes[t] == CollapseOutcome::kIndeterminate) continue;
          const double pert_t = (1.0 + kq + kappa.at(t)) * w.at(t);
          const double pert_star = (1.0 + kq + kappa.at(star)) * w.at(star);
          if (std::abs(pert_t - pert_star) <= 1e-9) continue;
          const bool oracle = pert_t > pert_star;
          if ((res.outcomes[t] == CollapseOutcome::kCollapses) != oracle)
            mism += 1.0;
        }
        return mism;
      });
}

inline PropertyResult collapse_vector_oracle(std::size_t trials,
                                             std::uint64_t seed) {
  // with kappa_q = 0 the first-order predicate is exact, so it must agree
  // with recomputing the scores from the perturbed key vectors themselves
  return run_property(
      "theorem7-vector-level-oracle", std::max<std::size_t>(trials, 1000),
      seed, 0.0, [](std::size_t, Rng& rng) {
        const std::size_t t_count = 2 + rng.uniform_int(6);
        const std::size_t d = 2 + rng.uniform_int(6);
        Tensor q = rand_vec(d, rng);
        Tensor k = rand_rows(t_count, d, rng);
        Tensor w({t_count});
        for (std::size_t t = 0; t < t_count; ++t) {
          double s = 0.0;
          for (std::size_t j = 0; j < d; ++j) s += q.at(j) * k.at(t, j);
          w.at(t) = s;
        }
        std::size_t star = 0;
        for (std::size_t t = 1; t < t_count; ++t)
          if (w.at(t) > w.at(star)) star = t;
        Tensor kappa = rand_vec(t_count, rng, -0.2, 0.2);
        auto res = collapse_threshold(w, star, 0.0, kappa);
        double mism = 0.0;
        for (std::size_t t = 0; t < t_count; ++t) {
          if (t == star) continue;
          if (res.outcomes[t] == CollapseOutcome::kIndeterminate) continue;
          double wt = 0.0, ws = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            wt += q.at(j) * (1.0 + kappa.at(t)) * k.at(t, j);
            ws += q.at(j) * (1.0 + kappa.at(star)) * k.at(star, j);
          }
          if (std::abs(wt - ws) <= 1e-9) continue;
          if ((res.outcomes[t] == CollapseOutcome::kCollapses) != (wt > ws))
            mism += 1.0;
        }
        return mism;
      });
}

inline PropertyResult query_only_never_collapses(std::size_t trials,
                                                 std::uint64_t seed) {
  return run_property(
      "theorem7-query-only-stable", trials, seed, 0.0,
      [](std::size_t, Rng& rng) {
        const std::size_t t_count = 2 + rng.uniform_int(7);
        Tensor w = rand_vec(t_count, rng, 0.05, 2.0);
        std::size_t star = 0;
        for (std::size_t t = 1; t < t_count; ++t)
          if (w.at(t) > w.at(star)) star = t;
        Tensor kz({t_count});
        auto res = collapse_threshold(w, star, rng.uniform(-0.2, 0.2), kz);
        return double(res.collapsing.size());
      });
}

inline PropertyResult small_angle_boundary(std::size_t trials,
                                           std::uint64_t seed) {
  return run_property(
      "theorem7-small-angle-boundary", trials, seed, 0.02,
      [](std::size_t, Rng& rng) {
        const double kappa_t = rng.uniform(0.002, 0.02);
        const double theta_pred = std::sqrt(2.0 * kappa_t);
        const double qn = rng.uniform(0.5, 2.0);
        const double kn = rng.uniform(0.5, 2.0);
        auto collapses_at = [&](double theta) {
          const double w_star = qn * kn;
          const double w_t = qn * kn * std::cos(theta);
          return (1.0 + kappa_t) * w_t > w_star;
        };
        double lo = 0.0, hi = 1.0;
        for (int it = 0; it < 60; ++it) {
          const double mid = 0.5 * (lo + hi);
          (collapses_at(mid) ? lo : hi) = mid;
        }
        return std::abs(theta_pred - hi) / hi;
      });
}

inline PropertyResult temperature_monotone(std::size_t trials,
                                           std::uint64_t seed) {
  return run_property(
      "scale-entropy-monotone", std::max<std::size_t>(trials, 100), seed,
      1e-12, [](std::size_t, Rng& rng) {
        const std::size_t n = 2 + rng.uniform_int(7);
        Tensor w = rand_vec(n, rng, -3.0, 3.0);
        const std::vector<double> kappas = {0.1, 0.2, 0.5, 1.0,
                                            2.0, 5.0, 10.0};
        double prev = std::numeric_limits<double>::infinity();
        double worst = 0.0;
        for (double kap : kappas) {
          const double h = entropy(temperature_probe(w, kap));
          worst = std::max(worst, h - prev);
          prev = h;
        }
        return worst;  // positive only if entropy ever increased
      });
}

inline PropertyResult key_bias_invariance(std::size_t trials,
                                          std::uint64_t seed) {
  return run_property(
      "key-bias-invariance", trials, seed, 0.0, [](std::size_t, Rng& rng) {
        const std::size_t n = 3 + rng.uniform_int(5);
        const std::size_t d = 2 + rng.uniform_int(4);
        HeadWeights h;
        h.w_q = rand_rows(d, n, rng);
        h.w_k = rand_rows(d, n, rng);
        h.w_v = rand_rows(d, n, rng);
        h.w_o = rand_rows(n, d, rng);
        h.strategy = NormStrategy::no_norm();
        std::vector<BiasCheckInstance> runs;
        for (int i = 0; i < 4; ++i)
          runs.push_back({rand_vec(n, rng), rand_rows(4, n, rng)});
        Tensor bias = rand_vec(d, rng);
        double err = bias_invariance_check(h, bias, runs) ? 0.0 : 1.0;
        // control: a query bias must generally break invariance
        if (bias_invariance_check(h, bias, runs, true)) err += 1.0;
        return err;
      });
}

inline PropertyResult prenorm_projective_invariance(std::size_t trials,
                                                    std::uint64_t seed) {
  return run_property(
      "prenorm-projective-invariance", trials, seed, 1e-12,
      [](std::size_t, Rng& rng) {
        const std::size_t n = 4 + rng.uniform_int(5);
        const std::size_t d = 2 + rng.uniform_int(4);
        HeadWeights h;
        h.w_q = rand_rows(d, n, rng);
        h.w_k = rand_rows(d, n, rng);
        h.w_v = rand_rows(d, n, rng);
        h.w_o = rand_rows(n, d, rng);
        h.strategy = NormStrategy::pre_norm(
            NormKind::rms(n), NormKind::rms(n), NormKind::rms(n));
        Tensor x = rand_vec(n, rng);
        Tensor senders = rand_rows(4, n, rng);
        const double lambda = rng.uniform(0.1, 10.0);
        Tensor xs({n});
        for (std::size_t j = 0; j < n; ++j) xs.at(j) = lambda * x.at(j);
        return linf_diff(scores(x, senders, h), scores(xs, senders, h));
      });
}

inline PropertyResult norm_geometry(std::size_t trials, std::uint64_t seed) {
  return run_property(
      "norm-sphere-geometry", trials, seed, 1e-10, [](std::size_t, Rng& rng) {
        const std::size_t n = 2 + rng.uniform_int(10);
        Tensor z = rand_vec(n, rng, -3.0, 3.0);
        Tensor r = normalize(z, NormKind::rms(n));
        double err = std::abs(l2(r) - std::sqrt(double(n)));
        Tensor l = normalize(z, NormKind::layer(n));
        double ones_dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) ones_dot += l.at(i);
        err = std::max(err, std::abs(ones_dot) / std::sqrt(double(n)));
        err = std::max(err, std::abs(l2(l) - std::sqrt(double(n))));
        return err;
      });
}

// Separability constructions (the Theorems 1-3 proxy).
inline PropertyResult prenorm_sphere_invariance(std::size_t trials,
                                                std::uint64_t seed) {
  return run_property(
      "separability-prenorm-sphere", trials, seed, 1e-10,
      [](std::size_t, Rng& rng) {
        const std::size_t n = 8;
        HeadWeights h;
        h.w_q = Tensor({2, n});
        h.w_k = Tensor({2, n});
        h.w_q.at(0, 0) = 1.0;
        h.w_q.at(1, 1) = 1.0;
        for (std::size_t i = 0; i < 2; ++i)
          for (std::size_t j = 0; j < 2; ++j)
            h.w_k.at(i, j) = rng.uniform(-1.0, 1.0);
        h.w_v = Tensor({2, n});
        h.w_o = Tensor({n, 2});
        h.strategy = NormStrategy::pre_norm(NormKind::rms(n), NormKind::rms(n),
                                            NormKind::rms(n));
        Tensor senders = rand_rows(5, n, rng);
        const double b_norm = rng.uniform(0.5, 3.0);
        auto make_x = [&](Rng& r) {
          Tensor x({n});
          x.at(0) = 0.9;
          x.at(1) = -0.4;
          Tensor dir = rand_vec(3, r);
          double dn = l2(dir);
          for (std::size_t j = 0; j < 3; ++j)
            x.at(2 + j) = b_norm * dir.at(j) / dn;
          return x;
        };
        Tensor base = make_x(rng);
        Tensor w_base = scores(base, senders, h);
        double err = 0.0;
        for (int rot = 0; rot < 8; ++rot)
          err = std::max(err,
                         linf_diff(scores(make_x(rng), senders, h), w_base));
        // breaking norm constancy scales all scores by the common factor
        const double delta = 0.1;
        Tensor stretched = base.clone();
        for (std::size_t j = 2; j < 5; ++j) stretched.at(j) *= (1.0 + delta);
        const double factor = l2(base) / l2(stretched);
        Tensor w_str = scores(stretched, senders, h);
        for (std::size_t t = 0; t < 5; ++t)
          err = std::max(err,
                         std::abs(w_str.at(t) - w_base.at(t) * factor));
        return err;
      });
}

inline PropertyResult qkvnorm_oblique_invariance(std::size_t trials,
                                                 std::uint64_t seed) {
  return run_property(
      "separability-qkvnorm-oblique", trials, seed, 1e-10,
      [](std::size_t, Rng& rng) {
        const std::size_t n = 6, dim_a = 2;
        std::vector<std::vector<double>> basis(n, std::vector<double>(n));
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j)
            basis[i][j] =
                (i == j ? 1.0 : 0.0) + 0.4 * rng.uniform(-1.0, 1.0);
        auto inv = invert(basis);
        HeadWeights h;
        h.w_q = Tensor({dim_a, n});
        for (std::size_t i = 0; i < dim_a; ++i)
          for (std::size_t j = 0; j < n; ++j) h.w_q.at(i, j) = inv[i][j];
        h.w_k = rand_rows(dim_a, n, rng);
        h.w_v = Tensor({dim_a, n});
        h.w_o = Tensor({n, dim_a});
        h.strategy = NormStrategy::qkv_norm(NormKind::rms(dim_a),
                                            NormKind::rms(dim_a),
                                            NormKind::rms(dim_a));
        Tensor senders = rand_rows(4, n, rng);
        auto make_x = [&](const std::vector<double>& cb) {
          Tensor x({n});
          const std::vector<double> ca = {1.2, -0.7};
          for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t c = 0; c < dim_a; ++c)
              x.at(j) += ca[c] * basis[j][c];
            for (std::size_t c = 0; c < cb.size(); ++c)
              x.at(j) += cb[c] * basis[j][dim_a + c];
          }
          return x;
        };
        Tensor w_base = scores(make_x({0.3, -0.9, 0.5, 0.0}), senders, h);
        double err = 0.0;
        for (int varied = 0; varied < 8; ++varied) {
          std::vector<double> cb(n - dim_a);
          for (double& c : cb) c = rng.uniform(-3.0, 3.0);
          err = std::max(err,
                         linf_diff(scores(make_x(cb), senders, h), w_base));
        }
        return err;
      });
}

inline PropertyResult interference_factor_flags(std::size_t trials,
                                                std::uint64_t seed) {
  return run_property(
      "interference-factor-report", trials, seed, 1e-10,
      [](std::size_t, Rng& rng) {
        const std::size_t n = 6;
        // orthogonal parts by construction
        Tensor a({n}), b({n});
        const double na = rng.uniform(0.5, 2.0), nb = rng.uniform(0.5, 2.0);
        a.at(0) = na;
        b.at(3) = nb;
        auto rep = interference_factor({a, b}, {na, nb});
        double err = std::abs(rep.factor - 1.0 / std::sqrt(na * na + nb * nb));
        if (!rep.pairwise_orthogonal) err += 1.0;
        if (!rep.norms_match_reference) err += 1.0;
        return err;
      });
}

}  // namespace theory

// Runs the full property battery; any failure flips all_pass (and the CLI
// exit status), with (property, seed, trial) identifying the instance for a
// deterministic replay.
inline PerturbationReport verify_theory(std::size_t trials = 100,
                                        std::uint64_t seed = 2025) {
  PerturbationReport report;
  using namespace theory;
  const std::vector<std::function<PropertyResult(std::size_t, std::uint64_t)>>
      battery = {softmax_row_normalisation,
                 softmax_shift_invariance,
                 propagators_vs_finite_difference,
                 sparse_limit,
                 isotropic_lemmas,
                 multiplicative_isotropic,
                 multiplicative_isotropic_statistics,
                 collapse_predicate_vs_recompute,
                 collapse_vector_oracle,
                 query_only_never_collapses,
                 small_angle_boundary,
                 temperature_monotone,
                 key_bias_invariance,
                 prenorm_projective_invariance,
                 norm_geometry,
                 prenorm_sphere_invariance,
                 qkvnorm_oblique_invariance,
                 interference_factor_flags};
  for (const auto& prop : battery) {
    report.properties.push_back(prop(trials, seed));
    report.all_pass = report.all_pass && report.properties.back().pass;
  }
  return report;
}

// Re-runs one property at its recorded (seed, trials) coordinates; the
// deterministic streams make the worst instance reproduce exactly.
inline PropertyResult replay_property(const std::string& name,
                                      std::size_t trials, std::uint64_t seed) {
  PerturbationReport rep = verify_theory(trials, seed);
  for (const auto& p : rep.properties)
    if (p.name == name) return p;
  throw std::invalid_argument("replay: unknown property " + name);
}

}  // namespace normlab
