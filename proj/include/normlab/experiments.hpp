#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "normlab/attention.hpp"
#include "normlab/model.hpp"
#include "normlab/rng.hpp"
#include "normlab/task.hpp"
#include "normlab/tensor.hpp"
#include "normlab/trainer.hpp"

// Experiment harness: multiplicative norm-noise injection, accuracy-vs-noise
// sweeps with sparse/non-sparse head filters, circuit-collapse probability,
// attention-weighted embedding-norm spread, sparsity histograms, and the
// model-free theory verification battery.

namespace normlab {

constexpr int kReportSchemaVersion = 1;

enum class NoiseTarget { kQuery, kKey, kMessage };
enum class HeadFilter { kAll, kSparse, kNonSparse };
enum class NoiseMode { kAllLayersJoint, kPerLayerIndependent };

// "RMS noise on the norm": every targeted vector is scaled by (1+u) with
// u ~ Uniform(-sqrt(3) rms, +sqrt(3) rms), which has RMS(u) = rms exactly.
struct NoiseSpec {
  double rms = 0.0;
  std::set<NoiseTarget> targets = {NoiseTarget::kQuery, NoiseTarget::kKey,
                                   NoiseTarget::kMessage};
  HeadFilter head_filter = HeadFilter::kAll;
  NoiseMode mode = NoiseMode::kAllLayersJoint;
  std::uint64_t seed = 0;
  double sparse_threshold = 0.95;
  double nonsparse_threshold = 0.70;

  void check() const {
    if (rms < 0.0) throw std::invalid_argument("noise: rms must be >= 0");
  }
};

namespace detail {

inline double draw_u(Rng& rng, double rms) {
  const double half = std::sqrt(3.0) * rms;
  return rng.uniform(-half, half);
}

// Row gate from the clean attention: a distribution participates when its
// clean max passes the filter.
inline std::vector<bool> filter_gate(const Tensor& clean_attn,
                                     const NoiseSpec& spec) {
  const std::size_t t = clean_attn.rows();
  std::vector<bool> gate(t, true);
  if (spec.head_filter == HeadFilter::kAll) return gate;
  for (std::size_t i = 0; i < t; ++i) {
    double mx = 0.0;
    for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, clean_attn.at(i, j));
    gate[i] = spec.head_filter == HeadFilter::kSparse
                  ? mx >= spec.sparse_threshold
                  : mx < spec.nonsparse_threshold;
  }
  return gate;
}

}  // namespace detail

// Draws one full multiplicative-noise plan for a sequence of length t_count.
// Fresh u per vector per token per head per layer, in a fixed order, so the
// plan is a pure function of the stream.
inline NoisePlan build_noise_plan(const ModelState& st, std::size_t t_count,
                                  const NoiseSpec& spec, Rng& stream,
                                  const SequenceTrace* clean) {
  spec.check();
  NoisePlan plan;
  plan.heads.resize(st.config.n_layer);
  for (std::size_t l = 0; l < st.config.n_layer; ++l) {
    plan.heads[l].resize(st.config.heads);
    for (std::size_t h = 0; h < st.config.heads; ++h) {
      HeadNoise& hn = plan.heads[l][h];
      if (spec.rms == 0.0) continue;
      if (spec.targets.count(NoiseTarget::kQuery)) {
        hn.u_q.resize(t_count);
        for (auto& u : hn.u_q) u = detail::draw_u(stream, spec.rms);
      }
      if (spec.targets.count(NoiseTarget::kKey)) {
        hn.u_k.resize(t_count);
        for (auto& u : hn.u_k) u = detail::draw_u(stream, spec.rms);
      }
      if (spec.targets.count(NoiseTarget::kMessage)) {
        hn.u_m.resize(t_count);
        for (auto& u : hn.u_m) u = detail::draw_u(stream, spec.rms);
      }
      if (spec.head_filter != HeadFilter::kAll) {
        if (!clean)
          throw std::invalid_argument(
              "noise: head filter needs the clean trace");
        hn.gate =
            detail::filter_gate(clean->layers[l].heads[h].attention, spec);
      }
    }
  }
  return plan;
}

struct NoiseOutcome {
  Tensor logits;
  SequenceTrace trace;
};

// One noisy forward in all-layers-joint mode: noise is injected into the
// live pass, so errors compound with depth. Head filtering is decided by a
// clean pass first.
inline NoiseOutcome inject_noise(const ModelState& st,
                                 const std::vector<std::size_t>& ids,
                                 const NoiseSpec& spec, Rng& stream) {
  spec.check();
  if (spec.mode != NoiseMode::kAllLayersJoint)
    throw std::invalid_argument(
        "inject_noise: per-layer mode is served by per_layer_attention");
  std::optional<SequenceTrace> clean;
  if (spec.head_filter != HeadFilter::kAll) {
    CaptureSpec cs;
    cs.attention = true;
    clean.emplace(capture(st, ids, 0, cs));
  }
  NoisePlan plan = build_noise_plan(st, ids.size(), spec, stream,
                                    clean ? &*clean : nullptr);
  NoiseOutcome out;
  CaptureSpec cs;
  cs.attention = true;
  out.logits = forward_sequence(st, ids, 0, nullptr, &plan, &out.trace, &cs);
  return out;
}

// Per-layer-independent q/k perturbation: each layer's q and k are
// recomputed from the clean inputs, noise is applied to that layer only,
// and its attention is compared against the clean run. Returns, per layer
// and head, the (clean, noisy) attention pair.
struct PerLayerAttention {
  std::vector<std::vector<Tensor>> clean;  // [layer][head]
  std::vector<std::vector<Tensor>> noisy;
};

inline PerLayerAttention per_layer_attention_with_plan(
    const ModelState& st, const SequenceTrace& trace, const NoisePlan& plan) {
  PerLayerAttention out;
  out.clean.resize(st.config.n_layer);
  out.noisy.resize(st.config.n_layer);
  for (std::size_t l = 0; l < st.config.n_layer; ++l) {
    StrategyInputs in = strategy_inputs(st, l, trace.layers[l].input, nullptr);
    for (std::size_t h = 0; h < st.config.heads; ++h) {
      HeadTensors ht = head_tensors(st, l, h, in, nullptr);
      Tensor w = matmul_nt(ht.q, ht.k);
      const HeadNoise* hn = plan.at(l, h);
      if (hn) detail::apply_score_noise(w, *hn);
      Tensor a = softmax_causal(scale(w, st.layers[l].ckpt_w.factor()));
      out.clean[l].push_back(trace.layers[l].heads[h].attention);
      out.noisy[l].push_back(a);
    }
  }
  return out;
}

inline PerLayerAttention per_layer_attention(const ModelState& st,
                                             const std::vector<std::size_t>& ids,
                                             const NoiseSpec& spec,
                                             Rng& stream) {
  spec.check();
  CaptureSpec cs;
  cs.attention = true;
  cs.embeddings = true;
  SequenceTrace trace = capture(st, ids, 0, cs);
  NoisePlan plan = build_noise_plan(st, ids.size(), spec, stream, &trace);
  return per_layer_attention_with_plan(st, trace, plan);
}

// ---------------------------------------------------------------------------
// Accuracy vs noise
// ---------------------------------------------------------------------------

struct NoiseCurvePoint {
  double rms = 0.0;
  double accuracy = 0.0;
  double accuracy_stderr = 0.0;
  double accuracy_no_end = 0.0;
  double accuracy_no_end_stderr = 0.0;
};

struct NoiseCurve {
  std::vector<NoiseCurvePoint> points;
};

// Per-token accuracy at each rms level, with and without the end-sequence
// token, repeated over noise seeds; streams derive from
// (master seed, level index, repeat index).
inline NoiseCurve accuracy_vs_noise(const ModelState& st,
                                    const TaskConfig& task,
                                    const std::vector<double>& grid,
                                    const NoiseSpec& spec_template,
                                    std::size_t n_points = 256,
                                    std::size_t repeats = 3) {
  if (grid.empty()) throw std::invalid_argument("perturb: empty grid");
  auto samples = eval_samples(task, n_points);
  NoiseCurve curve;
  Rng master(spec_template.seed);
  for (std::size_t li = 0; li < grid.size(); ++li) {
    NoiseSpec spec = spec_template;
    spec.rms = grid[li];
    std::vector<double> accs, accs_ne;
    for (std::size_t rep = 0; rep < repeats; ++rep) {
      Rng level_stream = master.derive({li, rep});
      std::size_t idx = 0;
      std::vector<Tensor> cached_logits;
      cached_logits.reserve(samples.size());
      for (const Sample& s : samples) {
        Rng srng = level_stream.derive({idx++});
        if (spec.rms == 0.0) {
          cached_logits.push_back(forward_sequence(st, s.input_ids, 0));
        } else {
          cached_logits.push_back(
              inject_noise(st, s.input_ids, spec, srng).logits);
        }
      }
      std::size_t cursor = 0;
      auto logits_of = [&](const Sample&) { return cached_logits[cursor++]; };
      cursor = 0;
      AccuracyEstimate a = accuracy_over(samples, logits_of, false);
      cursor = 0;
      AccuracyEstimate a_ne = accuracy_over(samples, logits_of, true);
      accs.push_back(a.accuracy);
      accs_ne.push_back(a_ne.accuracy);
    }
    auto mean_stderr = [](const std::vector<double>& xs) {
      double mu = std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
      double var = 0.0;
      for (double x : xs) var += (x - mu) * (x - mu);
      var = xs.size() > 1 ? var / double(xs.size() - 1) : 0.0;
      return std::pair<double, double>(mu,
                                       std::sqrt(var / double(xs.size())));
    };
    NoiseCurvePoint pt;
    pt.rms = grid[li];
    std::tie(pt.accuracy, pt.accuracy_stderr) = mean_stderr(accs);
    std::tie(pt.accuracy_no_end, pt.accuracy_no_end_stderr) =
        mean_stderr(accs_ne);
    curve.points.push_back(pt);
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Circuit collapse
// ---------------------------------------------------------------------------

struct CollapseLevel {
  double rms = 0.0;
  std::size_t sparse_count = 0;
  std::size_t collapse_count = 0;
  std::size_t strict_count = 0;
  double probability = 0.0;
  double strict_probability = 0.0;
};

struct CollapseReport {
  std::vector<CollapseLevel> levels;
  bool no_sparse_found = false;
};

// Collapse probability under per-layer-independent q/k noise: over every
// attention distribution whose clean max is sparse (first row excluded,
// where the begin token attends to itself), the fraction whose argmax moves.
// The strict variant additionally requires the perturbed distribution to
// remain sparse.
inline CollapseReport collapse_probability(const ModelState& st,
                                           const TaskConfig& task,
                                           const std::vector<double>& grid,
                                           std::size_t n_points = 256,
                                           std::uint64_t seed = 0,
                                           std::size_t repeats = 2,
                                           double sparse_threshold = 0.95) {
  if (grid.empty()) throw std::invalid_argument("collapse: empty grid");
  auto samples = eval_samples(task, n_points);
  CollapseReport report;
  Rng master(seed);
  for (std::size_t li = 0; li < grid.size(); ++li) {
    CollapseLevel level;
    level.rms = grid[li];
    NoiseSpec spec;
    spec.rms = grid[li];
    spec.targets = {NoiseTarget::kQuery, NoiseTarget::kKey};
    spec.mode = NoiseMode::kPerLayerIndependent;
    spec.sparse_threshold = sparse_threshold;
    for (std::size_t rep = 0; rep < repeats; ++rep) {
      Rng level_stream = master.derive({li, rep});
      std::size_t idx = 0;
      for (const Sample& s : samples) {
        Rng srng = level_stream.derive({idx++});
        PerLayerAttention pla = per_layer_attention(st, s.input_ids, spec,
                                                    srng);
        const std::size_t len = s.input_ids.size();
        for (std::size_t l = 0; l < pla.clean.size(); ++l)
          for (std::size_t h = 0; h < pla.clean[l].size(); ++h)
            for (std::size_t i = 1; i < len; ++i) {
              Tensor clean_row({i + 1}), noisy_row({i + 1});
              for (std::size_t j = 0; j <= i; ++j) {
                clean_row.at(j) = pla.clean[l][h].at(i, j);
                noisy_row.at(j) = pla.noisy[l][h].at(i, j);
              }
              auto verdict =
                  detect_collapse(clean_row, noisy_row, sparse_threshold);
              if (!verdict) continue;
              ++level.sparse_count;
              if (verdict->collapsed) {
                ++level.collapse_count;
                if (verdict->strict_sparse) ++level.strict_count;
              }
            }
      }
    }
    if (level.sparse_count > 0) {
      level.probability =
          double(level.collapse_count) / double(level.sparse_count);
      level.strict_probability =
          double(level.strict_count) / double(level.sparse_count);
    }
    report.levels.push_back(level);
  }
  report.no_sparse_found = true;
  for (const auto& lv : report.levels)
    if (lv.sparse_count > 0) report.no_sparse_found = false;
  return report;
}

// ---------------------------------------------------------------------------
// Embedding spread
// ---------------------------------------------------------------------------

struct HeadSpread {
  std::size_t layer = 0;
  std::size_t head = 0;
  double median = 0.0;
  double q05 = 1.0;
  double q95 = 1.0;
  double half_width = 0.0;  // of the central-90% interval of |y|/median
  bool degenerate = false;  // all attention on the begin token
};

struct SpreadReport {
  std::vector<HeadSpread> heads;
  double mean_half_width = 0.0;
};

// Smallest value whose cumulative weight reaches p of the total.
inline double weighted_quantile(std::vector<std::pair<double, double>> vw,
                                double p) {
  std::sort(vw.begin(), vw.end());
  double total = 0.0;
  for (const auto& [v, w] : vw) total += w;
  double acc = 0.0;
  for (const auto& [v, w] : vw) {
    acc += w;
    if (acc >= p * total) return v;
  }
  return vw.back().first;
}

// Median-normalised central-90% summary of a weighted (value, weight) pool.
inline HeadSpread spread_of_pool(
    const std::vector<std::pair<double, double>>& pool) {
  HeadSpread hs;
  double total_w = 0.0;
  for (const auto& [v, w] : pool) total_w += w;
  if (pool.empty() || total_w <= 0.0) {
    hs.degenerate = true;
    return hs;
  }
  hs.median = weighted_quantile(pool, 0.5);
  std::vector<std::pair<double, double>> ratios;
  ratios.reserve(pool.size());
  for (const auto& [v, w] : pool) ratios.emplace_back(v / hs.median, w);
  hs.q05 = weighted_quantile(ratios, 0.05);
  hs.q95 = weighted_quantile(ratios, 0.95);
  hs.half_width = 0.5 * (hs.q95 - hs.q05);
  return hs;
}

// Attention-weighted spread of sender-embedding norms per layer and head:
// each |y_t| is weighted by the total attention it receives (summed over
// queries and samples), the begin token is excluded, values are normalised
// by the weighted median, and the central-90% interval is reported.
inline SpreadReport embedding_spread(const ModelState& st,
                                     const TaskConfig& task,
                                     std::size_t n_points = 256) {
  auto samples = eval_samples(task, n_points);
  const std::size_t n_layer = st.config.n_layer;
  const std::size_t n_head = st.config.heads;
  std::vector<std::vector<std::vector<std::pair<double, double>>>> pools(
      n_layer,
      std::vector<std::vector<std::pair<double, double>>>(n_head));

  CaptureSpec cs;
  cs.attention = true;
  cs.embeddings = true;
  for (const Sample& s : samples) {
    SequenceTrace trace = capture(st, s.input_ids, 0, cs);
    const std::size_t len = s.input_ids.size();
    for (std::size_t l = 0; l < n_layer; ++l) {
      const Tensor& x = trace.layers[l].input;
      for (std::size_t h = 0; h < n_head; ++h) {
        const Tensor& a = trace.layers[l].heads[h].attention;
        for (std::size_t t = 1; t < len; ++t) {  // sender, begin excluded
          double norm = 0.0;
          for (std::size_t j = 0; j < x.cols(); ++j)
            norm += x.at(t, j) * x.at(t, j);
          double weight = 0.0;
          for (std::size_t i = t; i < len; ++i) weight += a.at(i, t);
          pools[l][h].emplace_back(std::sqrt(norm), weight);
        }
      }
    }
  }

  SpreadReport report;
  double acc = 0.0;
  std::size_t counted = 0;
  for (std::size_t l = 0; l < n_layer; ++l)
    for (std::size_t h = 0; h < n_head; ++h) {
      HeadSpread hs = spread_of_pool(pools[l][h]);
      hs.layer = l;
      hs.head = h;
      report.heads.push_back(hs);
      if (!hs.degenerate) {
        acc += hs.half_width;
        ++counted;
      }
    }
  report.mean_half_width = counted ? acc / double(counted) : 0.0;
  return report;
}

// ---------------------------------------------------------------------------
// Sparsity histogram
// ---------------------------------------------------------------------------

struct SparsityHistogram {
  std::vector<double> edges;   // bin i covers [edges[i], edges[i+1])
  std::vector<std::size_t> counts;
  std::size_t total = 0;

  void insert(double value) {
    for (std::size_t b = 0; b + 1 < edges.size(); ++b)
      if (value >= edges[b] && value < edges[b + 1]) {
        ++counts[b];
        break;
      }
    ++total;
  }

  double mass_at_least(double threshold) const {
    double m = 0.0;
    for (std::size_t i = 0; i + 1 < edges.size(); ++i)
      if (edges[i] >= threshold) m += double(counts[i]);
    return total ? m / double(total) : 0.0;
  }
};

inline std::vector<double> default_bin_edges() {
  std::vector<double> e;
  for (int i = 0; i <= 20; ++i) e.push_back(double(i) / 20.0);
  e.back() = 1.0 + 1e-12;  // max attention of exactly 1 lands in the top bin
  return e;
}

// Histogram of max_t a_t over every attention distribution, first row
// excluded.
inline SparsityHistogram sparsity_histogram(
    const ModelState& st, const TaskConfig& task, std::size_t n_points = 256,
    std::vector<double> edges = default_bin_edges()) {
  SparsityHistogram hist;
  hist.edges = edges;
  hist.counts.assign(edges.size() - 1, 0);
  auto samples = eval_samples(task, n_points);
  CaptureSpec cs;
  cs.attention = true;
  for (const Sample& s : samples) {
    SequenceTrace trace = capture(st, s.input_ids, 0, cs);
    const std::size_t len = s.input_ids.size();
    for (const auto& layer : trace.layers)
      for (const auto& head : layer.heads)
        for (std::size_t i = 1; i < len; ++i) {
          double mx = 0.0;
          for (std::size_t j = 0; j <= i; ++j)
            mx = std::max(mx, head.attention.at(i, j));
          hist.insert(mx);
        }
  }
  return hist;
}

// ---------------------------------------------------------------------------
// Report serialisation
// ---------------------------------------------------------------------------

inline void write_jsonl(const std::string& path,
                        const std::vector<nlohmann::json>& records) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("report: cannot open " + path);
  for (auto rec : records) {
    rec["schema_version"] = kReportSchemaVersion;
    f << rec.dump() << "\n";
  }
}

inline void write_curve_csv(const std::string& path,
                            const std::vector<std::array<double, 3>>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("report: cannot open " + path);
  f << "rms,metric,stderr\n";
  f.precision(17);
  for (const auto& r : rows) f << r[0] << "," << r[1] << "," << r[2] << "\n";
}

inline nlohmann::json curve_to_json(const NoiseCurve& c) {
  nlohmann::json points = nlohmann::json::array();
  for (const auto& p : c.points)
    points.push_back({{"rms", p.rms},
                      {"accuracy", p.accuracy},
                      {"accuracy_stderr", p.accuracy_stderr},
                      {"accuracy_no_end", p.accuracy_no_end},
                      {"accuracy_no_end_stderr", p.accuracy_no_end_stderr}});
  return {{"kind", "noise_curve"}, {"points", points}};
}

inline nlohmann::json collapse_to_json(const CollapseReport& r) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& lv : r.levels)
    levels.push_back({{"rms", lv.rms},
                      {"sparse_count", lv.sparse_count},
                      {"collapse_count", lv.collapse_count},
                      {"strict_count", lv.strict_count},
                      {"probability", lv.probability},
                      {"strict_probability", lv.strict_probability}});
  return {{"kind", "collapse"},
          {"levels", levels},
          {"no_sparse_found", r.no_sparse_found}};
}

inline nlohmann::json spread_to_json(const SpreadReport& r) {
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : r.heads)
    heads.push_back({{"layer", h.layer},
                     {"head", h.head},
                     {"median", h.median},
                     {"q05", h.q05},
                     {"q95", h.q95},
                     {"half_width", h.half_width},
                     {"degenerate", h.degenerate}});
  return {{"kind", "spread"},
          {"heads", heads},
          {"mean_half_width", r.mean_half_width}};
}

inline nlohmann::json histogram_to_json(const SparsityHistogram& h) {
  return {{"kind", "sparsity_histogram"},
          {"edges", h.edges},
          {"counts", h.counts},
          {"total", h.total}};
}

}  // namespace normlab
