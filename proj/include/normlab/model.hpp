#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "normlab/attention.hpp"
#include "normlab/rng.hpp"
#include "normlab/task.hpp"
#include "normlab/tensor.hpp"

// Decoder transformer: token embeddings plus trainable cyclic positional
// encodings, checkpoint calibration layers, causally masked attention blocks
// under a configurable normalisation strategy, feed-forward blocks, and an
// MLP head onto the 17 logits.

namespace normlab {

struct ModelConfig {
  std::size_t n_freq = 16;
  std::size_t n_emb = 128;
  std::size_t n_layer = 4;
  std::size_t heads = 4;
  std::size_t n_qkv = 32;
  std::size_t n_ff = 128;
  std::vector<std::size_t> mlp_widths = {128, 128};
  StrategyKind strategy = StrategyKind::kPreNorm;
  NormVariant strategy_norm = NormVariant::kRms;
  std::uint64_t seed = 100;
  long long offset_range = 50;  // positional offsets drawn from [0, range]

  // calibration targets
  double sigma_type = 0.5;
  double sigma_x = 1.0;
  double sigma_w = 0.1;
  double sigma_dx = 0.05;  // relative to the residual stream

  void check() const {
    if (2 * n_freq > n_emb)
      throw std::invalid_argument("model: need 2*n_freq <= n_emb");
    if (n_emb == 0 || n_layer == 0 || heads == 0 || n_qkv == 0 || n_ff == 0 ||
        n_freq == 0 || mlp_widths.empty())
      throw std::invalid_argument("model: sizes must be >= 1");
  }
};

inline ModelConfig model_preset(const std::string& name) {
  ModelConfig c;
  if (name == "baseline") {
    c.n_freq = 32; c.n_emb = 512; c.n_layer = 10; c.heads = 12;
    c.n_qkv = 64; c.n_ff = 512; c.mlp_widths = {512, 512};
  } else if (name == "alternate") {
    c.n_freq = 32; c.n_emb = 512; c.n_layer = 8; c.heads = 12;
    c.n_qkv = 64; c.n_ff = 512; c.mlp_widths = {512, 512};
  } else if (name == "large") {
    c.n_freq = 32; c.n_emb = 1024; c.n_layer = 12; c.heads = 16;
    c.n_qkv = 64; c.n_ff = 512; c.mlp_widths = {512, 512};
  } else if (name == "desk") {
    c.n_freq = 16; c.n_emb = 128; c.n_layer = 4; c.heads = 4;
    c.n_qkv = 32; c.n_ff = 128; c.mlp_widths = {128, 128};
  } else {
    throw std::invalid_argument("model_preset: unknown preset " + name);
  }
  return c;
}

// Fixed scale learned from the first training batch: measures the standard
// deviation of its input there and pins it to target_sigma from then on.
struct CheckpointLayer {
  double target_sigma = 1.0;
  std::optional<double> scale;

  double factor() const {
    if (!scale)
      throw std::runtime_error("checkpoint: forward before calibration");
    return *scale;
  }
  // Scale as seen during calibration: identity until a value is pinned.
  double live() const { return scale.value_or(1.0); }
  // Folds a fresh correction into the pinned scale.
  void adjust(double correction) { scale = live() * correction; }
};

struct AttentionHeadParams {
  // stored input-major so the forward runs x . W
  Tensor wq;  // [n_emb x n_qkv]
  Tensor wk;  // [n_emb x n_qkv]
  Tensor wv;  // [n_emb x n_qkv]
  Tensor wo;  // [n_qkv x n_emb]
  // qkv-norm gains (defined only under that strategy)
  Tensor alpha_q, alpha_k, alpha_v;  // [n_qkv]
};

struct AttentionLayerParams {
  std::vector<AttentionHeadParams> heads;
  // pre-norm gains on the layer input (defined only under that strategy)
  Tensor alpha_x, alpha_yk, alpha_yv;  // [n_emb]
  CheckpointLayer ckpt_q{1.0, {}}, ckpt_k{1.0, {}}, ckpt_v{1.0, {}};
  CheckpointLayer ckpt_w{0.1, {}};
  CheckpointLayer ckpt_dx{0.05, {}};
};

struct FeedForwardParams {
  Tensor ln_gain, ln_bias;  // [n_emb]
  Tensor w1, b1;            // [n_emb x n_ff], [n_ff]
  Tensor w2, b2;            // [n_ff x n_emb], [n_emb]
};

struct MlpHeadParams {
  Tensor ln_gain, ln_bias;
  std::vector<Tensor> w;  // hidden layers then final projection to 17
  std::vector<Tensor> b;
};

struct ModelState {
  ModelConfig config;
  Tensor tok_emb;    // [17 x n_emb]
  Tensor pos_freqs;  // [n_freq], trainable angular frequencies
  CheckpointLayer ckpt_type{0.5, {}};
  CheckpointLayer ckpt_x{1.0, {}};
  std::vector<AttentionLayerParams> layers;
  std::vector<FeedForwardParams> ffs;
  MlpHeadParams head;
  std::array<std::uint64_t, 4> train_rng_state{};  // persisted for resumption
  bool calibrated = false;

  // Stable, ordered registry of every trainable tensor.
  std::vector<std::pair<std::string, Tensor>> parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_emb", tok_emb);
    out.emplace_back("pos_freqs", pos_freqs);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string lp = "l" + std::to_string(l) + ".";
      const auto& att = layers[l];
      if (config.strategy == StrategyKind::kPreNorm) {
        out.emplace_back(lp + "alpha_x", att.alpha_x);
        out.emplace_back(lp + "alpha_yk", att.alpha_yk);
        out.emplace_back(lp + "alpha_yv", att.alpha_yv);
      }
      for (std::size_t h = 0; h < att.heads.size(); ++h) {
        const std::string hp = lp + "h" + std::to_string(h) + ".";
        out.emplace_back(hp + "wq", att.heads[h].wq);
        out.emplace_back(hp + "wk", att.heads[h].wk);
        out.emplace_back(hp + "wv", att.heads[h].wv);
        out.emplace_back(hp + "wo", att.heads[h].wo);
        if (config.strategy == StrategyKind::kQkvNorm) {
          out.emplace_back(hp + "alpha_q", att.heads[h].alpha_q);
          out.emplace_back(hp + "alpha_k", att.heads[h].alpha_k);
          out.emplace_back(hp + "alpha_v", att.heads[h].alpha_v);
        }
      }
      const auto& ff = ffs[l];
      out.emplace_back(lp + "ff.ln_gain", ff.ln_gain);
      out.emplace_back(lp + "ff.ln_bias", ff.ln_bias);
      out.emplace_back(lp + "ff.w1", ff.w1);
      out.emplace_back(lp + "ff.b1", ff.b1);
      out.emplace_back(lp + "ff.w2", ff.w2);
      out.emplace_back(lp + "ff.b2", ff.b2);
    }
    out.emplace_back("head.ln_gain", head.ln_gain);
    out.emplace_back("head.ln_bias", head.ln_bias);
    for (std::size_t i = 0; i < head.w.size(); ++i) {
      out.emplace_back("head.w" + std::to_string(i), head.w[i]);
      out.emplace_back("head.b" + std::to_string(i), head.b[i]);
    }
    return out;
  }

  // Spec-oriented view of one trained head ([n_qkv x n_emb] weight layout),
  // used by the analysis-side cross checks.
  HeadWeights head_weights(std::size_t layer, std::size_t h) const {
    const auto& p = layers.at(layer).heads.at(h);
    auto transpose = [](const Tensor& m) {
      Tensor out({m.cols(), m.rows()});
      for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out.at(j, i) = m.at(i, j);
      return out;
    };
    HeadWeights w;
    w.w_q = transpose(p.wq);
    w.w_k = transpose(p.wk);
    w.w_v = transpose(p.wv);
    w.w_o = transpose(p.wo);
    const auto& att = layers.at(layer);
    const NormVariant nv = config.strategy_norm;
    auto as_kind = [nv](const Tensor& gain) {
      return NormKind{nv, gain.clone()};
    };
    switch (config.strategy) {
      case StrategyKind::kNoNorm:
        w.strategy = NormStrategy::no_norm();
        break;
      case StrategyKind::kPreNorm:
        w.strategy = NormStrategy::pre_norm(
            as_kind(att.alpha_x), as_kind(att.alpha_yk), as_kind(att.alpha_yv));
        break;
      case StrategyKind::kQkvNorm:
        w.strategy = NormStrategy::qkv_norm(
            as_kind(p.alpha_q), as_kind(p.alpha_k), as_kind(p.alpha_v));
        break;
    }
    return w;
  }
};

namespace detail {

inline Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out,
                             Rng& rng) {
  const double limit = std::sqrt(6.0 / double(fan_in + fan_out));
  return Tensor::uniform({fan_in, fan_out}, -limit, limit, rng);
}

}  // namespace detail

// Uniform initialisation of the attention maps with limits chosen so the
// initial score and update variances land near their calibration targets;
// everything dense is Glorot uniform, gains start at 1, biases at 0.
inline ModelState init(const ModelConfig& config) {
  config.check();
  ModelState st;
  st.config = config;
  Rng rng(config.seed);

  st.tok_emb = detail::glorot_uniform(Vocab::kSize, config.n_emb, rng);
  st.tok_emb.set_requires_grad();

  // angular frequencies from a base-e log series of periods spanning 3..1e3
  st.pos_freqs = Tensor({config.n_freq});
  for (std::size_t j = 0; j < config.n_freq; ++j) {
    const double frac =
        config.n_freq == 1 ? 0.0 : double(j) / double(config.n_freq - 1);
    const double period = 3.0 * std::exp(frac * std::log(1000.0 / 3.0));
    st.pos_freqs.at(j) = 2.0 * M_PI / period;
  }
  st.pos_freqs.set_requires_grad();

  const double sigma_qk = std::pow(
      config.sigma_w / std::pow(double(config.n_qkv), 3.0), 0.25);
  const double lim_qk = std::sqrt(3.0) * sigma_qk;
  const double lim_v = std::sqrt(3.0 / double(config.n_qkv));
  const double lim_o = std::sqrt(3.0 / double(config.heads * config.n_qkv));

  for (std::size_t l = 0; l < config.n_layer; ++l) {
    AttentionLayerParams att;
    att.ckpt_q = {config.sigma_x, {}};
    att.ckpt_k = {config.sigma_x, {}};
    att.ckpt_v = {config.sigma_x, {}};
    att.ckpt_w = {config.sigma_w, {}};
    att.ckpt_dx = {config.sigma_dx, {}};
    if (config.strategy == StrategyKind::kPreNorm) {
      att.alpha_x = Tensor::full({config.n_emb}, 1.0).set_requires_grad();
      att.alpha_yk = Tensor::full({config.n_emb}, 1.0).set_requires_grad();
      att.alpha_yv = Tensor::full({config.n_emb}, 1.0).set_requires_grad();
    }
    for (std::size_t h = 0; h < config.heads; ++h) {
      AttentionHeadParams hp;
      hp.wq = Tensor::uniform({config.n_emb, config.n_qkv}, -lim_qk, lim_qk,
                              rng).set_requires_grad();
      hp.wk = Tensor::uniform({config.n_emb, config.n_qkv}, -lim_qk, lim_qk,
                              rng).set_requires_grad();
      hp.wv = Tensor::uniform({config.n_emb, config.n_qkv}, -lim_v, lim_v,
                              rng).set_requires_grad();
      hp.wo = Tensor::uniform({config.n_qkv, config.n_emb}, -lim_o, lim_o,
                              rng).set_requires_grad();
      if (config.strategy == StrategyKind::kQkvNorm) {
        hp.alpha_q = Tensor::full({config.n_qkv}, 1.0).set_requires_grad();
        hp.alpha_k = Tensor::full({config.n_qkv}, 1.0).set_requires_grad();
        hp.alpha_v = Tensor::full({config.n_qkv}, 1.0).set_requires_grad();
      }
      att.heads.push_back(std::move(hp));
    }
    st.layers.push_back(std::move(att));

    FeedForwardParams ff;
    ff.ln_gain = Tensor::full({config.n_emb}, 1.0).set_requires_grad();
    ff.ln_bias = Tensor::zeros({config.n_emb}).set_requires_grad();
    ff.w1 = detail::glorot_uniform(config.n_emb, config.n_ff, rng)
                .set_requires_grad();
    ff.b1 = Tensor::zeros({config.n_ff}).set_requires_grad();
    ff.w2 = detail::glorot_uniform(config.n_ff, config.n_emb, rng)
                .set_requires_grad();
    ff.b2 = Tensor::zeros({config.n_emb}).set_requires_grad();
    st.ffs.push_back(std::move(ff));
  }

  st.head.ln_gain = Tensor::full({config.n_emb}, 1.0).set_requires_grad();
  st.head.ln_bias = Tensor::zeros({config.n_emb}).set_requires_grad();
  std::size_t width = config.n_emb;
  for (std::size_t mw : config.mlp_widths) {
    st.head.w.push_back(
        detail::glorot_uniform(width, mw, rng).set_requires_grad());
    st.head.b.push_back(Tensor::zeros({mw}).set_requires_grad());
    width = mw;
  }
  st.head.w.push_back(
      detail::glorot_uniform(width, Vocab::kSize, rng).set_requires_grad());
  st.head.b.push_back(Tensor::zeros({Vocab::kSize}).set_requires_grad());

  st.train_rng_state = Rng(config.seed).derive({0x6f666673ULL}).state();
  return st;
}

// Multiplicative norm noise for one head at one layer: every q_i, k_j, m_j
// vector is scaled by (1 + u); gate restricts the effect to the attention
// rows it lists (empty gate = every row).
struct HeadNoise {
  std::vector<double> u_q, u_k, u_m;  // empty = untouched
  std::vector<bool> gate;
};

struct NoisePlan {
  std::vector<std::vector<HeadNoise>> heads;  // [layer][head]

  const HeadNoise* at(std::size_t layer, std::size_t head) const {
    if (layer >= heads.size() || head >= heads[layer].size()) return nullptr;
    return &heads[layer][head];
  }
};

// Everything capture() can record about one sequence.
struct LayerTraceHead {
  Tensor attention;  // [T x T], causal rows
  Tensor q, k, m;    // optional, per the probes
};
struct LayerTrace {
  Tensor input;  // pre-attention embeddings [T x n_emb]
  std::vector<LayerTraceHead> heads;
};
struct SequenceTrace {
  std::vector<LayerTrace> layers;
  Tensor logits;
};

enum class Probe { kEmbeddings, kAttention, kQkm, kLogits };

inline Probe probe_from_name(const std::string& name) {
  if (name == "embedding-norms" || name == "embeddings")
    return Probe::kEmbeddings;
  if (name == "attention") return Probe::kAttention;
  if (name == "qkm") return Probe::kQkm;
  if (name == "logits") return Probe::kLogits;
  throw std::invalid_argument("capture: unknown probe " + name);
}

struct CaptureSpec {
  bool embeddings = false;
  bool attention = false;
  bool qkm = false;
  bool logits = false;

  static CaptureSpec all() { return {true, true, true, true}; }
  static CaptureSpec from_names(const std::vector<std::string>& names) {
    CaptureSpec spec;
    for (const auto& n : names) {
      switch (probe_from_name(n)) {
        case Probe::kEmbeddings: spec.embeddings = true; break;
        case Probe::kAttention: spec.attention = true; break;
        case Probe::kQkm: spec.qkm = true; break;
        case Probe::kLogits: spec.logits = true; break;
      }
    }
    return spec;
  }
};

namespace detail {

// sin/cos pairs over the first 2*n_freq components, zero elsewhere; the
// gradient flows back into the trainable frequencies.
inline Tensor positional_rows(const Tensor& freqs,
                              const std::vector<double>& positions,
                              std::size_t n_emb, Tape* tape) {
  const std::size_t t_count = positions.size();
  const std::size_t f_count = freqs.size();
  Tensor out({t_count, n_emb});
  for (std::size_t t = 0; t < t_count; ++t)
    for (std::size_t f = 0; f < f_count; ++f) {
      const double angle = freqs.at(f) * positions[t];
      out.at(t, 2 * f) = std::sin(angle);
      out.at(t, 2 * f + 1) = std::cos(angle);
    }
  if (tape && freqs.requires_grad()) {
    out.set_requires_grad();
    tape->record(out, [freqs, out, positions, f_count]() mutable {
      if (!out.has_grad()) return;
      auto& gf = freqs.grad();
      const auto& go = out.grad();
      const std::size_t n = out.cols();
      for (std::size_t t = 0; t < positions.size(); ++t)
        for (std::size_t f = 0; f < f_count; ++f) {
          const double angle = freqs.at(f) * positions[t];
          gf[f] += positions[t] * (std::cos(angle) * go[t * n + 2 * f] -
                                   std::sin(angle) * go[t * n + 2 * f + 1]);
        }
    });
  }
  return out;
}

inline void apply_score_noise(Tensor& w, const HeadNoise& noise) {
  const std::size_t t = w.rows();
  for (std::size_t i = 0; i < t; ++i) {
    if (!noise.gate.empty() && !noise.gate[i]) continue;
    const double fq =
        noise.u_q.empty() ? 1.0 : 1.0 + noise.u_q[i];
    for (std::size_t j = 0; j <= i; ++j) {
      const double fk = noise.u_k.empty() ? 1.0 : 1.0 + noise.u_k[j];
      w.at(i, j) *= fq * fk;
    }
  }
}

}  // namespace detail

// Normalised (or raw) layer inputs for the three paths, each recalibrated
// to sigma_x by its checkpoint immediately before the linear maps.
struct StrategyInputs {
  Tensor xq, xk, xv;
};

inline StrategyInputs strategy_inputs(const ModelState& st, std::size_t l,
                                      const Tensor& x, Tape* tape) {
  const auto& att = st.layers[l];
  StrategyInputs s;
  if (st.config.strategy == StrategyKind::kPreNorm) {
    auto norm = [&](const Tensor& gain) {
      return st.config.strategy_norm == NormVariant::kRms
                 ? rmsnorm_rows(x, gain, tape)
                 : layernorm_rows(x, gain, Tensor(), tape);
    };
    s.xq = scale(norm(att.alpha_x), att.ckpt_q.factor(), tape);
    s.xk = scale(norm(att.alpha_yk), att.ckpt_k.factor(), tape);
    s.xv = scale(norm(att.alpha_yv), att.ckpt_v.factor(), tape);
  } else {
    s.xq = scale(x, att.ckpt_q.factor(), tape);
    s.xk = scale(x, att.ckpt_k.factor(), tape);
    s.xv = scale(x, att.ckpt_v.factor(), tape);
  }
  return s;
}

struct HeadTensors {
  Tensor q, k, m;  // [T x n_qkv], [T x n_qkv], [T x n_emb]
};

inline HeadTensors head_tensors(const ModelState& st, std::size_t l,
                                std::size_t h, const StrategyInputs& in,
                                Tape* tape) {
  const auto& hp = st.layers[l].heads[h];
  HeadTensors out;
  out.q = linear(in.xq, hp.wq, Tensor(), tape);
  out.k = linear(in.xk, hp.wk, Tensor(), tape);
  Tensor v = linear(in.xv, hp.wv, Tensor(), tape);
  if (st.config.strategy == StrategyKind::kQkvNorm) {
    auto norm = [&](const Tensor& z, const Tensor& gain) {
      return st.config.strategy_norm == NormVariant::kRms
                 ? rmsnorm_rows(z, gain, tape)
                 : layernorm_rows(z, gain, Tensor(), tape);
    };
    out.q = norm(out.q, hp.alpha_q);
    out.k = norm(out.k, hp.alpha_k);
    v = norm(v, hp.alpha_v);
  }
  out.m = linear(v, hp.wo, Tensor(), tape);
  return out;
}

// One attention block: x -> x + ckpt_dx * sum_h A_h M_h, with causal
// attention and the per-layer score checkpoint inside the softmax.
inline Tensor attention_block(const ModelState& st, std::size_t l,
                              const Tensor& x, Tape* tape,
                              const NoisePlan* noise, LayerTrace* trace,
                              const CaptureSpec* spec) {
  const auto& att = st.layers[l];
  StrategyInputs in = strategy_inputs(st, l, x, tape);
  Tensor dx;
  for (std::size_t h = 0; h < att.heads.size(); ++h) {
    HeadTensors ht = head_tensors(st, l, h, in, tape);
    Tensor w = matmul_nt(ht.q, ht.k, tape);
    const HeadNoise* hn = noise ? noise->at(l, h) : nullptr;
    if (hn && (!hn->u_q.empty() || !hn->u_k.empty())) {
      if (tape)
        throw std::logic_error("noise injection is inference-only");
      detail::apply_score_noise(w, *hn);
    }
    Tensor a = softmax_causal(scale(w, att.ckpt_w.factor(), tape), tape);
    Tensor mixed;
    if (hn && !hn->u_m.empty()) {
      if (tape)
        throw std::logic_error("noise injection is inference-only");
      Tensor m_noisy = scale_rows(ht.m, [&] {
        std::vector<double> f(hn->u_m.size());
        for (std::size_t t = 0; t < f.size(); ++t) f[t] = 1.0 + hn->u_m[t];
        return f;
      }());
      Tensor clean = matmul(a, ht.m);
      Tensor noisy = matmul(a, m_noisy);
      mixed = clean;
      for (std::size_t i = 0; i < mixed.rows(); ++i) {
        if (!hn->gate.empty() && !hn->gate[i]) continue;
        for (std::size_t j = 0; j < mixed.cols(); ++j)
          mixed.at(i, j) = noisy.at(i, j);
      }
    } else {
      mixed = matmul(a, ht.m, tape);
    }
    dx = dx.defined() ? add(dx, mixed, tape) : mixed;
    if (trace && spec) {
      if (spec->attention) trace->heads[h].attention = a.clone();
      if (spec->qkm) {
        trace->heads[h].q = ht.q.clone();
        trace->heads[h].k = ht.k.clone();
        trace->heads[h].m = ht.m.clone();
      }
    }
  }
  return add(x, scale(dx, att.ckpt_dx.factor(), tape), tape);
}

inline Tensor feed_forward_block(const ModelState& st, std::size_t l,
                                 const Tensor& x, Tape* tape) {
  const auto& ff = st.ffs[l];
  Tensor normed = layernorm_rows(x, ff.ln_gain, ff.ln_bias, tape);
  Tensor hidden = relu(linear(normed, ff.w1, ff.b1, tape), tape);
  Tensor out = linear(hidden, ff.w2, ff.b2, tape);
  return add(x, out, tape);
}

inline Tensor mlp_head(const ModelState& st, const Tensor& x, Tape* tape) {
  Tensor z = layernorm_rows(x, st.head.ln_gain, st.head.ln_bias, tape);
  for (std::size_t i = 0; i + 1 < st.head.w.size(); ++i)
    z = relu(linear(z, st.head.w[i], st.head.b[i], tape), tape);
  return linear(z, st.head.w.back(), st.head.b.back(), tape);
}

// Token + positional embedding with the two entry checkpoints applied.
inline Tensor embed_sequence(const ModelState& st,
                             const std::vector<std::size_t>& ids,
                             long long offset, Tape* tape) {
  Tensor x_type = scale(gather_rows(st.tok_emb, ids, tape),
                        st.ckpt_type.factor(), tape);
  std::vector<double> positions(ids.size());
  for (std::size_t t = 0; t < ids.size(); ++t)
    positions[t] = static_cast<double>(t) + static_cast<double>(offset);
  Tensor x_pos = detail::positional_rows(st.pos_freqs, positions,
                                         st.config.n_emb, tape);
  return scale(add(x_type, x_pos, tape), st.ckpt_x.factor(), tape);
}

inline Tensor forward_from_embedding(const ModelState& st, const Tensor& x0,
                                     Tape* tape = nullptr,
                                     const NoisePlan* noise = nullptr,
                                     SequenceTrace* trace = nullptr,
                                     const CaptureSpec* spec = nullptr) {
  Tensor x = x0;
  for (std::size_t l = 0; l < st.config.n_layer; ++l) {
    LayerTrace* lt = nullptr;
    if (trace && spec) {
      trace->layers.emplace_back();
      lt = &trace->layers.back();
      lt->heads.resize(st.config.heads);
      if (spec->embeddings) lt->input = x.clone();
    }
    x = attention_block(st, l, x, tape, noise, lt, spec);
    x = feed_forward_block(st, l, x, tape);
  }
  Tensor logits = mlp_head(st, x, tape);
  if (trace && spec && spec->logits) trace->logits = logits.clone();
  return logits;
}

// Full forward over one token sequence; offset shifts every position index
// (the training-time augmentation; evaluation uses offset 0).
inline Tensor forward_sequence(const ModelState& st,
                               const std::vector<std::size_t>& ids,
                               long long offset, Tape* tape = nullptr,
                               const NoisePlan* noise = nullptr,
                               SequenceTrace* trace = nullptr,
                               const CaptureSpec* spec = nullptr) {
  if (!st.calibrated)
    throw std::runtime_error("forward: model is not calibrated");
  Tensor x0 = embed_sequence(st, ids, offset, tape);
  return forward_from_embedding(st, x0, tape, noise, trace, spec);
}

inline SequenceTrace capture(const ModelState& st,
                             const std::vector<std::size_t>& ids,
                             long long offset, const CaptureSpec& spec) {
  SequenceTrace trace;
  forward_sequence(st, ids, offset, nullptr, nullptr, &trace, &spec);
  return trace;
}

namespace detail {

inline double std_of(const std::vector<double>& xs) {
  if (xs.empty()) throw std::runtime_error("calibrate: empty activation set");
  double mean = 0.0;
  for (double v : xs) mean += v;
  mean /= double(xs.size());
  double var = 0.0;
  for (double v : xs) var += (v - mean) * (v - mean);
  var /= double(xs.size());
  return std::sqrt(var);
}

inline void append_all(std::vector<double>& sink, const Tensor& t) {
  sink.insert(sink.end(), t.values().begin(), t.values().end());
}

}  // namespace detail

// Calibrates every checkpoint in forward order on one batch: each scale is
// adjusted so the measured standard deviation (one scalar over all entries
// in the batch, with the current scale applied) hits its target. On an
// uncalibrated model this pins every scale; on an already-calibrated model
// the same batch yields correction factors of 1. The dx checkpoint pins
// std(dx) to sigma_dx * std(x) measured at the layer input. Returns the
// correction factors in forward order.
inline std::vector<double> calibrate(ModelState& st, const Batch& batch,
                                     const std::vector<long long>& offsets) {
  if (offsets.size() != batch.rows)
    throw std::invalid_argument("calibrate: one offset per batch row");
  const std::size_t rows = batch.rows;
  std::vector<double> corrections;

  auto ids_of = [&](std::size_t r) {
    return std::vector<std::size_t>(batch.input.begin() + r * batch.len,
                                    batch.input.begin() + (r + 1) * batch.len);
  };
  auto settle = [&](CheckpointLayer& ck, const std::vector<double>& pool,
                    double target) {
    const double measured = detail::std_of(pool);
    if (measured == 0.0)
      throw std::runtime_error("calibrate: zero variance at a checkpoint");
    const double correction = target / measured;
    ck.adjust(correction);
    corrections.push_back(correction);
  };

  // entry checkpoints
  std::vector<Tensor> x_type(rows), x_pos(rows);
  {
    std::vector<double> pool;
    for (std::size_t r = 0; r < rows; ++r) {
      x_type[r] = scale(gather_rows(st.tok_emb, ids_of(r)),
                        st.ckpt_type.live());
      detail::append_all(pool, x_type[r]);
      std::vector<double> positions(batch.len);
      for (std::size_t t = 0; t < batch.len; ++t)
        positions[t] = double(t) + double(offsets[r]);
      x_pos[r] = detail::positional_rows(st.pos_freqs, positions,
                                         st.config.n_emb, nullptr);
    }
    const double before = st.ckpt_type.live();
    settle(st.ckpt_type, pool, st.ckpt_type.target_sigma);
    const double fix = st.ckpt_type.factor() / before;
    for (std::size_t r = 0; r < rows; ++r) x_type[r] = scale(x_type[r], fix);
  }
  std::vector<Tensor> x(rows);
  {
    std::vector<double> pool;
    for (std::size_t r = 0; r < rows; ++r) {
      x[r] = scale(add(x_type[r], x_pos[r]), st.ckpt_x.live());
      detail::append_all(pool, x[r]);
    }
    const double before = st.ckpt_x.live();
    settle(st.ckpt_x, pool, st.ckpt_x.target_sigma);
    const double fix = st.ckpt_x.factor() / before;
    for (std::size_t r = 0; r < rows; ++r) x[r] = scale(x[r], fix);
  }

  for (std::size_t l = 0; l < st.config.n_layer; ++l) {
    auto& att = st.layers[l];
    // the three pre-qkv checkpoints, each on its own (possibly normed) path
    auto path_base = [&](std::size_t r, int which) {
      if (st.config.strategy != StrategyKind::kPreNorm) return x[r];
      const Tensor& gain = which == 0   ? att.alpha_x
                           : which == 1 ? att.alpha_yk
                                        : att.alpha_yv;
      return st.config.strategy_norm == NormVariant::kRms
                 ? rmsnorm_rows(x[r], gain)
                 : layernorm_rows(x[r], gain, Tensor());
    };
    for (int which = 0; which < 3; ++which) {
      CheckpointLayer& ck = which == 0   ? att.ckpt_q
                            : which == 1 ? att.ckpt_k
                                         : att.ckpt_v;
      std::vector<double> pool;
      for (std::size_t r = 0; r < rows; ++r)
        detail::append_all(pool, scale(path_base(r, which), ck.live()));
      settle(ck, pool, ck.target_sigma);
    }

    // scores checkpoint over every causally valid entry of every head
    std::vector<StrategyInputs> ins(rows);
    std::vector<std::vector<HeadTensors>> hts(rows);
    {
      std::vector<double> pool;
      for (std::size_t r = 0; r < rows; ++r) {
        ins[r] = strategy_inputs(st, l, x[r], nullptr);
        hts[r].resize(att.heads.size());
        for (std::size_t h = 0; h < att.heads.size(); ++h) {
          hts[r][h] = head_tensors(st, l, h, ins[r], nullptr);
          Tensor w = scale(matmul_nt(hts[r][h].q, hts[r][h].k),
                           att.ckpt_w.live());
          for (std::size_t i = 0; i < w.rows(); ++i)
            for (std::size_t j = 0; j <= i; ++j) pool.push_back(w.at(i, j));
        }
      }
      settle(att.ckpt_w, pool, att.ckpt_w.target_sigma);
    }

    // update checkpoint, relative to the residual stream at this layer
    {
      std::vector<double> dx_pool, x_pool;
      std::vector<Tensor> dxs(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        Tensor dx;
        for (std::size_t h = 0; h < att.heads.size(); ++h) {
          Tensor w = matmul_nt(hts[r][h].q, hts[r][h].k);
          Tensor a = softmax_causal(scale(w, att.ckpt_w.factor()));
          Tensor mixed = matmul(a, hts[r][h].m);
          dx = dx.defined() ? add(dx, mixed) : mixed;
        }
        dxs[r] = scale(dx, att.ckpt_dx.live());
        detail::append_all(dx_pool, dxs[r]);
        detail::append_all(x_pool, x[r]);
      }
      const double before = att.ckpt_dx.live();
      settle(att.ckpt_dx, dx_pool,
             att.ckpt_dx.target_sigma * detail::std_of(x_pool));
      const double fix = att.ckpt_dx.factor() / before;
      for (std::size_t r = 0; r < rows; ++r)
        x[r] = add(x[r], scale(dxs[r], fix));
    }

    for (std::size_t r = 0; r < rows; ++r)
      x[r] = feed_forward_block(st, l, x[r], nullptr);
  }
  st.calibrated = true;
  return corrections;
}

}  // namespace normlab
