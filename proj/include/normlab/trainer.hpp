#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "normlab/model.hpp"
#include "normlab/rng.hpp"
#include "normlab/task.hpp"
#include "normlab/tensor.hpp"

// Cross-entropy training with AdamW and adaptive learning-rate decay.
// A single thread owns the model; data generation is per-index seeded, so
// the run is reproducible no matter how batches are produced.

namespace normlab {

struct TrainConfig {
  double lr = 3e-4;
  double weight_decay = 0.01;
  std::size_t batches_per_epoch = 2000;
  std::size_t batch_size = 128;
  double decay_factor = 0.5;
  std::size_t decay_patience = 3;
  std::size_t max_epochs = 50;
  double max_wall_seconds = 0.0;  // 0 = no wall-clock budget
  std::uint64_t seed = 0;
  // conventional AdamW moments (the reference stack's defaults)
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  // optional early stop once an eval dataset reaches this accuracy
  double stop_accuracy = 0.0;
  std::string stop_dataset;

  void check() const {
    if (lr <= 0.0) throw std::invalid_argument("train: lr must be positive");
    if (decay_factor <= 0.0 || decay_factor >= 1.0)
      throw std::invalid_argument("train: decay factor must be in (0,1)");
    if (decay_patience < 1)
      throw std::invalid_argument("train: patience must be >= 1");
    if (batch_size < 1 || batches_per_epoch < 1)
      throw std::invalid_argument("train: batch sizes must be >= 1");
  }
};

struct AccuracyEstimate {
  double accuracy = 0.0;
  double stderr_binomial = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
};

struct MetricsRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  std::map<std::string, AccuracyEstimate> per_token_accuracy;
  double current_lr = 0.0;
  double wall_time = 0.0;
};

// Halves the rate after `patience` consecutive epochs without a new best
// epoch-mean loss; "improvement" means strictly lower than the best seen.
class LrDecayController {
 public:
  LrDecayController(double factor, std::size_t patience)
      : factor_(factor), patience_(patience) {}

  // Returns true when this epoch triggered a decay.
  bool on_epoch(double loss, double& lr) {
    if (loss < best_) {
      best_ = loss;
      stale_ = 0;
      return false;
    }
    if (++stale_ >= patience_) {
      lr *= factor_;
      stale_ = 0;
      return true;
    }
    return false;
  }

 private:
  double factor_;
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t stale_ = 0;
};

// Decoupled weight decay, then the moment update; bias-corrected.
class AdamW {
 public:
  AdamW(double beta1, double beta2, double epsilon)
      : beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {}

  void step(std::vector<std::pair<std::string, Tensor>>& params, double lr,
            double weight_decay) {
    ++t_;
    if (m_.empty()) {
      for (const auto& [name, p] : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
    const double bc1 = 1.0 - std::pow(beta1_, double(t_));
    const double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = params[i].second;
      if (!p.has_grad()) continue;
      const auto& g = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      double* w = p.data();
      for (std::size_t j = 0; j < g.size(); ++j) {
        w[j] -= lr * weight_decay * w[j];
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
        const double m_hat = m[j] / bc1;
        const double v_hat = v[j] / bc2;
        w[j] -= lr * m_hat / (std::sqrt(v_hat) + epsilon_);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  double beta1_, beta2_, epsilon_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

namespace detail {

inline std::vector<Sample> draw_batch(const TaskConfig& task,
                                      std::uint64_t first_index,
                                      std::size_t count) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(sample_at(task, first_index + i));
  return out;
}

inline std::vector<long long> draw_offsets(Rng& rng, std::size_t count,
                                           long long range) {
  std::vector<long long> out(count);
  for (auto& o : out)
    o = static_cast<long long>(rng.uniform_int(std::uint64_t(range) + 1));
  return out;
}

}  // namespace detail

// Mean masked cross entropy of one padded batch; backpropagates when given
// an optimizer-bound tape context (grads accumulate across the rows).
inline double batch_loss(const ModelState& st, const Batch& batch,
                         const std::vector<long long>& offsets,
                         bool with_grad) {
  const std::size_t total_tokens = batch.scored_tokens();
  if (total_tokens == 0)
    throw std::invalid_argument("batch_loss: nothing to score");
  double loss_sum = 0.0;
  for (std::size_t r = 0; r < batch.rows; ++r) {
    std::vector<std::size_t> ids(batch.input.begin() + r * batch.len,
                                 batch.input.begin() + (r + 1) * batch.len);
    std::vector<std::size_t> targets(batch.target.begin() + r * batch.len,
                                     batch.target.begin() + (r + 1) * batch.len);
    std::vector<bool> mask(batch.mask.begin() + r * batch.len,
                           batch.mask.begin() + (r + 1) * batch.len);
    if (with_grad) {
      Tape tape;
      Tensor logits = forward_sequence(st, ids, offsets[r], &tape);
      Tensor ce = cross_entropy_masked(logits, targets, mask, &tape);
      loss_sum += ce.scalar();
      backward(ce, tape, 1.0 / double(total_tokens));
    } else {
      Tensor logits = forward_sequence(st, ids, offsets[r]);
      loss_sum += cross_entropy_masked(logits, targets, mask).scalar();
    }
  }
  const double loss = loss_sum / double(total_tokens);
  if (!std::isfinite(loss))
    throw std::runtime_error("train: non-finite loss");
  return loss;
}

// Teacher-forced per-token accuracy over unmasked targets, given any source
// of per-position logits; binomial standard error attached.
inline AccuracyEstimate accuracy_over(
    const std::vector<Sample>& samples,
    const std::function<Tensor(const Sample&)>& logits_of,
    bool exclude_end_token = false) {
  AccuracyEstimate est;
  for (const Sample& s : samples) {
    Tensor logits = logits_of(s);
    for (std::size_t t = 0; t < s.target_ids.size(); ++t) {
      if (!s.loss_mask[t]) continue;
      if (exclude_end_token && s.target_ids[t] == Vocab::kEnd) continue;
      std::size_t best = 0;
      for (std::size_t j = 1; j < Vocab::kSize; ++j)
        if (logits.at(t, j) > logits.at(t, best)) best = j;
      est.total += 1;
      est.correct += best == s.target_ids[t] ? 1 : 0;
    }
  }
  est.accuracy = est.total ? double(est.correct) / double(est.total) : 0.0;
  est.stderr_binomial =
      est.total ? std::sqrt(est.accuracy * (1.0 - est.accuracy) /
                            double(est.total))
                : 0.0;
  return est;
}

inline std::vector<Sample> eval_samples(const TaskConfig& task,
                                        std::size_t n_points,
                                        std::uint64_t eval_seed = 0xe7a1) {
  TaskConfig cfg = task;
  cfg.seed = task.seed ^ eval_seed;
  std::vector<Sample> out;
  out.reserve(n_points);
  for (std::size_t i = 0; i < n_points; ++i) out.push_back(sample_at(cfg, i));
  return out;
}

// Teacher-forced per-token accuracy of the model; samples are evaluated
// unpadded at offset 0.
inline AccuracyEstimate evaluate(const ModelState& st, const TaskConfig& task,
                                 std::size_t n_points,
                                 std::uint64_t eval_seed = 0xe7a1,
                                 bool exclude_end_token = false) {
  if (n_points == 0) throw std::invalid_argument("evaluate: empty dataset");
  return accuracy_over(
      eval_samples(task, n_points, eval_seed),
      [&](const Sample& s) { return forward_sequence(st, s.input_ids, 0); },
      exclude_end_token);
}

struct AnswerAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy = 0.0;
};

// Secondary metric: greedy autoregressive decoding of the answer from the
// question prefix (everything through '='), scored on exact answer match
// including the closing bracket.
inline AnswerAccuracy autoregressive_answers(const ModelState& st,
                                             const TaskConfig& task,
                                             std::size_t n_points,
                                             std::uint64_t eval_seed = 0xe7a1,
                                             std::size_t max_new = 24) {
  AnswerAccuracy out;
  for (const Sample& s : eval_samples(task, n_points, eval_seed)) {
    std::vector<std::size_t> ids;
    for (std::size_t id : s.input_ids) {
      ids.push_back(id);
      if (id == Vocab::kEquals) break;
    }
    const std::size_t question_len = ids.size();
    std::string decoded;
    for (std::size_t step = 0; step < max_new; ++step) {
      Tensor logits = forward_sequence(st, ids, 0);
      std::size_t best = 0;
      for (std::size_t j = 1; j < Vocab::kSize; ++j)
        if (logits.at(ids.size() - 1, j) > logits.at(ids.size() - 1, best))
          best = j;
      ids.push_back(best);
      decoded.push_back(Vocab::to_char(best));
      if (best == Vocab::kEnd) break;
    }
    const std::string expected =
        detail::render_integer(s.answer_value) + "]";
    ++out.total;
    if (decoded == expected) ++out.correct;
    (void)question_len;
  }
  out.accuracy = out.total ? double(out.correct) / double(out.total) : 0.0;
  return out;
}

struct EvalDataset {
  std::string name;
  TaskConfig task;
  std::size_t n_points = 512;
};

// Runs the training loop: per-epoch metrics stream through the callback and
// are returned; the model is calibrated on the first batch if needed.
inline std::vector<MetricsRecord> train(
    ModelState& st, const TaskConfig& task, const TrainConfig& cfg,
    const std::vector<EvalDataset>& eval_sets = {},
    const std::function<void(const MetricsRecord&)>& on_epoch = nullptr) {
  cfg.check();
  task.check();
  const auto wall_start = std::chrono::steady_clock::now();
  Rng offset_rng(0);
  offset_rng.set_state(st.train_rng_state);

  TaskConfig data = task;
  data.seed = task.seed ^ cfg.seed;

  if (!st.calibrated) {
    auto samples = detail::draw_batch(data, 0, cfg.batch_size);
    auto offsets =
        detail::draw_offsets(offset_rng, cfg.batch_size, st.config.offset_range);
    calibrate(st, make_batch(samples), offsets);
    // the calibration batch is batch 0 of epoch 1; rewind its offsets
    offset_rng.set_state(st.train_rng_state);
  }

  AdamW opt(cfg.beta1, cfg.beta2, cfg.epsilon);
  LrDecayController decay(cfg.decay_factor, cfg.decay_patience);
  double lr = cfg.lr;
  auto params = st.parameters();
  std::vector<MetricsRecord> history;
  std::uint64_t sample_cursor = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    double loss_acc = 0.0;
    for (std::size_t b = 0; b < cfg.batches_per_epoch; ++b) {
      auto samples = detail::draw_batch(data, sample_cursor, cfg.batch_size);
      sample_cursor += cfg.batch_size;
      auto offsets = detail::draw_offsets(offset_rng, cfg.batch_size,
                                          st.config.offset_range);
      for (auto& [name, p] : params) p.zero_grad();
      loss_acc += batch_loss(st, make_batch(samples), offsets, true);
      opt.step(params, lr, cfg.weight_decay);
    }
    MetricsRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_acc / double(cfg.batches_per_epoch);
    rec.current_lr = lr;
    for (const auto& ds : eval_sets)
      rec.per_token_accuracy[ds.name] = evaluate(st, ds.task, ds.n_points);
    rec.wall_time = std::chrono::duration<double>(
                        std::chrono::steady_clock::now() - wall_start)
                        .count();
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    st.train_rng_state = offset_rng.state();

    decay.on_epoch(rec.train_loss, lr);
    if (cfg.stop_accuracy > 0.0 && !cfg.stop_dataset.empty()) {
      auto it = rec.per_token_accuracy.find(cfg.stop_dataset);
      if (it != rec.per_token_accuracy.end() &&
          it->second.accuracy >= cfg.stop_accuracy)
        break;
    }
    if (cfg.max_wall_seconds > 0.0 && rec.wall_time >= cfg.max_wall_seconds)
      break;
  }
  return history;
}

// Repeatedly steps on one fixed batch; the overfit smoke test.
inline double overfit_single_batch(ModelState& st, const Batch& batch,
                                   const std::vector<long long>& offsets,
                                   std::size_t steps, const TrainConfig& cfg,
                                   double stop_below = 0.0) {
  if (!st.calibrated) calibrate(st, batch, offsets);
  AdamW opt(cfg.beta1, cfg.beta2, cfg.epsilon);
  auto params = st.parameters();
  double loss = 0.0;
  for (std::size_t s = 0; s < steps; ++s) {
    for (auto& [name, p] : params) p.zero_grad();
    loss = batch_loss(st, batch, offsets, true);
    opt.step(params, cfg.lr, cfg.weight_decay);
    if (stop_below > 0.0 && loss < stop_below) break;
  }
  return loss;
}

}  // namespace normlab
