#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "normlab/checkpoint_io.hpp"
#include "normlab/trainer.hpp"

using namespace normlab;

namespace {

ModelConfig tiny_config(StrategyKind strategy = StrategyKind::kPreNorm) {
  ModelConfig c;
  c.n_freq = 4;
  c.n_emb = 16;
  c.n_layer = 1;
  c.heads = 2;
  c.n_qkv = 4;
  c.n_ff = 16;
  c.mlp_widths = {16};
  c.strategy = strategy;
  c.seed = 11;
  return c;
}

TaskConfig tiny_task(std::uint64_t seed) {
  TaskConfig t = task_preset("desk-train");
  t.seed = seed;
  return t;
}

}  // namespace

TEST_CASE("adamw matches a scalar reference implementation") {
  // one parameter, fixed gradient stream
  Tensor p({1}, {0.7});
  p.set_requires_grad();
  std::vector<std::pair<std::string, Tensor>> params = {{"p", p}};
  const double lr = 0.01, wd = 0.1;
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-7;
  AdamW opt(beta1, beta2, eps);

  double ref = 0.7, m = 0.0, v = 0.0;
  const std::vector<double> grads = {0.3, -0.2, 0.05, 0.4, -0.7, 0.0, 0.1};
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const double g = grads[t - 1];
    p.zero_grad();
    p.grad()[0] = g;
    opt.step(params, lr, wd);

    ref -= lr * wd * ref;
    m = beta1 * m + (1 - beta1) * g;
    v = beta2 * v + (1 - beta2) * g * g;
    const double m_hat = m / (1 - std::pow(beta1, double(t)));
    const double v_hat = v / (1 - std::pow(beta2, double(t)));
    ref -= lr * m_hat / (std::sqrt(v_hat) + eps);
    CHECK(std::abs(p.at(0) - ref) <= 1e-12);
  }
}

TEST_CASE("lr decays after exactly patience stale epochs") {
  LrDecayController ctl(0.5, 3);
  double lr = 1.0;
  // epoch 1 sets the best; epochs 2-4 fail to improve; decay lands on 4
  CHECK_FALSE(ctl.on_epoch(1.00, lr));
  CHECK_FALSE(ctl.on_epoch(1.00, lr));
  CHECK_FALSE(ctl.on_epoch(1.05, lr));
  CHECK(ctl.on_epoch(1.01, lr));
  CHECK(lr == 0.5);
  // an improvement resets the counter
  CHECK_FALSE(ctl.on_epoch(0.90, lr));
  CHECK_FALSE(ctl.on_epoch(0.95, lr));
  CHECK_FALSE(ctl.on_epoch(0.95, lr));
  CHECK(ctl.on_epoch(0.95, lr));
  CHECK(lr == 0.25);
}

TEST_CASE("masked targets never reach the loss") {
  ModelState st = init(tiny_config());
  TaskConfig task = tiny_task(3);
  std::vector<Sample> samples;
  for (int i = 0; i < 4; ++i) samples.push_back(sample_at(task, i));
  Batch batch = make_batch(samples);
  std::vector<long long> offsets(batch.rows, 0);
  calibrate(st, batch, offsets);

  const double base = batch_loss(st, batch, offsets, false);
  Batch tweaked = batch;
  for (std::size_t i = 0; i < tweaked.mask.size(); ++i)
    if (!tweaked.mask[i]) tweaked.target[i] = (tweaked.target[i] + 5) % 17;
  CHECK(batch_loss(st, tweaked, offsets, false) == base);
}

TEST_CASE("zero learning rate leaves parameters untouched") {
  ModelState st = init(tiny_config());
  TaskConfig task = tiny_task(4);
  std::vector<Sample> samples;
  for (int i = 0; i < 4; ++i) samples.push_back(sample_at(task, i));
  Batch batch = make_batch(samples);
  std::vector<long long> offsets(batch.rows, 0);
  calibrate(st, batch, offsets);

  std::vector<std::vector<double>> before;
  for (const auto& [name, p] : st.parameters()) before.push_back(p.values());

  TrainConfig cfg;
  cfg.lr = 1e-30;  // effectively zero while satisfying lr > 0
  AdamW opt(cfg.beta1, cfg.beta2, cfg.epsilon);
  auto params = st.parameters();
  for (int step = 0; step < 3; ++step) {
    for (auto& [name, p] : params) p.zero_grad();
    batch_loss(st, batch, offsets, true);
    opt.step(params, 0.0, cfg.weight_decay);  // zero-lr update
  }
  auto after = st.parameters();
  for (std::size_t i = 0; i < after.size(); ++i)
    CHECK(after[i].second.values() == before[i]);
}

TEST_CASE("single batch overfits to tiny loss") {
  ModelConfig mc = tiny_config();
  mc.n_emb = 32;
  mc.n_freq = 8;
  mc.n_ff = 32;
  mc.mlp_widths = {32};
  ModelState st = init(mc);
  TaskConfig task = tiny_task(5);
  std::vector<Sample> samples;
  for (int i = 0; i < 4; ++i) samples.push_back(sample_at(task, i));
  Batch batch = make_batch(samples);
  std::vector<long long> offsets(batch.rows, 0);

  TrainConfig cfg;
  cfg.lr = 3e-3;
  cfg.weight_decay = 0.0;
  const double final_loss =
      overfit_single_batch(st, batch, offsets, 500, cfg, 0.01);
  CHECK(final_loss < 0.01);
}

TEST_CASE("autoregressive decoding recovers memorised answers") {
  ModelConfig mc = tiny_config();
  mc.n_emb = 32;
  mc.n_freq = 8;
  mc.n_ff = 32;
  mc.mlp_widths = {32};
  ModelState st = init(mc);
  TaskConfig task = tiny_task(77);
  std::vector<Sample> samples;
  for (int i = 0; i < 4; ++i) samples.push_back(sample_at(task, i));
  Batch batch = make_batch(samples);
  std::vector<long long> offsets(batch.rows, 0);
  TrainConfig cfg;
  cfg.lr = 3e-3;
  cfg.weight_decay = 0.0;
  overfit_single_batch(st, batch, offsets, 1500, cfg, 1e-4);

  // decode the same four questions it memorised
  AnswerAccuracy ar;
  for (const Sample& s : samples) {
    std::vector<std::size_t> ids;
    for (std::size_t id : s.input_ids) {
      ids.push_back(id);
      if (id == Vocab::kEquals) break;
    }
    std::string decoded;
    for (int step = 0; step < 24; ++step) {
      Tensor logits = forward_sequence(st, ids, 0);
      std::size_t best = 0;
      for (std::size_t j = 1; j < Vocab::kSize; ++j)
        if (logits.at(ids.size() - 1, j) > logits.at(ids.size() - 1, best))
          best = j;
      ids.push_back(best);
      decoded.push_back(Vocab::to_char(best));
      if (best == Vocab::kEnd) break;
    }
    std::string expected;
    if (s.answer_value < 0) expected = "N";
    expected += std::to_string(std::abs(s.answer_value)) + "]";
    ++ar.total;
    if (decoded == expected) ++ar.correct;
  }
  CHECK(ar.total == 4);
  CHECK(ar.correct == 4);

  // the harness-level metric runs end to end and stays within [0, 1]
  AnswerAccuracy metric = autoregressive_answers(st, task, 8);
  CHECK(metric.total == 8);
  CHECK(metric.accuracy >= 0.0);
  CHECK(metric.accuracy <= 1.0);
}

TEST_CASE("training is reproducible and decays deterministically") {
  auto run = [&]() {
    ModelState st = init(tiny_config());
    TrainConfig cfg;
    cfg.batches_per_epoch = 3;
    cfg.batch_size = 4;
    cfg.max_epochs = 2;
    cfg.seed = 9;
    return train(st, tiny_task(6), cfg,
                 {{"in", tiny_task(6), 16}});
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].train_loss == b[i].train_loss);
    CHECK(a[i].current_lr == b[i].current_lr);
    CHECK(a[i].per_token_accuracy.at("in").accuracy ==
          b[i].per_token_accuracy.at("in").accuracy);
  }
}

TEST_CASE("accuracy metric: oracle and uniform-random logits") {
  TaskConfig task = tiny_task(7);
  std::vector<Sample> samples;
  for (int i = 0; i < 200; ++i) samples.push_back(sample_at(task, i));

  // a perfect oracle scores 1.0
  auto oracle = [](const Sample& s) {
    Tensor logits({s.target_ids.size(), 17});
    for (std::size_t t = 0; t < s.target_ids.size(); ++t)
      logits.at(t, s.target_ids[t]) = 10.0;
    return logits;
  };
  AccuracyEstimate perfect = accuracy_over(samples, oracle);
  CHECK(perfect.accuracy == 1.0);
  CHECK(perfect.total > 0);

  // uniform-random logits land near 1/17
  Rng rng(123);
  auto random_logits = [&](const Sample& s) {
    return Tensor::uniform({s.target_ids.size(), 17}, -1.0, 1.0, rng);
  };
  AccuracyEstimate chance = accuracy_over(samples, random_logits);
  const double p = 1.0 / 17.0;
  const double sigma = std::sqrt(p * (1 - p) / double(chance.total));
  CHECK(std::abs(chance.accuracy - p) <= 3.0 * sigma);

  // excluding the end token drops exactly one scored position per sample
  AccuracyEstimate no_end = accuracy_over(samples, oracle, true);
  CHECK(no_end.total == perfect.total - samples.size());
}

TEST_CASE("checkpoint save/load round trip") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "nl_ck.nckt").string();

  ModelState st = init(tiny_config(StrategyKind::kQkvNorm));
  TaskConfig task = tiny_task(8);
  std::vector<Sample> samples;
  for (int i = 0; i < 4; ++i) samples.push_back(sample_at(task, i));
  Batch batch = make_batch(samples);
  calibrate(st, batch, std::vector<long long>(batch.rows, 0));
  save_checkpoint(st, path);

  ModelState re = load_checkpoint(path);
  auto pa = st.parameters();
  auto pb = re.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(pa[i].second.values() == pb[i].second.values());
  }
  CHECK(re.calibrated);
  CHECK(re.train_rng_state == st.train_rng_state);

  // forwards agree exactly
  Sample s = sample_at(task, 9);
  Tensor orig_logits = forward_sequence(st, s.input_ids, 0);
  Tensor re_logits = forward_sequence(re, s.input_ids, 0);
  CHECK(orig_logits.values() == re_logits.values());

  // a second save of the loaded model is byte-identical
  const std::string path2 =
      (fs::temp_directory_path() / "nl_ck2.nckt").string();
  save_checkpoint(re, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), {});
  std::string b2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(b1 == b2);

  // corruption paths
  {
    std::ofstream trunc((fs::temp_directory_path() / "nl_trunc.nckt").string(),
                        std::ios::binary);
    trunc.write(b1.data(), static_cast<std::streamsize>(b1.size() / 2));
  }
  CHECK_THROWS_AS(
      load_checkpoint((fs::temp_directory_path() / "nl_trunc.nckt").string()),
      std::runtime_error);
  {
    std::string bad = b1;
    bad[0] = 'X';
    std::ofstream badf((fs::temp_directory_path() / "nl_bad.nckt").string(),
                       std::ios::binary);
    badf.write(bad.data(), static_cast<std::streamsize>(bad.size()));
  }
  CHECK_THROWS_AS(
      load_checkpoint((fs::temp_directory_path() / "nl_bad.nckt").string()),
      std::runtime_error);
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("train rejects invalid configs") {
  TrainConfig cfg;
  cfg.lr = 0.0;
  CHECK_THROWS_AS(cfg.check(), std::invalid_argument);
  cfg.lr = 1e-4;
  cfg.decay_factor = 1.0;
  CHECK_THROWS_AS(cfg.check(), std::invalid_argument);
  cfg.decay_factor = 0.5;
  cfg.decay_patience = 0;
  CHECK_THROWS_AS(cfg.check(), std::invalid_argument);
}
