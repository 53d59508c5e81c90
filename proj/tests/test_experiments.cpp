#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "normlab/experiments.hpp"
#include "normlab/theory.hpp"

using namespace normlab;

namespace {

ModelState small_desk_model(StrategyKind strategy = StrategyKind::kPreNorm) {
  ModelConfig mc;
  mc.n_freq = 4;
  mc.n_emb = 24;
  mc.n_layer = 3;
  mc.heads = 2;
  mc.n_qkv = 6;
  mc.n_ff = 16;
  mc.mlp_widths = {16};
  mc.strategy = strategy;
  mc.seed = 77;
  ModelState st = init(mc);
  TaskConfig task = task_preset("desk-train");
  task.seed = 13;
  std::vector<Sample> samples;
  for (int i = 0; i < 8; ++i) samples.push_back(sample_at(task, i));
  Batch batch = make_batch(samples);
  calibrate(st, batch, std::vector<long long>(batch.rows, 0));
  return st;
}

double linf(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

}  // namespace

TEST_CASE("zero-rms injection is the identity on logits") {
  ModelState st = small_desk_model();
  TaskConfig task = task_preset("desk-train");
  task.seed = 21;
  Sample s = sample_at(task, 0);
  Tensor clean = forward_sequence(st, s.input_ids, 0);
  NoiseSpec spec;
  spec.rms = 0.0;
  Rng stream(5);
  NoiseOutcome out = inject_noise(st, s.input_ids, spec, stream);
  CHECK(out.logits.values() == clean.values());

  spec.rms = -0.1;
  CHECK_THROWS_AS(inject_noise(st, s.input_ids, spec, stream),
                  std::invalid_argument);
}

TEST_CASE("noise factors have the advertised RMS") {
  Rng rng(99);
  const double rms = 0.07;
  const int draws = 1000000;
  double acc = 0.0;
  double peak = 0.0;
  for (int i = 0; i < draws; ++i) {
    const double u = detail::draw_u(rng, rms);
    acc += u * u;
    peak = std::max(peak, std::abs(u));
  }
  const double measured = std::sqrt(acc / draws);
  CHECK(std::abs(measured - rms) / rms <= 0.005);
  CHECK(peak <= std::sqrt(3.0) * rms);  // uniform support
}

TEST_CASE("per-layer mode leaves unperturbed layers bitwise clean") {
  ModelState st = small_desk_model();
  TaskConfig task = task_preset("desk-train");
  task.seed = 22;
  Sample s = sample_at(task, 1);
  CaptureSpec cs;
  cs.attention = true;
  cs.embeddings = true;
  SequenceTrace trace = capture(st, s.input_ids, 0, cs);

  // noise only on layer 1
  NoisePlan plan;
  plan.heads.resize(st.config.n_layer);
  for (std::size_t l = 0; l < st.config.n_layer; ++l)
    plan.heads[l].resize(st.config.heads);
  Rng rng(3);
  for (std::size_t h = 0; h < st.config.heads; ++h) {
    auto& hn = plan.heads[1][h];
    hn.u_q.resize(s.input_ids.size());
    hn.u_k.resize(s.input_ids.size());
    for (auto& u : hn.u_q) u = detail::draw_u(rng, 0.3);
    for (auto& u : hn.u_k) u = detail::draw_u(rng, 0.3);
  }
  PerLayerAttention pla = per_layer_attention_with_plan(st, trace, plan);
  for (std::size_t l = 0; l < st.config.n_layer; ++l)
    for (std::size_t h = 0; h < st.config.heads; ++h) {
      if (l == 1) continue;
      CHECK(pla.noisy[l][h].values() == pla.clean[l][h].values());
    }
  double moved = 0.0;
  for (std::size_t h = 0; h < st.config.heads; ++h)
    moved = std::max(moved, linf(pla.noisy[1][h], pla.clean[1][h]));
  CHECK(moved > 0.0);
}

TEST_CASE("head filter gates rows by their clean max attention") {
  ModelState st = small_desk_model();
  TaskConfig task = task_preset("desk-train");
  task.seed = 23;
  Sample s = sample_at(task, 2);
  NoiseSpec spec;
  spec.rms = 0.5;
  spec.targets = {NoiseTarget::kQuery, NoiseTarget::kKey};
  spec.head_filter = HeadFilter::kSparse;
  spec.mode = NoiseMode::kPerLayerIndependent;
  Rng stream(8);
  PerLayerAttention pla = per_layer_attention(st, s.input_ids, spec, stream);
  for (std::size_t l = 0; l < pla.clean.size(); ++l)
    for (std::size_t h = 0; h < pla.clean[l].size(); ++h) {
      const Tensor& clean = pla.clean[l][h];
      const Tensor& noisy = pla.noisy[l][h];
      for (std::size_t i = 0; i < clean.rows(); ++i) {
        double mx = 0.0;
        for (std::size_t j = 0; j <= i; ++j)
          mx = std::max(mx, clean.at(i, j));
        if (mx < spec.sparse_threshold) {
          for (std::size_t j = 0; j <= i; ++j)
            CHECK(noisy.at(i, j) == clean.at(i, j));
        }
      }
    }
}

TEST_CASE("joint-mode message noise moves a delta-attention row by u m") {
  // with attention pinned at one sender, scaling that sender's message by
  // (1+u) shifts the row update by exactly u * m
  Tensor a({2, 2}, {1.0, 0.0, 0.0, 1.0});  // rows are delta distributions
  Tensor m({2, 3}, {0.5, -1.0, 2.0, 1.5, 0.25, -0.75});
  const double u0 = 0.12, u1 = -0.2;
  Tensor clean = matmul(a, m);
  Tensor noisy = matmul(a, scale_rows(m, {1.0 + u0, 1.0 + u1}));
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(noisy.at(0, j) - clean.at(0, j) ==
          Catch::Approx(u0 * m.at(0, j)).margin(1e-15));
    CHECK(noisy.at(1, j) - clean.at(1, j) ==
          Catch::Approx(u1 * m.at(1, j)).margin(1e-15));
  }
}

TEST_CASE("accuracy curve at rms zero reproduces evaluate") {
  ModelState st = small_desk_model();
  TaskConfig task = task_preset("desk-train");
  task.seed = 24;
  NoiseSpec spec;
  spec.seed = 7;
  NoiseCurve curve = accuracy_vs_noise(st, task, {0.0}, spec, 32, 2);
  AccuracyEstimate direct = evaluate(st, task, 32);
  REQUIRE(curve.points.size() == 1);
  CHECK(curve.points[0].accuracy == direct.accuracy);
  CHECK(curve.points[0].accuracy_stderr == 0.0);
  CHECK_THROWS_AS(accuracy_vs_noise(st, task, {}, spec, 8, 1),
                  std::invalid_argument);
}

TEST_CASE("collapse probability is zero at rms zero, strict below loose") {
  ModelState st = small_desk_model();
  TaskConfig task = task_preset("desk-train");
  task.seed = 25;
  CollapseReport rep =
      collapse_probability(st, task, {0.0, 0.4}, 24, 11, 1);
  REQUIRE(rep.levels.size() == 2);
  CHECK(rep.levels[0].probability == 0.0);
  CHECK(rep.levels[0].strict_count == 0);
  for (const auto& lv : rep.levels)
    CHECK(lv.strict_probability <= lv.probability);
}

TEST_CASE("synthetic collapse onset matches the threshold prediction") {
  // two senders with a known score ratio; multiplicative noise of growing
  // rms; the first level with any collapse should bracket the analytic
  // onset  rms_c = (ratio - 1) / (2 sqrt(3))
  const double w_star = 1.2, w_t = 1.0;
  const double ratio = w_star / w_t;
  const double rms_c = (ratio - 1.0) / (2.0 * std::sqrt(3.0));
  std::vector<double> grid;
  for (int i = 0; i <= 20; ++i) grid.push_back(0.01 * i);
  Rng rng(4242);
  std::vector<double> probability(grid.size(), 0.0);
  const int draws = 4000;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    int collapses = 0;
    for (int d = 0; d < draws; ++d) {
      const double uq = detail::draw_u(rng, grid[g]);
      const double uk0 = detail::draw_u(rng, grid[g]);
      const double uk1 = detail::draw_u(rng, grid[g]);
      const double ps = (1.0 + uq) * (1.0 + uk0) * w_star;
      const double pt = (1.0 + uq) * (1.0 + uk1) * w_t;
      if (pt > ps) ++collapses;
    }
    probability[g] = double(collapses) / draws;
  }
  std::size_t first = grid.size();
  for (std::size_t g = 0; g < grid.size(); ++g)
    if (probability[g] > 0.0) {
      first = g;
      break;
    }
  REQUIRE(first < grid.size());
  CHECK(std::abs(grid[first] - rms_c) <= 0.011);  // one grid step

  // the analytic predicate agrees at a specific super-critical draw
  Tensor w({2}, {w_star, w_t});
  Tensor kap({2}, {-0.08, 0.15});
  auto res = collapse_threshold(w, 0, 0.0, kap);
  CHECK(res.collapsing == std::set<std::size_t>{1});
}

TEST_CASE("weighted quantiles match a direct reference") {
  // two-norm population with known weights
  std::vector<std::pair<double, double>> pool = {
      {1.0, 3.0}, {2.0, 1.0}, {1.0, 2.0}, {2.0, 4.0}};
  // total weight 10: cumulative on sorted values: 1.0 -> 5, 2.0 -> 10
  CHECK(weighted_quantile(pool, 0.05) == 1.0);
  CHECK(weighted_quantile(pool, 0.5) == 1.0);
  CHECK(weighted_quantile(pool, 0.51) == 2.0);
  CHECK(weighted_quantile(pool, 0.95) == 2.0);

  HeadSpread hs = spread_of_pool(pool);
  CHECK(hs.median == 1.0);
  CHECK(hs.q05 == 1.0);
  CHECK(hs.q95 == 2.0);
  CHECK(hs.half_width == 0.5);

  // equal norms collapse the interval to zero
  std::vector<std::pair<double, double>> flat = {
      {1.4, 1.0}, {1.4, 2.0}, {1.4, 0.5}};
  HeadSpread zero = spread_of_pool(flat);
  CHECK(zero.half_width == 0.0);

  // independent reference on a random pool, 1e-12 agreement
  Rng rng(31);
  std::vector<std::pair<double, double>> random_pool;
  for (int i = 0; i < 200; ++i)
    random_pool.emplace_back(rng.uniform(0.5, 2.0), rng.uniform(0.0, 1.0));
  for (double p : {0.05, 0.5, 0.95}) {
    auto sorted = random_pool;
    std::sort(sorted.begin(), sorted.end());
    double total = 0.0;
    for (auto& [v, w] : sorted) total += w;
    double acc = 0.0, expect = sorted.back().first;
    for (auto& [v, w] : sorted) {
      acc += w;
      if (acc >= p * total) {
        expect = v;
        break;
      }
    }
    CHECK(std::abs(weighted_quantile(random_pool, p) - expect) <= 1e-12);
  }

  CHECK(spread_of_pool({}).degenerate);
}

TEST_CASE("spread over a model flags no degenerate heads") {
  ModelState st = small_desk_model();
  TaskConfig task = task_preset("desk-train");
  task.seed = 26;
  SpreadReport rep = embedding_spread(st, task, 16);
  REQUIRE(rep.heads.size() == st.config.n_layer * st.config.heads);
  for (const auto& h : rep.heads) {
    CHECK_FALSE(h.degenerate);
    CHECK(h.q05 <= 1.0 + 1e-12);
    CHECK(h.q95 >= 1.0 - 1e-12);
    CHECK(h.half_width >= 0.0);
  }
  CHECK(rep.mean_half_width >= 0.0);
}

TEST_CASE("sparsity histogram bins synthetic distributions") {
  SparsityHistogram hist;
  hist.edges = default_bin_edges();
  hist.counts.assign(hist.edges.size() - 1, 0);
  // forced-sparse values mass in the top bin
  for (int i = 0; i < 10; ++i) hist.insert(1.0);
  CHECK(hist.mass_at_least(0.95) == 1.0);
  // uniform max over T=8 lands in the 1/8 bin
  SparsityHistogram flat;
  flat.edges = default_bin_edges();
  flat.counts.assign(flat.edges.size() - 1, 0);
  for (int i = 0; i < 10; ++i) flat.insert(1.0 / 8.0);
  CHECK(flat.counts[2] == 10);  // [0.10, 0.15)
  CHECK(flat.mass_at_least(0.95) == 0.0);

  ModelState st = small_desk_model();
  TaskConfig task = task_preset("desk-train");
  task.seed = 27;
  SparsityHistogram real = sparsity_histogram(st, task, 16);
  std::size_t counted = 0;
  for (auto c : real.counts) counted += c;
  CHECK(counted == real.total);
  CHECK(real.total > 0);
}

TEST_CASE("theory battery is deterministic and replayable") {
  PerturbationReport a = verify_theory(20, 777);
  PerturbationReport b = verify_theory(20, 777);
  REQUIRE(a.properties.size() == b.properties.size());
  for (std::size_t i = 0; i < a.properties.size(); ++i) {
    CHECK(a.properties[i].name == b.properties[i].name);
    CHECK(a.properties[i].worst_err == b.properties[i].worst_err);
  }
  CHECK(a.all_pass);

  PropertyResult replayed =
      replay_property("theorem4-propagators-vs-fd", 20, 777);
  for (const auto& p : a.properties)
    if (p.name == replayed.name) {
      CHECK(p.worst_err == replayed.worst_err);
      CHECK(p.failing_trial == replayed.failing_trial);
    }
  CHECK_THROWS_AS(replay_property("not-a-property", 5, 1),
                  std::invalid_argument);
}

TEST_CASE("reports carry the schema version") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "nl_rep.jsonl").string();
  write_jsonl(path, {{{"kind", "test"}, {"value", 3}}});
  std::ifstream f(path);
  std::string line;
  REQUIRE(std::getline(f, line));
  auto parsed = nlohmann::json::parse(line);
  CHECK(parsed.at("schema_version") == kReportSchemaVersion);
  CHECK(parsed.at("kind") == "test");

  const std::string csv = (fs::temp_directory_path() / "nl_c.csv").string();
  write_curve_csv(csv, {{0.0, 0.9, 0.01}, {0.1, 0.8, 0.02}});
  std::ifstream cf(csv);
  std::string header;
  std::getline(cf, header);
  CHECK(header == "rms,metric,stderr");
  std::size_t rows = 0;
  while (std::getline(cf, line)) ++rows;
  CHECK(rows == 2);
  std::remove(path.c_str());
  std::remove(csv.c_str());
}
