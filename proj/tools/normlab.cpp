// Command-line front end: dataset generation, training, evaluation, the
// noise/collapse/spread/sparsity experiments, attention dumps, and the
// theory verification battery.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "normlab/checkpoint_io.hpp"
#include "normlab/experiments.hpp"
#include "normlab/model.hpp"
#include "normlab/task.hpp"
#include "normlab/theory.hpp"
#include "normlab/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace normlab;

namespace {

StrategyKind strategy_from_name(const std::string& name) {
  if (name == "no-norm") return StrategyKind::kNoNorm;
  if (name == "pre-norm") return StrategyKind::kPreNorm;
  if (name == "qkv-norm") return StrategyKind::kQkvNorm;
  throw CLI::ValidationError("--strategy", "unknown strategy " + name);
}

std::string train_preset_of(const std::string& model_preset) {
  if (model_preset == "alternate") return "alternate-train";
  return model_preset + "-train";
}

// Plain key = value file, '#' comments.
std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::map<std::string, std::string> kv;
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  std::string line;
  while (std::getline(f, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!key.empty()) kv[key] = value;
  }
  return kv;
}

void apply_train_config(const std::map<std::string, std::string>& kv,
                        TrainConfig& cfg) {
  auto get = [&](const char* key, auto& slot) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    using T = std::decay_t<decltype(slot)>;
    if constexpr (std::is_same_v<T, double>)
      slot = std::stod(it->second);
    else
      slot = static_cast<T>(std::stoull(it->second));
  };
  get("lr", cfg.lr);
  get("weight_decay", cfg.weight_decay);
  get("batches_per_epoch", cfg.batches_per_epoch);
  get("batch_size", cfg.batch_size);
  get("decay_factor", cfg.decay_factor);
  get("decay_patience", cfg.decay_patience);
  get("epochs", cfg.max_epochs);
  get("wall_seconds", cfg.max_wall_seconds);
  get("stop_accuracy", cfg.stop_accuracy);
  auto it = kv.find("stop_dataset");
  if (it != kv.end()) cfg.stop_dataset = it->second;
}

std::vector<double> parse_grid(const std::string& csv) {
  std::vector<double> grid;
  std::string token;
  for (char c : csv + ",") {
    if (c == ',') {
      if (!token.empty()) grid.push_back(std::stod(token));
      token.clear();
    } else {
      token.push_back(c);
    }
  }
  return grid;
}

TaskConfig dataset_or_custom(const std::string& dataset,
                             const std::vector<int>& n_list,
                             const std::vector<int>& l_list,
                             std::uint64_t seed) {
  TaskConfig task;
  if (!n_list.empty() || !l_list.empty()) {
    if (n_list.empty() || l_list.empty())
      throw CLI::ValidationError("-N/-L", "both lists are required together");
    task.n_choices = n_list;
    task.l_choices = l_list;
  } else {
    task = task_preset(dataset);
  }
  task.seed = seed;
  return task;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"toy transformer laboratory for attention-normalisation "
               "stability experiments"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand name

  std::string out_dir = ".";
  std::uint64_t seed = 0;
  std::string strategy_name = "pre-norm";
  std::string preset_name = "desk";
  std::string config_path;
  app.add_option("--out", out_dir, "output directory")->capture_default_str();
  app.add_option("--seed", seed, "master seed")->capture_default_str();
  app.add_option("--strategy", strategy_name,
                 "no-norm | pre-norm | qkv-norm")->capture_default_str();
  app.add_option("--preset", preset_name,
                 "baseline | alternate | large | desk")->capture_default_str();
  app.add_option("--config", config_path, "key = value config file");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "emit task samples as JSONL");
  std::vector<int> gen_n, gen_l;
  std::size_t gen_count = 16;
  std::string gen_dataset = "desk-train";
  gen->add_option("-N", gen_n, "allowed integers per sum");
  gen->add_option("-L", gen_l, "allowed digits per integer");
  gen->add_option("--count", gen_count, "samples to emit");
  gen->add_option("--dataset", gen_dataset, "named dataset preset");

  // train
  auto* tr = app.add_subcommand("train", "train a model, emit metrics JSONL");
  std::size_t tr_eval_points = 256;
  tr->add_option("--eval-points", tr_eval_points, "eval samples per epoch");

  // eval
  auto* ev = app.add_subcommand("eval", "teacher-forced per-token accuracy");
  std::string ev_model, ev_dataset = "desk-train";
  std::size_t ev_points = 512;
  bool ev_no_end = false;
  bool ev_autoreg = false;
  ev->add_option("--model", ev_model, "checkpoint path")->required();
  ev->add_option("--dataset", ev_dataset, "dataset preset");
  ev->add_option("--points", ev_points, "number of samples");
  ev->add_flag("--exclude-end", ev_no_end, "skip the end-sequence token");
  ev->add_flag("--autoregressive", ev_autoreg,
               "also decode answers greedily and score exact matches");

  // perturb
  auto* pb = app.add_subcommand("perturb",
                                "accuracy vs multiplicative norm noise");
  std::string pb_model, pb_dataset = "desk-train", pb_grid = "0,0.01,0.1";
  std::string pb_targets = "qkm", pb_filter = "all";
  std::size_t pb_points = 256, pb_repeats = 3;
  pb->add_option("--model", pb_model, "checkpoint path")->required();
  pb->add_option("--dataset", pb_dataset, "dataset preset");
  pb->add_option("--grid", pb_grid, "comma-separated rms levels");
  pb->add_option("--targets", pb_targets, "subset of q,k,m (e.g. qk)");
  pb->add_option("--filter", pb_filter, "all | sparse | nonsparse");
  pb->add_option("--points", pb_points, "samples per level");
  pb->add_option("--repeats", pb_repeats, "noise seeds per level");

  // collapse
  auto* cl = app.add_subcommand("collapse",
                                "circuit-collapse probability vs noise");
  std::string cl_model, cl_dataset = "desk-train";
  std::string cl_grid = "0,0.02,0.05,0.1,0.2,0.3";
  std::size_t cl_points = 256, cl_repeats = 2;
  cl->add_option("--model", cl_model, "checkpoint path")->required();
  cl->add_option("--dataset", cl_dataset, "dataset preset");
  cl->add_option("--grid", cl_grid, "comma-separated rms levels");
  cl->add_option("--points", cl_points, "samples per level");
  cl->add_option("--repeats", cl_repeats, "noise draws per level");

  // spread
  auto* sp = app.add_subcommand("spread",
                                "attention-weighted embedding-norm spread");
  std::string sp_model, sp_dataset = "desk-train";
  std::size_t sp_points = 256;
  sp->add_option("--model", sp_model, "checkpoint path")->required();
  sp->add_option("--dataset", sp_dataset, "dataset preset");
  sp->add_option("--points", sp_points, "number of samples");

  // sparsity
  auto* sh = app.add_subcommand("sparsity", "histogram of max attention");
  std::string sh_model, sh_dataset = "desk-train";
  std::size_t sh_points = 256;
  sh->add_option("--model", sh_model, "checkpoint path")->required();
  sh->add_option("--dataset", sh_dataset, "dataset preset");
  sh->add_option("--points", sh_points, "number of samples");

  // attn-dump
  auto* ad = app.add_subcommand("attn-dump", "raw attention maps as JSONL");
  std::string ad_model, ad_dataset = "desk-train";
  std::size_t ad_points = 4;
  ad->add_option("--model", ad_model, "checkpoint path")->required();
  ad->add_option("--dataset", ad_dataset, "dataset preset");
  ad->add_option("--points", ad_points, "number of samples");

  // verify-theory
  auto* vt = app.add_subcommand("verify-theory",
                                "run the perturbation-theory battery");
  std::size_t vt_trials = 100;
  std::string vt_replay;
  vt->add_option("--trials", vt_trials, "instances per property");
  vt->add_option("--replay", vt_replay, "re-run one property by name");

  CLI11_PARSE(app, argc, argv);
  fs::create_directories(out_dir);

  try {
    if (*gen) {
      TaskConfig task = dataset_or_custom(gen_dataset, gen_n, gen_l, seed);
      std::vector<json> records;
      for (std::size_t i = 0; i < gen_count; ++i) {
        Sample s = sample_at(task, i);
        records.push_back({{"text_in", s.text_in()},
                           {"text_out", s.text_out()},
                           {"answer", s.answer_value}});
      }
      const std::string path = out_dir + "/samples.jsonl";
      write_jsonl(path, records);
      std::printf("wrote %zu samples to %s\n", gen_count, path.c_str());
    }

    if (*tr) {
      ModelConfig mc = model_preset(preset_name);
      mc.strategy = strategy_from_name(strategy_name);
      mc.seed = mc.seed ^ seed;
      TaskConfig task = task_preset(train_preset_of(preset_name));
      task.seed = seed;
      TrainConfig cfg;
      cfg.seed = seed;
      if (preset_name == "desk") {
        cfg.batches_per_epoch = 200;
        cfg.batch_size = 64;
        cfg.lr = 1e-3;
      }
      if (!config_path.empty())
        apply_train_config(read_config_file(config_path), cfg);

      std::vector<EvalDataset> evals = {{"in", task, tr_eval_points}};
      if (preset_name != "desk") {
        TaskConfig interp = task_preset(preset_name == "alternate"
                                            ? "alternate-ood-interp"
                                            : preset_name + "-ood-interp");
        TaskConfig extrap = task_preset(preset_name == "alternate"
                                            ? "alternate-ood-extrap"
                                            : preset_name + "-ood-extrap");
        interp.seed = seed;
        extrap.seed = seed;
        evals.push_back({"ood-interp", interp, tr_eval_points});
        evals.push_back({"ood-extrap", extrap, tr_eval_points});
      }

      ModelState st = init(mc);
      std::ofstream metrics(out_dir + "/metrics.jsonl", std::ios::trunc);
      auto history = train(st, task, cfg, evals,
                           [&](const MetricsRecord& r) {
                             json accs;
                             for (const auto& [name, est] :
                                  r.per_token_accuracy)
                               accs[name] = {{"accuracy", est.accuracy},
                                             {"stderr", est.stderr_binomial}};
                             json rec = {{"schema_version",
                                          kReportSchemaVersion},
                                         {"epoch", r.epoch},
                                         {"train_loss", r.train_loss},
                                         {"per_token_accuracy", accs},
                                         {"current_lr", r.current_lr},
                                         {"wall_time", r.wall_time}};
                             metrics << rec.dump() << "\n";
                             metrics.flush();
                             std::fprintf(stderr,
                                          "epoch %zu loss %.4f lr %.2e\n",
                                          r.epoch, r.train_loss,
                                          r.current_lr);
                           });
      const std::string model_path = out_dir + "/model.nckt";
      save_checkpoint(st, model_path);
      std::printf("trained %zu epochs; checkpoint at %s\n", history.size(),
                  model_path.c_str());
    }

    if (*ev) {
      ModelState st = load_checkpoint(ev_model);
      TaskConfig task = task_preset(ev_dataset);
      task.seed = seed;
      AccuracyEstimate est = evaluate(st, task, ev_points, 0xe7a1, ev_no_end);
      std::printf("%s: accuracy %.4f +- %.4f (%zu/%zu)\n", ev_dataset.c_str(),
                  est.accuracy, est.stderr_binomial, est.correct, est.total);
      json record = {{"kind", "eval"},
                     {"dataset", ev_dataset},
                     {"accuracy", est.accuracy},
                     {"stderr", est.stderr_binomial},
                     {"correct", est.correct},
                     {"total", est.total}};
      if (ev_autoreg) {
        AnswerAccuracy ar = autoregressive_answers(st, task, ev_points);
        std::printf("%s: exact answers %.4f (%zu/%zu)\n", ev_dataset.c_str(),
                    ar.accuracy, ar.correct, ar.total);
        record["exact_answer_accuracy"] = ar.accuracy;
        record["exact_answers"] = ar.correct;
      }
      write_jsonl(out_dir + "/eval.jsonl", {record});
    }

    if (*pb) {
      ModelState st = load_checkpoint(pb_model);
      TaskConfig task = task_preset(pb_dataset);
      task.seed = seed;
      NoiseSpec spec;
      spec.seed = seed;
      spec.targets.clear();
      for (char c : pb_targets) {
        if (c == 'q') spec.targets.insert(NoiseTarget::kQuery);
        if (c == 'k') spec.targets.insert(NoiseTarget::kKey);
        if (c == 'm') spec.targets.insert(NoiseTarget::kMessage);
      }
      spec.head_filter = pb_filter == "sparse"      ? HeadFilter::kSparse
                         : pb_filter == "nonsparse" ? HeadFilter::kNonSparse
                                                    : HeadFilter::kAll;
      NoiseCurve curve = accuracy_vs_noise(st, task, parse_grid(pb_grid),
                                           spec, pb_points, pb_repeats);
      write_jsonl(out_dir + "/noise_curve.jsonl", {curve_to_json(curve)});
      std::vector<std::array<double, 3>> rows;
      for (const auto& p : curve.points)
        rows.push_back({p.rms, p.accuracy, p.accuracy_stderr});
      write_curve_csv(out_dir + "/noise_curve.csv", rows);
      for (const auto& p : curve.points)
        std::printf("rms %.4f accuracy %.4f +- %.4f (no-end %.4f)\n", p.rms,
                    p.accuracy, p.accuracy_stderr, p.accuracy_no_end);
    }

    if (*cl) {
      ModelState st = load_checkpoint(cl_model);
      TaskConfig task = task_preset(cl_dataset);
      task.seed = seed;
      CollapseReport rep = collapse_probability(
          st, task, parse_grid(cl_grid), cl_points, seed, cl_repeats);
      write_jsonl(out_dir + "/collapse.jsonl", {collapse_to_json(rep)});
      std::vector<std::array<double, 3>> rows;
      for (const auto& lv : rep.levels) {
        const double se =
            lv.sparse_count
                ? std::sqrt(lv.probability * (1 - lv.probability) /
                            double(lv.sparse_count))
                : 0.0;
        rows.push_back({lv.rms, lv.probability, se});
        std::printf(
            "rms %.4f collapse %.5f strict %.5f (%zu sparse)\n", lv.rms,
            lv.probability, lv.strict_probability, lv.sparse_count);
      }
      write_curve_csv(out_dir + "/collapse.csv", rows);
    }

    if (*sp) {
      ModelState st = load_checkpoint(sp_model);
      TaskConfig task = task_preset(sp_dataset);
      task.seed = seed;
      SpreadReport rep = embedding_spread(st, task, sp_points);
      write_jsonl(out_dir + "/spread.jsonl", {spread_to_json(rep)});
      std::printf("mean central-90%% half-width %.4f over %zu heads\n",
                  rep.mean_half_width, rep.heads.size());
    }

    if (*sh) {
      ModelState st = load_checkpoint(sh_model);
      TaskConfig task = task_preset(sh_dataset);
      task.seed = seed;
      SparsityHistogram hist = sparsity_histogram(st, task, sh_points);
      write_jsonl(out_dir + "/sparsity.jsonl", {histogram_to_json(hist)});
      std::printf("sparsity: %.4f of %zu distributions at max >= 0.95\n",
                  hist.mass_at_least(0.95), hist.total);
    }

    if (*ad) {
      ModelState st = load_checkpoint(ad_model);
      TaskConfig task = task_preset(ad_dataset);
      task.seed = seed;
      CaptureSpec cs;
      cs.attention = true;
      std::vector<json> records;
      auto samples = eval_samples(task, ad_points);
      for (std::size_t i = 0; i < samples.size(); ++i) {
        SequenceTrace trace = capture(st, samples[i].input_ids, 0, cs);
        json layers = json::array();
        for (const auto& layer : trace.layers) {
          json heads = json::array();
          for (const auto& head : layer.heads)
            heads.push_back(head.attention.values());
          layers.push_back(heads);
        }
        records.push_back({{"kind", "attention_maps"},
                           {"sample", i},
                           {"text_in", samples[i].text_in()},
                           {"rows", samples[i].input_ids.size()},
                           {"layers", layers}});
      }
      write_jsonl(out_dir + "/attention.jsonl", records);
      std::printf("dumped %zu attention maps\n", records.size());
    }

    if (*vt) {
      if (!vt_replay.empty()) {
        PropertyResult p = replay_property(vt_replay, vt_trials, seed);
        std::printf("replay %-38s worst %.3e tol %.3e trial %zu %s\n",
                    p.name.c_str(), p.worst_err, p.tolerance, p.failing_trial,
                    p.pass ? "PASS" : "FAIL");
        return p.pass ? 0 : 1;
      }
      PerturbationReport rep = verify_theory(vt_trials, seed);
      for (const auto& p : rep.properties)
        std::printf("%-38s trials %-6zu worst %.3e tol %.3e %s\n",
                    p.name.c_str(), p.trials, p.worst_err, p.tolerance,
                    p.pass ? "PASS" : "FAIL");
      write_jsonl(out_dir + "/theory.jsonl", {rep.to_json()});
      if (!rep.all_pass) {
        for (const auto& p : rep.properties)
          if (!p.pass) {
            json failing = {{"kind", "failing_instance"},
                            {"property", p.name},
                            {"seed", p.seed},
                            {"trials", p.trials},
                            {"failing_trial", p.failing_trial},
                            {"worst_err", p.worst_err}};
            write_jsonl(out_dir + "/failing_instance.jsonl", {failing});
          }
        std::fprintf(stderr, "theory battery FAILED\n");
        return 1;
      }
      std::printf("theory battery: all %zu properties pass\n",
                  rep.properties.size());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
