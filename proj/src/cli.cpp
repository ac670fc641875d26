#include "shaplora/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "shaplora/errors.hpp"
#include "shaplora/io.hpp"
#include "shaplora/lora.hpp"
#include "shaplora/scoring.hpp"
#include "shaplora/workflow.hpp"

namespace shaplora {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Thrown for problems with the configuration document (exit code 2).
struct ConfigFailure : Error {
  using Error::Error;
};

PipelineConfig read_config(const std::string& path) {
  if (path.empty()) return parse_config("");
  try {
    return load_config(path);
  } catch (const Error& e) {
    throw ConfigFailure(path + ": " + e.what());
  }
}

// Collects the files a command will write, refuses to clobber existing ones
// unless forced, and writes them in one pass once the work is done.
class RunDir {
 public:
  RunDir(fs::path dir, bool force) : dir_(std::move(dir)), force_(force) {}

  void plan(std::initializer_list<std::string> names) {
    for (const auto& n : names) {
      const fs::path p = dir_ / n;
      if (!force_ && fs::exists(p)) {
        throw StateError(p.string() + " already exists; pass --force to overwrite");
      }
      planned_.push_back(n);
    }
  }

  void put(const std::string& name, std::string content) {
    if (std::find(planned_.begin(), planned_.end(), name) == planned_.end()) {
      throw ContractError("unplanned artifact " + name);
    }
    pending_.emplace_back(name, std::move(content));
  }

  void commit() {
    fs::create_directories(dir_);
    for (const auto& [name, content] : pending_) write_file_atomic(dir_ / name, content);
    pending_.clear();
  }

  const fs::path& path() const { return dir_; }

 private:
  fs::path dir_;
  bool force_;
  std::vector<std::string> planned_;
  std::vector<std::pair<std::string, std::string>> pending_;
};

json train_json(const TrainResult& t) {
  return json{{"best_dev_loss", t.best_dev_loss},
              {"best_step", t.best_step},
              {"steps_run", t.steps_run},
              {"stopped_early", t.stopped_early}};
}

json stage2_json(const Stage2Result& s) {
  return json{{"initial_dev_loss", s.initial_dev_loss},
              {"dev_loss", s.dev_loss},
              {"test_loss", s.test_loss},
              {"test_accuracy", s.test_accuracy},
              {"seconds", s.seconds},
              {"training", train_json(s.training)}};
}

json allocation_json(const AllocationConfig& a) {
  json kept = json::object();
  for (const auto& [id, n] : a.kept) kept[id.str()] = n;
  return json{{"r_target", a.r_target}, {"total_kept", a.total_kept()}, {"kept", kept}};
}

std::string scores_csv(const std::map<RankId, double>& scores) {
  ImportanceReport r;
  r.scores = scores;
  return importance_csv(r);
}

std::vector<std::string> pipeline_files() {
  return {"config.json",       "curves_stage1.csv", "importance.csv", "importance.meta.json",
          "allocation.txt",    "stage1.ckpt",       "curves_stage2.csv", "stage2.ckpt",
          "summary.json"};
}

void print_stage1(std::ostream& out, const Stage1Result& s1) {
  out << "stage1: best dev loss " << s1.training.best_dev_loss << " at step "
      << s1.training.best_step << " (" << s1.training.steps_run << " steps, " << s1.seconds
      << " s)\n";
  out << "allocation:";
  for (const auto& [id, n] : s1.allocation.kept) out << ' ' << id.str() << '=' << n;
  out << "  total " << s1.allocation.total_kept() << '\n';
}

void print_stage2(std::ostream& out, const Stage2Result& s2) {
  out << "stage2: dev loss " << s2.initial_dev_loss << " -> " << s2.dev_loss << ", test loss "
      << s2.test_loss << ", test accuracy " << s2.test_accuracy << " (" << s2.seconds << " s)\n";
}

// ---- commands --------------------------------------------------------------------------

struct Common {
  std::string config;
  std::string out;
  bool force = false;
};

int cmd_pipeline(const Common& o, std::ostream& out) {
  const PipelineConfig cfg = read_config(o.config);
  RunDir dir(o.out, o.force);
  for (const auto& f : pipeline_files()) dir.plan({f});
  const Dataset data = make_dataset(cfg);
  const RunReport r = run_pipeline(cfg, data);
  print_stage1(out, r.stage1);
  print_stage2(out, r.stage2);
  dir.put("config.json", config_text(cfg));
  dir.put("curves_stage1.csv", curves_csv(r.stage1.training.curve));
  dir.put("importance.csv", importance_csv(r.stage1.report));
  dir.put("importance.meta.json", importance_meta(r.stage1.report));
  dir.put("allocation.txt", allocation_text(r.stage1.allocation));
  dir.put("stage1.ckpt", checkpoint_text(r.stage1.checkpoint));
  dir.put("curves_stage2.csv", curves_csv(r.stage2.training.curve));
  dir.put("stage2.ckpt", checkpoint_text(r.stage2.model));
  json summary{{"stage1", {{"seconds", r.stage1.seconds}, {"training", train_json(r.stage1.training)}}},
               {"allocation", allocation_json(r.stage1.allocation)},
               {"stage2", stage2_json(r.stage2)}};
  dir.put("summary.json", summary.dump(2) + "\n");
  dir.commit();
  out << "wrote " << dir.path().string() << '\n';
  return kExitOk;
}

int cmd_stage1(const Common& o, std::ostream& out) {
  const PipelineConfig cfg = read_config(o.config);
  RunDir dir(o.out, o.force);
  dir.plan({"config.json", "curves_stage1.csv", "importance.csv", "importance.meta.json",
            "allocation.txt", "stage1.ckpt"});
  const Dataset data = make_dataset(cfg);
  const Stage1Result s1 = stage1_allocate(cfg, data);
  print_stage1(out, s1);
  dir.put("config.json", config_text(cfg));
  dir.put("curves_stage1.csv", curves_csv(s1.training.curve));
  dir.put("importance.csv", importance_csv(s1.report));
  dir.put("importance.meta.json", importance_meta(s1.report));
  dir.put("allocation.txt", allocation_text(s1.allocation));
  dir.put("stage1.ckpt", checkpoint_text(s1.checkpoint));
  dir.commit();
  return kExitOk;
}

int cmd_stage2(const Common& o, const std::string& run_dir, std::ostream& out) {
  const fs::path src(run_dir);
  const PipelineConfig cfg = read_config((src / "config.json").string());
  const AllocationConfig alloc = load_allocation(src / "allocation.txt");
  RunDir dir(o.out.empty() ? src : fs::path(o.out), o.force);
  dir.plan({"curves_stage2.csv", "stage2.ckpt", "stage2_summary.json"});
  const Dataset data = make_dataset(cfg);
  const Stage2Result s2 = stage2_retrain(alloc, cfg, data);
  print_stage2(out, s2);
  dir.put("curves_stage2.csv", curves_csv(s2.training.curve));
  dir.put("stage2.ckpt", checkpoint_text(s2.model));
  dir.put("stage2_summary.json",
          json{{"allocation", allocation_json(alloc)}, {"stage2", stage2_json(s2)}}.dump(2) + "\n");
  dir.commit();
  return kExitOk;
}

int cmd_score(const Common& o, const std::string& checkpoint, const std::string& method,
              const std::string& split, std::ostream& out) {
  PipelineConfig cfg = read_config(o.config);
  try {
    if (!method.empty()) cfg.scoring_method = parse_method(method);
    if (!split.empty()) cfg.scoring_split = parse_split(split);
  } catch (const KeyError& e) {
    throw ConfigFailure(e.what());
  }
  RunDir dir(o.out, o.force);
  dir.plan({"importance.csv", "importance.meta.json"});
  const Model model = load_checkpoint(checkpoint, &cfg.model);
  if (!model.lora_attached()) throw StateError("checkpoint carries no LoRA modules to score");
  const Dataset data = make_dataset(cfg);
  const ImportanceReport r = score_model(model, data, cfg, cfg.seeds.plan);
  out << "scored " << r.scores.size() << " ranks with " << method_name(r.method) << " on "
      << split_name(r.split) << '\n';
  dir.put("importance.csv", importance_csv(r));
  dir.put("importance.meta.json", importance_meta(r));
  dir.commit();
  return kExitOk;
}

int cmd_prune(const Common& o, const std::string& checkpoint, const std::string& importance,
              const std::string& allocation, int r_target, std::ostream& out) {
  RunDir dir(o.out, o.force);
  dir.plan({"allocation.txt", "pruned.ckpt"});
  Model model = load_checkpoint(checkpoint);
  AllocationConfig alloc;
  if (!allocation.empty()) {
    alloc = load_allocation(allocation);
  } else {
    if (importance.empty()) throw ConfigFailure("prune needs --importance or --allocation");
    const ImportanceReport r = load_importance(importance);
    alloc = allocation_from_scores(r, r_target > 0 ? r_target : model.total_ranks() / 2);
    alloc.r_init = model.r_init();
    alloc.seed = r.seed;
  }
  prune_to_allocation(model, alloc);
  out << "pruned to " << model.total_ranks() << " ranks\n";
  dir.put("allocation.txt", allocation_text(alloc));
  dir.put("pruned.ckpt", checkpoint_text(model));
  dir.commit();
  return kExitOk;
}

int cmd_oracle(const Common& o, const std::string& checkpoint, std::ostream& out) {
  const PipelineConfig cfg = read_config(o.config);
  RunDir dir(o.out, o.force);
  dir.plan({"oracle.csv"});
  const Model model = load_checkpoint(checkpoint, &cfg.model);
  if (!model.lora_attached()) throw StateError("checkpoint carries no LoRA modules");
  const Dataset data = make_dataset(cfg);
  const auto loo = leave_one_out_importance(model, data.dev);
  out << "leave-one-out importance for " << loo.size() << " ranks\n";
  dir.put("oracle.csv", scores_csv(loo));
  dir.commit();
  return kExitOk;
}

std::string matrix_csv(const std::vector<std::uint64_t>& seeds,
                       const std::vector<std::vector<double>>& m) {
  std::string s = "seed";
  for (auto sd : seeds) s += "," + std::to_string(sd);
  s += "\n";
  char buf[32];
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    s += std::to_string(seeds[i]);
    for (double v : m[i]) {
      std::snprintf(buf, sizeof buf, ",%.6f", v);
      s += buf;
    }
    s += "\n";
  }
  return s;
}

int cmd_stability(const Common& o, int n_seeds, std::ostream& out) {
  if (n_seeds < 2) throw ConfigFailure("--seeds must be >= 2");
  const PipelineConfig cfg = read_config(o.config);
  RunDir dir(o.out, o.force);
  dir.plan({"stability.csv"});
  const Dataset data = make_dataset(cfg);
  Model model = Model::build(cfg.model, cfg.seeds.model);
  model.attach_lora(cfg.r_init, cfg.seeds.lora_stage1);
  train(model, data, cfg.stage1);

  std::vector<std::uint64_t> seeds;
  std::vector<ImportanceReport> reports;
  for (int i = 0; i < n_seeds; ++i) {
    seeds.push_back(cfg.seeds.plan + static_cast<std::uint64_t>(i));
    reports.push_back(score_model(model, data, cfg, seeds.back()));
  }
  std::vector<std::vector<double>> m(seeds.size(), std::vector<double>(seeds.size(), 0.0));
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    for (std::size_t j = 0; j < seeds.size(); ++j) {
      const auto rho = spearman(reports[i].scores, reports[j].scores);
      if (!rho) throw NumericError("constant score vector; Spearman undefined");
      m[i][j] = *rho;
    }
  }
  const std::string table = matrix_csv(seeds, m);
  out << table;
  dir.put("stability.csv", table);
  dir.commit();
  return kExitOk;
}

int cmd_budget_sweep(const Common& o, const std::vector<int>& targets, std::ostream& out) {
  if (targets.empty()) throw ConfigFailure("--targets must not be empty");
  const PipelineConfig base = read_config(o.config);
  for (int t : targets) {
    if (t < 1) throw ConfigFailure("budget targets must be >= 1");
  }
  RunDir dir(o.out, o.force);
  dir.plan({"budget_sweep.csv", "budget_sweep.json"});
  const Dataset data = make_dataset(base);
  const int n_modules = kNumModuleKinds * base.model.n_layers;

  // Targets above r_init raise r_init to the target; stage 1 is shared among
  // targets with the same r_init.
  std::map<int, Stage1Result> stage1;
  std::string csv = "r_target_avg,r_init,total_kept,dev_loss,test_loss,test_accuracy\n";
  json reports = json::array();
  for (int t : targets) {
    PipelineConfig cfg = base;
    cfg.r_init = std::max(base.r_init, t);
    cfg.r_target = t * n_modules;
    cfg.validate();
    auto it = stage1.find(cfg.r_init);
    if (it == stage1.end()) it = stage1.emplace(cfg.r_init, stage1_allocate(cfg, data)).first;
    AllocationConfig alloc = allocation_from_scores(it->second.report, cfg.r_target);
    alloc.r_init = cfg.r_init;
    alloc.seed = cfg.seeds.plan;
    const Stage2Result s2 = stage2_retrain(alloc, cfg, data);
    out << "r_target " << t << " (r_init " << cfg.r_init << "): ";
    print_stage2(out, s2);
    char row[160];
    std::snprintf(row, sizeof row, "%d,%d,%d,%.17g,%.17g,%.17g\n", t, cfg.r_init,
                  alloc.total_kept(), s2.dev_loss, s2.test_loss, s2.test_accuracy);
    csv += row;
    reports.push_back(json{{"r_target_avg", t},
                           {"r_init", cfg.r_init},
                           {"allocation", allocation_json(alloc)},
                           {"stage2", stage2_json(s2)}});
  }
  dir.put("budget_sweep.csv", csv);
  dir.put("budget_sweep.json", reports.dump(2) + "\n");
  dir.commit();
  return kExitOk;
}

int cmd_export(const Common& o, std::ostream& out) {
  const PipelineConfig cfg = read_config(o.config);
  RunDir dir(o.out, o.force);
  dir.plan({"train.txt", "dev.txt", "test.txt"});
  const Dataset data = make_dataset(cfg);
  dir.put("train.txt", dataset_text(data, Split::train));
  dir.put("dev.txt", dataset_text(data, Split::validation));
  dir.put("test.txt", dataset_text(data, Split::test));
  dir.commit();
  out << "exported " << data.train.size() << "/" << data.dev.size() << "/" << data.test.size()
      << " sequences\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Shapley-sensitivity LoRA rank allocation on a small decoder", "shaplora"};
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub, bool needs_out = true) {
    sub->add_option("--config", common.config, "pipeline config (JSON); defaults when omitted")
        ->check(CLI::ExistingFile);
    auto* o = sub->add_option("--out", common.out, "output directory");
    if (needs_out) o->required();
    sub->add_flag("--force", common.force, "overwrite existing artifacts");
  };

  std::string run_dir, checkpoint, importance, allocation, method, split;
  int r_target = 0;
  int n_seeds = 3;
  std::vector<int> targets = {1, 2, 4, 8, 16, 32};

  auto* pipeline = app.add_subcommand("pipeline", "stage 1 then stage 2");
  add_common(pipeline);
  auto* stage1 = app.add_subcommand("stage1", "train uniform LoRA, score, allocate");
  add_common(stage1);
  auto* stage2 = app.add_subcommand("stage2", "retrain from a run directory's allocation");
  add_common(stage2, false);
  stage2->add_option("--run-dir", run_dir, "directory holding config.json and allocation.txt")
      ->required()
      ->check(CLI::ExistingDirectory);
  auto* score = app.add_subcommand("score", "score the ranks of a checkpoint");
  add_common(score);
  score->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  score->add_option("--method", method, "shapley_sensitivity, plain_sensitivity or magnitude");
  score->add_option("--split", split, "train, validation or test");
  auto* prune = app.add_subcommand("prune", "physically prune a checkpoint");
  add_common(prune);
  prune->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  prune->add_option("--importance", importance, "importance CSV")->check(CLI::ExistingFile);
  prune->add_option("--allocation", allocation, "allocation document")->check(CLI::ExistingFile);
  prune->add_option("--r-target", r_target, "total ranks to keep (default half)");
  auto* oracle = app.add_subcommand("oracle", "leave-one-out importance on the dev split");
  add_common(oracle);
  oracle->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  auto* stability = app.add_subcommand("stability", "Spearman matrix across plan seeds");
  add_common(stability);
  stability->add_option("--seeds", n_seeds, "number of plan seeds");
  auto* sweep = app.add_subcommand("budget-sweep", "one pipeline report per rank budget");
  add_common(sweep);
  sweep->add_option("--targets", targets, "average kept ranks per module")->delimiter(',');
  auto* exp = app.add_subcommand("export", "dump the generated dataset");
  add_common(exp);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (pipeline->parsed()) return cmd_pipeline(common, out);
    if (stage1->parsed()) return cmd_stage1(common, out);
    if (stage2->parsed()) return cmd_stage2(common, run_dir, out);
    if (score->parsed()) return cmd_score(common, checkpoint, method, split, out);
    if (prune->parsed()) {
      return cmd_prune(common, checkpoint, importance, allocation, r_target, out);
    }
    if (oracle->parsed()) return cmd_oracle(common, checkpoint, out);
    if (stability->parsed()) return cmd_stability(common, n_seeds, out);
    if (sweep->parsed()) return cmd_budget_sweep(common, targets, out);
    if (exp->parsed()) return cmd_export(common, out);
  } catch (const ConfigFailure& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace shaplora
