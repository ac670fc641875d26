#include "shaplora/workflow.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <limits>
#include <string>

#include "shaplora/errors.hpp"
#include "shaplora/random.hpp"

namespace shaplora {

void TrainConfig::validate(std::string_view prefix) const {
  const std::string p(prefix);
  if (!(learning_rate >= 0.0)) throw ConfigError(p + ".learning_rate must be >= 0");
  if (batch_size < 1) throw ConfigError(p + ".batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError(p + ".max_epochs must be >= 1");
  if (eval_every_steps < 1) throw ConfigError(p + ".eval_every_steps must be >= 1");
  if (patience < 1) throw ConfigError(p + ".patience must be >= 1");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
    throw ConfigError(p + ".warmup_fraction must lie in [0, 1)");
  }
  if (!(weight_decay >= 0.0)) throw ConfigError(p + ".weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError(p + ".beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError(p + ".beta2 must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError(p + ".adam_eps must be > 0");
}

void PipelineConfig::validate() const {
  model.validate();
  if (r_init < 1) throw ConfigError("r_init must be >= 1");
  if (r_target < 0) throw ConfigError("r_target must be >= 0 (0 selects R_init / 2)");
  if (r_target > total_initial_ranks()) {
    throw ConfigError("r_target " + std::to_string(r_target) + " exceeds R_init " +
                      std::to_string(total_initial_ranks()));
  }
  if (resolved_r_target() < 1) throw ConfigError("r_target resolves to zero ranks");
  if (mask_rates.empty()) throw ConfigError("mask_rates must not be empty");
  for (double r : mask_rates) {
    if (!(r > 0.0 && r < 1.0)) throw ConfigError("mask_rates entries must lie in (0, 1)");
  }
  if (mask_repeats < 1) throw ConfigError("mask_repeats must be >= 1");
  if (validation_batches < 1) throw ConfigError("validation_batches must be >= 1");
  if (schedule.k_per_event < 1) throw ConfigError("schedule.k_per_event must be >= 1");
  if (schedule.every_m_steps < 1) throw ConfigError("schedule.every_m_steps must be >= 1");
  if (task.seq_len < 1 || task.seq_len > model.max_seq_len) {
    throw ConfigError("task.seq_len must lie in [1, model.max_seq_len]");
  }
  if (task.sizes.n_train < 1 || task.sizes.n_dev < 1 || task.sizes.n_test < 1) {
    throw ConfigError("task sizes must be >= 1");
  }
  if (task.kind == TaskKind::planted) {
    if (task.planted_kinds.empty()) throw ConfigError("task.planted_kinds must not be empty");
    if (!(task.perturb_scale >= 0.0)) throw ConfigError("task.perturb_scale must be >= 0");
  } else if (task.seq_len % 2 != 0 || model.vocab_size < 4) {
    throw ConfigError("copy task needs an even task.seq_len and model.vocab_size >= 4");
  }
  stage1.validate("stage1");
  stage2.validate("stage2");
}

Dataset make_dataset(const PipelineConfig& cfg) {
  const TaskConfig& t = cfg.task;
  if (t.kind == TaskKind::copy) {
    return gen_copy_task(t.sizes.n_train, t.sizes.n_dev, t.sizes.n_test, t.seq_len,
                         cfg.model.vocab_size, cfg.seeds.data);
  }
  PlantedTaskSpec spec;
  spec.model = cfg.model;
  spec.base_model_seed = cfg.seeds.model;
  spec.planted_kinds = t.planted_kinds;
  spec.perturb_scale = t.perturb_scale;
  spec.sizes = t.sizes;
  spec.seq_len = t.seq_len;
  spec.seed = cfg.seeds.data;
  return gen_planted_task(spec);
}

// ---- evaluation -------------------------------------------------------------------

namespace {

constexpr int kEvalBatch = 64;

std::size_t supervised(const Batch& b) {
  return static_cast<std::size_t>(
      std::count_if(b.targets.begin(), b.targets.end(), [](int t) { return t >= 0; }));
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

double split_loss(const Model& model, const std::vector<Sequence>& seqs,
                  const CoalitionMask* mask) {
  if (seqs.empty()) throw ContractError("split_loss: empty split");
  double total = 0.0;
  std::size_t count = 0;
  for (const Batch& b : ordered_batches(seqs, kEvalBatch)) {
    const std::size_t n = supervised(b);
    if (n == 0) continue;
    total += evaluate_loss(model, b, mask) * static_cast<double>(n);
    count += n;
  }
  if (count == 0) throw ContractError("split_loss: no supervised positions");
  return total / static_cast<double>(count);
}

double split_accuracy(const Model& model, const std::vector<Sequence>& seqs) {
  std::size_t hits = 0, count = 0;
  for (const Batch& b : ordered_batches(seqs, kEvalBatch)) {
    const Tensor logits = forward_logits(model, b);
    const std::size_t V = logits.dim(1);
    for (std::size_t r = 0; r < b.targets.size(); ++r) {
      if (b.targets[r] < 0) continue;
      const double* row = logits.data() + r * V;
      hits += static_cast<int>(std::max_element(row, row + V) - row) == b.targets[r];
      ++count;
    }
  }
  return count ? static_cast<double>(hits) / static_cast<double>(count) : 0.0;
}

// ---- training -------------------------------------------------------------------------

namespace {

struct AdamSlot {
  Tensor m, v;
};

void adamw_update(Tensor& param, const Tensor& grad, AdamSlot& slot, double lr,
                  const TrainConfig& cfg, int t, const std::vector<char>* active, bool by_col,
                  bool by_row) {
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  const std::size_t cols = param.shape().back();
  for (std::size_t i = 0; i < param.size(); ++i) {
    if (active) {
      const std::size_t r = by_col ? i % cols : by_row ? i / cols : i;
      if (!(*active)[r]) continue;
    }
    const double g = grad[i];
    slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
    slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mh = slot.m[i] / c1;
    const double vh = slot.v[i] / c2;
    param[i] -= lr * (mh / (std::sqrt(vh) + cfg.adam_eps) + cfg.weight_decay * param[i]);
  }
}

double scheduled_lr(const TrainConfig& cfg, int step, int total, int warmup) {
  if (warmup > 0 && step <= warmup) {
    return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(warmup);
  }
  const double remain = static_cast<double>(total - step) / static_cast<double>(total - warmup);
  return cfg.learning_rate * std::max(0.0, remain);
}

}  // namespace

TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
  cfg.validate("train");
  if (!model.lora_attached()) throw StateError("train: no LoRA attached");
  if (data.train.empty() || data.dev.empty()) {
    throw ContractError("train: dataset needs train and dev splits");
  }
  const int per_epoch = static_cast<int>((data.train.size() + cfg.batch_size - 1) / cfg.batch_size);
  const int total = per_epoch * cfg.max_epochs;
  const int warmup = static_cast<int>(std::floor(cfg.warmup_fraction * total));

  std::vector<std::optional<std::array<AdamSlot, 3>>> slots(model.num_modules());
  for (std::size_t m = 0; m < model.num_modules(); ++m) {
    if (const LoraModule* mod = model.lora_at(m)) {
      slots[m] = std::array<AdamSlot, 3>{
          AdamSlot{Tensor(mod->P.shape(), 0.0), Tensor(mod->P.shape(), 0.0)},
          AdamSlot{Tensor(mod->lambda.shape(), 0.0), Tensor(mod->lambda.shape(), 0.0)},
          AdamSlot{Tensor(mod->Q.shape(), 0.0), Tensor(mod->Q.shape(), 0.0)}};
    }
  }

  auto selecting = [&] { return !hooks.selection_enabled || hooks.selection_enabled(); };

  TrainResult result;
  Model best = model;
  result.best_dev_loss = std::numeric_limits<double>::infinity();
  int bad_evals = 0;
  double train_sum = 0.0;
  int train_count = 0;

  auto evaluate = [&](int step, double train_loss) {
    const double dev = split_loss(model, data.dev);
    result.curve.push_back(CurvePoint{step, train_loss, dev});
    if (!selecting()) return false;
    if (dev < result.best_dev_loss) {
      result.best_dev_loss = dev;
      result.best_step = step;
      best = model;
      bad_evals = 0;
    } else if (++bad_evals >= cfg.patience) {
      return true;
    }
    return false;
  };

  evaluate(0, split_loss(model, data.train));

  int step = 0;
  bool stop = false;
  for (int epoch = 0; epoch < cfg.max_epochs && !stop; ++epoch) {
    for (const Batch& batch : batches(data.train, cfg.batch_size, derive_seed(cfg.seed, epoch))) {
      ++step;
      LossAndGrads lg;
      try {
        lg = lora_loss_and_grads(model, batch);
      } catch (const NumericError& e) {
        throw TrainingError("training diverged at step " + std::to_string(step) + ": " + e.what());
      }
      if (!std::isfinite(lg.loss)) {
        throw TrainingError("training diverged at step " + std::to_string(step));
      }
      const double lr = scheduled_lr(cfg, step, total, warmup);
      for (std::size_t m = 0; m < model.num_modules(); ++m) {
        LoraModule* mod = model.mutable_lora_at(m);
        if (!mod || !lg.grads[m]) continue;
        auto& s = *slots[m];
        const auto* act = &mod->active;
        adamw_update(mod->P, lg.grads[m]->P, s[0], lr, cfg, step, act, true, false);
        adamw_update(mod->lambda, lg.grads[m]->lambda, s[1], lr, cfg, step, act, false, false);
        adamw_update(mod->Q, lg.grads[m]->Q, s[2], lr, cfg, step, act, false, true);
        for (const auto& t : {&mod->P, &mod->lambda, &mod->Q}) {
          if (!t->all_finite()) {
            throw TrainingError("non-finite LoRA parameter after step " + std::to_string(step));
          }
        }
      }
      train_sum += lg.loss;
      ++train_count;
      if (hooks.after_step) hooks.after_step(model, step);
      if (step % cfg.eval_every_steps == 0) {
        stop = evaluate(step, train_sum / train_count);
        train_sum = 0.0;
        train_count = 0;
        if (stop) break;
      }
    }
  }
  if (train_count > 0) evaluate(step, train_sum / train_count);
  result.steps_run = step;
  result.stopped_early = stop;
  if (std::isfinite(result.best_dev_loss)) model = std::move(best);
  return result;
}

// ---- pipeline ---------------------------------------------------------------------------

namespace {

std::vector<Batch> scoring_batches(const Dataset& data, const PipelineConfig& cfg) {
  return batches(data.split(cfg.scoring_split), cfg.stage1.batch_size,
                 derive_seed(cfg.seeds.data, 0x5c0e));
}

}  // namespace

ImportanceReport score_model(const Model& model, const Dataset& data, const PipelineConfig& cfg,
                             std::uint64_t plan_seed) {
  const auto data_batches = scoring_batches(data, cfg);
  ScoringOptions opts;
  opts.max_batches = cfg.validation_batches;
  opts.conditional_average = cfg.conditional_average;
  switch (cfg.scoring_method) {
    case ScoringMethod::shapley_sensitivity: {
      const auto ranks = model.rank_ids();
      const auto plan = sample_coalitions(ranks, cfg.mask_rates, cfg.mask_repeats, plan_seed);
      return shapley_sensitivity(model, plan, data_batches, cfg.scoring_split, opts);
    }
    case ScoringMethod::plain_sensitivity:
      return plain_sensitivity(model, data_batches, cfg.scoring_split, opts);
    case ScoringMethod::magnitude: {
      ImportanceReport r = magnitude_score(model);
      r.split = cfg.scoring_split;
      return r;
    }
  }
  throw ConfigError("unknown scoring method");
}

Stage1Result stage1_allocate(const PipelineConfig& cfg, const Dataset& data) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Model model = Model::build(cfg.model, cfg.seeds.model);
  model.attach_lora(cfg.r_init, cfg.seeds.lora_stage1);
  const int r_target = cfg.resolved_r_target();

  Stage1Result out{ImportanceReport{}, AllocationConfig{}, Model{}, TrainResult{}, 0.0};
  if (cfg.schedule.kind == ScheduleKind::gradual) {
    out.allocation = gradual_prune(model, data, cfg.stage1, cfg.schedule.k_per_event,
                                   cfg.schedule.every_m_steps, r_target, cfg.scoring_method, cfg,
                                   &out.training, &out.report);
  } else {
    out.training = train(model, data, cfg.stage1);
    out.report = score_model(model, data, cfg, cfg.seeds.plan);
    out.allocation = allocation_from_scores(out.report, r_target);
  }
  out.allocation.r_init = cfg.r_init;
  out.allocation.seed = cfg.seeds.plan;
  out.checkpoint = std::move(model);
  out.seconds = seconds_since(t0);
  return out;
}

Stage2Result stage2_retrain(const AllocationConfig& alloc, const PipelineConfig& cfg,
                            const Dataset& data) {
  cfg.validate();
  if (alloc.total_kept() < 1) throw BudgetError("allocation keeps no ranks");
  for (const auto& [id, n] : alloc.kept) {
    if (n > cfg.r_init) {
      throw BudgetError("allocation gives module " + id.str() + " more ranks than r_init");
    }
  }
  const auto t0 = std::chrono::steady_clock::now();
  Model model = Model::build(cfg.model, cfg.seeds.model);
  model.attach_allocation(alloc, cfg.seeds.lora_stage2);
  Stage2Result out{Model{}, TrainResult{}, 0.0, 0.0, 0.0, 0.0, 0.0};
  out.initial_dev_loss = split_loss(model, data.dev);
  out.training = train(model, data, cfg.stage2);
  out.dev_loss = split_loss(model, data.dev);
  out.test_loss = split_loss(model, data.test);
  out.test_accuracy = split_accuracy(model, data.test);
  out.model = std::move(model);
  out.seconds = seconds_since(t0);
  return out;
}

RunReport run_pipeline(const PipelineConfig& cfg, const Dataset& data) {
  RunReport r{cfg, stage1_allocate(cfg, data), Stage2Result{}};
  r.stage2 = stage2_retrain(r.stage1.allocation, cfg, data);
  return r;
}

// ---- gradual schedule ---------------------------------------------------------------------

AllocationConfig gradual_prune(Model& model, const Dataset& data, const TrainConfig& train_cfg,
                               int k_per_event, int every_m_steps, int r_target,
                               ScoringMethod method, const PipelineConfig& scoring_cfg,
                               TrainResult* training, ImportanceReport* last_report) {
  if (k_per_event < 1) throw ConfigError("k_per_event must be >= 1");
  if (every_m_steps < 1) throw ConfigError("every_m_steps must be >= 1");
  if (r_target < 1 || r_target > model.total_ranks()) {
    throw BudgetError("gradual_prune: rank budget outside [1, current ranks]");
  }

  auto active_ranks = [&] {
    std::vector<RankId> ids;
    for (const auto& id : model.rank_ids()) {
      const LoraModule* mod = model.lora(id.module);
      if (mod->active[static_cast<std::size_t>(mod->position(id.index))]) ids.push_back(id);
    }
    return ids;
  };

  PipelineConfig event_cfg = scoring_cfg;
  event_cfg.scoring_method = method;
  event_cfg.mask_rates = kGradualMaskRates;
  event_cfg.mask_repeats = 1;
  const auto data_batches = scoring_batches(data, event_cfg);
  ScoringOptions opts;
  opts.max_batches = event_cfg.validation_batches;

  int remaining = static_cast<int>(active_ranks().size());
  int event = 0;
  ImportanceReport report;

  TrainHooks hooks;
  hooks.selection_enabled = [&] { return remaining == r_target; };
  hooks.after_step = [&](Model& m, int step) {
    if (remaining <= r_target || step % every_m_steps != 0) return;
    const auto active = active_ranks();
    switch (method) {
      case ScoringMethod::shapley_sensitivity: {
        const auto plan = sample_coalitions(active, kGradualMaskRates, 1,
                                            derive_seed(scoring_cfg.seeds.plan, event));
        report = shapley_sensitivity(m, plan, data_batches, event_cfg.scoring_split, opts);
        break;
      }
      case ScoringMethod::plain_sensitivity:
        report = plain_sensitivity(m, data_batches, event_cfg.scoring_split, opts);
        break;
      case ScoringMethod::magnitude: report = magnitude_score(m); break;
    }
    // Lowest scores go first; among ties the larger RankId goes first so the
    // survivors match allocation_from_scores' tie rule.
    std::vector<std::pair<double, RankId>> order;
    for (const auto& id : active) order.push_back({report.scores.at(id), id});
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first < b.first;
      return a.second > b.second;
    });
    const int n_prune = std::min(k_per_event, remaining - r_target);
    for (int i = 0; i < n_prune; ++i) {
      const RankId& id = order[static_cast<std::size_t>(i)].second;
      LoraModule* mod = m.mutable_lora(id.module);
      const auto pos = static_cast<std::size_t>(mod->position(id.index));
      mod->lambda[pos] = 0.0;
      mod->active[pos] = 0;
    }
    remaining -= n_prune;
    ++event;
  };

  TrainResult tr = train(model, data, train_cfg, hooks);
  if (remaining != r_target) {
    throw ScheduleError("training ended after " + std::to_string(event) +
                        " pruning events with " + std::to_string(remaining) +
                        " ranks left; budget " + std::to_string(r_target) + " not reached");
  }

  AllocationConfig alloc;
  alloc.r_init = model.r_init();
  alloc.r_target = r_target;
  alloc.method = std::string(method_name(method));
  alloc.seed = scoring_cfg.seeds.plan;
  for (const auto& id : model.module_ids()) alloc.kept[id] = 0;
  for (const auto& id : active_ranks()) {
    alloc.kept_ranks.push_back(id);
    ++alloc.kept[id.module];
  }
  prune_to_allocation(model, alloc);
  if (training) *training = std::move(tr);
  if (last_report) *last_report = report;
  return alloc;
}

std::map<RankId, double> leave_one_out_importance(const Model& model,
                                                  const std::vector<Sequence>& validation) {
  const double base = split_loss(model, validation);
  std::map<RankId, double> out;
  for (const auto& id : model.rank_ids()) {
    const CoalitionMask mask = CoalitionMask::all_but(model, id);
    out[id] = split_loss(model, validation, &mask) - base;
  }
  return out;
}

}  // namespace shaplora
