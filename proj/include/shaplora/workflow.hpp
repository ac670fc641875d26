#pragma once

// Training (AdamW on LoRA parameters, early stopping on dev loss) and the
// two-stage allocate-then-retrain pipeline.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "shaplora/model.hpp"
#include "shaplora/scoring.hpp"
#include "shaplora/tasks.hpp"
#include "shaplora/types.hpp"

namespace shaplora {

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 16;
  int max_epochs = 10;
  int eval_every_steps = 50;
  int patience = 10;
  double warmup_fraction = 0.06;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate(std::string_view prefix) const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct CurvePoint {
  int step = 0;
  double train_loss = 0.0;
  double dev_loss = 0.0;

  friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

struct TrainResult {
  std::vector<CurvePoint> curve;
  double best_dev_loss = 0.0;
  int best_step = 0;
  int steps_run = 0;
  bool stopped_early = false;
};

struct TrainHooks {
  // Runs after every optimizer step (1-based step index).
  std::function<void(Model&, int)> after_step;
  // While this returns false, dev evaluations are recorded but neither
  // update the best checkpoint nor count towards patience.
  std::function<bool()> selection_enabled;
};

/// Token-weighted mean cross-entropy over a whole split.
double split_loss(const Model& model, const std::vector<Sequence>& seqs,
                  const CoalitionMask* mask = nullptr);
/// Fraction of supervised positions whose argmax equals the target.
double split_accuracy(const Model& model, const std::vector<Sequence>& seqs);

/// AdamW on the LoRA parameters with linear warmup then linear decay. The dev
/// split is evaluated at step 0 and every eval_every_steps; training stops
/// after `patience` evaluations without a strictly lower dev loss. `model` is
/// left at the best-dev checkpoint. Throws TrainingError on divergence.
TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

enum class ScheduleKind { one_shot, gradual };

struct Schedule {
  ScheduleKind kind = ScheduleKind::one_shot;
  int k_per_event = 4;
  int every_m_steps = 25;

  friend bool operator==(const Schedule&, const Schedule&) = default;
};

struct TaskConfig {
  TaskKind kind = TaskKind::planted;
  SplitSizes sizes;
  int seq_len = 16;
  std::vector<ModuleKind> planted_kinds = {ModuleKind::V, ModuleKind::U};
  double perturb_scale = 1.0;

  friend bool operator==(const TaskConfig&, const TaskConfig&) = default;
};

struct Seeds {
  std::uint64_t model = 1;
  std::uint64_t data = 2;
  std::uint64_t lora_stage1 = 3;
  std::uint64_t lora_stage2 = 4;
  std::uint64_t plan = 5;

  friend bool operator==(const Seeds&, const Seeds&) = default;
};

// Full-scale recipe value for r_init; the desk default below is scaled down.
inline constexpr int kReferenceRInit = 16;

struct PipelineConfig {
  ModelConfig model;
  TaskConfig task;
  int r_init = 4;
  int r_target = 0;  // 0 selects R_init / 2
  ScoringMethod scoring_method = ScoringMethod::shapley_sensitivity;
  Split scoring_split = Split::validation;
  std::vector<double> mask_rates = kDefaultMaskRates;
  int mask_repeats = kDefaultMaskRepeats;
  int validation_batches = kDefaultValidationBatches;
  bool conditional_average = false;
  Schedule schedule;
  TrainConfig stage1;
  TrainConfig stage2;
  Seeds seeds;

  int total_initial_ranks() const { return kNumModuleKinds * model.n_layers * r_init; }
  int resolved_r_target() const { return r_target > 0 ? r_target : total_initial_ranks() / 2; }
  // Throws ConfigError naming the offending field.
  void validate() const;

  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

/// The task described by cfg.task, built on the base model seeds.model.
Dataset make_dataset(const PipelineConfig& cfg);

/// Reduced per-event plan used by the gradual schedule.
inline const std::vector<double> kGradualMaskRates = {0.3, 0.5, 0.7};

/// Scores `model` with the configured method on the configured split.
ImportanceReport score_model(const Model& model, const Dataset& data, const PipelineConfig& cfg,
                             std::uint64_t plan_seed);

struct Stage1Result {
  ImportanceReport report;
  AllocationConfig allocation;
  Model checkpoint;
  TrainResult training;
  double seconds = 0.0;
};

/// Attach uniform LoRA, train, score and allocate (one-shot), or run the
/// gradual schedule.
Stage1Result stage1_allocate(const PipelineConfig& cfg, const Dataset& data);

struct Stage2Result {
  Model model;
  TrainResult training;
  double initial_dev_loss = 0.0;
  double dev_loss = 0.0;
  double test_loss = 0.0;
  double test_accuracy = 0.0;
  double seconds = 0.0;
};

/// Fresh LoRA laid out per `alloc` on the base model, then a full train().
/// Throws BudgetError for an allocation with no ranks.
Stage2Result stage2_retrain(const AllocationConfig& alloc, const PipelineConfig& cfg,
                            const Dataset& data);

struct RunReport {
  PipelineConfig config;
  Stage1Result stage1;
  Stage2Result stage2;
};

RunReport run_pipeline(const PipelineConfig& cfg, const Dataset& data);

/// Interleaves training with score-and-prune events: every `every_m_steps`
/// steps the k lowest-scored active ranks are switched off, until `r_target`
/// ranks remain; training then continues to convergence and the model is
/// physically pruned. Throws ScheduleError if training ends first.
AllocationConfig gradual_prune(Model& model, const Dataset& data, const TrainConfig& train_cfg,
                               int k_per_event, int every_m_steps, int r_target,
                               ScoringMethod method, const PipelineConfig& scoring_cfg,
                               TrainResult* training = nullptr,
                               ImportanceReport* last_report = nullptr);

/// For each rank: validation loss with that rank masked minus the unmasked
/// validation loss.
std::map<RankId, double> leave_one_out_importance(const Model& model,
                                                  const std::vector<Sequence>& validation);

}  // namespace shaplora
