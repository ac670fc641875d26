#pragma once

// Deterministic synthetic sequence tasks with train/dev/test splits.

#include <cstdint>
#include <string_view>
#include <vector>

#include "shaplora/model.hpp"
#include "shaplora/types.hpp"

namespace shaplora {

/// Input tokens and next-token targets of equal length; -1 targets are ignored.
struct Sequence {
  std::vector<int> tokens;
  std::vector<int> targets;

  friend bool operator==(const Sequence&, const Sequence&) = default;
};

enum class TaskKind { copy, planted };

std::string_view task_name(TaskKind kind);
TaskKind parse_task(std::string_view name);

struct Dataset {
  std::vector<Sequence> train;
  std::vector<Sequence> dev;
  std::vector<Sequence> test;
  int vocab_size = 0;
  int seq_len = 0;
  TaskKind kind = TaskKind::copy;
  std::uint64_t seed = 0;
  std::vector<ModuleKind> planted_modules;

  // Throws KeyError for an unknown split.
  const std::vector<Sequence>& split(Split s) const;
  const std::vector<Sequence>& split(std::string_view name) const;
};

struct SplitSizes {
  int n_train = 2048;
  int n_dev = 256;
  int n_test = 256;

  friend bool operator==(const SplitSizes&, const SplitSizes&) = default;
};

/// Copy task. Delimiter token 0; prefix tokens drawn from [1, vocab).
/// Full string: prefix(h) 0 prefix(h) with h = seq_len / 2; inputs are its
/// first seq_len tokens, targets the next token at each position. Targets
/// inside the first prefix are ignored (-1) since they are unpredictable.
/// Sequences are unique across all three splits.
Dataset gen_copy_task(int n_train, int n_dev, int n_test, int seq_len, int vocab,
                      std::uint64_t seed);

struct PlantedTaskSpec {
  ModelConfig model;
  std::uint64_t base_model_seed = 0;
  std::vector<ModuleKind> planted_kinds;
  double perturb_scale = 1.0;
  SplitSizes sizes;
  int seq_len = 16;
  std::uint64_t seed = 0;
};

/// Teacher-student task. The teacher is the student's base model with only
/// the planted kinds' weights perturbed by Gaussian(0, perturb_scale); each
/// target is the teacher's greedy next token on uniformly random inputs.
Dataset gen_planted_task(const PlantedTaskSpec& spec);

/// The teacher network gen_planted_task labels with.
Model planted_teacher(const PlantedTaskSpec& spec);

/// One epoch of batches over a split, shuffled by `seed`. The final partial
/// batch is kept.
std::vector<Batch> batches(const Dataset& data, Split split, int batch_size, std::uint64_t seed);
std::vector<Batch> batches(const std::vector<Sequence>& seqs, int batch_size, std::uint64_t seed);

/// Same, in stored order.
std::vector<Batch> ordered_batches(const std::vector<Sequence>& seqs, int batch_size);

}  // namespace shaplora
