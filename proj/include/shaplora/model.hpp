#pragma once

// A small pre-norm decoder-only transformer with seven linear-module sites
// per block (Q, K, V, O, G, U, D) and optional LoRA on each site.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "shaplora/autodiff.hpp"
#include "shaplora/lora.hpp"
#include "shaplora/tensor.hpp"
#include "shaplora/types.hpp"

namespace shaplora {

struct ModelConfig {
  int n_layers = 2;
  int d_model = 32;
  int d_ffn = 64;
  int n_heads = 4;
  int vocab_size = 64;
  int max_seq_len = 32;

  // Throws ConfigError naming the offending field.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline constexpr double kBaseInitStd = 0.02;

/// Token ids and next-token targets, both batch_size x seq_len, row-major.
/// A target of -1 is ignored by the loss.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<int> tokens;
  std::vector<int> targets;
};

class Model {
 public:
  /// Deterministic Gaussian(0, 0.02) init of every base weight; no LoRA.
  static Model build(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::size_t num_modules() const { return weights_.size(); }
  std::size_t module_index(ModuleId id) const;
  ModuleId module_at(std::size_t index) const;
  std::vector<ModuleId> module_ids() const;
  // {d_in, d_out} of a site.
  std::pair<std::size_t, std::size_t> module_dims(ModuleKind kind) const;

  const Tensor& embedding() const { return embedding_; }
  const Tensor& head() const { return head_; }
  const Tensor& weight(ModuleId id) const { return weights_.at(module_index(id)); }
  Tensor& mutable_weight(ModuleId id) { return weights_.at(module_index(id)); }

  bool lora_attached() const { return lora_attached_; }
  int r_init() const { return r_init_; }
  const LoraModule* lora(ModuleId id) const;
  LoraModule* mutable_lora(ModuleId id);
  const LoraModule* lora_at(std::size_t index) const;
  LoraModule* mutable_lora_at(std::size_t index);

  /// Rank-r_init LoRA on every site. Throws StateError if LoRA is attached.
  void attach_lora(int r_init, std::uint64_t seed);
  /// Freshly initialized LoRA with each site's rank taken from `alloc`
  /// (sites with count 0 get none). Throws StateError if LoRA is attached.
  void attach_allocation(const AllocationConfig& alloc, std::uint64_t seed);

  /// Current ranks in canonical (layer, kind, index) order.
  std::vector<RankId> rank_ids() const;
  int total_ranks() const;

  // Used by pruning and checkpoint loading.
  void set_lora(std::size_t index, std::optional<LoraModule> mod);
  void set_lora_state(bool attached, int r_init);
  void set_embedding(Tensor t);
  void set_head(Tensor t);

  friend bool operator==(const Model&, const Model&) = default;

 private:
  ModelConfig config_;
  Tensor embedding_;
  Tensor head_;
  std::vector<Tensor> weights_;
  std::vector<std::optional<LoraModule>> lora_;
  bool lora_attached_ = false;
  int r_init_ = 0;
};

/// One rank's parameters, as listed by lora_parameters().
struct LoraRankView {
  RankId id;
  double lambda;
  std::vector<double> p_column;
  std::vector<double> q_row;
};

/// One entry per current rank in canonical order. Throws StateError without LoRA.
std::vector<LoraRankView> lora_parameters(const Model& model);

/// Optional intermediate values captured by a forward pass.
struct ForwardProbe {
  std::vector<Tensor> module_outputs;  // indexed like Model::module_index
  std::vector<Tensor> attention;       // per layer, [batch*heads, seq, seq]
};

/// Builds the graph for the mean next-token cross-entropy of `batch` on
/// `tape`. Base weights require grad only when no LoRA is attached. When
/// `lora_vars` is given it receives the leaves of every present LoRA module.
Var forward_loss(Tape& tape, const Model& model, const Batch& batch,
                 const CoalitionMask* mask = nullptr, std::vector<LoraVars>* lora_vars = nullptr,
                 ForwardProbe* probe = nullptr);

/// Scalar loss value only.
double evaluate_loss(const Model& model, const Batch& batch, const CoalitionMask* mask = nullptr);

/// Logits [batch*seq, vocab] for the tokens of `batch`.
Tensor forward_logits(const Model& model, const Batch& batch, const CoalitionMask* mask = nullptr);

/// Gradients of the batch loss with respect to each LoRA module's leaves,
/// indexed like Model::module_index (absent modules have no entry).
struct LoraGrad {
  Tensor P;
  Tensor lambda;
  Tensor Q;
};

struct LossAndGrads {
  double loss = 0.0;
  std::vector<std::optional<LoraGrad>> grads;
};

LossAndGrads lora_loss_and_grads(const Model& model, const Batch& batch,
                                 const CoalitionMask* mask = nullptr);

}  // namespace shaplora
