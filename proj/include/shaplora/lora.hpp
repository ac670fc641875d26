#pragma once

// SVD-form LoRA: x' = xW + x P diag(lambda) Q, with per-rank masking,
// coalition overlays, allocation from scores and structural pruning.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "shaplora/autodiff.hpp"
#include "shaplora/tensor.hpp"
#include "shaplora/types.hpp"

namespace shaplora {

class Model;

/// One (P, lambda, Q) triple. P is d_in x r, lambda has r entries, Q is r x d_out.
/// An inactive rank always has lambda == 0.
struct LoraModule {
  Tensor P;
  Tensor lambda;
  Tensor Q;
  std::vector<char> active;
  // Original rank index of each position, strictly increasing; empty means
  // 0..r-1. Pruning keeps the survivors' labels so RankIds stay stable.
  std::vector<int> labels;

  int rank() const { return static_cast<int>(active.size()); }
  int label(int position) const { return labels.empty() ? position : labels[position]; }
  /// Position holding `label`, or -1.
  int position(int label) const;
  std::size_t d_in() const { return P.dim(0); }
  std::size_t d_out() const { return Q.dim(1); }

  /// P diag(lambda) Q restricted to active ranks.
  Tensor delta() const;
  void check() const;

  friend bool operator==(const LoraModule&, const LoraModule&) = default;
};

/// Zero singular values, Gaussian(0, 1/sqrt(r)) singular vectors, all ranks active.
LoraModule init_lora_module(std::size_t d_in, std::size_t d_out, int r, std::uint64_t seed);

/// Plain-value forward: x W + sum over active ranks of lambda_i (x P_:,i) Q_i,:.
Tensor lora_forward(const Tensor& x, const Tensor& W, const LoraModule& mod);

/// Taped variables of one LoRA module inside a forward graph.
struct LoraVars {
  ModuleId module;
  Var P;
  Var lambda;
  Var Q;
};

/// Taped forward. `overlay`, when non-empty, holds one keep flag per rank and
/// is combined with the module's own active flags: the effective singular
/// value is lambda_i * keep_i. `vars` receives the module's leaves.
Var lora_forward(const Var& x, const Var& W, const LoraModule* mod, std::span<const char> overlay,
                 LoraVars* vars);

/// A set of ranks left active; every other rank has its singular value forced to zero.
struct Coalition {
  std::vector<RankId> members;  // sorted, unique

  static Coalition from(std::vector<RankId> ranks);
  bool contains(const RankId& id) const;
  std::size_t size() const { return members.size(); }
};

/// Thread-local view of a coalition: keep flags per module, indexed like the
/// model's module table. Does not touch the model.
class CoalitionMask {
 public:
  CoalitionMask() = default;
  // Throws KeyError when a member is not a current rank of `model`.
  CoalitionMask(const Model& model, const Coalition& c);
  // Everything kept except `dropped`.
  static CoalitionMask all_but(const Model& model, const RankId& dropped);

  std::span<const char> flags(std::size_t module_index) const;

 private:
  std::vector<std::vector<char>> keep_;
};

/// Saved singular values for undoing apply_coalition.
struct MaskState {
  struct Saved {
    RankId id;
    double lambda;
    char active;
  };
  std::vector<Saved> saved;
};

/// Forces lambda to zero (and marks inactive) for every current rank not in
/// `c`. Mutates the model; use CoalitionMask for concurrent evaluation.
MaskState apply_coalition(Model& model, const Coalition& c);
void restore_coalition(Model& model, const MaskState& state);

/// Keeps the `r_target` highest-scoring ranks globally. Ties go to the
/// smaller RankId in canonical order. Modules may end up with zero ranks.
AllocationConfig allocation_from_scores(const ImportanceReport& report, int r_target);

/// Same count in every module of `model`'s config.
AllocationConfig uniform_allocation(int n_layers, int per_module, int r_init);

/// Physically removes every rank not named in `alloc.kept_ranks`. Surviving
/// triples keep their values; modules left with no ranks lose their LoRA.
void prune_to_allocation(Model& model, const AllocationConfig& alloc);

}  // namespace shaplora
