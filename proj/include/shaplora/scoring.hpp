#pragma once

// Importance measures for LoRA ranks.
//
// The central quantity is the Shapley sensitivity of a rank: its
// coalition-conditional sensitivity
//
//   SAN(i | S) = |lambda_i g_lambda_i| + (1/d_in) sum_j |P_ji g_P_ji|
//                                      + (1/d_out) sum_j |Q_ij g_Q_ij|
//
// (gradients taken with every rank outside S switched off), averaged over a
// sampled plan of coalitions. Plain sensitivity is the single full coalition;
// the magnitude score drops the gradients altogether.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "shaplora/lora.hpp"
#include "shaplora/model.hpp"
#include "shaplora/types.hpp"

namespace shaplora {

/// |w * g|. Throws NumericError on non-finite input.
double param_sensitivity(double w, double g);

/// Coalitions in complement pairs: entry 2k+1 is the complement of entry 2k.
struct CoalitionPlan {
  std::vector<Coalition> coalitions;
  std::vector<double> rates;
  int repeats = 0;
  std::uint64_t seed = 0;

  std::size_t size() const { return coalitions.size(); }
};

inline const std::vector<double> kDefaultMaskRates = {0.1, 0.2, 0.3, 0.4, 0.5,
                                                      0.6, 0.7, 0.8, 0.9};
inline constexpr int kDefaultMaskRepeats = 5;
inline constexpr int kDefaultValidationBatches = 8;

/// For each (rate, repeat) in that nesting order, masks every rank
/// independently with probability `rate` and emits the unmasked ranks
/// followed by the masked ones: 2 * |rates| * repeats coalitions.
CoalitionPlan sample_coalitions(std::span<const RankId> ranks, std::span<const double> rates,
                                int repeats, std::uint64_t seed);

/// Plan of a single coalition holding every rank.
CoalitionPlan full_coalition_plan(std::span<const RankId> ranks);

struct ScoringOptions {
  // Batches of `data` actually used: the first min(max_batches, available).
  int max_batches = kDefaultValidationBatches;
  // Divide each rank's sum by the number of coalitions containing it rather
  // than by the plan size. Off by default.
  bool conditional_average = false;
};

/// SAN(i | c) for every current rank. Gradients are of the batch-mean loss,
/// averaged over the batches; ranks outside `c` score exactly 0.
std::map<RankId, double> coalition_rank_scores(const Model& model, const Coalition& c,
                                               std::span<const Batch> data,
                                               const ScoringOptions& opts = {});

/// Mean of coalition_rank_scores over every coalition of `plan`.
ImportanceReport shapley_sensitivity(const Model& model, const CoalitionPlan& plan,
                                     std::span<const Batch> data, Split split,
                                     const ScoringOptions& opts = {});

/// Sensitivity under the full coalition only.
ImportanceReport plain_sensitivity(const Model& model, std::span<const Batch> data, Split split,
                                   const ScoringOptions& opts = {});

/// |lambda_i| + mean_j |P_ji| + mean_j |Q_ij|.
ImportanceReport magnitude_score(const Model& model);

/// Exact Shapley values of an n-player game by subset enumeration. `value`
/// receives a bitmask of the coalition's players. Throws CapacityError for
/// n > kMaxExactPlayers.
inline constexpr int kMaxExactPlayers = 10;
std::vector<double> exact_shapley(const std::function<double(std::uint32_t)>& value, int n_players);

/// Spearman rank correlation with average ranks for ties. Empty when either
/// input is constant. Throws ContractError on length mismatch or n < 2.
std::optional<double> spearman(std::span<const double> a, std::span<const double> b);

/// Spearman between two reports over their common ranks.
std::optional<double> spearman(const std::map<RankId, double>& a,
                               const std::map<RankId, double>& b);

}  // namespace shaplora
