#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace shaplora {

/// The seven linear-module sites of one transformer block, in canonical order.
enum class ModuleKind : int { Q = 0, K, V, O, G, U, D };

inline constexpr int kNumModuleKinds = 7;
inline constexpr std::array<ModuleKind, kNumModuleKinds> kAllModuleKinds = {
    ModuleKind::Q, ModuleKind::K, ModuleKind::V, ModuleKind::O,
    ModuleKind::G, ModuleKind::U, ModuleKind::D};

std::string_view kind_name(ModuleKind kind);
// Throws KeyError for anything other than Q,K,V,O,G,U,D.
ModuleKind parse_kind(std::string_view name);

struct ModuleId {
  int layer = 0;
  ModuleKind kind = ModuleKind::Q;

  auto operator<=>(const ModuleId&) const = default;
  // "layer.kind", e.g. "0.Q".
  std::string str() const;
};

// Parses "layer.kind"; throws ParseError.
ModuleId parse_module_id(std::string_view text);

/// One LoRA rank: the index-th singular triple of a module.
struct RankId {
  ModuleId module;
  int index = 0;

  auto operator<=>(const RankId&) const = default;
  // "layer.kind.index", e.g. "1.V.3".
  std::string str() const;
};

RankId parse_rank_id(std::string_view text);

enum class ScoringMethod { shapley_sensitivity, plain_sensitivity, magnitude };
enum class Split { train, validation, test };

std::string_view method_name(ScoringMethod m);
ScoringMethod parse_method(std::string_view name);
std::string_view split_name(Split s);
Split parse_split(std::string_view name);

/// Per-rank importance scores plus the provenance of how they were computed.
struct ImportanceReport {
  std::map<RankId, double> scores;
  ScoringMethod method = ScoringMethod::shapley_sensitivity;
  Split split = Split::validation;
  int n_coalitions = 0;
  std::uint64_t seed = 0;
  int batches_used = 0;

  std::vector<double> values() const;
};

/// Kept-rank counts per module: output of stage 1, input of stage 2.
///
/// `kept_ranks` names the surviving ranks when the allocation came from
/// scores; it is what prune_to_allocation consumes. Stage 2 only needs the
/// counts.
struct AllocationConfig {
  std::map<ModuleId, int> kept;
  std::vector<RankId> kept_ranks;
  int r_init = 0;
  int r_target = 0;
  std::string method;
  std::uint64_t seed = 0;

  int total_kept() const;
  int count(ModuleId id) const;

  friend bool operator==(const AllocationConfig&, const AllocationConfig&) = default;
};

}  // namespace shaplora
