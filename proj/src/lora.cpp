#include "shaplora/lora.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "shaplora/errors.hpp"
#include "shaplora/model.hpp"
#include "shaplora/random.hpp"

namespace shaplora {

void LoraModule::check() const {
  const std::size_t r = active.size();
  if (r == 0) throw DimensionError("LoRA module with no ranks");
  if (P.rank() != 2 || P.dim(1) != r || lambda.rank() != 1 || lambda.dim(0) != r ||
      Q.rank() != 2 || Q.dim(0) != r) {
    throw DimensionError("inconsistent LoRA module shapes: P " + shape_string(P.shape()) +
                         ", lambda " + shape_string(lambda.shape()) + ", Q " +
                         shape_string(Q.shape()));
  }
  if (!labels.empty()) {
    if (labels.size() != r || labels.front() < 0 ||
        std::adjacent_find(labels.begin(), labels.end(), std::greater_equal<>()) != labels.end()) {
      throw StateError("LoRA rank labels must be strictly increasing and non-negative");
    }
  }
  for (std::size_t i = 0; i < r; ++i) {
    if (!active[i] && lambda[i] != 0.0) {
      throw StateError("inactive LoRA rank " + std::to_string(i) + " has nonzero singular value");
    }
  }
}

int LoraModule::position(int label) const {
  if (labels.empty()) return label >= 0 && label < rank() ? label : -1;
  auto it = std::lower_bound(labels.begin(), labels.end(), label);
  return it != labels.end() && *it == label ? static_cast<int>(it - labels.begin()) : -1;
}

Tensor LoraModule::delta() const {
  Tensor out({d_in(), d_out()}, 0.0);
  for (std::size_t i = 0; i < d_in(); ++i)
    for (int r = 0; r < rank(); ++r) {
      if (!active[r]) continue;
      const double coef = P.at(i, r) * lambda[r];
      for (std::size_t j = 0; j < d_out(); ++j) out.at(i, j) += coef * Q.at(r, j);
    }
  return out;
}

LoraModule init_lora_module(std::size_t d_in, std::size_t d_out, int r, std::uint64_t seed) {
  if (d_in == 0 || d_out == 0 || r < 1) throw DimensionError("LoRA dims and rank must be >= 1");
  const auto rr = static_cast<std::size_t>(r);
  Rng rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(r)));
  LoraModule m{Tensor({d_in, rr}, 0.0), Tensor({rr}, 0.0), Tensor({rr, d_out}, 0.0),
               std::vector<char>(rr, 1), {}};
  for (auto& v : m.P.values()) v = dist(rng);
  for (auto& v : m.Q.values()) v = dist(rng);
  return m;
}

Tensor lora_forward(const Tensor& x, const Tensor& W, const LoraModule& mod) {
  Tape tape;
  Var out = lora_forward(tape.constant(x), tape.constant(W), &mod, {}, nullptr);
  return out.value();
}

Var lora_forward(const Var& x, const Var& W, const LoraModule* mod, std::span<const char> overlay,
                 LoraVars* vars) {
  Var out = matmul(x, W);
  if (!mod) return out;
  if (!overlay.empty() && overlay.size() != mod->active.size()) {
    throw DimensionError("coalition overlay size does not match LoRA rank");
  }
  Tape& tape = *x.tape();
  Var P = tape.leaf(mod->P, true);
  Var lambda = tape.leaf(mod->lambda, true);
  Var Q = tape.leaf(mod->Q, true);
  if (vars) *vars = LoraVars{ModuleId{}, P, lambda, Q};

  Tensor keep(mod->lambda.shape(), 1.0);
  bool all_kept = true;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    const bool k = mod->active[i] && (overlay.empty() || overlay[i]);
    keep[i] = k ? 1.0 : 0.0;
    all_kept = all_kept && k;
  }
  Var effective = all_kept ? lambda : elementwise_mul(lambda, tape.constant(std::move(keep)));
  Var low = elementwise_mul(matmul(x, P), effective);
  return add(out, matmul(low, Q));
}

// ---- coalitions --------------------------------------------------------------------

Coalition Coalition::from(std::vector<RankId> ranks) {
  std::sort(ranks.begin(), ranks.end());
  ranks.erase(std::unique(ranks.begin(), ranks.end()), ranks.end());
  return Coalition{std::move(ranks)};
}

bool Coalition::contains(const RankId& id) const {
  return std::binary_search(members.begin(), members.end(), id);
}

namespace {

std::vector<std::vector<char>> empty_flags(const Model& model) {
  std::vector<std::vector<char>> keep(model.num_modules());
  for (std::size_t m = 0; m < model.num_modules(); ++m) {
    if (const LoraModule* mod = model.lora_at(m)) keep[m].assign(mod->active.size(), 0);
  }
  return keep;
}

char& flag_of(std::vector<std::vector<char>>& keep, const Model& model, const RankId& id) {
  const std::size_t m = model.module_index(id.module);
  const LoraModule* mod = model.lora_at(m);
  const int pos = mod ? mod->position(id.index) : -1;
  if (pos < 0) throw KeyError("unknown LoRA rank " + id.str());
  return keep[m][static_cast<std::size_t>(pos)];
}

}  // namespace

CoalitionMask::CoalitionMask(const Model& model, const Coalition& c) : keep_(empty_flags(model)) {
  for (const auto& id : c.members) flag_of(keep_, model, id) = 1;
}

CoalitionMask CoalitionMask::all_but(const Model& model, const RankId& dropped) {
  CoalitionMask mask;
  mask.keep_ = empty_flags(model);
  for (auto& flags : mask.keep_) std::fill(flags.begin(), flags.end(), 1);
  flag_of(mask.keep_, model, dropped) = 0;
  return mask;
}

std::span<const char> CoalitionMask::flags(std::size_t module_index) const {
  if (keep_.empty()) return {};
  return keep_.at(module_index);
}

MaskState apply_coalition(Model& model, const Coalition& c) {
  // Validates every member before mutating anything.
  CoalitionMask mask(model, c);
  MaskState state;
  for (std::size_t m = 0; m < model.num_modules(); ++m) {
    LoraModule* mod = model.mutable_lora_at(m);
    if (!mod) continue;
    auto keep = mask.flags(m);
    for (int r = 0; r < mod->rank(); ++r) {
      if (keep[r]) continue;
      state.saved.push_back(
          {RankId{model.module_at(m), mod->label(r)}, mod->lambda[r], mod->active[r]});
      mod->lambda[r] = 0.0;
      mod->active[r] = 0;
    }
  }
  return state;
}

void restore_coalition(Model& model, const MaskState& state) {
  for (const auto& s : state.saved) {
    LoraModule* mod = model.mutable_lora(s.id.module);
    const int pos = mod ? mod->position(s.id.index) : -1;
    if (pos < 0) throw StateError("mask state does not fit model");
    mod->lambda[pos] = s.lambda;
    mod->active[pos] = s.active;
  }
}

// ---- allocation ----------------------------------------------------------------------

AllocationConfig allocation_from_scores(const ImportanceReport& report, int r_target) {
  const int total = static_cast<int>(report.scores.size());
  if (r_target < 1) throw BudgetError("rank budget must be positive");
  if (r_target > total) {
    throw BudgetError("rank budget " + std::to_string(r_target) + " exceeds the " +
                      std::to_string(total) + " scored ranks");
  }
  std::vector<std::pair<RankId, double>> ranked(report.scores.begin(), report.scores.end());
  // Map iteration is already canonical; stable sort keeps RankId order among ties.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  AllocationConfig alloc;
  alloc.r_target = r_target;
  alloc.method = std::string(method_name(report.method));
  alloc.seed = report.seed;
  std::map<ModuleId, int> module_size;
  for (const auto& [id, s] : report.scores) {
    alloc.kept[id.module] = 0;
    module_size[id.module] = std::max(module_size[id.module], id.index + 1);
  }
  for (const auto& [m, n] : module_size) alloc.r_init = std::max(alloc.r_init, n);
  for (int i = 0; i < r_target; ++i) {
    alloc.kept_ranks.push_back(ranked[i].first);
    ++alloc.kept[ranked[i].first.module];
  }
  std::sort(alloc.kept_ranks.begin(), alloc.kept_ranks.end());
  return alloc;
}

AllocationConfig uniform_allocation(int n_layers, int per_module, int r_init) {
  AllocationConfig alloc;
  alloc.r_init = r_init;
  alloc.method = "uniform";
  for (int l = 0; l < n_layers; ++l)
    for (auto k : kAllModuleKinds) {
      const ModuleId id{l, k};
      alloc.kept[id] = per_module;
      for (int i = 0; i < per_module; ++i) alloc.kept_ranks.push_back(RankId{id, i});
    }
  alloc.r_target = alloc.total_kept();
  return alloc;
}

void prune_to_allocation(Model& model, const AllocationConfig& alloc) {
  if (!model.lora_attached()) throw StateError("no LoRA attached");
  std::vector<std::vector<int>> keep(model.num_modules());
  for (const auto& id : alloc.kept_ranks) {
    const std::size_t m = model.module_index(id.module);
    const LoraModule* mod = model.lora_at(m);
    const int pos = mod ? mod->position(id.index) : -1;
    if (pos < 0) {
      throw StateError("allocation keeps rank " + id.str() + " which the model does not have");
    }
    keep[m].push_back(pos);
  }
  for (std::size_t m = 0; m < model.num_modules(); ++m) {
    auto& k = keep[m];
    std::sort(k.begin(), k.end());
    if (std::adjacent_find(k.begin(), k.end()) != k.end()) {
      throw StateError("allocation names a rank twice in module " + model.module_at(m).str());
    }
    if (static_cast<int>(k.size()) != alloc.count(model.module_at(m))) {
      throw StateError("allocation count for " + model.module_at(m).str() +
                       " disagrees with its kept rank list");
    }
  }
  for (std::size_t m = 0; m < model.num_modules(); ++m) {
    const LoraModule* mod = model.lora_at(m);
    if (!mod) continue;
    const auto& k = keep[m];
    if (k.empty()) {
      model.set_lora(m, std::nullopt);
      continue;
    }
    const std::size_t r = k.size();
    LoraModule pruned{Tensor({mod->d_in(), r}, 0.0), Tensor({r}, 0.0),
                      Tensor({r, mod->d_out()}, 0.0), std::vector<char>(r, 1), {}};
    for (std::size_t n = 0; n < r; ++n) {
      const auto src = static_cast<std::size_t>(k[n]);
      pruned.lambda[n] = mod->lambda[src];
      pruned.active[n] = mod->active[src];
      pruned.labels.push_back(mod->label(k[n]));
      for (std::size_t i = 0; i < mod->d_in(); ++i) pruned.P.at(i, n) = mod->P.at(i, src);
      for (std::size_t j = 0; j < mod->d_out(); ++j) pruned.Q.at(n, j) = mod->Q.at(src, j);
    }
    if (pruned.labels.back() == static_cast<int>(r) - 1) pruned.labels.clear();
    model.set_lora(m, std::move(pruned));
  }
}

}  // namespace shaplora
