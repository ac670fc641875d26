#include "shaplora/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "shaplora/errors.hpp"
#include "shaplora/random.hpp"

namespace shaplora {

double param_sensitivity(double w, double g) {
  if (!std::isfinite(w) || !std::isfinite(g)) {
    throw NumericError("param_sensitivity: non-finite input");
  }
  return std::abs(w * g);
}

CoalitionPlan sample_coalitions(std::span<const RankId> ranks, std::span<const double> rates,
                                int repeats, std::uint64_t seed) {
  if (ranks.empty()) throw ContractError("sample_coalitions: no ranks");
  if (rates.empty()) throw ContractError("sample_coalitions: no mask rates");
  if (repeats < 1) throw ContractError("sample_coalitions: repeats must be >= 1");
  for (double r : rates) {
    if (!(r > 0.0 && r < 1.0)) {
      throw ContractError("sample_coalitions: mask rate " + std::to_string(r) +
                          " outside (0, 1)");
    }
  }
  CoalitionPlan plan;
  plan.rates.assign(rates.begin(), rates.end());
  plan.repeats = repeats;
  plan.seed = seed;
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (double rate : rates) {
    for (int rep = 0; rep < repeats; ++rep) {
      std::vector<RankId> kept, masked;
      for (const auto& id : ranks) (unit(rng) < rate ? masked : kept).push_back(id);
      plan.coalitions.push_back(Coalition::from(std::move(kept)));
      plan.coalitions.push_back(Coalition::from(std::move(masked)));
    }
  }
  return plan;
}

CoalitionPlan full_coalition_plan(std::span<const RankId> ranks) {
  if (ranks.empty()) throw ContractError("full_coalition_plan: no ranks");
  CoalitionPlan plan;
  plan.coalitions.push_back(Coalition::from({ranks.begin(), ranks.end()}));
  plan.repeats = 1;
  return plan;
}

namespace {

std::size_t batches_to_use(std::span<const Batch> data, const ScoringOptions& opts) {
  if (data.empty()) throw ContractError("scoring needs at least one batch");
  if (opts.max_batches < 1) throw ContractError("scoring max_batches must be >= 1");
  return std::min<std::size_t>(data.size(), static_cast<std::size_t>(opts.max_batches));
}

}  // namespace

std::map<RankId, double> coalition_rank_scores(const Model& model, const Coalition& c,
                                               std::span<const Batch> data,
                                               const ScoringOptions& opts) {
  if (!model.lora_attached()) throw StateError("no LoRA attached");
  const std::size_t n = batches_to_use(data, opts);
  const CoalitionMask mask(model, c);

  // Mean over batches of each batch-mean-loss gradient; summed in batch order.
  std::vector<std::optional<LoraGrad>> grads(model.num_modules());
  for (std::size_t b = 0; b < n; ++b) {
    LossAndGrads lg = lora_loss_and_grads(model, data[b], &mask);
    for (std::size_t m = 0; m < grads.size(); ++m) {
      if (!lg.grads[m]) continue;
      if (!grads[m]) {
        grads[m] = std::move(lg.grads[m]);
        continue;
      }
      auto acc = [](Tensor& into, const Tensor& from) {
        for (std::size_t i = 0; i < into.size(); ++i) into[i] += from[i];
      };
      acc(grads[m]->P, lg.grads[m]->P);
      acc(grads[m]->lambda, lg.grads[m]->lambda);
      acc(grads[m]->Q, lg.grads[m]->Q);
    }
  }
  const double inv = 1.0 / static_cast<double>(n);

  std::map<RankId, double> scores;
  for (std::size_t m = 0; m < model.num_modules(); ++m) {
    const LoraModule* mod = model.lora_at(m);
    if (!mod) continue;
    const LoraGrad& g = *grads[m];
    const auto keep = mask.flags(m);
    const std::size_t r_total = mod->active.size();
    for (std::size_t r = 0; r < r_total; ++r) {
      const RankId id{model.module_at(m), mod->label(static_cast<int>(r))};
      if (!keep[r] || !mod->active[r]) {
        // Singular value forced to zero: the lambda term vanishes and no
        // gradient reaches this rank's vectors.
        scores[id] = 0.0;
        continue;
      }
      double s = param_sensitivity(mod->lambda[r], g.lambda[r] * inv);
      double p_sum = 0.0;
      for (std::size_t j = 0; j < mod->d_in(); ++j) {
        p_sum += param_sensitivity(mod->P.at(j, r), g.P.at(j, r) * inv);
      }
      double q_sum = 0.0;
      for (std::size_t j = 0; j < mod->d_out(); ++j) {
        q_sum += param_sensitivity(mod->Q.at(r, j), g.Q.at(r, j) * inv);
      }
      s += p_sum / static_cast<double>(mod->d_in()) + q_sum / static_cast<double>(mod->d_out());
      scores[id] = s;
    }
  }
  return scores;
}

ImportanceReport shapley_sensitivity(const Model& model, const CoalitionPlan& plan,
                                     std::span<const Batch> data, Split split,
                                     const ScoringOptions& opts) {
  if (plan.coalitions.empty()) throw ContractError("shapley_sensitivity: empty plan");
  const std::size_t n_batches = batches_to_use(data, opts);

  ImportanceReport report;
  for (const auto& id : model.rank_ids()) report.scores[id] = 0.0;
  std::map<RankId, int> appearances;
  for (const auto& c : plan.coalitions) {
    const auto s = coalition_rank_scores(model, c, data, opts);
    for (const auto& [id, v] : s) report.scores[id] += v;
    for (const auto& id : c.members) ++appearances[id];
  }
  for (auto& [id, v] : report.scores) {
    double denom = static_cast<double>(plan.coalitions.size());
    if (opts.conditional_average) {
      const int k = appearances[id];
      denom = k > 0 ? static_cast<double>(k) : 1.0;
    }
    v /= denom;
  }
  report.method = ScoringMethod::shapley_sensitivity;
  report.split = split;
  report.n_coalitions = static_cast<int>(plan.coalitions.size());
  report.seed = plan.seed;
  report.batches_used = static_cast<int>(n_batches);
  return report;
}

ImportanceReport plain_sensitivity(const Model& model, std::span<const Batch> data, Split split,
                                   const ScoringOptions& opts) {
  const auto ranks = model.rank_ids();
  ImportanceReport report =
      shapley_sensitivity(model, full_coalition_plan(ranks), data, split, opts);
  report.method = ScoringMethod::plain_sensitivity;
  return report;
}

ImportanceReport magnitude_score(const Model& model) {
  if (!model.lora_attached()) throw StateError("no LoRA attached");
  ImportanceReport report;
  report.method = ScoringMethod::magnitude;
  for (std::size_t m = 0; m < model.num_modules(); ++m) {
    const LoraModule* mod = model.lora_at(m);
    if (!mod) continue;
    for (int r = 0; r < mod->rank(); ++r) {
      double p = 0.0, q = 0.0;
      for (std::size_t j = 0; j < mod->d_in(); ++j) p += std::abs(mod->P.at(j, r));
      for (std::size_t j = 0; j < mod->d_out(); ++j) q += std::abs(mod->Q.at(r, j));
      report.scores[RankId{model.module_at(m), mod->label(r)}] =
          std::abs(mod->lambda[r]) + p / static_cast<double>(mod->d_in()) +
          q / static_cast<double>(mod->d_out());
    }
  }
  return report;
}

std::vector<double> exact_shapley(const std::function<double(std::uint32_t)>& value,
                                  int n_players) {
  if (n_players < 1) throw ContractError("exact_shapley: need at least one player");
  if (n_players > kMaxExactPlayers) {
    throw CapacityError("exact_shapley: " + std::to_string(n_players) + " players exceeds " +
                        std::to_string(kMaxExactPlayers));
  }
  const std::uint32_t full = (1u << n_players);
  std::vector<double> v(full);
  for (std::uint32_t s = 0; s < full; ++s) v[s] = value(s);

  // weight[a] = a! (n-1-a)! / n!
  std::vector<double> fact(static_cast<std::size_t>(n_players) + 1, 1.0);
  for (int i = 1; i <= n_players; ++i) fact[i] = fact[i - 1] * i;
  std::vector<double> weight(static_cast<std::size_t>(n_players));
  for (int a = 0; a < n_players; ++a) {
    weight[a] = fact[a] * fact[n_players - 1 - a] / fact[n_players];
  }

  std::vector<double> phi(static_cast<std::size_t>(n_players), 0.0);
  for (int k = 0; k < n_players; ++k) {
    const std::uint32_t bit = 1u << k;
    for (std::uint32_t s = 0; s < full; ++s) {
      if (s & bit) continue;
      phi[k] += weight[std::popcount(s)] * (v[s | bit] - v[s]);
    }
  }
  return phi;
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return x[a] < x[b]; });
  std::vector<double> rank(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  return rank;
}

}  // namespace

std::optional<double> spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("spearman: length mismatch");
  if (a.size() < 2) throw ContractError("spearman: need at least two values");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::optional<double> spearman(const std::map<RankId, double>& a,
                               const std::map<RankId, double>& b) {
  std::vector<double> xa, xb;
  for (const auto& [id, v] : a) {
    auto it = b.find(id);
    if (it == b.end()) continue;
    xa.push_back(v);
    xb.push_back(it->second);
  }
  return spearman(xa, xb);
}

}  // namespace shaplora
