#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "shaplora/errors.hpp"
#include "shaplora/scoring.hpp"
#include "support.hpp"

using namespace shaplora;
using namespace shaplora::testing;

namespace {

std::vector<Batch> some_batches(const ModelConfig& cfg, int n, std::size_t b, std::size_t t,
                                std::uint64_t seed) {
  std::vector<Batch> out;
  for (int i = 0; i < n; ++i) out.push_back(random_batch(cfg, b, t, derive_seed(seed, i)));
  return out;
}

double mean_loss(const Model& m, const std::vector<Batch>& data, const CoalitionMask* mask) {
  double s = 0.0;
  for (const auto& b : data) s += evaluate_loss(m, b, mask);
  return s / double(data.size());
}

// Per-rank sensitivity score from central finite differences of the
// batch-averaged loss, with the absolute value applied per scalar (`per_scalar`)
// or to the signed sums (the wrong composition).
std::map<RankId, double> fd_rank_scores(const Model& model, const Coalition& c,
                                        const std::vector<Batch>& data, bool per_scalar) {
  const double eps = 1e-5;
  Model m = model;
  const CoalitionMask mask(m, c);
  auto grad = [&](double& slot) {
    const double w = slot;
    slot = w + eps;
    const double up = mean_loss(m, data, &mask);
    slot = w - eps;
    const double down = mean_loss(m, data, &mask);
    slot = w;
    return (up - down) / (2 * eps);
  };
  std::map<RankId, double> out;
  for (std::size_t mi = 0; mi < m.num_modules(); ++mi) {
    LoraModule* mod = m.mutable_lora_at(mi);
    if (!mod) continue;
    for (int r = 0; r < mod->rank(); ++r) {
      const auto rr = static_cast<std::size_t>(r);
      const double lam = std::abs(mod->lambda[rr] * grad(mod->lambda[rr]));
      double p = 0.0, q = 0.0;
      for (std::size_t j = 0; j < mod->d_in(); ++j) {
        const double t = mod->P.at(j, rr) * grad(mod->P.at(j, rr));
        p += per_scalar ? std::abs(t) : t;
      }
      for (std::size_t j = 0; j < mod->d_out(); ++j) {
        const double t = mod->Q.at(rr, j) * grad(mod->Q.at(rr, j));
        q += per_scalar ? std::abs(t) : t;
      }
      out[RankId{m.module_at(mi), mod->label(r)}] =
          lam + std::abs(p) / double(mod->d_in()) + std::abs(q) / double(mod->d_out());
    }
  }
  return out;
}

// Straightforward second implementation of the plan average: mutate a copy
// per coalition, take plain gradients, apply the formula, divide by |plan|.
std::map<RankId, double> reference_shapley(const Model& model, const CoalitionPlan& plan,
                                           const std::vector<Batch>& data) {
  std::map<RankId, double> total;
  for (const auto& id : model.rank_ids()) total[id] = 0.0;
  for (const auto& c : plan.coalitions) {
    Model copy = model;
    apply_coalition(copy, c);
    std::vector<std::optional<LoraGrad>> sum(copy.num_modules());
    for (const auto& b : data) {
      LossAndGrads lg = lora_loss_and_grads(copy, b);
      for (std::size_t m = 0; m < sum.size(); ++m) {
        if (!lg.grads[m]) continue;
        if (!sum[m]) {
          sum[m] = lg.grads[m];
          continue;
        }
        for (std::size_t i = 0; i < sum[m]->P.size(); ++i) sum[m]->P[i] += lg.grads[m]->P[i];
        for (std::size_t i = 0; i < sum[m]->lambda.size(); ++i) {
          sum[m]->lambda[i] += lg.grads[m]->lambda[i];
        }
        for (std::size_t i = 0; i < sum[m]->Q.size(); ++i) sum[m]->Q[i] += lg.grads[m]->Q[i];
      }
    }
    const double n = double(data.size());
    for (std::size_t m = 0; m < copy.num_modules(); ++m) {
      const LoraModule* mod = copy.lora_at(m);
      if (!mod) continue;
      for (int r = 0; r < mod->rank(); ++r) {
        const auto rr = static_cast<std::size_t>(r);
        double s = std::abs(mod->lambda[rr] * sum[m]->lambda[rr] / n);
        double p = 0.0, q = 0.0;
        for (std::size_t j = 0; j < mod->d_in(); ++j) {
          p += std::abs(mod->P.at(j, rr) * sum[m]->P.at(j, rr) / n);
        }
        for (std::size_t j = 0; j < mod->d_out(); ++j) {
          q += std::abs(mod->Q.at(rr, j) * sum[m]->Q.at(rr, j) / n);
        }
        s += p / double(mod->d_in()) + q / double(mod->d_out());
        total[RankId{copy.module_at(m), mod->label(r)}] += s;
      }
    }
  }
  for (auto& [id, v] : total) v /= double(plan.size());
  return total;
}

}  // namespace

TEST(ParamSensitivity, Examples) {
  EXPECT_EQ(param_sensitivity(2, 3), 6);
  EXPECT_EQ(param_sensitivity(0, 5), 0);
  EXPECT_EQ(param_sensitivity(-1.5, 2), 3);
  EXPECT_THROW(param_sensitivity(NAN, 1), NumericError);
  EXPECT_THROW(param_sensitivity(1, INFINITY), NumericError);
}

TEST(SampleCoalitions, DefaultPlanIsNinetyAndFair) {
  Model m = lora_model(ModelConfig{}, 4, 1);
  const auto ranks = m.rank_ids();
  const CoalitionPlan plan =
      sample_coalitions(ranks, kDefaultMaskRates, kDefaultMaskRepeats, 12);
  ASSERT_EQ(plan.size(), 90u);
  for (const auto& id : ranks) {
    int n = 0;
    for (const auto& c : plan.coalitions) n += c.contains(id);
    EXPECT_EQ(n, 45) << id.str();
  }
  for (std::size_t k = 0; k < plan.size(); k += 2) {
    const auto& a = plan.coalitions[k].members;
    const auto& b = plan.coalitions[k + 1].members;
    std::vector<RankId> all;
    std::merge(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(all));
    EXPECT_EQ(all, ranks);
  }
}

TEST(SampleCoalitions, RateSetsMaskingProbability) {
  Model m = lora_model(ModelConfig{}, 16, 1);
  const auto ranks = m.rank_ids();
  const std::vector<double> rates = {0.1, 0.9};
  const CoalitionPlan plan = sample_coalitions(ranks, rates, 20, 3);
  double low = 0.0, high = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    low += double(plan.coalitions[2 * rep].size()) / double(ranks.size());
    high += double(plan.coalitions[40 + 2 * rep].size()) / double(ranks.size());
  }
  EXPECT_NEAR(low / 20, 0.9, 0.02);
  EXPECT_NEAR(high / 20, 0.1, 0.02);
}

TEST(SampleCoalitions, SinglePairAndErrors) {
  Model m = lora_model(tiny_config(), 2, 1);
  const auto ranks = m.rank_ids();
  const std::vector<double> half = {0.5};
  const CoalitionPlan plan = sample_coalitions(ranks, half, 1, 7);
  ASSERT_EQ(plan.size(), 2u);
  EXPECT_EQ(plan.coalitions[0].size() + plan.coalitions[1].size(), ranks.size());
  EXPECT_THROW(sample_coalitions({}, half, 1, 7), ContractError);
  const std::vector<double> bad = {1.0};
  EXPECT_THROW(sample_coalitions(ranks, bad, 1, 7), ContractError);
  EXPECT_THROW(sample_coalitions(ranks, half, 0, 7), ContractError);
  EXPECT_EQ(sample_coalitions(ranks, half, 3, 7).coalitions[4].members,
            sample_coalitions(ranks, half, 3, 7).coalitions[4].members);
}

TEST(CoalitionRankScores, MaskedAndFreshRanksScoreZero) {
  const ModelConfig cfg = tiny_config();
  const auto data = some_batches(cfg, 2, 2, 5, 1);
  Model fresh = Model::build(cfg, 1);
  fresh.attach_lora(2, 2);
  for (const auto& [id, s] : coalition_rank_scores(fresh, Coalition::from(fresh.rank_ids()), data)) {
    EXPECT_EQ(s, 0.0) << id.str();
  }
  Model m = lora_model(cfg, 2, 3);
  const auto ranks = m.rank_ids();
  const Coalition c = Coalition::from({ranks.begin(), ranks.begin() + 5});
  for (const auto& [id, s] : coalition_rank_scores(m, c, data)) {
    if (c.contains(id)) {
      EXPECT_GT(s, 0.0) << id.str();
    } else {
      EXPECT_EQ(s, 0.0) << id.str();
    }
  }
  EXPECT_THROW(coalition_rank_scores(m, c, {}), ContractError);
}

TEST(CoalitionRankScores, MatchesFiniteDifferenceFormula) {
  const ModelConfig cfg = tiny_config();
  Model m = lora_model(cfg, 2, 4);
  const auto data = some_batches(cfg, 2, 2, 5, 9);
  Rng rng(2);
  std::vector<RankId> members;
  for (const auto& id : m.rank_ids()) {
    if (std::bernoulli_distribution(0.6)(rng)) members.push_back(id);
  }
  for (const Coalition& c : {Coalition::from(m.rank_ids()), Coalition::from(members)}) {
    const auto got = coalition_rank_scores(m, c, data);
    const auto want = fd_rank_scores(m, c, data, true);
    const auto wrong = fd_rank_scores(m, c, data, false);
    int separated = 0;
    for (const auto& [id, s] : want) {
      EXPECT_LT(relative_error(got.at(id), s, 1e-9), 1e-6) << id.str();
      if (relative_error(got.at(id), wrong.at(id), 1e-9) > 1e-3) ++separated;
    }
    // Summing signed products before the absolute value gives different scores.
    EXPECT_GT(separated, 0);
  }
}

TEST(ShapleySensitivity, ReductionLaws) {
  const ModelConfig cfg = tiny_config();
  Model m = lora_model(cfg, 3, 5);
  const auto data = some_batches(cfg, 3, 2, 6, 2);
  const auto ranks = m.rank_ids();
  const ImportanceReport plain = plain_sensitivity(m, data, Split::validation);
  const ImportanceReport full =
      shapley_sensitivity(m, full_coalition_plan(ranks), data, Split::validation);
  EXPECT_EQ(plain.scores, full.scores);
  EXPECT_EQ(plain.method, ScoringMethod::plain_sensitivity);

  CoalitionPlan two = full_coalition_plan(ranks);
  two.coalitions.push_back(Coalition{});
  const ImportanceReport half = shapley_sensitivity(m, two, data, Split::validation);
  for (const auto& [id, s] : plain.scores) EXPECT_EQ(half.scores.at(id), s / 2) << id.str();
}

TEST(ShapleySensitivity, LinearInCoalitionLists) {
  const ModelConfig cfg = tiny_config();
  Model m = lora_model(cfg, 3, 6);
  const auto data = some_batches(cfg, 2, 2, 6, 3);
  const auto ranks = m.rank_ids();
  const std::vector<double> ra = {0.3}, rb = {0.6, 0.8};
  const CoalitionPlan a = sample_coalitions(ranks, ra, 2, 1);
  const CoalitionPlan b = sample_coalitions(ranks, rb, 1, 2);
  CoalitionPlan ab = a;
  ab.coalitions.insert(ab.coalitions.end(), b.coalitions.begin(), b.coalitions.end());
  const auto sa = shapley_sensitivity(m, a, data, Split::validation).scores;
  const auto sb = shapley_sensitivity(m, b, data, Split::validation).scores;
  const auto sab = shapley_sensitivity(m, ab, data, Split::validation).scores;
  const double na = double(a.size()), nb = double(b.size());
  for (const auto& [id, s] : sab) {
    EXPECT_LT(relative_error(s, (na * sa.at(id) + nb * sb.at(id)) / (na + nb), 1e-15), 1e-12);
  }
}

TEST(ShapleySensitivity, ConditionalAverageDoublesUnderPairing) {
  const ModelConfig cfg = tiny_config();
  Model m = lora_model(cfg, 2, 6);
  const auto data = some_batches(cfg, 1, 2, 6, 3);
  const std::vector<double> rates = {0.2, 0.5};
  const CoalitionPlan plan = sample_coalitions(m.rank_ids(), rates, 2, 4);
  const auto lit = shapley_sensitivity(m, plan, data, Split::validation);
  ScoringOptions opts;
  opts.conditional_average = true;
  const auto cond = shapley_sensitivity(m, plan, data, Split::validation, opts);
  for (const auto& [id, s] : lit.scores) {
    EXPECT_LT(relative_error(cond.scores.at(id), 2 * s, 1e-15), 1e-14);
  }
}

TEST(ShapleySensitivity, NinetyCoalitionsMatchIndependentPass) {
  const ModelConfig cfg;
  Model m = lora_model(cfg, 4, 8);
  const auto data = some_batches(cfg, 2, 4, 8, 5);
  const CoalitionPlan plan =
      sample_coalitions(m.rank_ids(), kDefaultMaskRates, kDefaultMaskRepeats, 31);
  const ImportanceReport got = shapley_sensitivity(m, plan, data, Split::validation);
  const auto want = reference_shapley(m, plan, data);
  EXPECT_EQ(got.n_coalitions, 90);
  EXPECT_EQ(got.batches_used, 2);
  EXPECT_EQ(got.seed, 31u);
  for (const auto& [id, s] : want) {
    EXPECT_NEAR(got.scores.at(id), s, 1e-12) << id.str();
    EXPECT_GE(got.scores.at(id), 0.0);
    EXPECT_TRUE(std::isfinite(got.scores.at(id)));
  }
}

TEST(ShapleySensitivity, BatchCapRecorded) {
  const ModelConfig cfg = tiny_config();
  Model m = lora_model(cfg, 2, 1);
  const auto data = some_batches(cfg, 12, 1, 4, 5);
  const auto r = plain_sensitivity(m, data, Split::train);
  EXPECT_EQ(r.batches_used, kDefaultValidationBatches);
  EXPECT_EQ(r.split, Split::train);
  ScoringOptions opts;
  opts.max_batches = 20;
  EXPECT_EQ(plain_sensitivity(m, data, Split::train, opts).batches_used, 12);
}

TEST(MagnitudeScore, HandCaseAndLocality) {
  Model m = lora_model(tiny_config(), 2, 3);
  LoraModule* mod = m.mutable_lora({0, ModuleKind::O});
  mod->lambda[1] = 0.5;
  for (std::size_t j = 0; j < mod->d_in(); ++j) mod->P.at(j, 1) = 2.0;
  for (std::size_t j = 0; j < mod->d_out(); ++j) mod->Q.at(1, j) = -3.0;
  const RankId id{{0, ModuleKind::O}, 1};
  const auto before = magnitude_score(m);
  EXPECT_DOUBLE_EQ(before.scores.at(id), 5.5);
  EXPECT_EQ(before.method, ScoringMethod::magnitude);

  mod->lambda[1] = 1.0;
  const auto after = magnitude_score(m);
  for (const auto& [rid, s] : after.scores) {
    if (rid == id) {
      EXPECT_GT(s, before.scores.at(rid));
    } else {
      EXPECT_EQ(s, before.scores.at(rid));
    }
  }
}

TEST(MagnitudeScore, FreshInitIsVectorMeans) {
  Model m = Model::build(tiny_config(), 1);
  m.attach_lora(2, 5);
  const auto r = magnitude_score(m);
  const LoraModule* mod = m.lora({0, ModuleKind::K});
  double p = 0.0, q = 0.0;
  for (std::size_t j = 0; j < mod->d_in(); ++j) p += std::abs(mod->P.at(j, 0));
  for (std::size_t j = 0; j < mod->d_out(); ++j) q += std::abs(mod->Q.at(0, j));
  EXPECT_DOUBLE_EQ(r.scores.at(RankId{{0, ModuleKind::K}, 0}),
                   p / double(mod->d_in()) + q / double(mod->d_out()));
}

// ---- exact Shapley --------------------------------------------------------------------

namespace {

std::vector<double> permutation_shapley(const std::function<double(std::uint32_t)>& v, int n) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> phi(static_cast<std::size_t>(n), 0.0);
  int count = 0;
  do {
    std::uint32_t mask = 0;
    for (int p : order) {
      phi[static_cast<std::size_t>(p)] += v(mask | (1u << p)) - v(mask);
      mask |= 1u << p;
    }
    ++count;
  } while (std::next_permutation(order.begin(), order.end()));
  for (auto& x : phi) x /= count;
  return phi;
}

}  // namespace

TEST(ExactShapley, AdditiveGame) {
  auto v = [](std::uint32_t m) { return double((m & 1) ? 1 : 0) + ((m & 2) ? 2 : 0); };
  const auto phi = exact_shapley(v, 2);
  EXPECT_NEAR(phi[0], 1.0, 1e-12);
  EXPECT_NEAR(phi[1], 2.0, 1e-12);
}

TEST(ExactShapley, CardinalityGame) {
  const auto phi = exact_shapley([](std::uint32_t m) { return double(std::popcount(m)); }, 5);
  for (double x : phi) EXPECT_NEAR(x, 1.0, 1e-12);
}

TEST(ExactShapley, ThreePlayerGameMatchesPermutations) {
  const double table[8] = {0, 1, 1, 3, 0, 1, 1, 4};  // bit 0 = player 1
  auto v = [&](std::uint32_t m) { return table[m]; };
  const auto phi = exact_shapley(v, 3);
  const auto brute = permutation_shapley(v, 3);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(phi[k], brute[k], 1e-12);
  EXPECT_NEAR(phi[0] + phi[1] + phi[2], 4.0, 1e-12);
}

TEST(ExactShapley, RandomGamesMatchPermutationsAndAreEfficient) {
  Rng rng(17);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int n = 1; n <= 6; ++n) {
    std::vector<double> table(std::size_t{1} << n);
    for (auto& x : table) x = u(rng);
    auto v = [&](std::uint32_t m) { return table[m]; };
    const auto phi = exact_shapley(v, n);
    const auto brute = permutation_shapley(v, n);
    double sum = 0.0;
    for (int k = 0; k < n; ++k) {
      EXPECT_NEAR(phi[k], brute[k], 1e-12);
      sum += phi[k];
    }
    EXPECT_NEAR(sum, table.back() - table.front(), 1e-9);
  }
}

TEST(ExactShapley, CapacityLimit) {
  auto v = [](std::uint32_t) { return 0.0; };
  EXPECT_NO_THROW(exact_shapley(v, kMaxExactPlayers));
  EXPECT_THROW(exact_shapley(v, kMaxExactPlayers + 1), CapacityError);
}

// ---- Spearman -------------------------------------------------------------------------

TEST(Spearman, Examples) {
  const std::vector<double> a = {1, 2, 3, 4}, b = {1, 3, 2, 4}, rev = {4, 3, 2, 1};
  EXPECT_NEAR(*spearman(a, a), 1.0, 1e-15);
  EXPECT_NEAR(*spearman(a, rev), -1.0, 1e-15);
  EXPECT_NEAR(*spearman(a, b), 0.8, 1e-15);
}

TEST(Spearman, TiesUseAverageRanks) {
  // Ranks of {1,1,2} are {1.5,1.5,3}; Pearson with {1,2,3} is sqrt(3)/2.
  const std::vector<double> a = {1, 1, 2}, b = {1, 2, 3};
  EXPECT_NEAR(*spearman(a, b), std::sqrt(3.0) / 2, 1e-12);
}

TEST(Spearman, DegenerateInputs) {
  const std::vector<double> c = {2, 2, 2}, a = {1, 2, 3}, shortv = {1};
  EXPECT_FALSE(spearman(c, a).has_value());
  EXPECT_THROW(spearman(a, std::vector<double>{1, 2}), ContractError);
  EXPECT_THROW(spearman(shortv, shortv), ContractError);
}

TEST(Spearman, ReportsOverCommonRanks) {
  std::map<RankId, double> x, y;
  for (int i = 0; i < 5; ++i) {
    x[RankId{{0, ModuleKind::Q}, i}] = i;
    y[RankId{{0, ModuleKind::Q}, i}] = 10 - i;
  }
  y[RankId{{1, ModuleKind::Q}, 0}] = 100;
  EXPECT_NEAR(*spearman(x, y), -1.0, 1e-15);
}
