#include <gtest/gtest.h>

#include <algorithm>

#include "shaplora/errors.hpp"
#include "shaplora/lora.hpp"
#include "shaplora/model.hpp"
#include "support.hpp"

using namespace shaplora;
using namespace shaplora::testing;

namespace {

RankId rank(int layer, ModuleKind k, int i) { return RankId{ModuleId{layer, k}, i}; }

Coalition random_coalition(const Model& m, Rng& rng, double keep = 0.5) {
  std::bernoulli_distribution b(keep);
  std::vector<RankId> ids;
  for (const auto& id : m.rank_ids()) {
    if (b(rng)) ids.push_back(id);
  }
  return Coalition::from(ids);
}

AllocationConfig allocation_for(const Model& m, const Coalition& c) {
  AllocationConfig a;
  a.r_init = m.r_init();
  for (const auto& id : m.module_ids()) a.kept[id] = 0;
  for (const auto& id : c.members) {
    ++a.kept[id.module];
    a.kept_ranks.push_back(id);
  }
  return a;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

}  // namespace

TEST(InitLora, ZeroDeltaAndDeterministic) {
  for (int r : {1, 3, 8}) {
    LoraModule m = init_lora_module(5, 7, r, 11);
    const Tensor delta = m.delta();
    for (double v : delta.values()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(m, init_lora_module(5, 7, r, 11));
    EXPECT_EQ(m.P.shape(), (Shape{5, static_cast<std::size_t>(r)}));
    EXPECT_EQ(m.Q.shape(), (Shape{static_cast<std::size_t>(r), 7}));
    EXPECT_TRUE(std::all_of(m.active.begin(), m.active.end(), [](char a) { return a; }));
  }
}

TEST(InitLora, VectorStdIsInverseSqrtRank) {
  LoraModule m = init_lora_module(64, 64, 16, 3);
  double ss = 0.0;
  for (double v : m.P.values()) ss += v * v;
  EXPECT_NEAR(std::sqrt(ss / double(m.P.size())), 0.25, 0.02);
}

TEST(LoraForward, HandValue) {
  LoraModule m{Tensor::matrix({{1.0}}), Tensor::vector({0.5}), Tensor::matrix({{4.0}}), {1}, {}};
  Tensor out = lora_forward(Tensor::matrix({{2.0}}), Tensor::matrix({{3.0}}), m);
  EXPECT_DOUBLE_EQ(out.item(), 10.0);
  Tape tape;
  Var y = lora_forward(tape.constant(Tensor::matrix({{2.0}})), tape.constant(Tensor::matrix({{3.0}})),
                       &m, {}, nullptr);
  EXPECT_DOUBLE_EQ(y.value().item(), 10.0);
}

TEST(LoraForward, ZeroLambdaIsBase) {
  Rng rng(1);
  LoraModule m = init_lora_module(4, 3, 2, 9);
  Tensor x = random_tensor({5, 4}, rng), W = random_tensor({4, 3}, rng);
  Tape tape;
  Var base = matmul(tape.constant(x), tape.constant(W));
  EXPECT_EQ(lora_forward(x, W, m), base.value());
}

TEST(LoraForward, InactiveEqualsZeroLambda) {
  Rng rng(2);
  LoraModule m = init_lora_module(4, 3, 3, 9);
  m.lambda = Tensor::vector({0.3, -0.7, 1.1});
  Tensor x = random_tensor({2, 4}, rng), W = random_tensor({4, 3}, rng);
  LoraModule zeroed = m;
  zeroed.lambda[1] = 0.0;
  LoraModule off = zeroed;
  off.active[1] = 0;
  EXPECT_EQ(lora_forward(x, W, zeroed), lora_forward(x, W, off));
  // Taped overlay gives the same result.
  Tape tape;
  const std::vector<char> overlay = {1, 0, 1};
  Var y = lora_forward(tape.constant(x), tape.constant(W), &m, overlay, nullptr);
  EXPECT_LT(max_abs_diff(y.value(), lora_forward(x, W, off)), 1e-15);
}

TEST(LoraForward, ShapeMismatch) {
  LoraModule m = init_lora_module(4, 3, 2, 9);
  EXPECT_THROW(lora_forward(Tensor({2, 5}), Tensor({5, 3}), m), DimensionError);
}

TEST(Coalition, FullAndEmpty) {
  const ModelConfig cfg = tiny_config();
  Model m = lora_model(cfg, 3, 4);
  const Batch b = random_batch(cfg, 2, 6, 1);
  const double unmasked = evaluate_loss(m, b);

  Model full = m;
  apply_coalition(full, Coalition::from(m.rank_ids()));
  EXPECT_EQ(evaluate_loss(full, b), unmasked);

  Model empty = m;
  apply_coalition(empty, Coalition{});
  EXPECT_EQ(evaluate_loss(empty, b), evaluate_loss(Model::build(cfg, 4), b));

  CoalitionMask none(m, Coalition{});
  EXPECT_EQ(evaluate_loss(m, b, &none), evaluate_loss(Model::build(cfg, 4), b));
}

TEST(Coalition, ApplyRestoreRoundTrip) {
  Model m = lora_model(tiny_config(), 3, 4);
  m.mutable_lora({0, ModuleKind::V})->lambda[1] = 0.0;
  m.mutable_lora({0, ModuleKind::V})->active[1] = 0;
  const Model original = m;
  Rng rng(3);
  const MaskState s = apply_coalition(m, random_coalition(m, rng));
  EXPECT_FALSE(m == original);
  restore_coalition(m, s);
  EXPECT_EQ(m, original);
}

TEST(Coalition, UnknownRankIsKeyError) {
  Model m = lora_model(tiny_config(), 2, 4);
  const Coalition c = Coalition::from({rank(0, ModuleKind::Q, 5)});
  EXPECT_THROW(apply_coalition(m, c), KeyError);
  EXPECT_THROW(CoalitionMask(m, c), KeyError);
}

TEST(Coalition, MaskOverlayMatchesMutation) {
  const ModelConfig cfg = tiny_config();
  Model m = lora_model(cfg, 3, 5);
  const Batch b = random_batch(cfg, 2, 6, 1);
  Rng rng(8);
  for (int i = 0; i < 5; ++i) {
    const Coalition c = random_coalition(m, rng);
    CoalitionMask mask(m, c);
    Model mutated = m;
    apply_coalition(mutated, c);
    EXPECT_EQ(evaluate_loss(m, b, &mask), evaluate_loss(mutated, b));
  }
}

TEST(Allocation, TopScoresKept) {
  ImportanceReport r;
  const RankId a = rank(0, ModuleKind::Q, 0), b = rank(0, ModuleKind::Q, 1),
               c = rank(0, ModuleKind::K, 0);
  r.scores = {{a, 3.0}, {b, 1.0}, {c, 2.0}};
  AllocationConfig alloc = allocation_from_scores(r, 2);
  EXPECT_EQ(alloc.total_kept(), 2);
  EXPECT_EQ(alloc.kept_ranks, (std::vector<RankId>{a, c}));
  EXPECT_EQ(alloc.count({0, ModuleKind::Q}), 1);
  EXPECT_EQ(alloc.count({0, ModuleKind::K}), 1);
  EXPECT_THROW(allocation_from_scores(r, 4), BudgetError);
  EXPECT_THROW(allocation_from_scores(r, 0), BudgetError);
  EXPECT_EQ(allocation_from_scores(r, 3).total_kept(), 3);
}

TEST(Allocation, TiesGoToCanonicalOrder) {
  Model m = lora_model(ModelConfig{}, 4, 1);
  ImportanceReport r;
  for (const auto& id : m.rank_ids()) r.scores[id] = 1.0;
  AllocationConfig alloc = allocation_from_scores(r, 6);
  const auto ids = m.rank_ids();
  EXPECT_EQ(alloc.kept_ranks, std::vector<RankId>(ids.begin(), ids.begin() + 6));
  EXPECT_EQ(alloc.count({0, ModuleKind::Q}), 4);
  EXPECT_EQ(alloc.count({0, ModuleKind::K}), 2);
  EXPECT_EQ(alloc.count({1, ModuleKind::D}), 0);
}

TEST(Allocation, MonotoneInBudgetAndOrderInvariant) {
  Model m = lora_model(ModelConfig{}, 4, 1);
  Rng rng(5);
  std::uniform_int_distribution<int> u(0, 9);  // coarse values force ties
  std::vector<std::pair<RankId, double>> entries;
  for (const auto& id : m.rank_ids()) entries.emplace_back(id, u(rng));
  ImportanceReport r;
  for (const auto& [id, s] : entries) r.scores[id] = s;
  std::shuffle(entries.begin(), entries.end(), rng);
  ImportanceReport shuffled;
  for (const auto& [id, s] : entries) shuffled.scores.emplace(id, s);

  std::vector<RankId> prev;
  for (int k = 1; k <= 56; ++k) {
    AllocationConfig a = allocation_from_scores(r, k);
    EXPECT_EQ(a.kept_ranks, allocation_from_scores(shuffled, k).kept_ranks);
    std::vector<RankId> cur = a.kept_ranks;
    std::sort(cur.begin(), cur.end());
    EXPECT_TRUE(std::includes(cur.begin(), cur.end(), prev.begin(), prev.end()));
    prev = cur;
  }
}

TEST(Prune, MatchesMaskedForward) {
  const ModelConfig cfg;
  Model m = lora_model(cfg, 4, 7);
  const Batch b = random_batch(cfg, 2, 8, 4);
  Rng rng(6);
  for (int i = 0; i < 4; ++i) {
    const Coalition c = random_coalition(m, rng, 0.3 + 0.15 * i);
    CoalitionMask mask(m, c);
    const Tensor masked = [&] {
      Model copy = m;
      apply_coalition(copy, c);
      return forward_logits(copy, b);
    }();
    Model pruned = m;
    prune_to_allocation(pruned, allocation_for(m, c));
    EXPECT_EQ(pruned.total_ranks(), static_cast<int>(c.size()));
    EXPECT_LT(max_abs_diff(masked, forward_logits(pruned, b)), 1e-12);
    EXPECT_NEAR(evaluate_loss(m, b, &mask), evaluate_loss(pruned, b), 1e-12);
  }
}

TEST(Prune, SurvivorsKeepValuesAndEmptyModulesDrop) {
  Model m = lora_model(ModelConfig{}, 4, 7);
  std::vector<RankId> keep = {rank(0, ModuleKind::V, 1), rank(0, ModuleKind::V, 3),
                              rank(1, ModuleKind::D, 0)};
  const auto before = lora_parameters(m);
  prune_to_allocation(m, allocation_for(m, Coalition::from(keep)));
  EXPECT_EQ(m.lora({0, ModuleKind::Q}), nullptr);
  ASSERT_NE(m.lora({0, ModuleKind::V}), nullptr);
  EXPECT_EQ(m.lora({0, ModuleKind::V})->rank(), 2);
  const auto after = lora_parameters(m);
  ASSERT_EQ(after.size(), 3u);
  auto find = [&](const RankId& id) {
    return *std::find_if(before.begin(), before.end(), [&](const auto& v) { return v.id == id; });
  };
  const RankId old_ids[] = {keep[0], keep[1], keep[2]};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& o = find(old_ids[i]);
    EXPECT_EQ(after[i].lambda, o.lambda);
    EXPECT_EQ(after[i].p_column, o.p_column);
    EXPECT_EQ(after[i].q_row, o.q_row);
  }
}

TEST(Prune, SingleRankRemoval) {
  Model m = lora_model(ModelConfig{}, 4, 7);
  const RankId gone = rank(0, ModuleKind::Q, 1);
  std::vector<RankId> keep;
  for (const auto& id : m.rank_ids()) {
    if (!(id == gone)) keep.push_back(id);
  }
  prune_to_allocation(m, allocation_for(m, Coalition::from(keep)));
  const auto params = lora_parameters(m);
  EXPECT_EQ(params.size(), 55u);
  for (const auto& p : params) EXPECT_FALSE(p.id == gone);
  EXPECT_EQ(m.lora({0, ModuleKind::Q})->rank(), 3);
  // Survivors keep their identities, so the pruned model can be masked and
  // pruned again by the same ids.
  const auto ids = m.rank_ids();
  EXPECT_EQ(ids[1], rank(0, ModuleKind::Q, 2));
  Model again = m;
  apply_coalition(again, Coalition::from({rank(0, ModuleKind::Q, 3)}));
  EXPECT_EQ(again.lora({0, ModuleKind::Q})->active, (std::vector<char>{0, 0, 1}));
}

TEST(Prune, FullAllocationKeepsBehaviour) {
  const ModelConfig cfg;
  Model m = lora_model(cfg, 4, 7);
  const Batch b = random_batch(cfg, 2, 8, 4);
  Model pruned = m;
  prune_to_allocation(pruned, allocation_for(m, Coalition::from(m.rank_ids())));
  EXPECT_EQ(forward_logits(m, b), forward_logits(pruned, b));
}

TEST(Prune, InconsistentAllocationIsStateError) {
  Model m = lora_model(ModelConfig{}, 4, 7);
  AllocationConfig a = allocation_for(m, Coalition::from({rank(0, ModuleKind::Q, 0)}));
  a.kept[{0, ModuleKind::Q}] = 2;
  EXPECT_THROW(prune_to_allocation(m, a), StateError);
  AllocationConfig b = allocation_for(m, Coalition::from({rank(0, ModuleKind::Q, 0)}));
  b.kept_ranks = {rank(0, ModuleKind::Q, 9)};
  EXPECT_THROW(prune_to_allocation(m, b), StateError);
}
