#pragma once

// Shared fixtures and oracles for the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "shaplora/autodiff.hpp"
#include "shaplora/model.hpp"
#include "shaplora/random.hpp"
#include "shaplora/tasks.hpp"
#include "shaplora/workflow.hpp"

namespace shaplora::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

/// sum_i r_i * y_i, recorded directly on the tape.
inline Var weighted_sum(const Var& y, const Tensor& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) s += r[i] * y.value()[i];
  return y.tape()->record(OpKind::elementwise_mul, Tensor::scalar(s), {y},
                          [r](const Tensor& g, std::span<Tensor* const> in) {
                            if (!in[0]) return;
                            for (std::size_t i = 0; i < r.size(); ++i) (*in[0])[i] += g[0] * r[i];
                          });
}

/// |a - n| relative to max(|a|, |n|), treated as 0 when both sides are within
/// `abs_floor` of each other.
inline double relative_error(double analytic, double numeric, double abs_floor = 1e-8) {
  const double diff = std::abs(analytic - numeric);
  if (diff < abs_floor) return 0.0;
  return diff / std::max(std::abs(analytic), std::abs(numeric));
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool all_present = true;
};

/// Compares Tape::backward against finite_difference_gradient for a scalar
/// graph built from `params` (every param is a requires_grad leaf).
inline GradCheck check_gradients(
    const std::function<Var(Tape&, const std::vector<Var>&)>& build, std::vector<Tensor> params,
    double eps = 1e-5) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& p : params) leaves.push_back(tape.leaf(p, true));
  const Var loss = build(tape, leaves);
  const GradientMap grads = tape.backward(loss);

  auto f = [&](const std::vector<Tensor>& ps) {
    Tape t;
    std::vector<Var> ls;
    for (const auto& p : ps) ls.push_back(t.leaf(p, true));
    return build(t, ls).value().item();
  };
  const auto numeric = finite_difference_gradient(f, params, eps);

  GradCheck out;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    if (!grads.contains(leaves[k])) {
      out.all_present = false;
      continue;
    }
    const Tensor& a = grads.at(leaves[k]);
    for (std::size_t i = 0; i < a.size(); ++i) {
      out.max_rel_error = std::max(out.max_rel_error, relative_error(a[i], numeric[k][i]));
      ++out.checked;
    }
  }
  return out;
}

// ---- desk fixtures ---------------------------------------------------------------------

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 8;
  c.d_ffn = 12;
  c.n_heads = 2;
  c.vocab_size = 11;
  c.max_seq_len = 8;
  return c;
}

inline Batch random_batch(const ModelConfig& cfg, std::size_t b, std::size_t t,
                          std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> tok(0, cfg.vocab_size - 1);
  Batch out{b, t, {}, {}};
  for (std::size_t i = 0; i < b * t; ++i) {
    out.tokens.push_back(tok(rng));
    out.targets.push_back(tok(rng));
  }
  return out;
}

/// Gives every LoRA singular value a random nonzero value, standing in for a
/// trained checkpoint where only the structure matters.
inline void randomize_lambdas(Model& model, std::uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (std::size_t m = 0; m < model.num_modules(); ++m) {
    if (LoraModule* mod = model.mutable_lora_at(m)) {
      for (auto& l : mod->lambda.values()) l = n(rng);
    }
  }
}

inline Model lora_model(const ModelConfig& cfg, int r, std::uint64_t seed) {
  Model m = Model::build(cfg, seed);
  m.attach_lora(r, derive_seed(seed, 1));
  randomize_lambdas(m, derive_seed(seed, 2));
  return m;
}

/// The acceptance recipe: lr 1e-2, batch 32 on the default desk model and
/// planted {V, U} task; lr 1e-4 barely moves a model this small in 640 steps.
inline PipelineConfig desk_config(std::uint64_t seed) {
  PipelineConfig c;
  for (TrainConfig* t : {&c.stage1, &c.stage2}) {
    t->learning_rate = 1e-2;
    t->batch_size = 32;
    t->patience = 5;
  }
  c.seeds.model = derive_seed(seed, 11);
  c.seeds.data = derive_seed(seed, 13);
  c.seeds.lora_stage1 = derive_seed(seed, 17);
  c.seeds.lora_stage2 = derive_seed(seed, 23);
  c.seeds.plan = derive_seed(seed, 19);
  c.stage1.seed = derive_seed(seed, 29);
  c.stage2.seed = derive_seed(seed, 31);
  return c;
}

/// A pipeline small enough for unit tests: one-layer tiny model, 128 planted
/// training sequences, a short plan.
inline PipelineConfig small_pipeline(std::uint64_t seed = 1) {
  PipelineConfig c = desk_config(seed);
  c.model = tiny_config();
  c.task.sizes = {128, 32, 32};
  c.task.seq_len = 6;
  c.r_init = 2;
  c.mask_rates = {0.3, 0.6};
  c.mask_repeats = 2;
  c.validation_batches = 2;
  for (TrainConfig* t : {&c.stage1, &c.stage2}) {
    t->batch_size = 16;
    t->max_epochs = 2;
    t->eval_every_steps = 4;
  }
  return c;
}

}  // namespace shaplora::testing
