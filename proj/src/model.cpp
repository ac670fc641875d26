#include "shaplora/model.hpp"

#include <cmath>
#include <string>

#include "shaplora/errors.hpp"
#include "shaplora/random.hpp"

namespace shaplora {

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ConfigError(std::string("model.") + name + " must be >= 1");
  };
  positive(n_layers, "n_layers");
  positive(d_model, "d_model");
  positive(d_ffn, "d_ffn");
  positive(n_heads, "n_heads");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (d_model % n_heads != 0) {
    throw ConfigError("model.d_model must be divisible by model.n_heads");
  }
}

namespace {

Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape), 0.0);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace

Model Model::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto v = static_cast<std::size_t>(config.vocab_size);
  Rng rng(seed);
  m.embedding_ = gaussian({v, d}, kBaseInitStd, rng);
  for (int l = 0; l < config.n_layers; ++l) {
    for (auto kind : kAllModuleKinds) {
      auto [din, dout] = m.module_dims(kind);
      m.weights_.push_back(gaussian({din, dout}, kBaseInitStd, rng));
    }
  }
  m.head_ = gaussian({d, v}, kBaseInitStd, rng);
  m.lora_.resize(m.weights_.size());
  return m;
}

std::size_t Model::module_index(ModuleId id) const {
  if (id.layer < 0 || id.layer >= config_.n_layers) {
    throw KeyError("module " + id.str() + " outside model with " +
                   std::to_string(config_.n_layers) + " layers");
  }
  return static_cast<std::size_t>(id.layer) * kNumModuleKinds + static_cast<int>(id.kind);
}

ModuleId Model::module_at(std::size_t index) const {
  return ModuleId{static_cast<int>(index / kNumModuleKinds),
                  kAllModuleKinds[index % kNumModuleKinds]};
}

std::vector<ModuleId> Model::module_ids() const {
  std::vector<ModuleId> ids;
  for (std::size_t i = 0; i < weights_.size(); ++i) ids.push_back(module_at(i));
  return ids;
}

std::pair<std::size_t, std::size_t> Model::module_dims(ModuleKind kind) const {
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto f = static_cast<std::size_t>(config_.d_ffn);
  switch (kind) {
    case ModuleKind::G:
    case ModuleKind::U: return {d, f};
    case ModuleKind::D: return {f, d};
    default: return {d, d};
  }
}

const LoraModule* Model::lora(ModuleId id) const { return lora_at(module_index(id)); }
LoraModule* Model::mutable_lora(ModuleId id) { return mutable_lora_at(module_index(id)); }

const LoraModule* Model::lora_at(std::size_t index) const {
  const auto& slot = lora_.at(index);
  return slot ? &*slot : nullptr;
}

LoraModule* Model::mutable_lora_at(std::size_t index) {
  auto& slot = lora_.at(index);
  return slot ? &*slot : nullptr;
}

void Model::attach_lora(int r_init, std::uint64_t seed) {
  if (r_init < 1) throw ConfigError("r_init must be >= 1");
  if (lora_attached_) throw StateError("LoRA already attached");
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    auto [din, dout] = module_dims(module_at(i).kind);
    lora_[i] = init_lora_module(din, dout, r_init, derive_seed(seed, i));
  }
  lora_attached_ = true;
  r_init_ = r_init;
}

void Model::attach_allocation(const AllocationConfig& alloc, std::uint64_t seed) {
  if (lora_attached_) throw StateError("LoRA already attached");
  for (const auto& [id, n] : alloc.kept) {
    module_index(id);
    if (n < 0) throw ConfigError("negative rank count for module " + id.str());
  }
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    const int r = alloc.count(module_at(i));
    if (r == 0) continue;
    auto [din, dout] = module_dims(module_at(i).kind);
    lora_[i] = init_lora_module(din, dout, r, derive_seed(seed, i));
  }
  lora_attached_ = true;
  r_init_ = alloc.r_init;
}

std::vector<RankId> Model::rank_ids() const {
  std::vector<RankId> ids;
  for (std::size_t i = 0; i < lora_.size(); ++i) {
    if (!lora_[i]) continue;
    for (int r = 0; r < lora_[i]->rank(); ++r) ids.push_back(RankId{module_at(i), lora_[i]->label(r)});
  }
  return ids;
}

int Model::total_ranks() const {
  int n = 0;
  for (const auto& l : lora_) n += l ? l->rank() : 0;
  return n;
}

void Model::set_lora(std::size_t index, std::optional<LoraModule> mod) {
  if (mod) {
    mod->check();
    auto [din, dout] = module_dims(module_at(index).kind);
    if (mod->d_in() != din || mod->d_out() != dout) {
      throw DimensionError("LoRA module shape does not match site " + module_at(index).str());
    }
  }
  lora_.at(index) = std::move(mod);
}

void Model::set_lora_state(bool attached, int r_init) {
  lora_attached_ = attached;
  r_init_ = r_init;
}

void Model::set_embedding(Tensor t) {
  if (t.shape() != embedding_.shape()) throw DimensionError("embedding shape mismatch");
  embedding_ = std::move(t);
}

void Model::set_head(Tensor t) {
  if (t.shape() != head_.shape()) throw DimensionError("head shape mismatch");
  head_ = std::move(t);
}

std::vector<LoraRankView> lora_parameters(const Model& model) {
  if (!model.lora_attached()) throw StateError("no LoRA attached");
  std::vector<LoraRankView> out;
  for (std::size_t m = 0; m < model.num_modules(); ++m) {
    const LoraModule* mod = model.lora_at(m);
    if (!mod) continue;
    for (int r = 0; r < mod->rank(); ++r) {
      LoraRankView view{RankId{model.module_at(m), mod->label(r)}, mod->lambda[r], {}, {}};
      for (std::size_t j = 0; j < mod->d_in(); ++j) view.p_column.push_back(mod->P.at(j, r));
      for (std::size_t j = 0; j < mod->d_out(); ++j) view.q_row.push_back(mod->Q.at(r, j));
      out.push_back(std::move(view));
    }
  }
  return out;
}

// ---- forward ----------------------------------------------------------------------

namespace {

Var forward_network(Tape& tape, const Model& model, const Batch& batch, const CoalitionMask* mask,
                    std::vector<LoraVars>* lora_vars, ForwardProbe* probe) {
  const ModelConfig& cfg = model.config();
  const std::size_t B = batch.batch_size, T = batch.seq_len;
  if (B == 0 || T == 0) throw ContractError("empty batch");
  if (batch.tokens.size() != B * T) {
    throw DimensionError("batch token count does not match batch_size x seq_len");
  }
  if (T > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw DataError("sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                    std::to_string(cfg.max_seq_len));
  }
  const bool base_grad = !model.lora_attached();
  const auto H = static_cast<std::size_t>(cfg.n_heads);
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model / cfg.n_heads));

  if (probe) {
    probe->module_outputs.assign(model.num_modules(), Tensor());
    probe->attention.clear();
  }

  auto linear = [&](const Var& x, std::size_t index) {
    Var w = tape.leaf(model.weight(model.module_at(index)), base_grad);
    std::span<const char> overlay;
    if (mask) overlay = mask->flags(index);
    LoraVars vars;
    const LoraModule* mod = model.lora_at(index);
    Var out = lora_forward(x, w, mod, overlay, &vars);
    if (mod && lora_vars) {
      vars.module = model.module_at(index);
      lora_vars->push_back(vars);
    }
    if (probe) probe->module_outputs[index] = out.value();
    return out;
  };

  Var h = embedding_lookup(tape.leaf(model.embedding(), base_grad), batch.tokens);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::size_t base = static_cast<std::size_t>(l) * kNumModuleKinds;
    auto site = [&](ModuleKind k) { return base + static_cast<std::size_t>(k); };

    Var a = rms_normalize(h);
    Var q = split_heads(linear(a, site(ModuleKind::Q)), B, T, H);
    Var k = split_heads(linear(a, site(ModuleKind::K)), B, T, H);
    Var v = split_heads(linear(a, site(ModuleKind::V)), B, T, H);
    Var scores = causal_mask(scale(matmul(q, transpose_last2(k)), attn_scale));
    Var probs = softmax_lastdim(scores);
    if (probe) probe->attention.push_back(probs.value());
    Var ctx = merge_heads(matmul(probs, v), B, T, H);
    h = add(h, linear(ctx, site(ModuleKind::O)));

    Var f = rms_normalize(h);
    Var gate = silu_activation(linear(f, site(ModuleKind::G)));
    Var up = linear(f, site(ModuleKind::U));
    h = add(h, linear(elementwise_mul(gate, up), site(ModuleKind::D)));
  }
  return matmul(rms_normalize(h), tape.leaf(model.head(), base_grad));
}

}  // namespace

Var forward_loss(Tape& tape, const Model& model, const Batch& batch, const CoalitionMask* mask,
                 std::vector<LoraVars>* lora_vars, ForwardProbe* probe) {
  if (batch.targets.size() != batch.tokens.size()) {
    throw DimensionError("batch target count does not match token count");
  }
  Var logits = forward_network(tape, model, batch, mask, lora_vars, probe);
  return cross_entropy_mean(logits, batch.targets);
}

double evaluate_loss(const Model& model, const Batch& batch, const CoalitionMask* mask) {
  Tape tape;
  return forward_loss(tape, model, batch, mask).value().item();
}

Tensor forward_logits(const Model& model, const Batch& batch, const CoalitionMask* mask) {
  Tape tape;
  return forward_network(tape, model, batch, mask, nullptr, nullptr).value();
}

LossAndGrads lora_loss_and_grads(const Model& model, const Batch& batch,
                                 const CoalitionMask* mask) {
  if (!model.lora_attached()) throw StateError("no LoRA attached");
  Tape tape;
  std::vector<LoraVars> vars;
  Var loss = forward_loss(tape, model, batch, mask, &vars);
  LossAndGrads out;
  out.loss = loss.value().item();
  out.grads.resize(model.num_modules());
  if (vars.empty()) return out;
  GradientMap g = tape.backward(loss);
  for (const auto& v : vars) {
    LoraGrad lg{Tensor(v.P.shape(), 0.0), Tensor(v.lambda.shape(), 0.0),
                Tensor(v.Q.shape(), 0.0)};
    if (g.contains(v.P)) lg.P = g.at(v.P);
    if (g.contains(v.lambda)) lg.lambda = g.at(v.lambda);
    if (g.contains(v.Q)) lg.Q = g.at(v.Q);
    out.grads[model.module_index(v.module)] = std::move(lg);
  }
  return out;
}

}  // namespace shaplora
