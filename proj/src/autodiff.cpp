#include "shaplora/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

#include "shaplora/errors.hpp"

namespace shaplora {

// ---- Var / GradientMap ------------------------------------------------------

const Tensor& Var::value() const { return tape_->node(id_).value; }
bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }
OpKind Var::kind() const { return tape_->node(id_).kind; }

const Tensor& GradientMap::at(const Var& v) const {
  auto it = grads_.find(v.id());
  if (it == grads_.end()) throw KeyError("no gradient for node " + std::to_string(v.id()));
  return it->second;
}

// ---- Tape ------------------------------------------------------------------

Var Tape::leaf(Tensor value, bool requires_grad) {
  value.check_finite("leaf");
  nodes_.push_back(Node{OpKind::leaf, std::move(value), requires_grad, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(OpKind kind, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  bool needs_grad = false;
  std::vector<std::size_t> ids;
  ids.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.tape_ != this) throw ContractError("operation mixes variables from different tapes");
    ids.push_back(in.id_);
    needs_grad = needs_grad || node(in.id_).requires_grad;
  }
  if (!needs_grad) backward = nullptr;
  nodes_.push_back(Node{kind, std::move(value), needs_grad, std::move(ids), std::move(backward)});
  return Var(this, nodes_.size() - 1);
}

GradientMap Tape::backward(const Var& loss) const {
  if (loss.tape_ != this) throw ContractError("loss belongs to another tape");
  const Node& root = node(loss.id_);
  if (root.value.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_string(root.value.shape()));
  }
  if (!root.requires_grad) {
    throw ContractError("loss is not reachable from any parameter that requires grad");
  }

  std::vector<std::optional<Tensor>> grads(loss.id_ + 1);
  grads[loss.id_] = Tensor(root.value.shape(), 1.0);

  std::vector<Tensor*> slots;
  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    if (!grads[id]) continue;
    const Node& n = node(id);
    if (!n.backward) continue;
    slots.clear();
    for (std::size_t in : n.inputs) {
      const Node& src = node(in);
      if (!src.requires_grad) {
        slots.push_back(nullptr);
        continue;
      }
      if (!grads[in]) grads[in] = Tensor(src.value.shape(), 0.0);
      slots.push_back(&*grads[in]);
    }
    n.backward(*grads[id], slots);
    // Interior gradients are no longer needed once propagated.
    if (n.kind != OpKind::leaf) grads[id].reset();
  }

  GradientMap out;
  for (std::size_t id = 0; id <= loss.id_; ++id) {
    const Node& n = node(id);
    if (n.kind == OpKind::leaf && n.requires_grad && grads[id]) {
      out.grads_.emplace(id, std::move(*grads[id]));
    }
  }
  return out;
}

// ---- kernels ------------------------------------------------------------------

namespace {

// C[n,m] += A[n,k] * B[k,m]
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c + i * m;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[n,k] += A[n,m] * B[k,m]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t m,
             std::size_t k) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a + i * m;
    double* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * m;
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += arow[j] * brow[j];
      crow[p] += s;
    }
  }
}

// C[k,m] += A[n,k]^T * B[n,m]
void gemm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

Tape* tape_of(const Var& a) {
  if (!a.valid()) throw ContractError("operation on an unbound variable");
  return a.tape();
}

Var finish(OpKind kind, const char* name, Tensor out, std::vector<Var> inputs,
           Tape::BackwardFn fn) {
  out.check_finite(name);
  Tape* tape = tape_of(inputs.front());
  return tape->record(kind, std::move(out), std::move(inputs), std::move(fn));
}

enum class Broadcast { same, row };

Broadcast broadcast_rule(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return Broadcast::same;
  if (b.size() == 1 && b[0] == a.back()) return Broadcast::row;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                       shape_string(b));
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---- operations ----------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  std::size_t batch = 1, n, k, m;
  Shape out_shape;
  if (sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0]) {
    n = sa[0], k = sa[1], m = sb[1];
    out_shape = {n, m};
  } else if (sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] && sa[2] == sb[1]) {
    batch = sa[0], n = sa[1], k = sa[2], m = sb[2];
    out_shape = {batch, n, m};
  } else {
    throw DimensionError("matmul: incompatible shapes " + shape_string(sa) + " and " +
                         shape_string(sb));
  }
  Tensor out(out_shape, 0.0);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  for (std::size_t s = 0; s < batch; ++s) {
    gemm_nn(av.data() + s * n * k, bv.data() + s * k * m, out.data() + s * n * m, n, k, m);
  }
  return finish(OpKind::matmul, "matmul", std::move(out), {a, b},
                [a, b, batch, n, k, m](const Tensor& g, std::span<Tensor* const> gi) {
                  const Tensor& av = a.value();
                  const Tensor& bv = b.value();
                  for (std::size_t s = 0; s < batch; ++s) {
                    const double* gs = g.data() + s * n * m;
                    if (gi[0]) {
                      gemm_nt(gs, bv.data() + s * k * m, gi[0]->data() + s * n * k, n, m, k);
                    }
                    if (gi[1]) {
                      gemm_tn(av.data() + s * n * k, gs, gi[1]->data() + s * k * m, n, k, m);
                    }
                  }
                });
}

Var add(const Var& a, const Var& b) {
  const Broadcast rule = broadcast_rule("add", a.shape(), b.shape());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  const std::size_t width = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] += rule == Broadcast::same ? bv[i] : bv[i % width];
  }
  return finish(OpKind::add, "add", std::move(out), {a, b},
                [rule, width](const Tensor& g, std::span<Tensor* const> gi) {
                  if (gi[0]) {
                    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                  }
                  if (gi[1]) {
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      (*gi[1])[rule == Broadcast::same ? i : i % width] += g[i];
                    }
                  }
                });
}

Var elementwise_mul(const Var& a, const Var& b) {
  const Broadcast rule = broadcast_rule("elementwise_mul", a.shape(), b.shape());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  const std::size_t width = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] *= rule == Broadcast::same ? bv[i] : bv[i % width];
  }
  return finish(OpKind::elementwise_mul, "elementwise_mul", std::move(out), {a, b},
                [a, b, rule, width](const Tensor& g, std::span<Tensor* const> gi) {
                  const Tensor& av = a.value();
                  const Tensor& bv = b.value();
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    const std::size_t j = rule == Broadcast::same ? i : i % width;
                    if (gi[0]) (*gi[0])[i] += g[i] * bv[j];
                    if (gi[1]) (*gi[1])[j] += g[i] * av[i];
                  }
                });
}

Var scale(const Var& a, double factor) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= factor;
  return finish(OpKind::scale, "scale", std::move(out), {a},
                [factor](const Tensor& g, std::span<Tensor* const> gi) {
                  for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * factor;
                });
}

Var silu_activation(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = v * sigmoid(v);
  return finish(OpKind::silu_activation, "silu_activation", std::move(out), {a},
                [a](const Tensor& g, std::span<Tensor* const> gi) {
                  const Tensor& x = a.value();
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    const double s = sigmoid(x[i]);
                    (*gi[0])[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
                  }
                });
}

Var softmax_lastdim(const Var& a) {
  const Tensor& x = a.value();
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.size() / width;
  Tensor out(x.shape(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * width;
    double* yr = out.data() + r * width;
    const double mx = *std::max_element(xr, xr + width);
    double sum = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    for (std::size_t j = 0; j < width; ++j) yr[j] /= sum;
  }
  Tensor y = out;
  return finish(OpKind::softmax_lastdim, "softmax_lastdim", std::move(out), {a},
                [y = std::move(y), rows, width](const Tensor& g, std::span<Tensor* const> gi) {
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* yr = y.data() + r * width;
                    const double* gr = g.data() + r * width;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < width; ++j) dot += gr[j] * yr[j];
                    double* o = gi[0]->data() + r * width;
                    for (std::size_t j = 0; j < width; ++j) o[j] += yr[j] * (gr[j] - dot);
                  }
                });
}

Var rms_normalize(const Var& a, double eps) {
  const Tensor& x = a.value();
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.size() / width;
  Tensor out(x.shape(), 0.0);
  std::vector<double> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * width;
    double ss = 0.0;
    for (std::size_t j = 0; j < width; ++j) ss += xr[j] * xr[j];
    inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(width) + eps);
    for (std::size_t j = 0; j < width; ++j) out.data()[r * width + j] = xr[j] * inv[r];
  }
  Tensor y = out;
  return finish(OpKind::rms_normalize, "rms_normalize", std::move(out), {a},
                [y = std::move(y), inv = std::move(inv), rows, width](
                    const Tensor& g, std::span<Tensor* const> gi) {
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* yr = y.data() + r * width;
                    const double* gr = g.data() + r * width;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < width; ++j) dot += gr[j] * yr[j];
                    dot /= static_cast<double>(width);
                    double* o = gi[0]->data() + r * width;
                    for (std::size_t j = 0; j < width; ++j) o[j] += (gr[j] - yr[j] * dot) * inv[r];
                  }
                });
}

Var embedding_lookup(const Var& table, std::span<const int> ids) {
  const Tensor& t = table.value();
  if (t.rank() != 2) throw DimensionError("embedding_lookup: table must be 2-D");
  if (ids.empty()) throw DimensionError("embedding_lookup: no ids");
  const std::size_t vocab = t.dim(0), width = t.dim(1);
  Tensor out({ids.size(), width}, 0.0);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DataError("token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                      std::to_string(vocab));
    }
    std::copy_n(t.data() + ids[i] * width, width, out.data() + i * width);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return finish(OpKind::embedding_lookup, "embedding_lookup", std::move(out), {table},
                [idx = std::move(idx), width](const Tensor& g, std::span<Tensor* const> gi) {
                  for (std::size_t i = 0; i < idx.size(); ++i) {
                    double* row = gi[0]->data() + idx[i] * width;
                    for (std::size_t j = 0; j < width; ++j) row[j] += g.data()[i * width + j];
                  }
                });
}

Var cross_entropy_mean(const Var& logits, std::span<const int> targets) {
  const Tensor& x = logits.value();
  if (x.rank() != 2 || x.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy_mean: logits " + shape_string(x.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t rows = x.dim(0), width = x.dim(1);
  std::vector<double> probs(x.size(), 0.0);
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t == -1) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= width) {
      throw DataError("target id " + std::to_string(t) + " outside vocabulary of size " +
                      std::to_string(width));
    }
    const double* xr = x.data() + r * width;
    const double mx = *std::max_element(xr, xr + width);
    double sum = 0.0;
    for (std::size_t j = 0; j < width; ++j) sum += std::exp(xr[j] - mx);
    const double lse = mx + std::log(sum);
    total += lse - xr[t];
    for (std::size_t j = 0; j < width; ++j) probs[r * width + j] = std::exp(xr[j] - lse);
    ++counted;
  }
  if (counted == 0) throw ContractError("cross_entropy_mean: every target is ignored");
  const double inv = 1.0 / static_cast<double>(counted);
  std::vector<int> tg(targets.begin(), targets.end());
  return finish(OpKind::cross_entropy_mean, "cross_entropy_mean", Tensor::scalar(total * inv),
                {logits},
                [probs = std::move(probs), tg = std::move(tg), rows, width, inv](
                    const Tensor& g, std::span<Tensor* const> gi) {
                  const double s = g[0] * inv;
                  for (std::size_t r = 0; r < rows; ++r) {
                    if (tg[r] == -1) continue;
                    double* o = gi[0]->data() + r * width;
                    for (std::size_t j = 0; j < width; ++j) o[j] += s * probs[r * width + j];
                    o[tg[r]] -= s;
                  }
                });
}

namespace {

// Index maps between [b*t, h*dh] and [b*h, t, dh].
template <typename F>
void for_each_head_index(std::size_t batch, std::size_t seq, std::size_t heads, std::size_t dh,
                         F&& f) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < seq; ++t)
        for (std::size_t d = 0; d < dh; ++d) {
          const std::size_t flat = (b * seq + t) * heads * dh + h * dh + d;
          const std::size_t split = ((b * heads + h) * seq + t) * dh + d;
          f(flat, split);
        }
}

}  // namespace

Var split_heads(const Var& x, std::size_t batch, std::size_t seq, std::size_t heads) {
  const Shape& s = x.shape();
  if (s.size() != 2 || s[0] != batch * seq || heads == 0 || s[1] % heads != 0) {
    throw DimensionError("split_heads: bad shape " + shape_string(s));
  }
  const std::size_t dh = s[1] / heads;
  Tensor out({batch * heads, seq, dh}, 0.0);
  const Tensor& xv = x.value();
  for_each_head_index(batch, seq, heads, dh,
                      [&](std::size_t flat, std::size_t split) { out[split] = xv[flat]; });
  return finish(OpKind::split_heads, "split_heads", std::move(out), {x},
                [=](const Tensor& g, std::span<Tensor* const> gi) {
                  for_each_head_index(batch, seq, heads, dh, [&](std::size_t f, std::size_t sp) {
                    (*gi[0])[f] += g[sp];
                  });
                });
}

Var merge_heads(const Var& x, std::size_t batch, std::size_t seq, std::size_t heads) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[0] != batch * heads || s[1] != seq) {
    throw DimensionError("merge_heads: bad shape " + shape_string(s));
  }
  const std::size_t dh = s[2];
  Tensor out({batch * seq, heads * dh}, 0.0);
  const Tensor& xv = x.value();
  for_each_head_index(batch, seq, heads, dh,
                      [&](std::size_t flat, std::size_t split) { out[flat] = xv[split]; });
  return finish(OpKind::merge_heads, "merge_heads", std::move(out), {x},
                [=](const Tensor& g, std::span<Tensor* const> gi) {
                  for_each_head_index(batch, seq, heads, dh, [&](std::size_t f, std::size_t sp) {
                    (*gi[0])[sp] += g[f];
                  });
                });
}

Var transpose_last2(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw DimensionError("transpose_last2: expects 3-D, got " + shape_string(s));
  const std::size_t b = s[0], n = s[1], m = s[2];
  Tensor out({b, m, n}, 0.0);
  const Tensor& xv = x.value();
  for (std::size_t k = 0; k < b; ++k)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) out[(k * m + j) * n + i] = xv[(k * n + i) * m + j];
  return finish(OpKind::transpose_last2, "transpose_last2", std::move(out), {x},
                [=](const Tensor& g, std::span<Tensor* const> gi) {
                  for (std::size_t k = 0; k < b; ++k)
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < m; ++j)
                        (*gi[0])[(k * n + i) * m + j] += g[(k * m + j) * n + i];
                });
}

Var causal_mask(const Var& scores) {
  const Shape& s = scores.shape();
  if (s.size() != 3 || s[1] != s[2]) {
    throw DimensionError("causal_mask: expects [b,t,t], got " + shape_string(s));
  }
  const std::size_t b = s[0], t = s[1];
  Tensor out = scores.value();
  for (std::size_t k = 0; k < b; ++k)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = i + 1; j < t; ++j) out[(k * t + i) * t + j] = kMaskedLogit;
  return finish(OpKind::causal_mask, "causal_mask", std::move(out), {scores},
                [=](const Tensor& g, std::span<Tensor* const> gi) {
                  for (std::size_t k = 0; k < b; ++k)
                    for (std::size_t i = 0; i < t; ++i)
                      for (std::size_t j = 0; j <= i; ++j)
                        (*gi[0])[(k * t + i) * t + j] += g[(k * t + i) * t + j];
                });
}

// ---- finite differences -----------------------------------------------------------

std::vector<Tensor> finite_difference_gradient(
    const std::function<double(const std::vector<Tensor>&)>& f, std::vector<Tensor>& params,
    double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_difference_gradient: eps must be positive");
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (auto& p : params) {
    Tensor g(p.shape(), 0.0);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p[i];
      p[i] = orig + eps;
      const double up = f(params);
      p[i] = orig - eps;
      const double down = f(params);
      p[i] = orig;
      g[i] = (up - down) / (2.0 * eps);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace shaplora
