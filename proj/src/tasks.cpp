#include "shaplora/tasks.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <string>

#include "shaplora/errors.hpp"
#include "shaplora/random.hpp"

namespace shaplora {

std::string_view task_name(TaskKind kind) { return kind == TaskKind::copy ? "copy" : "planted"; }

TaskKind parse_task(std::string_view name) {
  if (name == "copy") return TaskKind::copy;
  if (name == "planted") return TaskKind::planted;
  throw KeyError("unknown task kind '" + std::string(name) + "'");
}

const std::vector<Sequence>& Dataset::split(Split s) const {
  switch (s) {
    case Split::train: return train;
    case Split::validation: return dev;
    case Split::test: return test;
  }
  throw KeyError("unknown split");
}

const std::vector<Sequence>& Dataset::split(std::string_view name) const {
  return split(parse_split(name));
}

namespace {

void check_sizes(int n_train, int n_dev, int n_test) {
  if (n_train < 1 || n_dev < 1 || n_test < 1) {
    throw ConfigError("every split needs at least one sequence");
  }
}

// Draws `total` distinct token rows using `draw`; rejects duplicates.
template <typename Draw>
std::vector<std::vector<int>> distinct_rows(int total, Draw&& draw) {
  std::set<std::vector<int>> seen;
  std::vector<std::vector<int>> rows;
  rows.reserve(static_cast<std::size_t>(total));
  int attempts = 0;
  while (static_cast<int>(rows.size()) < total) {
    if (++attempts > 20 * total + 1000) {
      throw ConfigError("cannot draw enough distinct sequences for the requested split sizes");
    }
    auto row = draw();
    if (seen.insert(row).second) rows.push_back(std::move(row));
  }
  return rows;
}

void distribute(std::vector<Sequence> all, int n_train, int n_dev, Dataset& out) {
  auto it = std::make_move_iterator(all.begin());
  out.train.assign(it, it + n_train);
  out.dev.assign(it + n_train, it + n_train + n_dev);
  out.test.assign(it + n_train + n_dev, std::make_move_iterator(all.end()));
}

}  // namespace

Dataset gen_copy_task(int n_train, int n_dev, int n_test, int seq_len, int vocab,
                      std::uint64_t seed) {
  check_sizes(n_train, n_dev, n_test);
  if (seq_len < 2 || seq_len % 2 != 0) throw ConfigError("copy task needs an even seq_len >= 2");
  if (vocab < 4) throw ConfigError("copy task needs vocab >= 4");
  const int h = seq_len / 2;
  Rng rng(seed);
  std::uniform_int_distribution<int> tok(1, vocab - 1);
  auto prefixes = distinct_rows(n_train + n_dev + n_test, [&] {
    std::vector<int> p(static_cast<std::size_t>(h));
    for (auto& t : p) t = tok(rng);
    return p;
  });

  std::vector<Sequence> all;
  for (const auto& p : prefixes) {
    std::vector<int> full(p);
    full.push_back(0);
    full.insert(full.end(), p.begin(), p.end());
    Sequence s;
    s.tokens.assign(full.begin(), full.begin() + seq_len);
    s.targets.assign(full.begin() + 1, full.end());
    for (int t = 0; t < h - 1; ++t) s.targets[static_cast<std::size_t>(t)] = -1;
    all.push_back(std::move(s));
  }
  Dataset d;
  d.vocab_size = vocab;
  d.seq_len = seq_len;
  d.kind = TaskKind::copy;
  d.seed = seed;
  distribute(std::move(all), n_train, n_dev, d);
  return d;
}

Model planted_teacher(const PlantedTaskSpec& spec) {
  if (spec.planted_kinds.empty()) throw ConfigError("planted task needs at least one module kind");
  if (spec.perturb_scale < 0.0) throw ConfigError("perturb_scale must be non-negative");
  Model teacher = Model::build(spec.model, spec.base_model_seed);
  Rng rng(derive_seed(spec.seed, 0x7eac4e7));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (int l = 0; l < spec.model.n_layers; ++l) {
    for (auto kind : spec.planted_kinds) {
      Tensor& w = teacher.mutable_weight(ModuleId{l, kind});
      for (auto& v : w.values()) v += spec.perturb_scale * dist(rng);
    }
  }
  return teacher;
}

Dataset gen_planted_task(const PlantedTaskSpec& spec) {
  check_sizes(spec.sizes.n_train, spec.sizes.n_dev, spec.sizes.n_test);
  if (spec.seq_len < 1 || spec.seq_len > spec.model.max_seq_len) {
    throw ConfigError("planted task seq_len must lie in [1, model.max_seq_len]");
  }
  const Model teacher = planted_teacher(spec);
  const Model student = Model::build(spec.model, spec.base_model_seed);
  const int total = spec.sizes.n_train + spec.sizes.n_dev + spec.sizes.n_test;
  const auto T = static_cast<std::size_t>(spec.seq_len);

  Rng rng(spec.seed);
  std::uniform_int_distribution<int> tok(0, spec.model.vocab_size - 1);
  auto inputs = distinct_rows(total, [&] {
    std::vector<int> row(T);
    for (auto& t : row) t = tok(rng);
    return row;
  });

  auto greedy = [&](const Model& model, const std::vector<std::vector<int>>& rows,
                    std::size_t begin, std::size_t count) {
    Batch b{count, T, {}, {}};
    for (std::size_t i = begin; i < begin + count; ++i)
      b.tokens.insert(b.tokens.end(), rows[i].begin(), rows[i].end());
    const Tensor logits = forward_logits(model, b);
    const std::size_t V = logits.dim(1);
    std::vector<int> out(count * T);
    for (std::size_t r = 0; r < count * T; ++r) {
      const double* row = logits.data() + r * V;
      out[r] = static_cast<int>(std::max_element(row, row + V) - row);
    }
    return out;
  };

  std::vector<Sequence> all;
  std::size_t disagreements = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t begin = 0; begin < inputs.size(); begin += kChunk) {
    const std::size_t count = std::min(kChunk, inputs.size() - begin);
    const auto labels = greedy(teacher, inputs, begin, count);
    const auto own = greedy(student, inputs, begin, count);
    for (std::size_t i = 0; i < labels.size(); ++i) disagreements += labels[i] != own[i];
    for (std::size_t n = 0; n < count; ++n) {
      Sequence s;
      s.tokens = inputs[begin + n];
      s.targets.assign(labels.begin() + static_cast<std::ptrdiff_t>(n * T),
                       labels.begin() + static_cast<std::ptrdiff_t>((n + 1) * T));
      all.push_back(std::move(s));
    }
  }
  if (spec.perturb_scale > 0.0 && disagreements == 0) {
    throw DataError("planted teacher agrees with the student on every input; the plant is inert");
  }

  Dataset d;
  d.vocab_size = spec.model.vocab_size;
  d.seq_len = spec.seq_len;
  d.kind = TaskKind::planted;
  d.seed = spec.seed;
  d.planted_modules = spec.planted_kinds;
  distribute(std::move(all), spec.sizes.n_train, spec.sizes.n_dev, d);
  return d;
}

std::vector<Batch> ordered_batches(const std::vector<Sequence>& seqs, int batch_size) {
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<Batch> out;
  for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(batch_size));
    Batch b;
    b.batch_size = end - begin;
    b.seq_len = seqs[order[begin]].tokens.size();
    for (std::size_t i = begin; i < end; ++i) {
      const Sequence& s = seqs[order[i]];
      if (s.tokens.size() != b.seq_len) throw DimensionError("ragged sequences in one batch");
      b.tokens.insert(b.tokens.end(), s.tokens.begin(), s.tokens.end());
      b.targets.insert(b.targets.end(), s.targets.begin(), s.targets.end());
    }
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<Batch> batches(const std::vector<Sequence>& seqs, int batch_size, std::uint64_t seed) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Sequence> shuffled;
  shuffled.reserve(seqs.size());
  for (auto i : order) shuffled.push_back(seqs[i]);
  return ordered_batches(shuffled, batch_size);
}

std::vector<Batch> batches(const Dataset& data, Split split, int batch_size, std::uint64_t seed) {
  return batches(data.split(split), batch_size, seed);
}

}  // namespace shaplora
