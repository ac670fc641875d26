#include "shaplora/types.hpp"

#include <charconv>

#include "shaplora/errors.hpp"

namespace shaplora {

std::string_view kind_name(ModuleKind kind) {
  static constexpr std::array<std::string_view, kNumModuleKinds> names = {"Q", "K", "V", "O",
                                                                         "G", "U", "D"};
  return names.at(static_cast<int>(kind));
}

ModuleKind parse_kind(std::string_view name) {
  for (auto k : kAllModuleKinds) {
    if (kind_name(k) == name) return k;
  }
  throw KeyError("unknown module kind '" + std::string(name) + "'");
}

std::string ModuleId::str() const {
  return std::to_string(layer) + "." + std::string(kind_name(kind));
}

namespace {

int parse_int(std::string_view text, std::string_view what) {
  int v = 0;
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size()) {
    throw ParseError("invalid integer '" + std::string(text) + "' in " + std::string(what));
  }
  return v;
}

}  // namespace

ModuleId parse_module_id(std::string_view text) {
  auto dot = text.find('.');
  if (dot == std::string_view::npos) throw ParseError("bad module id '" + std::string(text) + "'");
  ModuleId id;
  id.layer = parse_int(text.substr(0, dot), text);
  try {
    id.kind = parse_kind(text.substr(dot + 1));
  } catch (const KeyError& e) {
    throw ParseError(e.what());
  }
  return id;
}

std::string RankId::str() const { return module.str() + "." + std::to_string(index); }

RankId parse_rank_id(std::string_view text) {
  auto dot = text.rfind('.');
  if (dot == std::string_view::npos) throw ParseError("bad rank id '" + std::string(text) + "'");
  return RankId{parse_module_id(text.substr(0, dot)), parse_int(text.substr(dot + 1), text)};
}

std::string_view method_name(ScoringMethod m) {
  switch (m) {
    case ScoringMethod::shapley_sensitivity: return "shapley_sensitivity";
    case ScoringMethod::plain_sensitivity: return "plain_sensitivity";
    case ScoringMethod::magnitude: return "magnitude";
  }
  return "?";
}

ScoringMethod parse_method(std::string_view name) {
  for (auto m : {ScoringMethod::shapley_sensitivity, ScoringMethod::plain_sensitivity,
                 ScoringMethod::magnitude}) {
    if (method_name(m) == name) return m;
  }
  throw KeyError("unknown scoring method '" + std::string(name) + "'");
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "validation" || name == "dev") return Split::validation;
  if (name == "test") return Split::test;
  throw KeyError("unknown split '" + std::string(name) + "'");
}

std::vector<double> ImportanceReport::values() const {
  std::vector<double> out;
  out.reserve(scores.size());
  for (const auto& [id, s] : scores) out.push_back(s);
  return out;
}

int AllocationConfig::total_kept() const {
  int total = 0;
  for (const auto& [id, n] : kept) total += n;
  return total;
}

int AllocationConfig::count(ModuleId id) const {
  auto it = kept.find(id);
  return it == kept.end() ? 0 : it->second;
}

}  // namespace shaplora
