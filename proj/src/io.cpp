#include "shaplora/io.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "shaplora/errors.hpp"

namespace shaplora {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- files ----------------------------------------------------------------------------

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw KeyError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file_atomic(const fs::path& path, std::string_view content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw Error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(std::string_view text, std::string_view what) {
  std::string s(text);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw ParseError("invalid number '" + s + "' in " + std::string(what));
  }
  return v;
}

long long parse_integer(std::string_view text, std::string_view what) {
  std::string s(text);
  char* end = nullptr;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw ParseError("invalid integer '" + s + "' in " + std::string(what));
  }
  return v;
}

std::uint64_t parse_u64(std::string_view text, std::string_view what) {
  std::string s(text);
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw ParseError("invalid integer '" + s + "' in " + std::string(what));
  }
  return v;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_ws(std::string_view line) {
  std::vector<std::string> out;
  std::istringstream is{std::string(line)};
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::vector<std::string> lines_of(std::string_view text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string line(text.substr(pos, nl - pos));
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(std::move(line));
    pos = nl + 1;
  }
  return out;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

// ---- config --------------------------------------------------------------------------------

namespace {

json train_to_json(const TrainConfig& t) {
  return json{{"learning_rate", t.learning_rate}, {"batch_size", t.batch_size},
              {"max_epochs", t.max_epochs},       {"eval_every_steps", t.eval_every_steps},
              {"patience", t.patience},           {"warmup_fraction", t.warmup_fraction},
              {"weight_decay", t.weight_decay},   {"beta1", t.beta1},
              {"beta2", t.beta2},                 {"adam_eps", t.adam_eps},
              {"seed", t.seed}};
}

// Reads the keys of `j` into the fields registered with `field`, rejecting
// any key not registered.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError(name("") + " must be an object");
  }

  template <typename T>
  void field(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(name(key) + " has the wrong type");
    }
  }

  const json* object(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void reject_unknown() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + name(it.key()) + "'");
    }
  }

  std::string name(const std::string& key) const {
    if (prefix_.empty()) return key;
    return key.empty() ? prefix_ : prefix_ + "." + key;
  }

 private:
  const json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

TrainConfig train_from_json(const json& j, const std::string& prefix) {
  TrainConfig t;
  ObjectReader r(j, prefix);
  r.field("learning_rate", t.learning_rate);
  r.field("batch_size", t.batch_size);
  r.field("max_epochs", t.max_epochs);
  r.field("eval_every_steps", t.eval_every_steps);
  r.field("patience", t.patience);
  r.field("warmup_fraction", t.warmup_fraction);
  r.field("weight_decay", t.weight_decay);
  r.field("beta1", t.beta1);
  r.field("beta2", t.beta2);
  r.field("adam_eps", t.adam_eps);
  r.field("seed", t.seed);
  r.reject_unknown();
  return t;
}

template <typename Parse>
auto enum_field(ObjectReader& r, const char* key, Parse parse, decltype(parse("")) fallback) {
  std::string s;
  r.field(key, s);
  if (s.empty()) return fallback;
  try {
    return parse(s);
  } catch (const KeyError& e) {
    throw ConfigError(r.name(key) + ": " + e.what());
  }
}

}  // namespace

std::string config_text(const PipelineConfig& c) {
  json planted = json::array();
  for (auto k : c.task.planted_kinds) planted.push_back(std::string(kind_name(k)));
  json j{
      {"model",
       {{"n_layers", c.model.n_layers},
        {"d_model", c.model.d_model},
        {"d_ffn", c.model.d_ffn},
        {"n_heads", c.model.n_heads},
        {"vocab_size", c.model.vocab_size},
        {"max_seq_len", c.model.max_seq_len}}},
      {"task",
       {{"kind", std::string(task_name(c.task.kind))},
        {"n_train", c.task.sizes.n_train},
        {"n_dev", c.task.sizes.n_dev},
        {"n_test", c.task.sizes.n_test},
        {"seq_len", c.task.seq_len},
        {"planted_kinds", planted},
        {"perturb_scale", c.task.perturb_scale}}},
      {"r_init", c.r_init},
      {"reference_r_init", kReferenceRInit},
      {"r_target", c.r_target},
      {"scoring_method", std::string(method_name(c.scoring_method))},
      {"scoring_split", std::string(split_name(c.scoring_split))},
      {"mask_rates", c.mask_rates},
      {"mask_repeats", c.mask_repeats},
      {"validation_batches", c.validation_batches},
      {"conditional_average", c.conditional_average},
      {"schedule",
       {{"kind", c.schedule.kind == ScheduleKind::gradual ? "gradual" : "one_shot"},
        {"k_per_event", c.schedule.k_per_event},
        {"every_m_steps", c.schedule.every_m_steps}}},
      {"stage1", train_to_json(c.stage1)},
      {"stage2", train_to_json(c.stage2)},
      {"seeds",
       {{"model", c.seeds.model},
        {"data", c.seeds.data},
        {"lora_stage1", c.seeds.lora_stage1},
        {"lora_stage2", c.seeds.lora_stage2},
        {"plan", c.seeds.plan}}},
  };
  return j.dump(2) + "\n";
}

PipelineConfig parse_config(std::string_view text) {
  json j;
  if (trim(text).empty()) {
    j = json::object();
  } else {
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("config parse error: ") + e.what());
    }
  }
  PipelineConfig c;
  ObjectReader r(j, "");
  if (const json* m = r.object("model")) {
    ObjectReader mr(*m, "model");
    mr.field("n_layers", c.model.n_layers);
    mr.field("d_model", c.model.d_model);
    mr.field("d_ffn", c.model.d_ffn);
    mr.field("n_heads", c.model.n_heads);
    mr.field("vocab_size", c.model.vocab_size);
    mr.field("max_seq_len", c.model.max_seq_len);
    mr.reject_unknown();
  }
  if (const json* t = r.object("task")) {
    ObjectReader tr(*t, "task");
    c.task.kind = enum_field(tr, "kind", parse_task, c.task.kind);
    tr.field("n_train", c.task.sizes.n_train);
    tr.field("n_dev", c.task.sizes.n_dev);
    tr.field("n_test", c.task.sizes.n_test);
    tr.field("seq_len", c.task.seq_len);
    std::vector<std::string> kinds;
    tr.field("planted_kinds", kinds);
    if (t->contains("planted_kinds")) {
      c.task.planted_kinds.clear();
      for (const auto& k : kinds) {
        try {
          c.task.planted_kinds.push_back(parse_kind(k));
        } catch (const KeyError& e) {
          throw ConfigError(std::string("task.planted_kinds: ") + e.what());
        }
      }
    }
    tr.field("perturb_scale", c.task.perturb_scale);
    tr.reject_unknown();
  }
  r.field("r_init", c.r_init);
  int reference = kReferenceRInit;
  r.field("reference_r_init", reference);
  r.field("r_target", c.r_target);
  c.scoring_method = enum_field(r, "scoring_method", parse_method, c.scoring_method);
  c.scoring_split = enum_field(r, "scoring_split", parse_split, c.scoring_split);
  r.field("mask_rates", c.mask_rates);
  r.field("mask_repeats", c.mask_repeats);
  r.field("validation_batches", c.validation_batches);
  r.field("conditional_average", c.conditional_average);
  if (const json* s = r.object("schedule")) {
    ObjectReader sr(*s, "schedule");
    std::string kind;
    sr.field("kind", kind);
    if (kind == "gradual") {
      c.schedule.kind = ScheduleKind::gradual;
    } else if (kind.empty() || kind == "one_shot") {
      c.schedule.kind = ScheduleKind::one_shot;
    } else {
      throw ConfigError("schedule.kind must be one_shot or gradual");
    }
    sr.field("k_per_event", c.schedule.k_per_event);
    sr.field("every_m_steps", c.schedule.every_m_steps);
    sr.reject_unknown();
  }
  if (const json* s = r.object("stage1")) c.stage1 = train_from_json(*s, "stage1");
  if (const json* s = r.object("stage2")) c.stage2 = train_from_json(*s, "stage2");
  if (const json* s = r.object("seeds")) {
    ObjectReader sr(*s, "seeds");
    sr.field("model", c.seeds.model);
    sr.field("data", c.seeds.data);
    sr.field("lora_stage1", c.seeds.lora_stage1);
    sr.field("lora_stage2", c.seeds.lora_stage2);
    sr.field("plan", c.seeds.plan);
    sr.reject_unknown();
  }
  r.reject_unknown();
  c.validate();
  return c;
}

PipelineConfig load_config(const fs::path& path) { return parse_config(read_file(path)); }

void save_config(const PipelineConfig& cfg, const fs::path& path) {
  write_file_atomic(path, config_text(cfg));
}

// ---- checkpoint -------------------------------------------------------------------------

namespace {

constexpr std::string_view kCheckpointMagic = "shaplora-checkpoint 1";

std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

Shape parse_shape_token(const std::string& tok) {
  Shape s;
  std::size_t pos = 0;
  while (pos <= tok.size()) {
    auto x = tok.find('x', pos);
    if (x == std::string::npos) x = tok.size();
    const long long d = parse_integer(std::string_view(tok).substr(pos, x - pos), "shape");
    if (d <= 0) throw IntegrityError("non-positive dimension in checkpoint shape " + tok);
    s.push_back(static_cast<std::size_t>(d));
    pos = x + 1;
  }
  return s;
}

struct NamedTensor {
  std::string name;
  Tensor value;
};

std::vector<NamedTensor> model_tensors(const Model& model) {
  std::vector<NamedTensor> out;
  out.push_back({"embedding", model.embedding()});
  for (const auto& id : model.module_ids()) out.push_back({"weight." + id.str(), model.weight(id)});
  out.push_back({"head", model.head()});
  for (const auto& id : model.module_ids()) {
    const LoraModule* mod = model.lora(id);
    if (!mod) continue;
    Tensor active({mod->active.size()}, 0.0);
    for (std::size_t i = 0; i < mod->active.size(); ++i) active[i] = mod->active[i] ? 1.0 : 0.0;
    out.push_back({"lora." + id.str() + ".P", mod->P});
    out.push_back({"lora." + id.str() + ".lambda", mod->lambda});
    out.push_back({"lora." + id.str() + ".Q", mod->Q});
    out.push_back({"lora." + id.str() + ".active", active});
    if (!mod->labels.empty()) {
      Tensor labels({mod->labels.size()}, 0.0);
      for (std::size_t i = 0; i < mod->labels.size(); ++i) labels[i] = mod->labels[i];
      out.push_back({"lora." + id.str() + ".labels", labels});
    }
  }
  return out;
}

}  // namespace

std::string checkpoint_text(const Model& model) {
  const ModelConfig& c = model.config();
  std::ostringstream os;
  os << kCheckpointMagic << '\n';
  os << "config n_layers=" << c.n_layers << " d_model=" << c.d_model << " d_ffn=" << c.d_ffn
     << " n_heads=" << c.n_heads << " vocab_size=" << c.vocab_size
     << " max_seq_len=" << c.max_seq_len << '\n';
  os << "lora attached=" << (model.lora_attached() ? 1 : 0) << " r_init=" << model.r_init()
     << '\n';
  const auto tensors = model_tensors(model);
  os << "manifest " << tensors.size() << '\n';
  for (const auto& t : tensors) os << t.name << ' ' << shape_token(t.value.shape()) << '\n';
  for (const auto& t : tensors) {
    os << "tensor " << t.name << '\n';
    const std::size_t width = t.value.shape().back();
    for (std::size_t i = 0; i < t.value.size(); ++i) {
      os << fmt17(t.value[i]) << ((i + 1) % width == 0 ? '\n' : ' ');
    }
  }
  std::string body = os.str();
  char sum[32];
  std::snprintf(sum, sizeof sum, "%016" PRIx64, fnv1a(body));
  return body + "checksum " + sum + "\n";
}

Model parse_checkpoint(std::string_view text, const ModelConfig* expected) {
  const auto pos = text.rfind("checksum ");
  if (pos == std::string_view::npos) throw IntegrityError("checkpoint has no checksum line");
  const std::string_view body = text.substr(0, pos);
  char sum[32];
  std::snprintf(sum, sizeof sum, "%016" PRIx64, fnv1a(body));
  if (trim(text.substr(pos + 9)) != sum) throw IntegrityError("checkpoint checksum mismatch");

  const auto lines = lines_of(body);
  std::size_t ln = 0;
  auto next = [&]() -> const std::string& {
    if (ln >= lines.size()) throw IntegrityError("checkpoint truncated");
    return lines[ln++];
  };
  if (next() != kCheckpointMagic) throw IntegrityError("not a shaplora checkpoint");

  auto key_values = [&](const std::string& line, std::string_view tag) {
    auto toks = split_ws(line);
    if (toks.empty() || toks[0] != tag) {
      throw IntegrityError("expected '" + std::string(tag) + "' line in checkpoint");
    }
    std::map<std::string, long long> kv;
    for (std::size_t i = 1; i < toks.size(); ++i) {
      const auto eq = toks[i].find('=');
      if (eq == std::string::npos) throw IntegrityError("malformed '" + toks[i] + "'");
      kv[toks[i].substr(0, eq)] = parse_integer(std::string_view(toks[i]).substr(eq + 1), tag);
    }
    return kv;
  };

  auto cfg_kv = key_values(next(), "config");
  ModelConfig cfg;
  try {
    cfg.n_layers = static_cast<int>(cfg_kv.at("n_layers"));
    cfg.d_model = static_cast<int>(cfg_kv.at("d_model"));
    cfg.d_ffn = static_cast<int>(cfg_kv.at("d_ffn"));
    cfg.n_heads = static_cast<int>(cfg_kv.at("n_heads"));
    cfg.vocab_size = static_cast<int>(cfg_kv.at("vocab_size"));
    cfg.max_seq_len = static_cast<int>(cfg_kv.at("max_seq_len"));
  } catch (const std::out_of_range&) {
    throw IntegrityError("checkpoint config line is incomplete");
  }
  if (expected && !(*expected == cfg)) {
    throw ConfigError("checkpoint model config does not match the expected config");
  }
  auto lora_kv = key_values(next(), "lora");
  const bool attached = lora_kv["attached"] != 0;
  const int r_init = static_cast<int>(lora_kv["r_init"]);

  auto manifest_line = split_ws(next());
  if (manifest_line.size() != 2 || manifest_line[0] != "manifest") {
    throw IntegrityError("expected manifest line");
  }
  const auto n = static_cast<std::size_t>(parse_integer(manifest_line[1], "manifest"));
  std::vector<std::pair<std::string, Shape>> manifest;
  for (std::size_t i = 0; i < n; ++i) {
    auto toks = split_ws(next());
    if (toks.size() != 2) throw IntegrityError("malformed manifest entry");
    manifest.emplace_back(toks[0], parse_shape_token(toks[1]));
  }

  std::map<std::string, Tensor> tensors;
  for (const auto& [name, shape] : manifest) {
    const auto header = split_ws(next());
    if (header.size() != 2 || header[0] != "tensor" || header[1] != name) {
      throw IntegrityError("tensor section for '" + name + "' missing or out of order");
    }
    std::vector<double> values;
    values.reserve(shape_size(shape));
    const std::size_t rows = shape_size(shape) / shape.back();
    for (std::size_t r = 0; r < rows; ++r) {
      for (const auto& tok : split_ws(next())) values.push_back(parse_double(tok, name));
    }
    if (values.size() != shape_size(shape)) {
      throw IntegrityError("tensor '" + name + "' has the wrong number of values");
    }
    tensors.emplace(name, Tensor(shape, std::move(values)));
  }
  if (ln != lines.size()) throw IntegrityError("trailing data in checkpoint");

  auto take = [&](const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IntegrityError("checkpoint lacks tensor '" + name + "'");
    Tensor t = std::move(it->second);
    tensors.erase(it);
    return t;
  };

  Model model = Model::build(cfg, 0);
  model.set_embedding(take("embedding"));
  model.set_head(take("head"));
  for (const auto& id : model.module_ids()) {
    Tensor w = take("weight." + id.str());
    if (w.shape() != model.weight(id).shape()) {
      throw IntegrityError("weight " + id.str() + " has the wrong shape");
    }
    model.mutable_weight(id) = std::move(w);
  }
  for (std::size_t m = 0; m < model.num_modules(); ++m) {
    const std::string prefix = "lora." + model.module_at(m).str();
    if (!tensors.count(prefix + ".P")) continue;
    LoraModule mod{take(prefix + ".P"), take(prefix + ".lambda"), take(prefix + ".Q"), {}, {}};
    const Tensor active = take(prefix + ".active");
    for (double a : active.values()) mod.active.push_back(a != 0.0 ? 1 : 0);
    if (tensors.count(prefix + ".labels")) {
      const Tensor labels = take(prefix + ".labels");
      for (double l : labels.values()) mod.labels.push_back(static_cast<int>(l));
    }
    try {
      model.set_lora(m, std::move(mod));
    } catch (const Error& e) {
      throw IntegrityError(std::string("bad LoRA module in checkpoint: ") + e.what());
    }
  }
  if (!tensors.empty()) throw IntegrityError("unexpected tensor '" + tensors.begin()->first + "'");
  model.set_lora_state(attached, r_init);
  return model;
}

void save_checkpoint(const Model& model, const fs::path& path) {
  write_file_atomic(path, checkpoint_text(model));
}

Model load_checkpoint(const fs::path& path, const ModelConfig* expected) {
  return parse_checkpoint(read_file(path), expected);
}

// ---- importance ---------------------------------------------------------------------------

std::string importance_csv(const ImportanceReport& report) {
  std::string out = "layer,kind,rank_index,score\n";
  for (const auto& [id, s] : report.scores) {
    out += std::to_string(id.module.layer) + "," + std::string(kind_name(id.module.kind)) + "," +
           std::to_string(id.index) + "," + fmt17(s) + "\n";
  }
  return out;
}

std::string importance_meta(const ImportanceReport& r) {
  json j{{"method", std::string(method_name(r.method))},
         {"split", std::string(split_name(r.split))},
         {"seed", r.seed},
         {"n_coalitions", r.n_coalitions},
         {"batches_used", r.batches_used}};
  return j.dump(2) + "\n";
}

ImportanceReport parse_importance(std::string_view csv, std::string_view meta) {
  ImportanceReport r;
  const auto lines = lines_of(csv);
  if (lines.empty() || lines[0] != "layer,kind,rank_index,score") {
    throw ParseError("importance CSV lacks the 'layer,kind,rank_index,score' header");
  }
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(lines[i]);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 4) throw ParseError("importance CSV line " + std::to_string(i + 1));
    RankId id{ModuleId{static_cast<int>(parse_integer(f[0], "layer")), ModuleKind::Q},
              static_cast<int>(parse_integer(f[2], "rank_index"))};
    try {
      id.module.kind = parse_kind(f[1]);
    } catch (const KeyError& e) {
      throw ParseError(e.what());
    }
    r.scores[id] = parse_double(f[3], "score");
  }
  try {
    const json j = json::parse(meta);
    r.method = parse_method(j.at("method").get<std::string>());
    r.split = parse_split(j.at("split").get<std::string>());
    r.seed = j.at("seed").get<std::uint64_t>();
    r.n_coalitions = j.at("n_coalitions").get<int>();
    r.batches_used = j.at("batches_used").get<int>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("importance metadata: ") + e.what());
  } catch (const KeyError& e) {
    throw ParseError(std::string("importance metadata: ") + e.what());
  }
  return r;
}

fs::path importance_meta_path(const fs::path& csv_path) {
  fs::path p = csv_path;
  p.replace_extension(".meta.json");
  return p;
}

void save_importance(const ImportanceReport& report, const fs::path& csv_path) {
  write_file_atomic(csv_path, importance_csv(report));
  write_file_atomic(importance_meta_path(csv_path), importance_meta(report));
}

ImportanceReport load_importance(const fs::path& csv_path) {
  return parse_importance(read_file(csv_path), read_file(importance_meta_path(csv_path)));
}

// ---- allocation ------------------------------------------------------------------------------

std::string allocation_text(const AllocationConfig& a) {
  std::string out;
  out += "# meta: r_init = " + std::to_string(a.r_init) + "\n";
  out += "# meta: r_target = " + std::to_string(a.r_target) + "\n";
  out += "# meta: method = " + (a.method.empty() ? std::string("unspecified") : a.method) + "\n";
  out += "# meta: seed = " + std::to_string(a.seed) + "\n";
  out += "# meta: kept_ranks =";
  for (const auto& id : a.kept_ranks) out += " " + id.str();
  out += "\n";
  for (const auto& [id, n] : a.kept) out += id.str() + " = " + std::to_string(n) + "\n";
  return out;
}

AllocationConfig parse_allocation(std::string_view text) {
  AllocationConfig a;
  const auto lines = lines_of(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string where = "allocation line " + std::to_string(i + 1);
    std::string line = trim(lines[i]);
    if (line.empty()) continue;
    const bool meta = line.rfind("# meta:", 0) == 0;
    if (!meta && line[0] == '#') continue;
    if (meta) line = trim(std::string_view(line).substr(7));
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(where + ": expected 'key = value'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (!meta) {
      const long long n = parse_integer(value, where);
      if (n < 0) throw ParseError(where + ": negative count");
      a.kept[parse_module_id(key)] = static_cast<int>(n);
    } else if (key == "r_init") {
      a.r_init = static_cast<int>(parse_integer(value, where));
    } else if (key == "r_target") {
      a.r_target = static_cast<int>(parse_integer(value, where));
    } else if (key == "method") {
      a.method = value == "unspecified" ? "" : value;
    } else if (key == "seed") {
      a.seed = parse_u64(value, where);
    } else if (key == "kept_ranks") {
      for (const auto& tok : split_ws(value)) a.kept_ranks.push_back(parse_rank_id(tok));
    } else {
      throw ParseError(where + ": unknown meta key '" + key + "'");
    }
  }
  return a;
}

void save_allocation(const AllocationConfig& alloc, const fs::path& path) {
  write_file_atomic(path, allocation_text(alloc));
}

AllocationConfig load_allocation(const fs::path& path) { return parse_allocation(read_file(path)); }

// ---- curves ------------------------------------------------------------------------------

std::string curves_csv(const std::vector<CurvePoint>& curve) {
  std::string out = "step,train_loss,dev_loss\n";
  for (const auto& p : curve) {
    out += std::to_string(p.step) + "," + fmt17(p.train_loss) + "," + fmt17(p.dev_loss) + "\n";
  }
  return out;
}

std::vector<CurvePoint> parse_curves(std::string_view csv) {
  const auto lines = lines_of(csv);
  if (lines.empty() || lines[0] != "step,train_loss,dev_loss") {
    throw ParseError("curves CSV lacks the 'step,train_loss,dev_loss' header");
  }
  std::vector<CurvePoint> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(lines[i]);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 3) throw ParseError("curves CSV line " + std::to_string(i + 1));
    out.push_back(CurvePoint{static_cast<int>(parse_integer(f[0], "step")),
                             parse_double(f[1], "train_loss"), parse_double(f[2], "dev_loss")});
  }
  return out;
}

// ---- dataset --------------------------------------------------------------------------------

std::string dataset_text(const Dataset& data, Split split) {
  std::string out = "# task=" + std::string(task_name(data.kind)) +
                    " vocab=" + std::to_string(data.vocab_size) +
                    " seq_len=" + std::to_string(data.seq_len) +
                    " seed=" + std::to_string(data.seed) +
                    " split=" + std::string(split_name(split)) + " planted=";
  for (std::size_t i = 0; i < data.planted_modules.size(); ++i) {
    if (i) out += ",";
    out += kind_name(data.planted_modules[i]);
  }
  out += "\n";
  for (const auto& s : data.split(split)) {
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      out += (i ? " " : "") + std::to_string(s.tokens[i]);
    }
    out += " |";
    for (int t : s.targets) out += " " + std::to_string(t);
    out += "\n";
  }
  return out;
}

std::vector<Sequence> parse_dataset_rows(std::string_view text) {
  std::vector<Sequence> out;
  for (const auto& line : lines_of(text)) {
    if (line.empty() || line[0] == '#') continue;
    Sequence s;
    bool targets = false;
    for (const auto& tok : split_ws(line)) {
      if (tok == "|") {
        targets = true;
        continue;
      }
      (targets ? s.targets : s.tokens).push_back(static_cast<int>(parse_integer(tok, "dataset")));
    }
    if (!targets || s.tokens.size() != s.targets.size()) {
      throw ParseError("dataset row needs equal token and target counts");
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace shaplora
