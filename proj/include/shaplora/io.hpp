#pragma once

// Text serialization of every artifact: pipeline config (JSON), model
// checkpoints, importance reports (CSV + JSON sidecar), allocation documents,
// training curves and dataset dumps. All writes go through a temporary file
// and a rename.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "shaplora/model.hpp"
#include "shaplora/tasks.hpp"
#include "shaplora/types.hpp"
#include "shaplora/workflow.hpp"

namespace shaplora {

std::string read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

// ---- config -----------------------------------------------------------------
//
// JSON object whose keys mirror PipelineConfig. Missing keys take defaults;
// unknown keys are rejected. A blank document yields the defaults.

PipelineConfig parse_config(std::string_view text);
std::string config_text(const PipelineConfig& cfg);
PipelineConfig load_config(const std::filesystem::path& path);
void save_config(const PipelineConfig& cfg, const std::filesystem::path& path);

// ---- checkpoint ---------------------------------------------------------------
//
//   shaplora-checkpoint 1
//   config n_layers=.. d_model=.. d_ffn=.. n_heads=.. vocab_size=.. max_seq_len=..
//   lora attached=0|1 r_init=..
//   manifest <n>
//   <name> <d0>x<d1>...        (n lines)
//   tensor <name>
//   <values, one row per line, 17 significant digits>
//   ...
//   checksum <fnv1a-64 hex of everything above this line>

std::string checkpoint_text(const Model& model);
// Throws IntegrityError on checksum/manifest problems, ConfigError when
// `expected` is given and differs from the stored config.
Model parse_checkpoint(std::string_view text, const ModelConfig* expected = nullptr);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

// ---- importance report ------------------------------------------------------------

std::string importance_csv(const ImportanceReport& report);
std::string importance_meta(const ImportanceReport& report);
ImportanceReport parse_importance(std::string_view csv, std::string_view meta);
// Writes `csv_path` and its sidecar (csv_path with extension .meta.json).
void save_importance(const ImportanceReport& report, const std::filesystem::path& csv_path);
ImportanceReport load_importance(const std::filesystem::path& csv_path);
std::filesystem::path importance_meta_path(const std::filesystem::path& csv_path);

// ---- allocation ----------------------------------------------------------------------
//
//   # meta: r_init = 4
//   # meta: r_target = 28
//   # meta: method = shapley_sensitivity
//   # meta: seed = 5
//   # meta: kept_ranks = 0.Q.1 0.V.0 ...
//   0.Q = 1
//   ...

std::string allocation_text(const AllocationConfig& alloc);
AllocationConfig parse_allocation(std::string_view text);
void save_allocation(const AllocationConfig& alloc, const std::filesystem::path& path);
AllocationConfig load_allocation(const std::filesystem::path& path);

// ---- curves -------------------------------------------------------------------------------

std::string curves_csv(const std::vector<CurvePoint>& curve);
std::vector<CurvePoint> parse_curves(std::string_view csv);

// ---- dataset --------------------------------------------------------------------------------
//
// Header "# task=<kind> vocab=<v> seq_len=<t> seed=<s> split=<name> planted=<K,..>"
// then one sequence per line: token ids, " | ", target ids (-1 = ignored).

std::string dataset_text(const Dataset& data, Split split);
std::vector<Sequence> parse_dataset_rows(std::string_view text);

}  // namespace shaplora
