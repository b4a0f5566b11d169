#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "unitoken/harness/eval.hpp"
#include "unitoken/train/trainer.hpp"

namespace unitoken {

/// Shared settings for both ablations. Every row trains a fresh model from
/// the same initialization for the same number of steps, so rows differ only
/// in training data (and, for interference, the encoding path).
struct AblationConfig {
  ModelConfig model;
  StageConfig stage = StageConfig::defaults(2);
  DatasetSpec train;               // interference: und-only / gen-only / joint draw from these counts
  DatasetSpec eval;                // held out; seeds must differ from train
  GenerationConfig generation;
  int gen_seeds = 3;
  std::uint64_t model_seed = 0;
  int small_scale = 200;           // proportion sweep: total samples per scale
  int large_scale = 2000;
  int mixture_check_draws = 10000;
  std::string tokenizer;           // checkpoint path, used by the CLI
};

struct AblationRow {
  std::string key;                 // e.g. "unified/joint" or "large/2:1"
  std::string group;               // encoder ("unified", "discrete-only") or scale ("small", "large")
  std::string data;                // "und-only", "gen-only", "joint", "1:1", "2:1"
  std::string baseline;            // key the deltas compare against; empty for baseline rows
  bool failed = false;
  std::string error;
  int und_samples = 0;
  int gen_samples = 0;
  long steps = 0;
  double final_loss = 0.0;
  double target_und_fraction = 0.0;
  double realized_und_fraction = 0.0;  // over mixture_check_draws draws of the row's sampler
  std::optional<double> und_general;
  std::optional<double> und_textread;
  std::optional<double> gen_overall;
  std::optional<double> gen_attribute;
  std::optional<double> gen_overall_sd;
  std::optional<double> gen_attribute_sd;
  std::map<std::string, double> deltas;  // column → row − baseline

  bool operator==(const AblationRow&) const = default;
};

/// Score columns shared by both reports.
const std::vector<std::string>& ablation_columns();

struct AblationReport {
  std::string kind;                // "interference" or "proportion"
  std::vector<AblationRow> rows;   // canonical order for the kind
  std::vector<std::string> findings;

  nlohmann::json to_json() const;
  static AblationReport from_json(const nlohmann::json& doc);
  /// Plain-text table with one line per row and deltas in parentheses.
  std::string table() const;
};

/// Row keys, in canonical order, for a report kind.
std::vector<std::string> ablation_row_keys(const std::string& kind);

/// Combines partial reports of one kind. Rows are matched by key, so the
/// result does not depend on argument order; the same key with different
/// contents is an error. Deltas and findings are recomputed.
AblationReport merge_reports(const std::vector<AblationReport>& parts);

/// Fills deltas and directional findings from the row scores.
void finalize_report(AblationReport& report);

/// Schema problems in a report document; empty when valid. A partial report
/// (from a run restricted to some rows) may omit rows but must keep the
/// remaining ones in canonical order.
std::vector<std::string> validate_report_json(const nlohmann::json& doc, bool allow_partial = false);

using RowProgress = std::function<void(const std::string& key, const StepMetrics& m)>;

/// Two encoders × {und-only, gen-only, joint}. `only` restricts the run to
/// the listed keys (the rest are omitted, to be merged later).
AblationReport run_interference(const AblationConfig& config, VQTokenizer<float>& tokenizer,
                                const std::vector<std::string>& only = {}, const RowProgress& progress = {});

/// Two data scales × ratios {1:1, 2:1}.
AblationReport run_proportion_sweep(const AblationConfig& config, VQTokenizer<float>& tokenizer,
                                    const std::vector<std::string>& only = {}, const RowProgress& progress = {});

void to_json(nlohmann::json& j, const AblationConfig& c);
void from_json(const nlohmann::json& j, AblationConfig& c);

}  // namespace unitoken
