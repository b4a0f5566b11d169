#include "unitoken/harness/ablation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "unitoken/train/config_io.hpp"

namespace unitoken {

void to_json(nlohmann::json& j, const AblationConfig& c) {
  j = nlohmann::json{{"model", c.model},
                     {"stage", c.stage},
                     {"train", c.train},
                     {"eval", c.eval},
                     {"generation", c.generation},
                     {"gen_seeds", c.gen_seeds},
                     {"model_seed", c.model_seed},
                     {"small_scale", c.small_scale},
                     {"large_scale", c.large_scale},
                     {"mixture_check_draws", c.mixture_check_draws},
                     {"tokenizer", c.tokenizer}};
}

void from_json(const nlohmann::json& j, AblationConfig& c) {
  const AblationConfig d;
  c.model = j.value("model", d.model);
  c.stage = j.value("stage", d.stage);
  c.train = j.value("train", d.train);
  c.eval = j.value("eval", d.eval);
  c.generation = j.value("generation", d.generation);
  c.gen_seeds = j.value("gen_seeds", d.gen_seeds);
  c.model_seed = j.value("model_seed", d.model_seed);
  c.small_scale = j.value("small_scale", d.small_scale);
  c.large_scale = j.value("large_scale", d.large_scale);
  c.mixture_check_draws = j.value("mixture_check_draws", d.mixture_check_draws);
  c.tokenizer = j.value("tokenizer", d.tokenizer);
}

namespace {

constexpr const char* kSchema = "unitoken.ablation.v1";

const std::vector<std::string> kColumns = {"und_general", "und_textread", "gen_overall", "gen_attribute"};

std::optional<double> AblationRow::*column_ptr(const std::string& name) {
  if (name == "und_general") return &AblationRow::und_general;
  if (name == "und_textread") return &AblationRow::und_textread;
  if (name == "gen_overall") return &AblationRow::gen_overall;
  if (name == "gen_attribute") return &AblationRow::gen_attribute;
  throw InternalError("unknown column " + name);
}

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::optional<double> opt_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

AblationRow* find_row(AblationReport& report, const std::string& key) {
  for (auto& r : report.rows) {
    if (r.key == key) return &r;
  }
  return nullptr;
}

void set_delta(AblationRow& row, const AblationRow* base, const std::string& column) {
  if (base == nullptr || row.failed || base->failed) return;
  const auto ptr = column_ptr(column);
  if ((row.*ptr) && (base->*ptr)) row.deltas[column] = *(row.*ptr) - *(base->*ptr);
}

std::string fmt(double v, const char* spec = "%.3f") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

struct RowPlan {
  AblationRow row;
  bool use_continuous = true;
  Dataset train;
  double und_weight = 0.0;
  double gen_weight = 0.0;
};

void train_and_score(const AblationConfig& config, VQTokenizer<float>& tokenizer, RowPlan& plan,
                     const Dataset& eval, const RowProgress& progress) {
  AblationRow& row = plan.row;
  try {
    ModelConfig mc = config.model;
    mc.use_continuous = plan.use_continuous;
    UnifiedLM<float> model(mc, config.model_seed);
    const TrainingData data = prepare_data(plan.train, tokenizer);
    row.und_samples = static_cast<int>(data.understanding.size());
    row.gen_samples = static_cast<int>(data.generation.size());

    StageConfig stage = config.stage;
    stage.require_previous = false;
    MixtureSpec mixture{plan.und_weight, plan.gen_weight, config.train.seed ^ 0x5a5a5a5aULL};
    row.target_und_fraction = mixture.p_understanding();
    {
      Rng check(mixture.seed);
      const auto picks = sample_batch(mixture, data.understanding.size(), data.generation.size(),
                                      config.mixture_check_draws, check);
      const auto und = std::count_if(picks.begin(), picks.end(),
                                     [](const BatchPick& p) { return p.task == Task::understanding; });
      row.realized_und_fraction = static_cast<double>(und) / static_cast<double>(picks.size());
    }

    const auto result = run_stage(stage, mixture, model, data, nullptr, [&](const StepMetrics& m) {
      if (progress) progress(row.key, m);
    });
    row.steps = result.steps;
    const std::size_t tail = std::min<std::size_t>(10, result.log.size());
    for (std::size_t i = result.log.size() - tail; i < result.log.size(); ++i) {
      row.final_loss += result.log[i].loss / static_cast<double>(tail);
    }

    if (plan.und_weight > 0.0) {
      Dataset general, textread;
      for (const auto& s : eval) {
        if (s.task != Task::understanding) continue;
        (is_textread(s) ? textread : general).push_back(s);
      }
      if (!general.empty()) row.und_general = eval_understanding(model, tokenizer, general).accuracy;
      if (!textread.empty()) row.und_textread = eval_understanding(model, tokenizer, textread).accuracy;
    }
    if (plan.gen_weight > 0.0) {
      std::vector<std::string> prompts;
      for (const auto& s : eval) {
        if (s.task == Task::generation) prompts.push_back(s.prompt);
      }
      if (!prompts.empty()) {
        const auto g = eval_generation(model, tokenizer, prompts, config.generation, config.gen_seeds);
        row.gen_overall = g.overall;
        row.gen_attribute = g.attribute;
        row.gen_overall_sd = g.overall_sd;
        row.gen_attribute_sd = g.attribute_sd;
      }
    }
  } catch (const std::exception& e) {
    row.failed = true;
    row.error = e.what();
  }
}

bool wanted(const std::vector<std::string>& only, const std::string& key) {
  return only.empty() || std::find(only.begin(), only.end(), key) != only.end();
}

void check_only(const std::vector<std::string>& only, const std::string& kind) {
  const auto keys = ablation_row_keys(kind);
  for (const auto& k : only) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw UsageError("unknown " + kind + " row '" + k + "'");
  }
}

Dataset slice_task(const Dataset& data, Task task) {
  Dataset out;
  for (const auto& s : data) {
    if (s.task == task) out.push_back(s);
  }
  return out;
}

}  // namespace

const std::vector<std::string>& ablation_columns() { return kColumns; }

std::vector<std::string> ablation_row_keys(const std::string& kind) {
  if (kind == "interference") {
    return {"unified/und-only",       "unified/gen-only",       "unified/joint",
            "discrete-only/und-only", "discrete-only/gen-only", "discrete-only/joint"};
  }
  if (kind == "proportion") return {"small/1:1", "small/2:1", "large/1:1", "large/2:1"};
  throw UsageError("unknown report kind '" + kind + "'");
}

void finalize_report(AblationReport& report) {
  const auto keys = ablation_row_keys(report.kind);
  std::sort(report.rows.begin(), report.rows.end(), [&](const AblationRow& a, const AblationRow& b) {
    return std::find(keys.begin(), keys.end(), a.key) < std::find(keys.begin(), keys.end(), b.key);
  });
  report.findings.clear();
  for (auto& r : report.rows) r.deltas.clear();

  if (report.kind == "interference") {
    std::map<std::string, std::optional<double>> gen_delta;
    for (const std::string enc : {"unified", "discrete-only"}) {
      AblationRow* joint = find_row(report, enc + "/joint");
      if (joint == nullptr) continue;
      const AblationRow* und = find_row(report, enc + "/und-only");
      const AblationRow* gen = find_row(report, enc + "/gen-only");
      set_delta(*joint, und, "und_general");
      set_delta(*joint, und, "und_textread");
      set_delta(*joint, gen, "gen_overall");
      set_delta(*joint, gen, "gen_attribute");
      if (joint->deltas.count("gen_attribute")) gen_delta[enc] = joint->deltas.at("gen_attribute");
      for (const char* col : {"und_general", "gen_attribute"}) {
        if (joint->deltas.count(col)) {
          report.findings.push_back(enc + ": joint minus single-task " + col + " = " +
                                    fmt(joint->deltas.at(col), "%+.4f"));
        }
      }
    }
    if (gen_delta["unified"] && gen_delta["discrete-only"]) {
      const bool holds = std::abs(*gen_delta["unified"]) < std::abs(*gen_delta["discrete-only"]);
      report.findings.push_back(std::string("unified joint-training generation shift is ") +
                                (holds ? "smaller" : "not smaller") +
                                " in magnitude than discrete-only (expected: smaller)");
    }
  } else {
    std::map<std::string, std::optional<double>> gen_delta;
    for (const std::string scale : {"small", "large"}) {
      AblationRow* skew = find_row(report, scale + "/2:1");
      if (skew == nullptr) continue;
      const AblationRow* even = find_row(report, scale + "/1:1");
      for (const auto& col : kColumns) set_delta(*skew, even, col);
      if (skew->deltas.count("gen_attribute")) gen_delta[scale] = skew->deltas.at("gen_attribute");
      for (const char* col : {"und_general", "gen_attribute"}) {
        if (skew->deltas.count(col)) {
          report.findings.push_back(scale + ": 2:1 minus 1:1 " + col + " = " + fmt(skew->deltas.at(col), "%+.4f"));
        }
      }
    }
    if (gen_delta["small"] && gen_delta["large"]) {
      const bool holds = *gen_delta["large"] < *gen_delta["small"];
      report.findings.push_back(std::string("generation loss from the 2:1 ratio is ") +
                                (holds ? "larger" : "not larger") + " at the large scale (expected: larger)");
    }
  }
  for (const auto& r : report.rows) {
    if (r.failed) report.findings.push_back(r.key + " failed: " + r.error);
  }
}

AblationReport merge_reports(const std::vector<AblationReport>& parts) {
  if (parts.empty()) throw UsageError("merge_reports: nothing to merge");
  AblationReport out;
  out.kind = parts.front().kind;
  std::map<std::string, AblationRow> rows;
  for (const auto& part : parts) {
    if (part.kind != out.kind) throw UsageError("merge_reports: mixed report kinds");
    for (auto row : part.rows) {
      row.deltas.clear();
      auto [it, inserted] = rows.emplace(row.key, row);
      if (!inserted && !(it->second == row)) throw UsageError("merge_reports: conflicting rows for " + row.key);
    }
  }
  for (auto& [_, row] : rows) out.rows.push_back(std::move(row));
  finalize_report(out);
  return out;
}

nlohmann::json AblationReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j;
    j["key"] = r.key;
    j["group"] = r.group;
    j["data"] = r.data;
    j["baseline"] = r.baseline;
    j["status"] = r.failed ? "failed" : "ok";
    j["error"] = r.error;
    j["und_samples"] = r.und_samples;
    j["gen_samples"] = r.gen_samples;
    j["steps"] = r.steps;
    j["final_loss"] = r.final_loss;
    j["target_und_fraction"] = r.target_und_fraction;
    j["realized_und_fraction"] = r.realized_und_fraction;
    j["und_general"] = opt(r.und_general);
    j["und_textread"] = opt(r.und_textread);
    j["gen_overall"] = opt(r.gen_overall);
    j["gen_attribute"] = opt(r.gen_attribute);
    j["gen_overall_sd"] = opt(r.gen_overall_sd);
    j["gen_attribute_sd"] = opt(r.gen_attribute_sd);
    j["deltas"] = r.deltas;
    rows_json.push_back(std::move(j));
  }
  return {{"schema", kSchema}, {"kind", kind}, {"columns", kColumns}, {"rows", rows_json}, {"findings", findings}};
}

AblationReport AblationReport::from_json(const nlohmann::json& doc) {
  const auto problems = validate_report_json(doc, true);
  if (!problems.empty()) throw ParseError(0, "invalid report: " + problems.front());
  AblationReport report;
  report.kind = doc.at("kind").get<std::string>();
  for (const auto& j : doc.at("rows")) {
    AblationRow r;
    r.key = j.at("key").get<std::string>();
    r.group = j.at("group").get<std::string>();
    r.data = j.at("data").get<std::string>();
    r.baseline = j.at("baseline").get<std::string>();
    r.failed = j.at("status").get<std::string>() == "failed";
    r.error = j.at("error").get<std::string>();
    r.und_samples = j.at("und_samples").get<int>();
    r.gen_samples = j.at("gen_samples").get<int>();
    r.steps = j.at("steps").get<long>();
    r.final_loss = j.at("final_loss").get<double>();
    r.target_und_fraction = j.at("target_und_fraction").get<double>();
    r.realized_und_fraction = j.at("realized_und_fraction").get<double>();
    r.und_general = opt_from(j, "und_general");
    r.und_textread = opt_from(j, "und_textread");
    r.gen_overall = opt_from(j, "gen_overall");
    r.gen_attribute = opt_from(j, "gen_attribute");
    r.gen_overall_sd = opt_from(j, "gen_overall_sd");
    r.gen_attribute_sd = opt_from(j, "gen_attribute_sd");
    r.deltas = j.at("deltas").get<std::map<std::string, double>>();
    report.rows.push_back(std::move(r));
  }
  report.findings = doc.at("findings").get<std::vector<std::string>>();
  return report;
}

std::vector<std::string> validate_report_json(const nlohmann::json& doc, bool allow_partial) {
  std::vector<std::string> errs;
  if (!doc.is_object()) return {"document is not an object"};
  if (doc.value("schema", "") != kSchema) errs.push_back("schema must be " + std::string(kSchema));
  const std::string kind = doc.value("kind", "");
  std::vector<std::string> keys;
  try {
    keys = ablation_row_keys(kind);
  } catch (const UsageError&) {
    errs.push_back("unknown kind '" + kind + "'");
    return errs;
  }
  if (!doc.contains("columns") || doc.at("columns") != nlohmann::json(kColumns)) errs.push_back("columns differ");
  if (!doc.contains("findings") || !doc.at("findings").is_array()) errs.push_back("findings must be an array");
  if (!doc.contains("rows") || !doc.at("rows").is_array()) {
    errs.push_back("rows must be an array");
    return errs;
  }
  const auto& rows = doc.at("rows");
  if (!allow_partial && rows.size() != keys.size()) {
    errs.push_back("expected " + std::to_string(keys.size()) + " rows, found " + std::to_string(rows.size()));
  }
  std::size_t next_key = 0;  // partial reports: keys must appear in canonical order
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const std::string where = "row " + std::to_string(i);
    if (!r.is_object()) {
      errs.push_back(where + " is not an object");
      continue;
    }
    const std::string key = r.value("key", "");
    if (!allow_partial) {
      if (i < keys.size() && key != keys[i]) errs.push_back(where + " should be " + keys[i]);
    } else {
      const auto it = std::find(keys.begin() + static_cast<std::ptrdiff_t>(std::min(next_key, keys.size())),
                                keys.end(), key);
      if (it == keys.end()) {
        errs.push_back(where + ": key '" + key + "' is unknown, repeated or out of order");
      } else {
        next_key = static_cast<std::size_t>(it - keys.begin()) + 1;
      }
    }
    for (const char* f : {"key", "group", "data", "baseline", "status", "error"}) {
      if (!r.contains(f) || !r.at(f).is_string()) errs.push_back(where + ": " + f + " must be a string");
    }
    for (const char* f : {"und_samples", "gen_samples", "steps"}) {
      if (!r.contains(f) || !r.at(f).is_number_integer()) errs.push_back(where + ": " + f + " must be an integer");
    }
    for (const char* f : {"final_loss", "target_und_fraction", "realized_und_fraction"}) {
      if (!r.contains(f) || !r.at(f).is_number()) errs.push_back(where + ": " + f + " must be a number");
    }
    for (const char* f : {"und_general", "und_textread", "gen_overall", "gen_attribute", "gen_overall_sd",
                          "gen_attribute_sd"}) {
      if (!r.contains(f)) {
        errs.push_back(where + ": missing " + f);
      } else if (!r.at(f).is_null()) {
        if (!r.at(f).is_number()) {
          errs.push_back(where + ": " + f + " must be a number or null");
        } else if (r.at(f).get<double>() < 0.0 || r.at(f).get<double>() > 1.0) {
          errs.push_back(where + ": " + f + " outside [0, 1]");
        }
      }
    }
    if (!r.contains("deltas") || !r.at("deltas").is_object()) errs.push_back(where + ": deltas must be an object");
    const std::string data = r.value("data", "");
    if (data == "und-only" && r.contains("gen_overall") && !r.at("gen_overall").is_null()) {
      errs.push_back(where + ": und-only rows carry no generation score");
    }
    if (data == "gen-only" && r.contains("und_general") && !r.at("und_general").is_null()) {
      errs.push_back(where + ": gen-only rows carry no understanding score");
    }
  }
  return errs;
}

std::string AblationReport::table() const {
  std::ostringstream out;
  auto cell = [](const AblationRow& r, const std::string& col) -> std::string {
    const auto v = r.*column_ptr(col);
    if (!v) return "-";
    std::string s = fmt(*v);
    if (auto it = r.deltas.find(col); it != r.deltas.end()) s += " (" + fmt(it->second, "%+.3f") + ")";
    return s;
  };
  char line[256];
  std::snprintf(line, sizeof(line), "%-24s %-18s %-18s %-18s %-18s\n", kind == "interference" ? "encoder/data" : "scale/ratio",
                "und general", "und textread", "gen overall", "gen attribute");
  out << line;
  for (const auto& r : rows) {
    if (r.failed) {
      std::snprintf(line, sizeof(line), "%-24s failed: %s\n", r.key.c_str(), r.error.c_str());
    } else {
      std::snprintf(line, sizeof(line), "%-24s %-18s %-18s %-18s %-18s\n", r.key.c_str(), cell(r, "und_general").c_str(),
                    cell(r, "und_textread").c_str(), cell(r, "gen_overall").c_str(), cell(r, "gen_attribute").c_str());
    }
    out << line;
  }
  for (const auto& f : findings) out << "* " << f << '\n';
  return out.str();
}

AblationReport run_interference(const AblationConfig& config, VQTokenizer<float>& tokenizer,
                                const std::vector<std::string>& only, const RowProgress& progress) {
  check_only(only, "interference");
  if (config.train.understanding <= 0 || config.train.generation <= 0) {
    throw UsageError("interference needs both understanding and generation training samples");
  }
  const Dataset full = make_dataset(config.train);
  const Dataset eval = make_dataset(config.eval);
  const Dataset und = slice_task(full, Task::understanding);
  const Dataset gen = slice_task(full, Task::generation);

  AblationReport report;
  report.kind = "interference";
  for (const std::string enc : {"unified", "discrete-only"}) {
    for (const std::string data : {"und-only", "gen-only", "joint"}) {
      const std::string key = enc + "/" + data;
      if (!wanted(only, key)) continue;
      RowPlan plan;
      plan.row.key = key;
      plan.row.group = enc;
      plan.row.data = data;
      if (data == "joint") plan.row.baseline = enc + "/und-only," + enc + "/gen-only";
      plan.use_continuous = enc == "unified";
      if (data == "und-only") {
        plan.train = und;
        plan.und_weight = 1.0;
      } else if (data == "gen-only") {
        plan.train = gen;
        plan.gen_weight = 1.0;
      } else {
        plan.train = full;
        plan.und_weight = static_cast<double>(und.size());
        plan.gen_weight = static_cast<double>(gen.size());
      }
      train_and_score(config, tokenizer, plan, eval, progress);
      report.rows.push_back(std::move(plan.row));
    }
  }
  finalize_report(report);
  return report;
}

AblationReport run_proportion_sweep(const AblationConfig& config, VQTokenizer<float>& tokenizer,
                                    const std::vector<std::string>& only, const RowProgress& progress) {
  check_only(only, "proportion");
  if (config.small_scale < 3 || config.large_scale < 3) throw UsageError("scales must be at least 3 samples");
  const Dataset eval = make_dataset(config.eval);
  AblationReport report;
  report.kind = "proportion";
  for (const auto& [scale, total] : {std::pair<std::string, int>{"small", config.small_scale},
                                     std::pair<std::string, int>{"large", config.large_scale}}) {
    for (const int ratio : {1, 2}) {
      const std::string data = std::to_string(ratio) + ":1";
      const std::string key = scale + "/" + data;
      if (!wanted(only, key)) continue;
      DatasetSpec spec = config.train;
      spec.understanding = static_cast<int>(std::lround(static_cast<double>(total) * ratio / (ratio + 1.0)));
      spec.generation = total - spec.understanding;
      RowPlan plan;
      plan.row.key = key;
      plan.row.group = scale;
      plan.row.data = data;
      if (ratio == 2) plan.row.baseline = scale + "/1:1";
      plan.train = make_dataset(spec);
      plan.und_weight = spec.understanding;
      plan.gen_weight = spec.generation;
      train_and_score(config, tokenizer, plan, eval, progress);
      report.rows.push_back(std::move(plan.row));
    }
  }
  finalize_report(report);
  return report;
}

}  // namespace unitoken
