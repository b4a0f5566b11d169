// Command-line front end: data generation, tokenizer and stage training,
// inference, ablations and the gradient check.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "unitoken/harness/ablation.hpp"
#include "unitoken/harness/eval.hpp"
#include "unitoken/harness/grad_suite.hpp"
#include "unitoken/harness/scenes.hpp"
#include "unitoken/inference/engine.hpp"
#include "unitoken/train/checkpoint.hpp"
#include "unitoken/train/config_io.hpp"
#include "unitoken/train/dataset.hpp"
#include "unitoken/train/trainer.hpp"

namespace fs = std::filesystem;
using namespace unitoken;

namespace {

/// Resolves a path from a config file against the config's directory.
fs::path relative_to(const fs::path& base_file, const std::string& p) {
  if (p.empty()) return {};
  fs::path path(p);
  return path.is_absolute() ? path : base_file.parent_path() / path;
}

void write_text(const std::string& text, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write " + path.string());
  out << text;
}

int cmd_check_grads(int seeds, double tolerance) {
  const auto checks = run_gradient_suite(seeds, tolerance);
  std::cout << format_gradient_table(checks);
  bool ok = true;
  for (const auto& c : checks) ok = ok && c.passed();
  std::cout << (ok ? "all kernels passed\n" : "gradient check FAILED\n");
  return ok ? 0 : 1;
}

struct MakeDataArgs {
  std::string out;
  DatasetSpec spec;
  int captions = 0;
};

int cmd_make_data(const MakeDataArgs& a) {
  Dataset data = a.captions > 0 ? make_caption_dataset(a.captions, a.spec.seed, a.spec.max_objects)
                                : make_dataset(a.spec);
  write_manifest(data, a.out);
  std::cout << "wrote " << data.size() << " samples to " << (fs::path(a.out) / "manifest.jsonl").string() << "\n";
  return 0;
}

/// Tokenizer training config file: TokenizerTrainConfig fields plus either
/// "data" (a manifest) or "images" (a count of random scenes to render).
int cmd_tokenizer_train(const std::string& config_path, const std::string& out) {
  const auto doc = read_json_file(config_path);
  const auto cfg = doc.get<TokenizerTrainConfig>();
  std::vector<Image> images;
  if (doc.contains("data")) {
    for (auto& s : read_manifest(relative_to(config_path, doc.at("data").get<std::string>()))) {
      images.push_back(std::move(s.image));
    }
  } else {
    Rng rng(cfg.seed ^ 0x1234567ULL);
    const int count = doc.value("images", 512);
    for (int i = 0; i < count; ++i) images.push_back(render(random_scene(rng, doc.value("max_objects", 3))));
  }
  VQTokenizer<float> tok(cfg.vq, cfg.seed);
  const auto result = train_tokenizer(tok, images, cfg, [&](long step, const VQLossReport& r) {
    if (step % 100 == 0 || step + 1 == cfg.steps) {
      std::printf("step %5ld  recon %.5f  codebook %.5f  commit %.5f\n", step, r.recon, r.codebook,
                  r.commit);
    }
  });
  make_tokenizer_checkpoint(tok).save(out);
  std::printf("final mse %.5f  dead codes %d/%lld\n", result.final_mse, result.dead_codes,
              static_cast<long long>(cfg.vq.codebook_size));
  return 0;
}

/// Stage config file: {"model": ModelConfig, "stage": StageConfig,
/// "data": manifest, "tokenizer": checkpoint, "init": checkpoint}.
/// Stage I builds a fresh model; later stages continue from "init".
struct TrainArgs {
  int stage = 2;
  std::string config;
  std::string mixture;  // default: 1:0 for stage 1 (captions only), else 1:1
  std::uint64_t seed = 0;
  std::string out;
  std::string data, tokenizer, init, log;
};

int cmd_train(const TrainArgs& a) {
  const auto doc = read_json_file(a.config);
  // Fields missing from the file keep the chosen stage's defaults.
  nlohmann::json stage_doc = StageConfig::defaults(a.stage);
  if (doc.contains("stage")) stage_doc.merge_patch(doc.at("stage"));
  StageConfig stage = stage_doc.get<StageConfig>();
  stage.stage = a.stage;
  const auto data_path = !a.data.empty() ? fs::path(a.data) : relative_to(a.config, doc.value("data", ""));
  const auto init_path = !a.init.empty() ? fs::path(a.init) : relative_to(a.config, doc.value("init", ""));
  const auto tok_path = !a.tokenizer.empty() ? fs::path(a.tokenizer) : relative_to(a.config, doc.value("tokenizer", ""));
  if (data_path.empty()) throw UsageError("train: no dataset (set \"data\" or --data)");

  std::optional<Checkpoint> previous;
  if (!init_path.empty()) previous = Checkpoint::load(init_path);
  std::unique_ptr<VQTokenizer<float>> tok;
  if (!tok_path.empty()) {
    tok = load_tokenizer(Checkpoint::load(tok_path));
  } else if (previous) {
    tok = load_tokenizer(*previous);
  } else {
    throw UsageError("train: no tokenizer (set \"tokenizer\", --tokenizer or --init)");
  }
  ModelConfig mc = previous ? model_config_of(*previous) : doc.value("model", ModelConfig{});
  UnifiedLM<float> model(mc, a.seed);

  const auto data = prepare_data(read_manifest(data_path), *tok);
  const std::string ratio = !a.mixture.empty() ? a.mixture : a.stage == 1 ? "1:0" : "1:1";
  auto mixture = MixtureSpec::parse(ratio, a.seed);
  std::ofstream log;
  if (!a.log.empty()) log.open(a.log);
  const auto result = run_stage(stage, mixture, model, data, previous ? &*previous : nullptr,
                                [&](const StepMetrics& m) {
                                  if (log) {
                                    log << nlohmann::json{{"step", m.step},         {"loss", m.loss},
                                                          {"lr", m.lr},             {"und_loss", m.und_loss},
                                                          {"gen_loss", m.gen_loss}, {"grad_norm", m.grad_norm}}
                                               .dump()
                                        << "\n";
                                  }
                                  if (m.step % 50 == 0) {
                                    std::printf("step %5ld  loss %.4f  und %.4f  gen %.4f  lr %.2e\n", m.step,
                                                m.loss, m.und_loss, m.gen_loss, m.lr);
                                  }
                                });
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
  make_checkpoint(model, *tok, {a.stage, result.steps, result.sampler}).save(a.out);
  std::printf("stage %d: %ld steps, final loss %.4f -> %s\n", a.stage, result.steps,
              result.log.empty() ? 0.0 : result.log.back().loss, a.out.c_str());
  return 0;
}

int cmd_answer(const std::string& ckpt_path, const std::string& image, const std::string& question, int budget) {
  const auto ckpt = Checkpoint::load(ckpt_path);
  auto model = load_model(ckpt);
  auto tok = load_tokenizer(ckpt);
  GenerationConfig cfg;
  cfg.mode = DecodeMode::greedy;
  cfg.max_new_tokens = budget;
  const auto r = answer(*model, *tok, read_ppm(image), question, cfg);
  std::cout << r.text << (r.truncated ? "  [truncated]" : "") << "\n";
  return 0;
}

struct GenArgs {
  std::string ckpt, prompt, out;
  GenerationConfig cfg;
  bool greedy = false;
};

int cmd_gen(GenArgs a) {
  const auto ckpt = Checkpoint::load(a.ckpt);
  auto model = load_model(ckpt);
  auto tok = load_tokenizer(ckpt);
  if (a.greedy) a.cfg.mode = DecodeMode::greedy;
  const auto r = generate_image(*model, *tok, a.prompt, a.cfg);
  write_ppm(r.image, a.out);
  if (auto expected = parse_caption(a.prompt)) {
    const auto score = score_generation(*expected, r.image);
    std::printf("attribute %.3f  exact %s\n", score.attribute, score.exact ? "yes" : "no");
  }
  std::cout << "wrote " << a.out << "\n";
  return 0;
}

int cmd_ablate(const std::string& kind, const std::string& config_path, const std::string& out,
               const std::vector<std::string>& rows) {
  const auto doc = read_json_file(config_path);
  const auto config = doc.get<AblationConfig>();
  if (config.tokenizer.empty()) throw UsageError("ablate: config needs a \"tokenizer\" checkpoint");
  auto tok = load_tokenizer(Checkpoint::load(relative_to(config_path, config.tokenizer)));
  auto progress = [](const std::string& key, const StepMetrics& m) {
    if (m.step % 100 == 0) std::fprintf(stderr, "%-24s step %5ld  loss %.4f\n", key.c_str(), m.step, m.loss);
  };
  AblationReport report;
  if (kind == "interference") {
    report = run_interference(config, *tok, rows, progress);
  } else if (kind == "proportion") {
    report = run_proportion_sweep(config, *tok, rows, progress);
  } else {
    throw UsageError("ablate: unknown kind '" + kind + "'");
  }
  write_json_file(report.to_json(), out);
  const auto table = report.table();
  write_text(table, fs::path(out).replace_extension(".txt"));
  std::cout << table;
  return 0;
}

int cmd_merge(const std::vector<std::string>& inputs, const std::string& out) {
  std::vector<AblationReport> parts;
  for (const auto& p : inputs) parts.push_back(AblationReport::from_json(read_json_file(p)));
  const auto report = merge_reports(parts);
  write_json_file(report.to_json(), out);
  write_text(report.table(), fs::path(out).replace_extension(".txt"));
  std::cout << report.table();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unitoken: unified discrete/continuous visual tokens for a toy multimodal LM"};
  app.require_subcommand(1);
  int rc = 0;

  auto* check = app.add_subcommand("check", "Self checks");
  check->require_subcommand(1);
  auto* grads = check->add_subcommand("grads", "Finite-difference check of every differentiable kernel");
  int grad_seeds = 20;
  double grad_tol = 1e-4;
  grads->add_option("--seeds", grad_seeds, "Random instances per kernel")->check(CLI::PositiveNumber);
  grads->add_option("--tolerance", grad_tol, "Relative error tolerance");
  grads->callback([&] { rc = cmd_check_grads(grad_seeds, grad_tol); });

  auto* mk = app.add_subcommand("make-data", "Render a synthetic shapes dataset with a JSONL manifest");
  MakeDataArgs md;
  mk->add_option("--out", md.out, "Output directory")->required();
  mk->add_option("--und", md.spec.understanding, "Understanding samples");
  mk->add_option("--gen", md.spec.generation, "Generation samples");
  mk->add_option("--textread", md.spec.textread_fraction, "Share of understanding samples that read text");
  mk->add_option("--max-objects", md.spec.max_objects, "Objects per scene")->check(CLI::Range(1, 3));
  mk->add_option("--captions", md.captions, "Write N caption samples instead (alignment data)");
  mk->add_option("--seed", md.spec.seed, "Seed");
  mk->callback([&] { rc = cmd_make_data(md); });

  auto* tt = app.add_subcommand("tokenizer-train", "Train the VQ image tokenizer");
  std::string tt_config, tt_out;
  tt->add_option("--config", tt_config, "JSON config")->required()->check(CLI::ExistingFile);
  tt->add_option("--out", tt_out, "Checkpoint path")->required();
  tt->callback([&] { rc = cmd_tokenizer_train(tt_config, tt_out); });

  auto* tr = app.add_subcommand("train", "Run one training stage");
  TrainArgs ta;
  tr->add_option("--stage", ta.stage, "Stage")->required()->check(CLI::IsMember({1, 2, 3}));
  tr->add_option("--config", ta.config, "JSON config")->required()->check(CLI::ExistingFile);
  tr->add_option("--mixture", ta.mixture, "Understanding:generation weights (default 1:0 for stage 1, else 1:1)");
  tr->add_option("--seed", ta.seed, "Seed");
  tr->add_option("--out", ta.out, "Checkpoint path")->required();
  tr->add_option("--data", ta.data, "Manifest (overrides config)");
  tr->add_option("--tokenizer", ta.tokenizer, "Tokenizer checkpoint (overrides config)");
  tr->add_option("--init", ta.init, "Previous stage checkpoint (overrides config)");
  tr->add_option("--log", ta.log, "Per-step JSONL log");
  tr->callback([&] { rc = cmd_train(ta); });

  auto* an = app.add_subcommand("answer", "Answer a question about an image");
  std::string an_ckpt, an_image, an_question;
  int an_budget = 32;
  an->add_option("--ckpt", an_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  an->add_option("--image", an_image, "PPM image")->required()->check(CLI::ExistingFile);
  an->add_option("--question", an_question, "Question")->required();
  an->add_option("--max-tokens", an_budget, "Answer budget");
  an->callback([&] { rc = cmd_answer(an_ckpt, an_image, an_question, an_budget); });

  auto* gn = app.add_subcommand("gen", "Generate an image from a prompt");
  GenArgs ga;
  gn->add_option("--ckpt", ga.ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  gn->add_option("--prompt", ga.prompt, "Prompt")->required();
  gn->add_option("--scale", ga.cfg.guidance_scale, "Guidance scale");
  gn->add_option("--temperature", ga.cfg.temperature, "Sampling temperature");
  gn->add_option("--seed", ga.cfg.seed, "Seed");
  gn->add_flag("--greedy", ga.greedy, "Argmax decoding");
  gn->add_option("--out", ga.out, "Output PPM")->required();
  gn->callback([&] { rc = cmd_gen(ga); });

  auto* ab = app.add_subcommand("ablate", "Run an ablation and write a JSON report plus a text table");
  std::string ab_kind, ab_config, ab_out;
  std::vector<std::string> ab_rows, merge_inputs;
  ab->add_option("kind", ab_kind, "interference | proportion | merge")->required()->check(
      CLI::IsMember({"interference", "proportion", "merge"}));
  ab->add_option("--config", ab_config, "JSON config");
  ab->add_option("--out", ab_out, "Report path")->required();
  ab->add_option("--rows", ab_rows, "Only these row keys")->delimiter(',');
  ab->add_option("--inputs", merge_inputs, "Partial reports to merge");
  ab->callback([&] {
    if (ab_kind == "merge") {
      rc = cmd_merge(merge_inputs, ab_out);
    } else {
      if (ab_config.empty()) throw CLI::RequiredError("--config");
      rc = cmd_ablate(ab_kind, ab_config, ab_out, ab_rows);
    }
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
