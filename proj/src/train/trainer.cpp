#include "unitoken/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>

#include "unitoken/train/config_io.hpp"

namespace unitoken {

StageConfig StageConfig::defaults(int stage) {
  if (stage < 1 || stage > 3) throw UsageError("stage must be 1, 2 or 3");
  StageConfig c;
  c.stage = stage;
  c.global_lr = stage == 1 ? 1e-3 : 1e-5;
  c.vit_lr = 1e-5;
  c.epochs = 1;
  c.require_previous = stage > 1;
  return c;
}

std::vector<std::string> StageConfig::trainable_groups() const {
  if (!trainable.empty()) return trainable;
  if (stage == 1) return {"vit", "adapter"};
  return {"llm", "vit", "adapter"};
}

void StageConfig::validate() const {
  if (stage < 1 || stage > 3) throw UsageError("stage must be 1, 2 or 3");
  auto bad = [](double v) { return !std::isfinite(v) || v < 0.0; };
  if (bad(global_lr) || bad(vit_lr) || bad(vit_lr_cap)) throw UsageError("learning rates must be finite and >= 0");
  if (batch_size < 1) throw UsageError("batch_size must be positive");
  if (steps < 0 || epochs < 0) throw UsageError("steps and epochs must be >= 0");
  if (steps == 0 && epochs == 0) throw UsageError("set steps or epochs");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw UsageError("warmup_fraction must be in [0, 1)");
  if (!(cfg_dropout >= 0.0 && cfg_dropout <= 1.0)) throw UsageError("cfg_dropout must be in [0, 1]");
  std::set<std::string> names;
  for (const auto& g : trainable_groups()) {
    if (g != "llm" && g != "vit" && g != "adapter") throw UsageError("unknown parameter group '" + g + "'");
    names.insert(g);
  }
  const std::set<std::string> expected =
      stage == 1 ? std::set<std::string>{"vit", "adapter"} : std::set<std::string>{"llm", "vit", "adapter"};
  if (names != expected) {
    throw UsageError(stage == 1 ? "stage 1 trains exactly the vit and adapter groups"
                                : "stages 2 and 3 train the llm, vit and adapter groups");
  }
  if (vit_lr > vit_lr_cap && !allow_vit_lr_override) {
    throw UsageError("vit_lr exceeds the ViT cap; set allow_vit_lr_override to proceed");
  }
}

double MixtureSpec::p_understanding() const {
  validate();
  return understanding / (understanding + generation);
}

void MixtureSpec::validate() const {
  if (!std::isfinite(understanding) || !std::isfinite(generation) || understanding < 0.0 || generation < 0.0) {
    throw UsageError("mixture weights must be finite and >= 0");
  }
  if (understanding == 0.0 && generation == 0.0) throw UsageError("mixture weights are both zero");
}

MixtureSpec MixtureSpec::parse(const std::string& text, std::uint64_t seed) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw UsageError("mixture must look like UND:GEN");
  MixtureSpec m;
  try {
    std::size_t used = 0;
    const std::string a = text.substr(0, colon), b = text.substr(colon + 1);
    m.understanding = std::stod(a, &used);
    if (used != a.size()) throw UsageError("bad mixture weight '" + a + "'");
    m.generation = std::stod(b, &used);
    if (used != b.size()) throw UsageError("bad mixture weight '" + b + "'");
  } catch (const std::logic_error&) {
    throw UsageError("mixture must look like UND:GEN");
  }
  m.seed = seed;
  m.validate();
  return m;
}

std::vector<BatchPick> sample_batch(const MixtureSpec& mixture, std::size_t n_understanding,
                                    std::size_t n_generation, int batch_size, Rng& rng) {
  const double p = mixture.p_understanding();
  if (mixture.understanding > 0.0 && n_understanding == 0) throw UsageError("understanding weight > 0 but no data");
  if (mixture.generation > 0.0 && n_generation == 0) throw UsageError("generation weight > 0 but no data");
  if (batch_size < 1) throw UsageError("batch_size must be positive");
  std::vector<BatchPick> picks(static_cast<std::size_t>(batch_size));
  for (auto& pick : picks) {
    pick.task = rng.uniform() < p ? Task::understanding : Task::generation;
    pick.index = rng.below(pick.task == Task::understanding ? n_understanding : n_generation);
  }
  return picks;
}

template <typename Scalar>
BuiltSequence<Scalar> build_sequence(Tape<Scalar>& tape, UnifiedLM<Scalar>& model, const TrainingExample& ex,
                                     bool drop_prompt) {
  BuiltSequence<Scalar> out;
  const auto& vocab = model.vocab();
  if (ex.task == Task::understanding) {
    Matrix<double> cont(0, model.config().lm.width);
    if (model.config().use_continuous) {
      out.continuous = model.continuous_features(tape, ex.image).vectors;
      cont = out.continuous.value().template cast<double>();
    }
    out.seq = assemble_understanding(ex.grid, cont, ex.prompt, ex.answer, vocab);
  } else {
    const std::vector<int> none;
    out.seq = assemble_generation(drop_prompt ? std::span<const int>(none) : std::span<const int>(ex.prompt),
                                  ex.grid, vocab);
  }
  return out;
}

template BuiltSequence<float> build_sequence(Tape<float>&, UnifiedLM<float>&, const TrainingExample&, bool);
template BuiltSequence<double> build_sequence(Tape<double>&, UnifiedLM<double>&, const TrainingExample&, bool);

long resolve_steps(const StageConfig& stage, std::size_t n) {
  if (stage.steps > 0) return stage.steps;
  if (n == 0) throw UsageError("no training data");
  const long per_epoch = static_cast<long>((n + static_cast<std::size_t>(stage.batch_size) - 1) /
                                           static_cast<std::size_t>(stage.batch_size));
  return per_epoch * stage.epochs;
}

StageResult run_stage(const StageConfig& stage, const MixtureSpec& mixture, UnifiedLM<float>& model,
                      const TrainingData& data, const Checkpoint* previous, const StepCallback& on_step) {
  stage.validate();
  mixture.validate();
  StageResult result;

  if (stage.stage > 1 && stage.require_previous) {
    if (previous == nullptr) {
      throw UsageError("stage " + std::to_string(stage.stage) + " needs the stage " +
                       std::to_string(stage.stage - 1) + " checkpoint");
    }
    if (stage_of(*previous) < stage.stage - 1) throw UsageError("previous checkpoint is from an earlier stage");
  }
  if (previous != nullptr) previous->get_tensors(model.named_tensors());

  const auto trainable = stage.trainable_groups();
  for (const auto& name : trainable) model.group(name);

  const double vit_effective = stage.vit_lr * model.group("vit").lr_scale;
  if (vit_effective > stage.vit_lr_cap) {
    if (!stage.allow_vit_lr_override) throw UsageError("effective ViT learning rate exceeds the cap");
    result.warnings.push_back("ViT learning rate " + std::to_string(vit_effective) + " exceeds the cap " +
                              std::to_string(stage.vit_lr_cap) + "; the ViT may collapse");
    std::clog << "warning: " << result.warnings.back() << '\n';
  }

  // Freeze everything outside the stage's groups for the duration of the run.
  std::vector<std::pair<Tensor<float>*, bool>> saved;
  for (auto* g : model.groups()) {
    const bool on = std::find(trainable.begin(), trainable.end(), g->name) != trainable.end();
    for (auto& [_, t] : g->params) {
      saved.emplace_back(t, t->requires_grad());
      t->set_requires_grad(on);
    }
  }
  struct Restore {
    std::vector<std::pair<Tensor<float>*, bool>>& saved;
    ~Restore() {
      for (auto& [t, flag] : saved) t->set_requires_grad(flag);
    }
  } restore{saved};

  const long total = resolve_steps(stage, data.understanding.size() + data.generation.size());
  const long warmup = static_cast<long>(std::floor(stage.warmup_fraction * static_cast<double>(total)));
  Rng sampler(mixture.seed);
  AdamW<float> optimizer(stage.optim);
  auto groups = model.groups();
  const std::span<ParamGroup<float>* const> group_span(groups.data(), groups.size());
  const double inv_batch = 1.0 / stage.batch_size;

  for (long step = 0; step < total; ++step) {
    const double factor = cosine_lr(step, total, 1.0, warmup);
    const auto picks = sample_batch(mixture, data.understanding.size(), data.generation.size(),
                                    stage.batch_size, sampler);
    model.zero_grad();
    StepMetrics m;
    m.step = step;
    m.lr = factor * stage.global_lr;
    for (const auto& pick : picks) {
      const bool und = pick.task == Task::understanding;
      const auto& ex = und ? data.understanding[pick.index] : data.generation[pick.index];
      const bool drop = !und && stage.cfg_dropout > 0.0 && sampler.bernoulli(stage.cfg_dropout);
      Tape<float> tape;
      auto built = build_sequence(tape, model, ex, drop);
      auto report = model.lm_loss(tape, built.seq, built.continuous);
      tape.backward(report.loss, static_cast<float>(inv_batch));
      m.loss += report.value * inv_batch;
      if (und) {
        m.und_loss += report.value;
        ++m.und_count;
      } else {
        m.gen_loss += report.value;
        ++m.gen_count;
      }
    }
    if (m.und_count > 0) m.und_loss /= m.und_count;
    if (m.gen_count > 0) m.gen_loss /= m.gen_count;
    m.grad_norm = clip_grad_norm(group_span, stage.clip_norm);
    optimizer.step(group_span, [&](const ParamGroup<float>& g) {
      return factor * (g.name == "vit" ? stage.vit_lr : stage.global_lr);
    });
    result.log.push_back(m);
    if (on_step) on_step(m);
  }
  result.sampler = sampler;
  result.steps = total;
  return result;
}

TokenizerTrainResult train_tokenizer(VQTokenizer<float>& tokenizer, std::span<const Image> images,
                                     const TokenizerTrainConfig& config,
                                     const std::function<void(long, const VQLossReport&)>& on_step) {
  if (images.empty()) throw UsageError("train_tokenizer: no images");
  if (config.steps <= 0 || config.batch_size < 1) throw UsageError("train_tokenizer: invalid steps or batch size");
  Rng rng(config.seed);
  AdamW<float> optimizer;
  TokenizerTrainResult result;
  std::vector<Image> batch(static_cast<std::size_t>(config.batch_size));
  const long warmup = config.steps / 100;
  {
    std::vector<Image> seed_images;
    for (std::size_t i = 0; i < std::min<std::size_t>(images.size(), 64); ++i) {
      seed_images.push_back(images[rng.below(images.size())]);
    }
    tokenizer.init_codebook(seed_images, rng);
  }
  for (long step = 0; step < config.steps; ++step) {
    for (auto& img : batch) img = images[rng.below(images.size())];
    const auto report = tokenizer.train_step(batch, optimizer, cosine_lr(step, config.steps, config.lr, warmup));
    result.log.push_back(report);
    if (on_step) on_step(step, report);
  }
  double mse = 0.0;
  for (const auto& img : images) mse += mean_squared_error(tokenizer.decode_tokens(tokenizer.encode_image(img)), img);
  result.final_mse = mse / static_cast<double>(images.size());
  for (long c : tokenizer.code_usage(images)) result.dead_codes += c == 0 ? 1 : 0;
  return result;
}

namespace {

void put_vocab(Checkpoint& ckpt, const JointVocabulary& v) {
  ckpt.put_u64("meta.vocab", {static_cast<std::uint64_t>(v.n_text), static_cast<std::uint64_t>(v.n_special),
                              static_cast<std::uint64_t>(v.n_image)});
}

}  // namespace

Checkpoint make_checkpoint(UnifiedLM<float>& model, VQTokenizer<float>& tokenizer, const CheckpointMeta& meta) {
  if (tokenizer.config().codebook_size != model.vocab().n_image) {
    throw UsageError("tokenizer codebook size differs from the vocabulary's image range");
  }
  Checkpoint ckpt;
  ckpt.put_tensors(model.named_tensors());
  ckpt.put_tensors(tokenizer.named_tensors());
  nlohmann::json config;
  config["model"] = model.config();
  config["vq"] = tokenizer.config();
  ckpt.put_text("meta.config", config.dump());
  put_vocab(ckpt, model.vocab());
  ckpt.put_u64("meta.stage", {static_cast<std::uint64_t>(meta.stage)});
  ckpt.put_u64("meta.step", {static_cast<std::uint64_t>(meta.step)});
  if (meta.rng) {
    const auto s = meta.rng->state();
    ckpt.put_u64("meta.rng", std::vector<std::uint64_t>(s.begin(), s.end()));
  }
  return ckpt;
}

Checkpoint make_tokenizer_checkpoint(VQTokenizer<float>& tokenizer) {
  Checkpoint ckpt;
  ckpt.put_tensors(tokenizer.named_tensors());
  nlohmann::json config;
  config["vq"] = tokenizer.config();
  ckpt.put_text("meta.config", config.dump());
  return ckpt;
}

namespace {

nlohmann::json config_of(const Checkpoint& ckpt) {
  try {
    return nlohmann::json::parse(ckpt.get_text("meta.config"));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("checkpoint config: ") + e.what());
  }
}

}  // namespace

ModelConfig model_config_of(const Checkpoint& ckpt) {
  const auto doc = config_of(ckpt);
  if (!doc.contains("model")) throw UsageError("checkpoint holds no model");
  return doc.at("model").get<ModelConfig>();
}

VQConfig tokenizer_config_of(const Checkpoint& ckpt) {
  const auto doc = config_of(ckpt);
  if (!doc.contains("vq")) throw UsageError("checkpoint holds no tokenizer");
  return doc.at("vq").get<VQConfig>();
}

int stage_of(const Checkpoint& ckpt) {
  if (!ckpt.contains("meta.stage")) return 0;
  const auto v = ckpt.get_u64("meta.stage");
  return v.empty() ? 0 : static_cast<int>(v[0]);
}

std::unique_ptr<UnifiedLM<float>> load_model(const Checkpoint& ckpt) {
  auto model = std::make_unique<UnifiedLM<float>>(model_config_of(ckpt), 0);
  const auto& v = model->vocab();
  const std::vector<std::uint64_t> expected = {static_cast<std::uint64_t>(v.n_text),
                                               static_cast<std::uint64_t>(v.n_special),
                                               static_cast<std::uint64_t>(v.n_image)};
  if (ckpt.get_u64("meta.vocab") != expected) throw ParseError(0, "checkpoint vocabulary layout mismatch");
  ckpt.get_tensors(model->named_tensors());
  return model;
}

std::unique_ptr<VQTokenizer<float>> load_tokenizer(const Checkpoint& ckpt) {
  auto tok = std::make_unique<VQTokenizer<float>>(tokenizer_config_of(ckpt), 0);
  ckpt.get_tensors(tok->named_tensors());
  return tok;
}

}  // namespace unitoken
