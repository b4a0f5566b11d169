#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "unitoken/lm/model.hpp"
#include "unitoken/train/checkpoint.hpp"
#include "unitoken/train/dataset.hpp"
#include "unitoken/train/optim.hpp"

namespace unitoken {

/// Hyperparameters of one training stage. Stage 1 aligns the vision path
/// with the LM frozen; stages 2 and 3 train everything.
struct StageConfig {
  int stage = 2;
  std::vector<std::string> trainable;  // empty: the stage's standard groups
  double global_lr = 1e-5;             // every group except "vit"
  double vit_lr = 1e-5;
  AdamWConfig optim;
  int batch_size = 8;
  int epochs = 0;                      // used only when steps == 0
  long steps = 0;
  double warmup_fraction = 0.01;
  double clip_norm = 1.0;              // <= 0 disables clipping
  double vit_lr_cap = 1e-5;
  bool allow_vit_lr_override = false;
  double cfg_dropout = 0.1;            // generation prompts replaced by UNCOND
  bool require_previous = true;        // stages 2/3 start from the previous stage

  /// Table defaults: stage 1 uses global 1e-3, stages 2/3 use 1e-5; ViT
  /// always 1e-5.
  static StageConfig defaults(int stage);

  std::vector<std::string> trainable_groups() const;

  /// Throws UsageError on invalid values, unknown stage, or a ViT LR above
  /// the cap without the override flag.
  void validate() const;
};

/// Understanding:generation sampling weights.
struct MixtureSpec {
  double understanding = 1.0;
  double generation = 1.0;
  std::uint64_t seed = 0;

  double p_understanding() const;
  void validate() const;

  /// "UND:GEN", e.g. "2:1".
  static MixtureSpec parse(const std::string& text, std::uint64_t seed = 0);
};

struct BatchPick {
  Task task = Task::understanding;
  std::size_t index = 0;  // into the task's example list

  bool operator==(const BatchPick&) const = default;
};

/// Draws `batch_size` picks i.i.d.: the task with probability proportional
/// to the mixture weights, then a uniform example of that task.
std::vector<BatchPick> sample_batch(const MixtureSpec& mixture, std::size_t n_understanding,
                                    std::size_t n_generation, int batch_size, Rng& rng);

/// Sequence for one example. Understanding uses the model's continuous path
/// when enabled (features recorded on `tape`) and otherwise an empty image_c
/// block. An empty `prompt_override` with `drop_prompt` yields UNCOND.
template <typename Scalar>
struct BuiltSequence {
  MultimodalSequence seq;
  Var<Scalar> continuous;
};

template <typename Scalar>
BuiltSequence<Scalar> build_sequence(Tape<Scalar>& tape, UnifiedLM<Scalar>& model, const TrainingExample& ex,
                                     bool drop_prompt = false);

struct StepMetrics {
  long step = 0;
  double loss = 0.0;
  double lr = 0.0;             // scheduled global LR
  double und_loss = 0.0;       // mean over understanding samples in the batch, 0 if none
  double gen_loss = 0.0;
  int und_count = 0;
  int gen_count = 0;
  double grad_norm = 0.0;      // before clipping
};

struct StageResult {
  std::vector<StepMetrics> log;
  std::vector<std::string> warnings;
  Rng sampler;                 // state after the final step
  long steps = 0;
};

using StepCallback = std::function<void(const StepMetrics&)>;

/// Runs one stage in place on `model`. Tensors outside the trainable groups
/// are frozen for the run and come back bit-identical. When the stage
/// requires it, `previous` must be a checkpoint written by the preceding
/// stage; its weights are loaded first.
StageResult run_stage(const StageConfig& stage, const MixtureSpec& mixture, UnifiedLM<float>& model,
                      const TrainingData& data, const Checkpoint* previous = nullptr,
                      const StepCallback& on_step = {});

/// Total steps implied by `steps` or `epochs` for a dataset of `n` examples.
long resolve_steps(const StageConfig& stage, std::size_t n);

struct TokenizerTrainConfig {
  VQConfig vq;
  long steps = 1000;
  int batch_size = 8;
  double lr = 2e-3;
  std::uint64_t seed = 0;
};

struct TokenizerTrainResult {
  std::vector<VQLossReport> log;
  double final_mse = 0.0;      // reconstruction MSE through the quantized path
  int dead_codes = 0;
};

/// Trains `tokenizer` with its own AdamW on random minibatches of `images`,
/// cosine-decayed.
TokenizerTrainResult train_tokenizer(VQTokenizer<float>& tokenizer, std::span<const Image> images,
                                     const TokenizerTrainConfig& config,
                                     const std::function<void(long, const VQLossReport&)>& on_step = {});

/// Model checkpoint: LM weights, tokenizer weights and metadata.
struct CheckpointMeta {
  int stage = 0;
  long step = 0;
  std::optional<Rng> rng;
};

Checkpoint make_checkpoint(UnifiedLM<float>& model, VQTokenizer<float>& tokenizer, const CheckpointMeta& meta);
Checkpoint make_tokenizer_checkpoint(VQTokenizer<float>& tokenizer);

ModelConfig model_config_of(const Checkpoint& ckpt);
VQConfig tokenizer_config_of(const Checkpoint& ckpt);
int stage_of(const Checkpoint& ckpt);

/// Rebuilds a model or tokenizer from a checkpoint.
std::unique_ptr<UnifiedLM<float>> load_model(const Checkpoint& ckpt);
std::unique_ptr<VQTokenizer<float>> load_tokenizer(const Checkpoint& ckpt);

}  // namespace unitoken
