#pragma once

// JSON mappings for the configuration structs. Missing keys keep defaults.

#include <filesystem>
#include <string>

#include <json.hpp>

#include "unitoken/harness/scenes.hpp"
#include "unitoken/inference/engine.hpp"
#include "unitoken/lm/model.hpp"
#include "unitoken/train/optim.hpp"
#include "unitoken/train/trainer.hpp"
#include "unitoken/vq/tokenizer.hpp"

namespace unitoken {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(VQConfig, image_channels, downsample, codebook_size, code_dim,
                                                beta, base_width)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ViTConfig, cell, patch, channels, width, blocks, heads, mlp_ratio)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(JointVocabulary, n_text, n_special, n_image)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LMConfig, vocab, width, blocks, heads, context, mlp_ratio)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, lm, vit, use_continuous, scaleup)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AdamWConfig, beta1, beta2, eps, weight_decay)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(StageConfig, stage, trainable, global_lr, vit_lr, optim, batch_size,
                                                epochs, steps, warmup_fraction, clip_norm, vit_lr_cap,
                                                allow_vit_lr_override, cfg_dropout, require_previous)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TokenizerTrainConfig, vq, steps, batch_size, lr, seed)
NLOHMANN_JSON_SERIALIZE_ENUM(DecodeMode, {{DecodeMode::greedy, "greedy"}, {DecodeMode::sample, "sample"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Branch, {{Branch::cfg, "cfg"},
                                      {Branch::conditional_only, "conditional_only"},
                                      {Branch::unconditional_only, "unconditional_only"}})
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GenerationConfig, mode, temperature, guidance_scale, max_new_tokens,
                                                grid_height, grid_width, seed, branch)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DatasetSpec, understanding, generation, textread_fraction,
                                                max_objects, seed)

/// Reads a JSON document; throws UsageError naming the file on failure.
nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const nlohmann::json& doc, const std::filesystem::path& path);

}  // namespace unitoken
