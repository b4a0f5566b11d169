#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "unitoken/harness/scenes.hpp"
#include "unitoken/inference/engine.hpp"

namespace unitoken {

struct UnderstandingScore {
  double accuracy = 0.0;
  int correct = 0;
  int total = 0;
};

using Answerer = std::function<std::string(const Sample&)>;

/// Exact-match accuracy over the understanding samples of `eval`.
UnderstandingScore eval_understanding(const Answerer& answerer, const Dataset& eval);
UnderstandingScore eval_understanding(UnifiedLM<float>& model, VQTokenizer<float>& tokenizer, const Dataset& eval,
                                      const GenerationConfig& config = {});

/// True for the text-reading question.
bool is_textread(const Sample& s);

struct PromptScore {
  double attribute = 0.0;  // mean of presence, color and position checks
  bool exact = false;      // detected objects equal the expected ones
  bool undecodable = false;
};

/// Scores one generated image against the scene its caption describes. For
/// each expected object: is its shape present, is that shape the right
/// color, is it in the right cell. Images that are not valid 24×24 RGB with
/// finite values score 0 and are flagged.
PromptScore score_generation(const Scene& expected, const Image& generated);

struct GenerationScore {
  double overall = 0.0;        // fraction of prompts reproduced exactly
  double attribute = 0.0;
  double overall_sd = 0.0;     // across seeds
  double attribute_sd = 0.0;
  int prompts = 0;
  int seeds = 0;
  int undecodable = 0;
};

using Generator = std::function<Image(const std::string& prompt, std::uint64_t seed)>;

/// Averages the per-prompt scores for each seed, then reports mean and sample
/// standard deviation over seeds. Prompts must be captions.
GenerationScore eval_generation(const Generator& generator, const std::vector<std::string>& prompts,
                                const std::vector<std::uint64_t>& seeds);
GenerationScore eval_generation(UnifiedLM<float>& model, VQTokenizer<float>& tokenizer,
                                const std::vector<std::string>& prompts, const GenerationConfig& config,
                                int seeds = 1);

}  // namespace unitoken
