#include "unitoken/harness/eval.hpp"

#include <algorithm>
#include <cmath>

namespace unitoken {

bool is_textread(const Sample& s) { return s.task == Task::understanding && s.prompt == "what does the text say?"; }

UnderstandingScore eval_understanding(const Answerer& answerer, const Dataset& eval) {
  UnderstandingScore score;
  for (const auto& s : eval) {
    if (s.task != Task::understanding) continue;
    ++score.total;
    if (answerer(s) == s.answer) ++score.correct;
  }
  score.accuracy = score.total > 0 ? static_cast<double>(score.correct) / score.total : 0.0;
  return score;
}

UnderstandingScore eval_understanding(UnifiedLM<float>& model, VQTokenizer<float>& tokenizer, const Dataset& eval,
                                      const GenerationConfig& config) {
  return eval_understanding(
      [&](const Sample& s) { return answer(model, tokenizer, s.image, s.prompt, config).text; }, eval);
}

PromptScore score_generation(const Scene& expected, const Image& generated) {
  PromptScore score;
  if (generated.height != kSceneSide || generated.width != kSceneSide || generated.channels() != 3 ||
      !generated.pixels.allFinite()) {
    score.undecodable = true;
    return score;
  }
  const auto found = detect(generated);
  if (expected.objects.empty()) {
    score.exact = found.empty();
    score.attribute = score.exact ? 1.0 : 0.0;
    return score;
  }
  int hits = 0;
  for (const auto& want : expected.objects) {
    bool present = false, colored = false, placed = false;
    for (const auto& got : found) {
      if (got.shape != want.shape) continue;
      present = true;
      colored = colored || got.color == want.color;
      placed = placed || got.cell == want.cell;
    }
    hits += static_cast<int>(present) + static_cast<int>(colored) + static_cast<int>(placed);
  }
  score.attribute = static_cast<double>(hits) / (3.0 * static_cast<double>(expected.objects.size()));
  score.exact = found == expected.objects;
  return score;
}

GenerationScore eval_generation(const Generator& generator, const std::vector<std::string>& prompts,
                                const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw UsageError("eval_generation: at least one seed");
  std::vector<Scene> expected;
  for (const auto& p : prompts) {
    auto scene = parse_caption(p);
    if (!scene) throw UsageError("eval_generation: prompt is not a caption: '" + p + "'");
    expected.push_back(*scene);
  }
  GenerationScore out;
  out.prompts = static_cast<int>(prompts.size());
  out.seeds = static_cast<int>(seeds.size());
  if (prompts.empty()) return out;
  std::vector<double> overall, attribute;
  for (auto seed : seeds) {
    double o = 0.0, a = 0.0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      const auto s = score_generation(expected[i], generator(prompts[i], seed));
      o += s.exact ? 1.0 : 0.0;
      a += s.attribute;
      out.undecodable += s.undecodable ? 1 : 0;
    }
    overall.push_back(o / static_cast<double>(prompts.size()));
    attribute.push_back(a / static_cast<double>(prompts.size()));
  }
  auto mean_sd = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    sd = 0.0;
    if (v.size() > 1) {
      for (double x : v) sd += (x - mean) * (x - mean);
      sd = std::sqrt(sd / static_cast<double>(v.size() - 1));
    }
  };
  mean_sd(overall, out.overall, out.overall_sd);
  mean_sd(attribute, out.attribute, out.attribute_sd);
  return out;
}

GenerationScore eval_generation(UnifiedLM<float>& model, VQTokenizer<float>& tokenizer,
                                const std::vector<std::string>& prompts, const GenerationConfig& config,
                                int seeds) {
  if (seeds < 1) throw UsageError("eval_generation: seeds must be positive");
  std::vector<std::uint64_t> seed_list;
  for (int i = 0; i < seeds; ++i) seed_list.push_back(config.seed + static_cast<std::uint64_t>(i));
  return eval_generation(
      [&](const std::string& prompt, std::uint64_t seed) {
        GenerationConfig c = config;
        c.seed = seed;
        return generate_image(model, tokenizer, prompt, c).image;
      },
      prompts, seed_list);
}

}  // namespace unitoken
