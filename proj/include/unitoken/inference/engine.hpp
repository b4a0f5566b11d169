#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unitoken/lm/model.hpp"
#include "unitoken/vq/tokenizer.hpp"

namespace unitoken {

enum class DecodeMode { greedy, sample };

/// Which logits drive image sampling. `cfg` runs both branches; the single
/// branch modes exist to compare against guided sampling.
enum class Branch { cfg, conditional_only, unconditional_only };

struct GenerationConfig {
  DecodeMode mode = DecodeMode::sample;
  double temperature = 1.0;
  double guidance_scale = 5.0;
  int max_new_tokens = 32;          // answer() budget
  Index grid_height = 6;            // generated grid, in tokens
  Index grid_width = 6;
  std::uint64_t seed = 0;
  Branch branch = Branch::cfg;

  void validate() const;
};

/// Guided logits s·cond + (1 − s)·uncond, i.e. uncond + s·(cond − uncond)
/// written so that s = 1 returns `cond` and s = 0 returns `uncond` exactly.
template <typename Derived>
Eigen::Matrix<double, 1, Eigen::Dynamic> cfg_logits(const Eigen::MatrixBase<Derived>& cond,
                                                    const Eigen::MatrixBase<Derived>& uncond, double s) {
  if (cond.rows() != uncond.rows() || cond.cols() != uncond.cols() || cond.rows() != 1) {
    throw UsageError("cfg_logits: logits must be equal-length row vectors");
  }
  return s * cond.template cast<double>() + (1.0 - s) * uncond.template cast<double>();
}

/// Incremental decoding over one model with per-block key/value caches.
/// Each session owns its cache; several sessions may share a model that is
/// not being trained.
class DecodeSession {
 public:
  explicit DecodeSession(UnifiedLM<float>& model);

  /// Consumes every slot of `seq` and returns the logits after the last one.
  /// Continuous slots read rows of `continuous` (LM width).
  RowVector<float> prefill(const MultimodalSequence& seq, const Matrix<float>& continuous);

  /// Appends one discrete token and returns the next-token logits.
  RowVector<float> step(int id);

  Index length() const { return length_; }

 private:
  RowVector<float> advance(const RowVector<float>& input);

  UnifiedLM<float>& model_;
  std::vector<Matrix<float>> keys_;
  std::vector<Matrix<float>> values_;
  Index length_ = 0;
};

struct AnswerResult {
  std::string text;
  std::vector<int> ids;    // emitted ids, EOS excluded
  bool truncated = false;  // budget ran out before EOS
};

/// Greedy answer to `question` about `image`. Temperature and seed are
/// ignored. Throws UsageError for an empty question.
AnswerResult answer(UnifiedLM<float>& model, VQTokenizer<float>& tokenizer, const Image& image,
                    const std::string& question, const GenerationConfig& config = {});

struct GenerationResult {
  TokenGrid grid;
  Image image;
  /// Per emitted token, the sampling distribution over the image codes (when
  /// tracing was requested).
  std::vector<std::vector<double>> step_probs;
};

/// Samples an h×w grid of image tokens after BOS {prompt} BOI. Both branches
/// (prompt and UNCOND) are advanced in lockstep; their logits are combined,
/// divided by the temperature, restricted to image codes and sampled. EOI is
/// implied after the last token. The grid is decoded by `tokenizer`.
GenerationResult generate_image(UnifiedLM<float>& model, VQTokenizer<float>& tokenizer, const std::string& prompt,
                                const GenerationConfig& config, bool trace = false);

/// Probabilities over image codes from full-vocabulary logits: non-image ids
/// get zero mass and the rest is renormalized.
std::vector<double> restricted_image_distribution(const Eigen::Matrix<double, 1, Eigen::Dynamic>& logits,
                                                  const JointVocabulary& vocab);

}  // namespace unitoken
