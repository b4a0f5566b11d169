#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "unitoken/autodiff/layers.hpp"
#include "unitoken/sequence/codec.hpp"
#include "unitoken/vision/encoder.hpp"

namespace unitoken {

struct LMConfig {
  JointVocabulary vocab;
  Index width = 64;
  int blocks = 4;
  int heads = 4;
  Index context = 512;
  Index mlp_ratio = 4;

  void validate() const;
};

/// Everything needed to rebuild a model: LM, ViT, and how images enter it.
struct ModelConfig {
  LMConfig lm;
  ViTConfig vit;
  bool use_continuous = true;   // false gives the discrete-only baseline
  bool scaleup = false;         // multi-cell tiling for the ViT path
};

struct SegmentLoss {
  double sum = 0.0;
  int count = 0;
};

template <typename Scalar>
struct LossReport {
  Var<Scalar> loss;
  double value = 0.0;
  int count = 0;
  std::map<Segment, SegmentLoss> breakdown;  // keyed by the target slot's segment
};

/// Decoder-only transformer over the joint vocabulary. Discrete slots are
/// looked up in the token table, continuous slots pass through unchanged, and
/// a single head scores the whole vocabulary for both tasks. Owns the ViT and
/// adapter of the continuous path.
template <typename Scalar>
class UnifiedLM {
 public:
  UnifiedLM(ModelConfig config, std::uint64_t seed);

  UnifiedLM(const UnifiedLM&) = delete;
  UnifiedLM& operator=(const UnifiedLM&) = delete;

  const ModelConfig& config() const { return config_; }
  const JointVocabulary& vocab() const { return config_.lm.vocab; }

  /// "llm", "vit" or "adapter". Throws UsageError for other names.
  ParamGroup<Scalar>& group(const std::string& name);
  std::array<ParamGroup<Scalar>*, 3> groups() { return {&llm_, &vit_group_, &adapter_group_}; }

  NamedTensors<Scalar> named_tensors();
  Index parameter_count();
  void zero_grad();

  /// ViT on the selected tiling followed by the adapter; rows are LM-width
  /// continuous tokens.
  PatchEmbeddingSeq<Scalar> continuous_features(Tape<Scalar>& tape, const Image& image);

  /// T×d inputs. `continuous` supplies the rows referenced by continuous
  /// slots; when invalid, the values stored in the sequence are used.
  Var<Scalar> embed_slots(Tape<Scalar>& tape, const MultimodalSequence& seq,
                          const Var<Scalar>& continuous = {});

  /// T×V causal logits.
  Var<Scalar> forward(Tape<Scalar>& tape, const MultimodalSequence& seq,
                      const Var<Scalar>& continuous = {});

  /// Next-token cross-entropy: logits at t are scored against slot t+1
  /// wherever that slot is loss-masked. Throws if nothing is masked.
  LossReport<Scalar> lm_loss(Tape<Scalar>& tape, const MultimodalSequence& seq,
                             const Var<Scalar>& continuous = {});

  // Weights for the cached inference path.
  Tensor<Scalar>& token_embedding() { return token_embedding_; }
  Tensor<Scalar>& positions() { return positions_; }
  std::vector<TransformerBlock<Scalar>>& blocks() { return blocks_; }
  LayerNormLayer<Scalar>& final_norm() { return final_norm_; }
  LinearLayer<Scalar>& head() { return head_; }
  VisionTransformer<Scalar>& vit() { return vit_; }
  Adapter<Scalar>& adapter() { return adapter_; }

 private:
  ModelConfig config_;
  Rng init_rng_;
  Tensor<Scalar> token_embedding_;
  Tensor<Scalar> positions_;
  std::vector<TransformerBlock<Scalar>> blocks_;
  LayerNormLayer<Scalar> final_norm_;
  LinearLayer<Scalar> head_;
  VisionTransformer<Scalar> vit_;
  Adapter<Scalar> adapter_;
  ParamGroup<Scalar> llm_;
  ParamGroup<Scalar> vit_group_;
  ParamGroup<Scalar> adapter_group_;
};

extern template class UnifiedLM<float>;
extern template class UnifiedLM<double>;

}  // namespace unitoken
