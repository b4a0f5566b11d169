#pragma once

#include <array>
#include <vector>

#include "unitoken/autodiff/layers.hpp"
#include "unitoken/core/image.hpp"

namespace unitoken {

/// rows × cols arrangement of base cells used to tile an image.
struct GridConfig {
  int rows = 1;
  int cols = 1;

  int cells() const { return rows * cols; }
  bool operator==(const GridConfig&) const = default;
};

/// The tilings available when resolution scale-up is on: 2×2, 1×2, 1×3, 2×1, 3×1.
const std::array<GridConfig, 5>& scaleup_grids();

/// True for 1×1 and every scale-up tiling.
bool is_allowed_grid(GridConfig grid);

/// Picks the tiling whose canvas (rows·S × cols·S) wastes the least padded
/// area when an image of aspect ratio `aspect` (W/H) is scaled to fit inside
/// it; ties go to fewer cells, then to the earlier entry of scaleup_grids().
/// Returns 1×1 when scale-up is disabled.
GridConfig select_grid(double aspect, bool scaleup_enabled);

struct ViTConfig {
  Index cell = 16;      // base cell side S in pixels
  Index patch = 4;      // patch side p
  Index channels = 3;
  Index width = 32;
  int blocks = 2;
  int heads = 2;
  Index mlp_ratio = 4;

  Index patches_per_cell() const { return (cell / patch) * (cell / patch); }
  void validate() const;
};

/// Continuous features for one image: rows are tokens, cells concatenated in
/// row-major cell order.
template <typename Scalar>
struct PatchEmbeddingSeq {
  Var<Scalar> vectors;
  GridConfig source_grid;

  Index count() const { return vectors.valid() ? vectors.rows() : 0; }
  Index dim() const { return vectors.valid() ? vectors.cols() : 0; }
};

/// Cuts a cell image into p×p patches; row i is patch i in row-major order
/// with columns ordered (py, px, channel).
Matrix<float> patchify(const Image& cell, Index patch);

/// Small ViT applied independently to each base cell, with learned absolute
/// positions shared by all cells.
template <typename Scalar>
class VisionTransformer {
 public:
  VisionTransformer(ViTConfig config, Rng& rng);

  const ViTConfig& config() const { return config_; }

  /// Encodes one S×S cell; returns patches_per_cell × width.
  Var<Scalar> encode_cell(Tape<Scalar>& tape, const Image& cell);

  void collect(const std::string& prefix, NamedTensors<Scalar>& out);

 private:
  ViTConfig config_;
  LinearLayer<Scalar> patch_embed_;
  Tensor<Scalar> positions_;
  std::vector<TransformerBlock<Scalar>> blocks_;
  LayerNormLayer<Scalar> norm_;
};

/// Resizes `image` to rows·S × cols·S, encodes each cell with `vit`, and
/// concatenates the per-cell token blocks without separators.
template <typename Scalar>
PatchEmbeddingSeq<Scalar> encode_continuous(Tape<Scalar>& tape, const Image& image, GridConfig grid,
                                            VisionTransformer<Scalar>& vit);

/// Two-layer MLP W2·GELU(W1·x + b1) + b2 mapping ViT width to LM width.
template <typename Scalar>
class Adapter {
 public:
  Adapter(Index in_width, Index out_width, Rng& rng);

  Index in_width() const { return fc1_.in(); }
  Index out_width() const { return fc2_.out(); }

  LinearLayer<Scalar>& fc1() { return fc1_; }
  LinearLayer<Scalar>& fc2() { return fc2_; }

  void collect(const std::string& prefix, NamedTensors<Scalar>& out);

  friend PatchEmbeddingSeq<Scalar> adapt(Tape<Scalar>& tape, const PatchEmbeddingSeq<Scalar>& features,
                                         Adapter& adapter) {
    if (features.dim() != adapter.in_width()) throw UsageError("adapt: feature width mismatch");
    auto h = gelu(adapter.fc1_(tape, features.vectors));
    return {adapter.fc2_(tape, h), features.source_grid};
  }

 private:
  LinearLayer<Scalar> fc1_;
  LinearLayer<Scalar> fc2_;
};

extern template class VisionTransformer<float>;
extern template class VisionTransformer<double>;
extern template class Adapter<float>;
extern template class Adapter<double>;

}  // namespace unitoken
