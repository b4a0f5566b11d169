#pragma once

#include <span>
#include <string>
#include <vector>

#include "unitoken/autodiff/ops.hpp"
#include "unitoken/core/image.hpp"
#include "unitoken/core/rng.hpp"
#include "unitoken/train/optim.hpp"
#include "unitoken/vq/token_grid.hpp"

namespace unitoken {

struct VQConfig {
  Index image_channels = 3;
  Index downsample = 4;        // f; a power of two
  Index codebook_size = 64;    // K
  Index code_dim = 16;         // D
  double beta = 0.25;          // commitment weight
  Index base_width = 16;       // conv width of the first stage; doubles per stage

  void validate() const;
  int stages() const;          // log2(downsample)
};

/// Index of the nearest codebook row (squared Euclidean) for every latent row;
/// ties go to the lowest index.
template <typename Scalar>
std::vector<int> nearest_codes(const Matrix<Scalar>& latents, const Matrix<Scalar>& codebook);

template <typename Scalar>
struct Quantized {
  std::vector<int> ids;
  Var<Scalar> quantized;  // codebook rows in the forward pass, identity gradient to the latents
};

/// Snaps latents (n×D) to their nearest codebook entries with a
/// straight-through gradient.
template <typename Scalar>
Quantized<Scalar> quantize(const Var<Scalar>& latents, const Matrix<Scalar>& codebook);

template <typename Scalar>
struct VQLossVars {
  Var<Scalar> recon;     // mean((x̂ − x)²)
  Var<Scalar> codebook;  // mean((sg(z_e) − e)²)
  Var<Scalar> commit;    // β·mean((z_e − sg(e))²)
  Var<Scalar> total;
};

/// The three VQ-VAE objective terms. Squared norms are averaged per element.
template <typename Scalar>
VQLossVars<Scalar> vq_loss_terms(const Var<Scalar>& image, const Var<Scalar>& recon,
                                 const Var<Scalar>& latents, const Var<Scalar>& code_rows,
                                 double beta);

struct VQLossReport {
  double recon = 0.0;
  double codebook = 0.0;
  double commit = 0.0;
  double total = 0.0;
};

/// Convolutional VQ autoencoder: stride-2 4×4 conv stages down to a D-dim
/// latent grid, nearest-code quantization, and a mirrored upsample+3×3 conv
/// decoder with a linear output (clamped to [0, 1] only in decode_tokens).
template <typename Scalar>
class VQTokenizer {
 public:
  explicit VQTokenizer(VQConfig config, std::uint64_t seed = 0);

  VQTokenizer(const VQTokenizer&) = delete;
  VQTokenizer& operator=(const VQTokenizer&) = delete;

  const VQConfig& config() const { return config_; }
  Tensor<Scalar>& codebook() { return codebook_; }
  const Tensor<Scalar>& codebook() const { return codebook_; }

  /// Encoder/decoder weights ("vq") and codebook entries ("codebook").
  ParamGroup<Scalar>& network_group() { return network_; }
  ParamGroup<Scalar>& codebook_group() { return codebook_group_; }

  /// Every tensor with a stable checkpoint name.
  std::vector<std::pair<std::string, Tensor<Scalar>*>> named_tensors();

  /// Pre-quantization latents for a stacked batch; returns (B·h·w)×D.
  Var<Scalar> encode_latents(Tape<Scalar>& tape, const Var<Scalar>& images, ImageLayout layout);

  /// Decoder applied to (B·h·w)×D latents; returns (B·H·W)×C, unclamped.
  Var<Scalar> decode_latents(Tape<Scalar>& tape, const Var<Scalar>& latents, ImageLayout grid_layout);

  TokenGrid encode_image(const Image& image);
  Image decode_tokens(const TokenGrid& grid);

  /// One optimizer step on the full objective; all three terms are reported.
  VQLossReport train_step(std::span<const Image> batch, AdamW<Scalar>& optimizer, double lr);

  /// Loss terms for a batch without updating anything.
  VQLossReport evaluate(std::span<const Image> batch);

  /// Data-dependent codebook initialization: k-means++ seeding over the
  /// current encoder latents of `images`. Codes drawn from the data start
  /// inside the latent cloud instead of collapsing onto one entry.
  void init_codebook(std::span<const Image> images, Rng& rng);

  /// How often each code is selected across `images`. Zero entries are dead
  /// codes.
  std::vector<long> code_usage(std::span<const Image> images);

 private:
  struct Conv {
    Tensor<Scalar> weight;
    Tensor<Scalar> bias;
    Index kernel = 1;
    Index stride = 1;
    Index pad = 0;
  };

  Conv make_conv(Index cin, Index cout, Index kernel, Index stride, Index pad, Rng& rng);
  Var<Scalar> apply(Tape<Scalar>& tape, Conv& conv, const Var<Scalar>& x, ImageLayout& layout);
  Var<Scalar> stack(Tape<Scalar>& tape, std::span<const Image> batch, ImageLayout& layout) const;
  void check_image(const Image& image) const;

  VQConfig config_;
  std::vector<Conv> encoder_;
  Conv to_latent_;
  Conv from_latent_;
  std::vector<Conv> decoder_;
  Conv to_pixels_;
  Tensor<Scalar> codebook_;
  ParamGroup<Scalar> network_;
  ParamGroup<Scalar> codebook_group_;
};

extern template class VQTokenizer<float>;
extern template class VQTokenizer<double>;

}  // namespace unitoken
