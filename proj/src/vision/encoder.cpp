#include "unitoken/vision/encoder.hpp"

#include <algorithm>
#include <cmath>

namespace unitoken {

const std::array<GridConfig, 5>& scaleup_grids() {
  static const std::array<GridConfig, 5> grids{{{2, 2}, {1, 2}, {1, 3}, {2, 1}, {3, 1}}};
  return grids;
}

bool is_allowed_grid(GridConfig grid) {
  if (grid == GridConfig{1, 1}) return true;
  const auto& g = scaleup_grids();
  return std::find(g.begin(), g.end(), grid) != g.end();
}

namespace {

// Fraction of the rows×cols canvas left empty after fitting an image of the
// given aspect inside it.
double padding_fraction(double aspect, GridConfig grid) {
  const double canvas = static_cast<double>(grid.cols) / static_cast<double>(grid.rows);
  return 1.0 - std::min(aspect / canvas, canvas / aspect);
}

}  // namespace

GridConfig select_grid(double aspect, bool scaleup_enabled) {
  if (!scaleup_enabled || !(aspect > 0.0) || !std::isfinite(aspect)) return {1, 1};
  GridConfig best = scaleup_grids().front();
  double best_pad = padding_fraction(aspect, best);
  for (const auto& g : scaleup_grids()) {
    const double pad = padding_fraction(aspect, g);
    if (pad < best_pad - 1e-12 || (std::abs(pad - best_pad) <= 1e-12 && g.cells() < best.cells())) {
      best = g;
      best_pad = pad;
    }
  }
  return best;
}

void ViTConfig::validate() const {
  if (patch <= 0 || cell <= 0 || cell % patch != 0) throw UsageError("ViTConfig: cell must be a multiple of patch");
  if (width <= 0 || heads <= 0 || width % heads != 0) throw UsageError("ViTConfig: width must divide into heads");
  if (blocks < 1 || channels < 1 || mlp_ratio < 1) throw UsageError("ViTConfig: invalid size");
}

Matrix<float> patchify(const Image& cell, Index patch) {
  if (cell.height % patch != 0 || cell.width % patch != 0) throw UsageError("patchify: side not divisible by patch");
  const Index ny = cell.height / patch, nx = cell.width / patch, c = cell.channels();
  Matrix<float> out(ny * nx, patch * patch * c);
  for (Index py = 0; py < ny; ++py) {
    for (Index px = 0; px < nx; ++px) {
      const Index row = py * nx + px;
      for (Index y = 0; y < patch; ++y) {
        for (Index x = 0; x < patch; ++x) {
          out.block(row, (y * patch + x) * c, 1, c) = cell.at(py * patch + y, px * patch + x);
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
VisionTransformer<Scalar>::VisionTransformer(ViTConfig config, Rng& rng) : config_(config) {
  config_.validate();
  const Index in = config_.patch * config_.patch * config_.channels;
  patch_embed_ = LinearLayer<Scalar>(in, config_.width, rng, 1.0 / std::sqrt(static_cast<double>(in)));
  positions_ = Tensor<Scalar>({config_.patches_per_cell(), config_.width});
  fill_normal(positions_, rng, 0.02);
  for (int i = 0; i < config_.blocks; ++i) {
    blocks_.emplace_back(config_.width, config_.width * config_.mlp_ratio, config_.blocks, rng);
  }
  norm_ = LayerNormLayer<Scalar>(config_.width);
}

template <typename Scalar>
Var<Scalar> VisionTransformer<Scalar>::encode_cell(Tape<Scalar>& tape, const Image& cell) {
  if (cell.height != config_.cell || cell.width != config_.cell || cell.channels() != config_.channels) {
    throw UsageError("ViT: cell has the wrong size");
  }
  auto patches = tape.constant(patchify(cell, config_.patch).template cast<Scalar>());
  auto x = add(patch_embed_(tape, patches), tape.param(positions_));
  for (auto& block : blocks_) x = block(tape, x, config_.heads, false);
  return norm_(tape, x);
}

template <typename Scalar>
void VisionTransformer<Scalar>::collect(const std::string& prefix, NamedTensors<Scalar>& out) {
  patch_embed_.collect(prefix + ".patch_embed", out);
  out.emplace_back(prefix + ".positions", &positions_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".blocks." + std::to_string(i), out);
  norm_.collect(prefix + ".norm", out);
}

template <typename Scalar>
PatchEmbeddingSeq<Scalar> encode_continuous(Tape<Scalar>& tape, const Image& image, GridConfig grid,
                                            VisionTransformer<Scalar>& vit) {
  if (image.empty()) throw UsageError("encode_continuous: degenerate image");
  if (!is_allowed_grid(grid)) throw UsageError("encode_continuous: grid not allowed");
  const Index s = vit.config().cell;
  const Image canvas = resize_bilinear(image, grid.rows * s, grid.cols * s);
  std::vector<Var<Scalar>> blocks;
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) blocks.push_back(vit.encode_cell(tape, crop(canvas, r * s, c * s, s, s)));
  }
  return {blocks.size() == 1 ? blocks.front() : concat_rows(blocks), grid};
}

template <typename Scalar>
Adapter<Scalar>::Adapter(Index in_width, Index out_width, Rng& rng)
    : fc1_(in_width, out_width, rng, 1.0 / std::sqrt(static_cast<double>(in_width))),
      fc2_(out_width, out_width, rng, 0.02) {}

template <typename Scalar>
void Adapter<Scalar>::collect(const std::string& prefix, NamedTensors<Scalar>& out) {
  fc1_.collect(prefix + ".fc1", out);
  fc2_.collect(prefix + ".fc2", out);
}

template class VisionTransformer<float>;
template class VisionTransformer<double>;
template class Adapter<float>;
template class Adapter<double>;
template PatchEmbeddingSeq<float> encode_continuous<float>(Tape<float>&, const Image&, GridConfig,
                                                           VisionTransformer<float>&);
template PatchEmbeddingSeq<double> encode_continuous<double>(Tape<double>&, const Image&, GridConfig,
                                                             VisionTransformer<double>&);

}  // namespace unitoken
