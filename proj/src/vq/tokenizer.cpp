#include "unitoken/vq/tokenizer.hpp"

#include <limits>

#include <algorithm>
#include <bit>
#include <cmath>

namespace unitoken {

void VQConfig::validate() const {
  if (downsample < 2 || !std::has_single_bit(static_cast<unsigned long>(downsample))) {
    throw UsageError("VQConfig: downsample must be a power of two >= 2");
  }
  if (codebook_size < 2) throw UsageError("VQConfig: codebook needs at least two entries");
  if (code_dim < 1 || image_channels < 1 || base_width < 1) throw UsageError("VQConfig: widths must be positive");
  if (!(beta >= 0.0)) throw UsageError("VQConfig: beta must be nonnegative");
}

int VQConfig::stages() const { return std::countr_zero(static_cast<unsigned long>(downsample)); }

template <typename Scalar>
std::vector<int> nearest_codes(const Matrix<Scalar>& latents, const Matrix<Scalar>& codebook) {
  if (latents.cols() != codebook.cols()) throw UsageError("quantize: latent width differs from code dim");
  std::vector<int> ids(static_cast<std::size_t>(latents.rows()));
  for (Index r = 0; r < latents.rows(); ++r) {
    int best = 0;
    Scalar best_d = (latents.row(r) - codebook.row(0)).squaredNorm();
    for (Index k = 1; k < codebook.rows(); ++k) {
      const Scalar d = (latents.row(r) - codebook.row(k)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(k);
      }
    }
    ids[static_cast<std::size_t>(r)] = best;
  }
  return ids;
}

template <typename Scalar>
Quantized<Scalar> quantize(const Var<Scalar>& latents, const Matrix<Scalar>& codebook) {
  Quantized<Scalar> q;
  q.ids = nearest_codes<Scalar>(latents.value(), codebook);
  Matrix<Scalar> snapped(latents.rows(), latents.cols());
  for (std::size_t i = 0; i < q.ids.size(); ++i) snapped.row(static_cast<Index>(i)) = codebook.row(q.ids[i]);
  q.quantized = straight_through(latents, std::move(snapped));
  return q;
}

template <typename Scalar>
VQLossVars<Scalar> vq_loss_terms(const Var<Scalar>& image, const Var<Scalar>& recon,
                                 const Var<Scalar>& latents, const Var<Scalar>& code_rows,
                                 double beta) {
  VQLossVars<Scalar> out;
  out.recon = mse(recon, image);
  out.codebook = mse(stop_gradient(latents), code_rows);
  out.commit = scale(mse(latents, stop_gradient(code_rows)), static_cast<Scalar>(beta));
  out.total = add(add(out.recon, out.codebook), out.commit);
  return out;
}

template <typename Scalar>
VQTokenizer<Scalar>::VQTokenizer(VQConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  Index cin = config_.image_channels;
  const int stages = config_.stages();
  for (int i = 0; i < stages; ++i) {
    const Index cout = config_.base_width << i;
    encoder_.push_back(make_conv(cin, cout, 4, 2, 1, rng));
    cin = cout;
  }
  to_latent_ = make_conv(cin, config_.code_dim, 1, 1, 0, rng);
  from_latent_ = make_conv(config_.code_dim, cin, 3, 1, 1, rng);
  for (int i = stages - 1; i >= 0; --i) {
    const Index cout = i > 0 ? (config_.base_width << (i - 1)) : config_.base_width;
    decoder_.push_back(make_conv(cin, cout, 3, 1, 1, rng));
    cin = cout;
  }
  to_pixels_ = make_conv(cin, config_.image_channels, 3, 1, 1, rng);

  codebook_ = Tensor<Scalar>({config_.codebook_size, config_.code_dim});
  for (Index i = 0; i < codebook_.size(); ++i) codebook_.value().data()[i] = static_cast<Scalar>(rng.normal(0.0, 0.5));

  network_.name = "vq";
  codebook_group_.name = "codebook";
  for (auto& [name, t] : named_tensors()) {
    if (t == &codebook_) {
      codebook_group_.params.emplace_back(name, t);
    } else {
      network_.params.emplace_back(name, t);
    }
  }
}

template <typename Scalar>
typename VQTokenizer<Scalar>::Conv VQTokenizer<Scalar>::make_conv(Index cin, Index cout, Index kernel,
                                                                   Index stride, Index pad, Rng& rng) {
  Conv c;
  c.kernel = kernel;
  c.stride = stride;
  c.pad = pad;
  const Index fan_in = kernel * kernel * cin;
  c.weight = Tensor<Scalar>({fan_in, cout});
  c.bias = Tensor<Scalar>({1, cout});
  const double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (Index i = 0; i < c.weight.size(); ++i) c.weight.value().data()[i] = static_cast<Scalar>(rng.normal(0.0, std));
  return c;
}

template <typename Scalar>
std::vector<std::pair<std::string, Tensor<Scalar>*>> VQTokenizer<Scalar>::named_tensors() {
  std::vector<std::pair<std::string, Tensor<Scalar>*>> out;
  auto conv = [&](const std::string& name, Conv& c) {
    out.emplace_back(name + ".weight", &c.weight);
    out.emplace_back(name + ".bias", &c.bias);
  };
  for (std::size_t i = 0; i < encoder_.size(); ++i) conv("vq.encoder." + std::to_string(i), encoder_[i]);
  conv("vq.to_latent", to_latent_);
  conv("vq.from_latent", from_latent_);
  for (std::size_t i = 0; i < decoder_.size(); ++i) conv("vq.decoder." + std::to_string(i), decoder_[i]);
  conv("vq.to_pixels", to_pixels_);
  out.emplace_back("vq.codebook", &codebook_);
  return out;
}

template <typename Scalar>
Var<Scalar> VQTokenizer<Scalar>::apply(Tape<Scalar>& tape, Conv& conv, const Var<Scalar>& x,
                                       ImageLayout& layout) {
  Var<Scalar> cols = x;
  if (conv.kernel != 1 || conv.stride != 1) {
    cols = im2col(x, layout, conv.kernel, conv.stride, conv.pad);
    layout.height = conv_out_size(layout.height, conv.kernel, conv.stride, conv.pad);
    layout.width = conv_out_size(layout.width, conv.kernel, conv.stride, conv.pad);
  }
  return linear(cols, tape.param(conv.weight), tape.param(conv.bias));
}

template <typename Scalar>
Var<Scalar> VQTokenizer<Scalar>::encode_latents(Tape<Scalar>& tape, const Var<Scalar>& images,
                                                ImageLayout layout) {
  Var<Scalar> x = images;
  for (auto& conv : encoder_) x = silu(apply(tape, conv, x, layout));
  return apply(tape, to_latent_, x, layout);
}

template <typename Scalar>
Var<Scalar> VQTokenizer<Scalar>::decode_latents(Tape<Scalar>& tape, const Var<Scalar>& latents,
                                                ImageLayout layout) {
  Var<Scalar> x = silu(apply(tape, from_latent_, latents, layout));
  for (auto& conv : decoder_) {
    x = upsample2x(x, layout);
    layout.height *= 2;
    layout.width *= 2;
    x = silu(apply(tape, conv, x, layout));
  }
  return apply(tape, to_pixels_, x, layout);
}

template <typename Scalar>
void VQTokenizer<Scalar>::check_image(const Image& image) const {
  if (image.empty()) throw UsageError("VQ: empty image");
  if (image.channels() != config_.image_channels) throw UsageError("VQ: channel count mismatch");
  if (image.height % config_.downsample != 0 || image.width % config_.downsample != 0) {
    throw UsageError("VQ: image side not divisible by the downsample factor");
  }
}

template <typename Scalar>
Var<Scalar> VQTokenizer<Scalar>::stack(Tape<Scalar>& tape, std::span<const Image> batch,
                                       ImageLayout& layout) const {
  if (batch.empty()) throw UsageError("VQ: empty batch");
  layout = {static_cast<Index>(batch.size()), batch.front().height, batch.front().width};
  Matrix<Scalar> x(layout.batch * layout.height * layout.width, config_.image_channels);
  Index row = 0;
  for (const auto& img : batch) {
    check_image(img);
    if (img.height != layout.height || img.width != layout.width) throw UsageError("VQ: batch sizes differ");
    x.middleRows(row, img.pixels.rows()) = img.pixels.template cast<Scalar>();
    row += img.pixels.rows();
  }
  return tape.constant(std::move(x));
}

template <typename Scalar>
TokenGrid VQTokenizer<Scalar>::encode_image(const Image& image) {
  Tape<Scalar> tape;
  ImageLayout layout;
  auto x = stack(tape, std::span<const Image>(&image, 1), layout);
  auto z = encode_latents(tape, x, layout);
  TokenGrid grid;
  grid.height = image.height / config_.downsample;
  grid.width = image.width / config_.downsample;
  grid.ids = nearest_codes<Scalar>(z.value(), codebook_.value());
  return grid;
}

template <typename Scalar>
Image VQTokenizer<Scalar>::decode_tokens(const TokenGrid& grid) {
  if (grid.height <= 0 || grid.width <= 0 || static_cast<Index>(grid.ids.size()) != grid.size()) {
    throw UsageError("VQ: malformed token grid");
  }
  Matrix<Scalar> rows(grid.size(), config_.code_dim);
  for (Index i = 0; i < grid.size(); ++i) {
    const int id = grid.ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= config_.codebook_size) throw UsageError("VQ: token id outside codebook");
    rows.row(i) = codebook_.value().row(id);
  }
  Tape<Scalar> tape;
  auto out = decode_latents(tape, tape.constant(std::move(rows)), {1, grid.height, grid.width});
  Image img(grid.height * config_.downsample, grid.width * config_.downsample, config_.image_channels);
  img.pixels = out.value().template cast<float>().cwiseMax(0.0f).cwiseMin(1.0f);
  return img;
}

template <typename Scalar>
VQLossReport VQTokenizer<Scalar>::train_step(std::span<const Image> batch, AdamW<Scalar>& optimizer,
                                             double lr) {
  Tape<Scalar> tape;
  ImageLayout layout;
  auto x = stack(tape, batch, layout);
  auto z = encode_latents(tape, x, layout);
  const ImageLayout grid{layout.batch, layout.height / config_.downsample, layout.width / config_.downsample};
  auto q = quantize(z, codebook_.value());
  auto e = embedding(tape.param(codebook_), std::span<const int>(q.ids));
  auto recon = decode_latents(tape, q.quantized, grid);
  auto terms = vq_loss_terms(x, recon, z, e, config_.beta);
  network_.zero_grad();
  codebook_group_.zero_grad();
  tape.backward(terms.total);
  ParamGroup<Scalar>* groups[] = {&network_, &codebook_group_};
  optimizer.step(std::span<ParamGroup<Scalar>* const>(groups), [lr](const ParamGroup<Scalar>&) { return lr; });
  return {static_cast<double>(terms.recon.value()(0, 0)), static_cast<double>(terms.codebook.value()(0, 0)),
          static_cast<double>(terms.commit.value()(0, 0)), static_cast<double>(terms.total.value()(0, 0))};
}

template <typename Scalar>
VQLossReport VQTokenizer<Scalar>::evaluate(std::span<const Image> batch) {
  Tape<Scalar> tape;
  ImageLayout layout;
  auto x = stack(tape, batch, layout);
  auto z = encode_latents(tape, x, layout);
  const ImageLayout grid{layout.batch, layout.height / config_.downsample, layout.width / config_.downsample};
  auto q = quantize(z, codebook_.value());
  auto e = embedding(tape.constant(codebook_.value()), std::span<const int>(q.ids));
  auto recon = decode_latents(tape, q.quantized, grid);
  auto terms = vq_loss_terms(x, recon, z, e, config_.beta);
  return {static_cast<double>(terms.recon.value()(0, 0)), static_cast<double>(terms.codebook.value()(0, 0)),
          static_cast<double>(terms.commit.value()(0, 0)), static_cast<double>(terms.total.value()(0, 0))};
}

template <typename Scalar>
void VQTokenizer<Scalar>::init_codebook(std::span<const Image> images, Rng& rng) {
  if (images.empty()) throw UsageError("init_codebook: no images");
  Tape<Scalar> tape;
  ImageLayout layout;
  auto x = stack(tape, images, layout);
  const Matrix<Scalar> z = encode_latents(tape, x, layout).value();
  const Index n = z.rows();
  auto& book = codebook_.value();
  Eigen::VectorXd dist = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
  Index pick = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
  for (Index k = 0; k < book.rows(); ++k) {
    book.row(k) = z.row(pick);
    for (Index i = 0; i < n; ++i) dist(i) = std::min(dist(i), static_cast<double>((z.row(i) - book.row(k)).squaredNorm()));
    const double total = dist.sum();
    if (total <= 0.0) {
      // Fewer distinct latents than codes: jitter the remaining entries.
      for (Index r = k + 1; r < book.rows(); ++r) {
        book.row(r) = z.row(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))));
        for (Index c = 0; c < book.cols(); ++c) book(r, c) += static_cast<Scalar>(rng.normal(0.0, 1e-3));
      }
      return;
    }
    double u = rng.uniform() * total;
    pick = n - 1;
    for (Index i = 0; i < n; ++i) {
      u -= dist(i);
      if (u <= 0.0 && dist(i) > 0.0) {
        pick = i;
        break;
      }
    }
  }
}

template <typename Scalar>
std::vector<long> VQTokenizer<Scalar>::code_usage(std::span<const Image> images) {
  std::vector<long> counts(static_cast<std::size_t>(config_.codebook_size), 0);
  for (const auto& img : images) {
    for (int id : encode_image(img).ids) ++counts[static_cast<std::size_t>(id)];
  }
  return counts;
}

template std::vector<int> nearest_codes<float>(const Matrix<float>&, const Matrix<float>&);
template std::vector<int> nearest_codes<double>(const Matrix<double>&, const Matrix<double>&);
template Quantized<float> quantize<float>(const Var<float>&, const Matrix<float>&);
template Quantized<double> quantize<double>(const Var<double>&, const Matrix<double>&);
template VQLossVars<float> vq_loss_terms<float>(const Var<float>&, const Var<float>&, const Var<float>&,
                                                const Var<float>&, double);
template VQLossVars<double> vq_loss_terms<double>(const Var<double>&, const Var<double>&, const Var<double>&,
                                                  const Var<double>&, double);
template class VQTokenizer<float>;
template class VQTokenizer<double>;

}  // namespace unitoken
