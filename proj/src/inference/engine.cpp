#include "unitoken/inference/engine.hpp"

#include <cmath>
#include <limits>

namespace unitoken {

void GenerationConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw UsageError("temperature must be > 0");
  if (!(guidance_scale >= 0.0) || !std::isfinite(guidance_scale)) throw UsageError("guidance scale must be >= 0");
  if (max_new_tokens < 1) throw UsageError("max_new_tokens must be positive");
  if (grid_height < 1 || grid_width < 1) throw UsageError("grid dimensions must be positive");
}

namespace {

Matrix<float> norm_rows(const Matrix<float>& x, LayerNormLayer<float>& ln) {
  const Index n = x.cols();
  Matrix<float> out(x.rows(), n);
  for (Index r = 0; r < x.rows(); ++r) {
    const float mu = x.row(r).mean();
    const auto centered = (x.row(r).array() - mu).matrix();
    const float var = centered.squaredNorm() / static_cast<float>(n);
    out.row(r) = centered * (1.0f / std::sqrt(var + 1e-5f));
  }
  out.array().rowwise() *= ln.gain.value().row(0).array();
  out.rowwise() += ln.bias.value().row(0);
  return out;
}

Matrix<float> apply(const Matrix<float>& x, LinearLayer<float>& l) {
  Matrix<float> out = x * l.weight.value();
  out.rowwise() += l.bias.value().row(0);
  return out;
}

float gelu(float v) { return 0.5f * v * (1.0f + std::erf(v / std::numbers::sqrt2_v<float>)); }

}  // namespace

DecodeSession::DecodeSession(UnifiedLM<float>& model)
    : model_(model), keys_(model.blocks().size()), values_(model.blocks().size()) {
  const Index d = model.config().lm.width;
  for (std::size_t i = 0; i < keys_.size(); ++i) {
    keys_[i].resize(0, d);
    values_[i].resize(0, d);
  }
}

RowVector<float> DecodeSession::advance(const RowVector<float>& input) {
  const auto& cfg = model_.config().lm;
  if (length_ >= cfg.context) throw UsageError("decode session exceeded the context window");
  const Index d = cfg.width;
  const int heads = cfg.heads;
  const Index dh = d / heads;
  const float sc = 1.0f / std::sqrt(static_cast<float>(dh));

  Matrix<float> x = input + model_.positions().value().row(length_);
  for (std::size_t b = 0; b < model_.blocks().size(); ++b) {
    auto& block = model_.blocks()[b];
    const Matrix<float> qkv = apply(norm_rows(x, block.ln1), block.qkv);
    auto& K = keys_[b];
    auto& V = values_[b];
    K.conservativeResize(length_ + 1, Eigen::NoChange);
    V.conservativeResize(length_ + 1, Eigen::NoChange);
    K.row(length_) = qkv.block(0, d, 1, d);
    V.row(length_) = qkv.block(0, 2 * d, 1, d);
    Matrix<float> attn(1, d);
    for (int h = 0; h < heads; ++h) {
      RowVector<float> s = qkv.block(0, h * dh, 1, dh) * K.middleCols(h * dh, dh).transpose();
      s *= sc;
      const float m = s.maxCoeff();
      RowVector<float> p = (s.array() - m).exp().matrix();
      p /= p.sum();
      attn.middleCols(h * dh, dh) = p * V.middleCols(h * dh, dh);
    }
    const Matrix<float> y = x + apply(attn, block.proj);
    Matrix<float> hidden = apply(norm_rows(y, block.ln2), block.fc1);
    hidden = hidden.unaryExpr([](float v) { return gelu(v); });
    x = y + apply(hidden, block.fc2);
  }
  ++length_;
  return apply(norm_rows(x, model_.final_norm()), model_.head()).row(0);
}

RowVector<float> DecodeSession::prefill(const MultimodalSequence& seq, const Matrix<float>& continuous) {
  if (seq.slots.empty()) throw UsageError("prefill: empty sequence");
  RowVector<float> logits;
  const auto& table = model_.token_embedding().value();
  for (const Slot& s : seq.slots) {
    if (s.kind == SlotKind::discrete) {
      if (s.id < 0 || s.id >= table.rows()) throw UsageError("prefill: id outside the vocabulary");
      logits = advance(table.row(s.id));
    } else {
      if (s.cont_row < 0 || s.cont_row >= continuous.rows() || continuous.cols() != table.cols()) {
        throw UsageError("prefill: continuous slot has no matching row");
      }
      logits = advance(continuous.row(s.cont_row));
    }
  }
  return logits;
}

RowVector<float> DecodeSession::step(int id) {
  const auto& table = model_.token_embedding().value();
  if (id < 0 || id >= table.rows()) throw UsageError("step: id outside the vocabulary");
  return advance(table.row(id));
}

AnswerResult answer(UnifiedLM<float>& model, VQTokenizer<float>& tokenizer, const Image& image,
                    const std::string& question, const GenerationConfig& config) {
  if (question.empty()) throw UsageError("answer: empty question");
  if (image.empty()) throw UsageError("answer: empty image");
  if (config.max_new_tokens < 1) throw UsageError("max_new_tokens must be positive");
  const auto& vocab = model.vocab();
  const TokenGrid grid = tokenizer.encode_image(image);
  Matrix<float> cont(0, model.config().lm.width);
  if (model.config().use_continuous) {
    Tape<float> tape;
    cont = model.continuous_features(tape, image).vectors.value();
  }
  const auto prompt = encode_text(question);
  const auto prefix = understanding_prefix(grid, cont.cast<double>(), prompt, vocab);
  const int eos = SpecialVocab::of(vocab).eos;

  DecodeSession session(model);
  RowVector<float> logits = session.prefill(prefix, cont);
  AnswerResult out;
  out.truncated = true;
  for (int n = 0; n < config.max_new_tokens; ++n) {
    Index best = 0;
    logits.maxCoeff(&best);  // first maximum on ties
    const int id = static_cast<int>(best);
    if (id == eos) {
      out.truncated = false;
      break;
    }
    out.ids.push_back(id);
    if (n + 1 < config.max_new_tokens) logits = session.step(id);
  }
  out.text = decode_text(out.ids, vocab);
  return out;
}

std::vector<double> restricted_image_distribution(const Eigen::Matrix<double, 1, Eigen::Dynamic>& logits,
                                                  const JointVocabulary& vocab) {
  if (logits.cols() != vocab.total()) throw UsageError("logits width differs from the vocabulary");
  const Index base = vocab.image_base();
  const auto image = logits.segment(base, vocab.n_image);
  const double m = image.maxCoeff();
  if (!std::isfinite(m)) throw InternalError("non-finite image logits");
  std::vector<double> p(static_cast<std::size_t>(vocab.n_image));
  double total = 0.0;
  for (Index k = 0; k < vocab.n_image; ++k) {
    p[static_cast<std::size_t>(k)] = std::exp(image(k) - m);
    total += p[static_cast<std::size_t>(k)];
  }
  for (auto& v : p) v /= total;
  return p;
}

GenerationResult generate_image(UnifiedLM<float>& model, VQTokenizer<float>& tokenizer, const std::string& prompt,
                                const GenerationConfig& config, bool trace) {
  config.validate();
  const auto& vocab = model.vocab();
  if (tokenizer.config().codebook_size != vocab.n_image) throw UsageError("tokenizer and model vocabularies differ");
  const auto cond_ids = encode_text(prompt);
  const std::vector<int> none;
  const Matrix<float> no_cont(0, model.config().lm.width);

  DecodeSession cond(model), uncond(model);
  RowVector<float> lc = cond.prefill(generation_prefix(cond_ids, vocab), no_cont);
  RowVector<float> lu = uncond.prefill(generation_prefix(none, vocab), no_cont);

  Rng rng(config.seed);
  GenerationResult out;
  out.grid.height = config.grid_height;
  out.grid.width = config.grid_width;
  const Index n = config.grid_height * config.grid_width;
  for (Index i = 0; i < n; ++i) {
    Eigen::Matrix<double, 1, Eigen::Dynamic> combined;
    switch (config.branch) {
      case Branch::cfg: combined = cfg_logits(lc, lu, config.guidance_scale); break;
      case Branch::conditional_only: combined = lc.cast<double>(); break;
      case Branch::unconditional_only: combined = lu.cast<double>(); break;
    }
    int code = 0;
    if (config.mode == DecodeMode::greedy) {
      Index best = 0;
      combined.segment(vocab.image_base(), vocab.n_image).maxCoeff(&best);
      code = static_cast<int>(best);
      if (trace) out.step_probs.push_back(restricted_image_distribution(combined, vocab));
    } else {
      combined /= config.temperature;
      const auto p = restricted_image_distribution(combined, vocab);
      const double u = rng.uniform();
      double acc = 0.0;
      code = vocab.n_image - 1;
      for (int k = 0; k < vocab.n_image; ++k) {
        acc += p[static_cast<std::size_t>(k)];
        if (u < acc) {
          code = k;
          break;
        }
      }
      if (trace) out.step_probs.push_back(p);
    }
    const int id = vocab.image_base() + code;
    if (!vocab.is_image(id)) throw InternalError("sampled id outside the image range");
    out.grid.ids.push_back(code);
    if (i + 1 < n) {
      lc = cond.step(id);
      lu = uncond.step(id);
    }
  }
  out.image = tokenizer.decode_tokens(out.grid);
  return out;
}

}  // namespace unitoken
