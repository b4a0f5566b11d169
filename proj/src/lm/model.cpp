#include "unitoken/lm/model.hpp"

#include <cmath>
#include <memory>

namespace unitoken {

void LMConfig::validate() const {
  if (width <= 0 || heads <= 0 || width % heads != 0) throw UsageError("LMConfig: width must divide into heads");
  if (blocks < 1 || context < 2 || mlp_ratio < 1) throw UsageError("LMConfig: invalid size");
  if (vocab.n_text < 1 || vocab.n_special < 7 || vocab.n_image < 2) throw UsageError("LMConfig: invalid vocabulary");
}

template <typename Scalar>
UnifiedLM<Scalar>::UnifiedLM(ModelConfig config, std::uint64_t seed)
    : config_((config.lm.validate(), std::move(config))),
      init_rng_(seed),
      token_embedding_({config_.lm.vocab.total(), config_.lm.width}),
      positions_({config_.lm.context, config_.lm.width}),
      final_norm_(config_.lm.width),
      head_(config_.lm.width, config_.lm.vocab.total(), init_rng_, 0.02),
      vit_(config_.vit, init_rng_),
      adapter_(config_.vit.width, config_.lm.width, init_rng_) {
  fill_normal(token_embedding_, init_rng_, 0.02);
  fill_normal(positions_, init_rng_, 0.02);
  for (int i = 0; i < config_.lm.blocks; ++i) {
    blocks_.emplace_back(config_.lm.width, config_.lm.width * config_.lm.mlp_ratio, config_.lm.blocks, init_rng_);
  }
  llm_.name = "llm";
  vit_group_.name = "vit";
  adapter_group_.name = "adapter";
  for (auto& [name, t] : named_tensors()) {
    if (name.starts_with("vit.")) {
      vit_group_.params.emplace_back(name, t);
    } else if (name.starts_with("adapter.")) {
      adapter_group_.params.emplace_back(name, t);
    } else {
      llm_.params.emplace_back(name, t);
    }
  }
}

template <typename Scalar>
ParamGroup<Scalar>& UnifiedLM<Scalar>::group(const std::string& name) {
  if (name == "llm") return llm_;
  if (name == "vit") return vit_group_;
  if (name == "adapter") return adapter_group_;
  throw UsageError("unknown parameter group '" + name + "'");
}

template <typename Scalar>
NamedTensors<Scalar> UnifiedLM<Scalar>::named_tensors() {
  NamedTensors<Scalar> out;
  out.emplace_back("llm.token_embedding", &token_embedding_);
  out.emplace_back("llm.positions", &positions_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect("llm.blocks." + std::to_string(i), out);
  final_norm_.collect("llm.final_norm", out);
  head_.collect("llm.head", out);
  vit_.collect("vit", out);
  adapter_.collect("adapter", out);
  return out;
}

template <typename Scalar>
Index UnifiedLM<Scalar>::parameter_count() {
  Index n = 0;
  for (auto& [_, t] : named_tensors()) n += t->size();
  return n;
}

template <typename Scalar>
void UnifiedLM<Scalar>::zero_grad() {
  for (auto* g : groups()) g->zero_grad();
}

template <typename Scalar>
PatchEmbeddingSeq<Scalar> UnifiedLM<Scalar>::continuous_features(Tape<Scalar>& tape, const Image& image) {
  if (image.empty()) throw UsageError("continuous_features: degenerate image");
  const double aspect = static_cast<double>(image.width) / static_cast<double>(image.height);
  const GridConfig grid = select_grid(aspect, config_.scaleup);
  auto features = encode_continuous(tape, image, grid, vit_);
  return adapt(tape, features, adapter_);
}

template <typename Scalar>
Var<Scalar> UnifiedLM<Scalar>::embed_slots(Tape<Scalar>& tape, const MultimodalSequence& seq,
                                           const Var<Scalar>& continuous) {
  const Index t_len = seq.length();
  if (t_len == 0) throw UsageError("embed_slots: empty sequence");
  if (t_len > config_.lm.context) throw UsageError("sequence longer than the context window");
  std::vector<int> ids, id_rows;
  std::vector<int> cont_rows_at;  // output row for each continuous source row
  Index n_cont = 0;
  for (Index t = 0; t < t_len; ++t) {
    const Slot& s = seq.slots[static_cast<std::size_t>(t)];
    if (s.kind == SlotKind::discrete) {
      ids.push_back(s.id);
      id_rows.push_back(static_cast<int>(t));
    } else {
      ++n_cont;
    }
  }
  auto table = tape.param(token_embedding_);
  Var<Scalar> x;
  if (n_cont == 0) {
    x = embedding(table, std::span<const int>(ids));
  } else {
    Var<Scalar> cont = continuous;
    if (!cont.valid()) cont = tape.constant(seq.continuous.template cast<Scalar>());
    if (cont.cols() != config_.lm.width) throw UsageError("continuous slot width differs from LM width");
    if (cont.rows() != n_cont) throw UsageError("continuous rows do not match continuous slots");
    cont_rows_at.assign(static_cast<std::size_t>(n_cont), -1);
    for (Index t = 0; t < t_len; ++t) {
      const Slot& s = seq.slots[static_cast<std::size_t>(t)];
      if (s.kind != SlotKind::continuous) continue;
      if (s.cont_row < 0 || s.cont_row >= n_cont || cont_rows_at[static_cast<std::size_t>(s.cont_row)] != -1) {
        throw UsageError("continuous slots must reference each row exactly once");
      }
      cont_rows_at[static_cast<std::size_t>(s.cont_row)] = static_cast<int>(t);
    }
    auto disc = embedding(table, std::span<const int>(ids));
    x = merge_rows(disc, std::span<const int>(id_rows), cont, std::span<const int>(cont_rows_at), t_len);
  }
  return add(x, slice_rows(tape.param(positions_), 0, t_len));
}

template <typename Scalar>
Var<Scalar> UnifiedLM<Scalar>::forward(Tape<Scalar>& tape, const MultimodalSequence& seq,
                                       const Var<Scalar>& continuous) {
  auto x = embed_slots(tape, seq, continuous);
  for (auto& block : blocks_) x = block(tape, x, config_.lm.heads, true);
  return head_(tape, final_norm_(tape, x));
}

template <typename Scalar>
LossReport<Scalar> UnifiedLM<Scalar>::lm_loss(Tape<Scalar>& tape, const MultimodalSequence& seq,
                                              const Var<Scalar>& continuous) {
  const Index t_len = seq.length();
  if (t_len < 2) throw UsageError("lm_loss: sequence too short");
  const int pad = SpecialVocab::of(vocab()).pad;
  std::vector<int> targets(static_cast<std::size_t>(t_len - 1));
  const auto mask = std::make_unique<bool[]>(static_cast<std::size_t>(t_len - 1));
  for (Index t = 0; t + 1 < t_len; ++t) {
    const Slot& next = seq.slots[static_cast<std::size_t>(t + 1)];
    targets[static_cast<std::size_t>(t)] = next.kind == SlotKind::discrete ? next.id : pad;
    mask[static_cast<std::size_t>(t)] = next.loss_masked && next.kind == SlotKind::discrete;
  }
  const std::span<const bool> mask_span(mask.get(), static_cast<std::size_t>(t_len - 1));

  auto logits = forward(tape, seq, continuous);
  auto scored = slice_rows(logits, 0, t_len - 1);
  auto ce = masked_cross_entropy(scored, std::span<const int>(targets), mask_span);
  if (ce.count == 0) throw UsageError("lm_loss: no masked targets");

  LossReport<Scalar> report;
  report.loss = ce.loss;
  report.value = static_cast<double>(ce.loss.value()(0, 0));
  report.count = ce.count;
  const auto& lv = scored.value();
  for (Index t = 0; t + 1 < t_len; ++t) {
    if (!mask_span[static_cast<std::size_t>(t)]) continue;
    const Scalar m = lv.row(t).maxCoeff();
    const double lse = static_cast<double>(m + std::log((lv.row(t).array() - m).exp().sum()));
    auto& entry = report.breakdown[seq.slots[static_cast<std::size_t>(t + 1)].segment];
    entry.sum += lse - static_cast<double>(lv(t, targets[static_cast<std::size_t>(t)]));
    ++entry.count;
  }
  return report;
}

template class UnifiedLM<float>;
template class UnifiedLM<double>;

}  // namespace unitoken
