#include "unitoken/sequence/codec.hpp"

namespace unitoken {

int JointVocabulary::image_id(int code) const {
  if (code < 0 || code >= n_image) throw UsageError("image code outside codebook");
  return image_base() + code;
}

int JointVocabulary::code_of(int id) const {
  if (!is_image(id)) throw UsageError("id is not an image token");
  return id - image_base();
}

SpecialVocab SpecialVocab::of(const JointVocabulary& vocab) {
  if (vocab.n_special < 7) throw UsageError("vocabulary needs 7 special tokens");
  const int b = vocab.special_base();
  return {b, b + 1, b + 2, b + 3, b + 4, b + 5, b + 6};
}

const char* segment_name(Segment s) {
  switch (s) {
    case Segment::unlabeled: return "unlabeled";
    case Segment::special: return "special";
    case Segment::image_d: return "image_d";
    case Segment::image_c: return "image_c";
    case Segment::prompt_text: return "prompt_text";
    case Segment::answer_text: return "answer_text";
    case Segment::gen_image: return "gen_image";
  }
  return "?";
}

std::vector<bool> MultimodalSequence::mask() const {
  std::vector<bool> m(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) m[i] = slots[i].loss_masked;
  return m;
}

Index MultimodalSequence::masked_count() const {
  Index n = 0;
  for (const auto& s : slots) n += s.loss_masked ? 1 : 0;
  return n;
}

Index MultimodalSequence::continuous_count() const {
  Index n = 0;
  for (const auto& s : slots) n += s.kind == SlotKind::continuous ? 1 : 0;
  return n;
}

std::vector<int> encode_text(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(static_cast<unsigned char>(c));
  return ids;
}

std::string decode_text(std::span<const int> ids, const JointVocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (vocab.is_text(id) && id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

namespace {

Slot discrete(int id, Segment seg, bool masked = false) {
  return Slot{SlotKind::discrete, id, -1, seg, masked};
}

void require_text(std::span<const int> ids, const JointVocabulary& vocab, const char* what) {
  for (int id : ids) {
    if (!vocab.is_text(id)) throw UsageError(std::string(what) + " contains a non-text id");
  }
}

void push_image_block(MultimodalSequence& seq, const TokenGrid& grid, const Matrix<double>& continuous,
                      const JointVocabulary& vocab, const SpecialVocab& sp) {
  if (static_cast<Index>(grid.ids.size()) != grid.size()) throw UsageError("token grid size mismatch");
  seq.slots.push_back(discrete(sp.boi, Segment::special));
  for (int code : grid.ids) seq.slots.push_back(discrete(vocab.image_id(code), Segment::image_d));
  seq.slots.push_back(discrete(sp.sep, Segment::special));
  for (Index r = 0; r < continuous.rows(); ++r) {
    seq.slots.push_back(Slot{SlotKind::continuous, -1, r, Segment::image_c, false});
  }
  seq.continuous = continuous;
  seq.slots.push_back(discrete(sp.eoi, Segment::special));
}

void push_prompt(MultimodalSequence& seq, std::span<const int> prompt, const SpecialVocab& sp) {
  if (prompt.empty()) {
    seq.slots.push_back(discrete(sp.uncond, Segment::prompt_text));
  } else {
    for (int id : prompt) seq.slots.push_back(discrete(id, Segment::prompt_text));
  }
}

}  // namespace

MultimodalSequence understanding_prefix(const TokenGrid& grid, const Matrix<double>& continuous,
                                        std::span<const int> prompt, const JointVocabulary& vocab) {
  require_text(prompt, vocab, "prompt");
  const auto sp = SpecialVocab::of(vocab);
  MultimodalSequence seq;
  seq.task = Task::understanding;
  seq.slots.push_back(discrete(sp.bos, Segment::special));
  push_image_block(seq, grid, continuous, vocab, sp);
  for (int id : prompt) seq.slots.push_back(discrete(id, Segment::prompt_text));
  return seq;
}

MultimodalSequence assemble_understanding(const TokenGrid& grid, const Matrix<double>& continuous,
                                          std::span<const int> prompt, std::span<const int> answer,
                                          const JointVocabulary& vocab) {
  if (answer.empty()) throw UsageError("assemble_understanding: empty answer");
  require_text(answer, vocab, "answer");
  auto seq = understanding_prefix(grid, continuous, prompt, vocab);
  for (int id : answer) seq.slots.push_back(discrete(id, Segment::answer_text, true));
  seq.slots.push_back(discrete(SpecialVocab::of(vocab).eos, Segment::special, true));
  return seq;
}

MultimodalSequence generation_prefix(std::span<const int> prompt, const JointVocabulary& vocab) {
  require_text(prompt, vocab, "prompt");
  const auto sp = SpecialVocab::of(vocab);
  MultimodalSequence seq;
  seq.task = Task::generation;
  seq.continuous.resize(0, 0);
  seq.slots.push_back(discrete(sp.bos, Segment::special));
  push_prompt(seq, prompt, sp);
  seq.slots.push_back(discrete(sp.boi, Segment::special));
  return seq;
}

MultimodalSequence assemble_generation(std::span<const int> prompt, const TokenGrid& target,
                                       const JointVocabulary& vocab) {
  if (static_cast<Index>(target.ids.size()) != target.size() || target.size() == 0) {
    throw UsageError("assemble_generation: invalid target grid");
  }
  auto seq = generation_prefix(prompt, vocab);
  const auto sp = SpecialVocab::of(vocab);
  for (int code : target.ids) seq.slots.push_back(discrete(vocab.image_id(code), Segment::gen_image, true));
  seq.slots.push_back(discrete(sp.eoi, Segment::special, true));
  seq.slots.push_back(discrete(sp.eos, Segment::special, true));
  return seq;
}

namespace {

class Cursor {
 public:
  Cursor(const MultimodalSequence& seq, const JointVocabulary& vocab)
      : seq_(seq), vocab_(vocab), sp_(SpecialVocab::of(vocab)) {}

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ >= seq_.slots.size(); }
  const Slot* peek() const { return done() ? nullptr : &seq_.slots[pos_]; }
  const SpecialVocab& sp() const { return sp_; }

  bool at_discrete(int id) const {
    const Slot* s = peek();
    return s && s->kind == SlotKind::discrete && s->id == id;
  }

  void expect(int id, const char* name) {
    if (!at_discrete(id)) throw ParseError(pos_, std::string("expected ") + name);
    ++pos_;
  }

  void advance() { ++pos_; }

 private:
  const MultimodalSequence& seq_;
  const JointVocabulary& vocab_;
  SpecialVocab sp_;
  std::size_t pos_ = 0;
};

}  // namespace

ParsedSequence parse(const MultimodalSequence& seq, const JointVocabulary& vocab) {
  ParsedSequence out;
  out.task = seq.task;
  Cursor cur(seq, vocab);
  const auto& sp = cur.sp();
  cur.expect(sp.bos, "BOS");

  auto read_image_ids = [&](Segment seg) {
    while (const Slot* s = cur.peek()) {
      if (s->kind != SlotKind::discrete || !vocab.is_image(s->id)) break;
      if (s->segment != seg) throw ParseError(cur.pos(), "image token with wrong segment label");
      out.image_codes.push_back(vocab.code_of(s->id));
      cur.advance();
    }
  };

  if (seq.task == Task::understanding) {
    cur.expect(sp.boi, "BOI");
    read_image_ids(Segment::image_d);
    cur.expect(sp.sep, "SEP");
    std::vector<Index> rows;
    while (const Slot* s = cur.peek()) {
      if (s->kind != SlotKind::continuous) break;
      if (s->cont_row < 0 || s->cont_row >= seq.continuous.rows()) {
        throw ParseError(cur.pos(), "continuous slot references a missing row");
      }
      rows.push_back(s->cont_row);
      cur.advance();
    }
    out.continuous.resize(static_cast<Index>(rows.size()), seq.continuous.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.continuous.row(static_cast<Index>(i)) = seq.continuous.row(rows[i]);
    cur.expect(sp.eoi, "EOI");
    while (const Slot* s = cur.peek()) {
      if (s->kind != SlotKind::discrete || !vocab.is_text(s->id)) break;
      if (s->segment == Segment::prompt_text) {
        if (!out.answer.empty()) throw ParseError(cur.pos(), "prompt text after answer");
        out.prompt.push_back(s->id);
      } else if (s->segment == Segment::answer_text) {
        out.answer.push_back(s->id);
      } else {
        throw ParseError(cur.pos(), "text token with wrong segment label");
      }
      cur.advance();
    }
    cur.expect(sp.eos, "EOS");
  } else {
    if (cur.at_discrete(sp.uncond)) {
      cur.advance();
    } else {
      while (const Slot* s = cur.peek()) {
        if (s->kind != SlotKind::discrete || !vocab.is_text(s->id)) break;
        out.prompt.push_back(s->id);
        cur.advance();
      }
      if (out.prompt.empty()) throw ParseError(cur.pos(), "expected prompt or UNCOND");
    }
    cur.expect(sp.boi, "BOI");
    read_image_ids(Segment::gen_image);
    cur.expect(sp.eoi, "EOI");
    cur.expect(sp.eos, "EOS");
  }
  if (!cur.done()) throw ParseError(cur.pos(), "trailing slots after EOS");
  return out;
}

std::vector<bool> build_loss_mask(const MultimodalSequence& seq, Task task, const JointVocabulary& vocab) {
  const auto sp = SpecialVocab::of(vocab);
  std::vector<bool> mask(seq.slots.size(), false);
  for (std::size_t i = 0; i < seq.slots.size(); ++i) {
    const Slot& s = seq.slots[i];
    if (s.segment == Segment::unlabeled) throw UsageError("build_loss_mask: unlabeled slot " + std::to_string(i));
    if (s.kind == SlotKind::continuous) continue;
    if (task == Task::understanding) {
      mask[i] = s.segment == Segment::answer_text || (s.segment == Segment::special && s.id == sp.eos);
    } else {
      mask[i] = s.segment == Segment::gen_image ||
                (s.segment == Segment::special && (s.id == sp.eoi || s.id == sp.eos));
    }
  }
  return mask;
}

void check_vocab_ranges(const MultimodalSequence& seq, const JointVocabulary& vocab) {
  const auto sp = SpecialVocab::of(vocab);
  for (std::size_t i = 0; i < seq.slots.size(); ++i) {
    const Slot& s = seq.slots[i];
    if (s.kind == SlotKind::continuous) {
      if (s.segment != Segment::image_c || s.loss_masked) throw ParseError(i, "bad continuous slot");
      continue;
    }
    bool ok = false;
    switch (s.segment) {
      case Segment::special: ok = vocab.is_special(s.id); break;
      case Segment::image_d:
      case Segment::gen_image: ok = vocab.is_image(s.id); break;
      case Segment::prompt_text: ok = vocab.is_text(s.id) || s.id == sp.uncond; break;
      case Segment::answer_text: ok = vocab.is_text(s.id); break;
      default: ok = false;
    }
    if (!ok) throw ParseError(i, std::string("id outside the ") + segment_name(s.segment) + " range");
  }
}

}  // namespace unitoken
