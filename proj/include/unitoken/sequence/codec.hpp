#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "unitoken/autodiff/tensor.hpp"
#include "unitoken/vq/token_grid.hpp"

namespace unitoken {

enum class Task { understanding, generation };

/// Contiguous id layout [text | special | image codes] shared by the token
/// embedding table and the prediction head.
struct JointVocabulary {
  int n_text = 256;
  int n_special = 7;
  int n_image = 64;

  int total() const { return n_text + n_special + n_image; }
  int special_base() const { return n_text; }
  int image_base() const { return n_text + n_special; }

  bool is_text(int id) const { return id >= 0 && id < n_text; }
  bool is_special(int id) const { return id >= special_base() && id < image_base(); }
  bool is_image(int id) const { return id >= image_base() && id < total(); }

  int image_id(int code) const;
  int code_of(int id) const;

  bool operator==(const JointVocabulary&) const = default;
};

struct SpecialVocab {
  int bos, eos, boi, eoi, sep, uncond, pad;

  static SpecialVocab of(const JointVocabulary& vocab);
};

enum class SlotKind { discrete, continuous };

enum class Segment { unlabeled, special, image_d, image_c, prompt_text, answer_text, gen_image };

const char* segment_name(Segment s);

struct Slot {
  SlotKind kind = SlotKind::discrete;
  int id = -1;           // discrete only
  Index cont_row = -1;   // continuous only: row of MultimodalSequence::continuous
  Segment segment = Segment::unlabeled;
  bool loss_masked = false;

  bool operator==(const Slot&) const = default;
};

/// One training or inference sequence. Continuous slots reference rows of
/// `continuous` (LM width) and are never loss targets.
struct MultimodalSequence {
  std::vector<Slot> slots;
  Task task = Task::understanding;
  Matrix<double> continuous;

  Index length() const { return static_cast<Index>(slots.size()); }
  std::vector<bool> mask() const;
  Index masked_count() const;
  Index continuous_count() const;
};

/// Byte-level text tokenizer: ids 0..255 are bytes.
std::vector<int> encode_text(std::string_view text);
/// Drops any non-text id.
std::string decode_text(std::span<const int> ids, const JointVocabulary& vocab);

/// BOS BOI {image_d} SEP {image_c} EOI {prompt} {answer} EOS, with the loss
/// mask on the answer and the final EOS. `continuous` may have zero rows
/// (discrete-only encoding); SEP is still emitted.
MultimodalSequence assemble_understanding(const TokenGrid& grid, const Matrix<double>& continuous,
                                          std::span<const int> prompt, std::span<const int> answer,
                                          const JointVocabulary& vocab);

/// The understanding layout up to and including the prompt, for decoding.
MultimodalSequence understanding_prefix(const TokenGrid& grid, const Matrix<double>& continuous,
                                        std::span<const int> prompt, const JointVocabulary& vocab);

/// BOS {prompt | UNCOND} BOI {image_d} EOI EOS, with the loss mask on the
/// image tokens, EOI and EOS. An empty prompt becomes a single UNCOND slot.
MultimodalSequence assemble_generation(std::span<const int> prompt, const TokenGrid& target,
                                       const JointVocabulary& vocab);

/// BOS {prompt | UNCOND} BOI, for decoding.
MultimodalSequence generation_prefix(std::span<const int> prompt, const JointVocabulary& vocab);

struct ParsedSequence {
  Task task = Task::understanding;
  std::vector<int> image_codes;   // codebook indices (joint offset removed)
  Matrix<double> continuous;
  std::vector<int> prompt;        // empty for an UNCOND generation prompt
  std::vector<int> answer;        // understanding only

  bool operator==(const ParsedSequence& o) const {
    return task == o.task && image_codes == o.image_codes && continuous == o.continuous &&
           prompt == o.prompt && answer == o.answer;
  }
};

/// Inverse of the assemblers. Throws ParseError at the first slot that breaks
/// the layout.
ParsedSequence parse(const MultimodalSequence& seq, const JointVocabulary& vocab);

/// Recomputes the loss mask from segment labels alone.
std::vector<bool> build_loss_mask(const MultimodalSequence& seq, Task task, const JointVocabulary& vocab);

/// Checks that every discrete id lies in its segment's vocabulary range and
/// that continuous slots are unmasked. Throws ParseError on the first violation.
void check_vocab_ranges(const MultimodalSequence& seq, const JointVocabulary& vocab);

}  // namespace unitoken
