#include <gtest/gtest.h>

#include "unitoken/core/error.hpp"
#include "unitoken/core/rng.hpp"
#include "unitoken/sequence/codec.hpp"

namespace unitoken {
namespace {

const JointVocabulary kVocab{};

TokenGrid grid_of(int h, int w, Rng& rng) {
  TokenGrid g{h, w, {}};
  for (int i = 0; i < h * w; ++i) g.ids.push_back(static_cast<int>(rng.below(64)));
  return g;
}

std::vector<int> text_of(int n, Rng& rng) {
  std::vector<int> out;
  for (int i = 0; i < n; ++i) out.push_back(static_cast<int>(rng.below(256)));
  return out;
}

TEST(Vocabulary, RangesAreDisjointAndCover) {
  EXPECT_EQ(kVocab.total(), 327);
  for (int id = 0; id < kVocab.total(); ++id) {
    EXPECT_EQ(kVocab.is_text(id) + kVocab.is_special(id) + kVocab.is_image(id), 1) << id;
  }
  EXPECT_FALSE(kVocab.is_text(-1));
  EXPECT_FALSE(kVocab.is_image(327));
  EXPECT_EQ(kVocab.code_of(kVocab.image_id(17)), 17);
  EXPECT_THROW(kVocab.image_id(64), UsageError);
  EXPECT_THROW(kVocab.code_of(5), UsageError);
  const auto sp = SpecialVocab::of(kVocab);
  const int specials[] = {sp.bos, sp.eos, sp.boi, sp.eoi, sp.sep, sp.uncond, sp.pad};
  for (int i = 0; i < 7; ++i) {
    EXPECT_TRUE(kVocab.is_special(specials[i]));
    for (int j = 0; j < i; ++j) EXPECT_NE(specials[i], specials[j]);
  }
}

TEST(TextCodec, BytesRoundTrip) {
  const std::string s = "what color is the square?";
  const auto ids = encode_text(s);
  EXPECT_EQ(ids.size(), s.size());
  EXPECT_EQ(decode_text(ids, kVocab), s);
  std::vector<int> mixed = ids;
  mixed.insert(mixed.begin() + 3, kVocab.image_id(2));
  EXPECT_EQ(decode_text(mixed, kVocab), s);
}

TEST(AssembleUnderstanding, LengthOrderAndMask) {
  Rng rng(1);
  const auto grid = grid_of(4, 4, rng);
  const Matrix<double> cont = Matrix<double>::Random(9, 6);
  const auto prompt = text_of(5, rng), answer = text_of(3, rng);
  const auto seq = assemble_understanding(grid, cont, prompt, answer, kVocab);
  const auto sp = SpecialVocab::of(kVocab);
  ASSERT_EQ(seq.length(), 38);
  EXPECT_EQ(seq.masked_count(), 4);
  EXPECT_EQ(seq.continuous_count(), 9);
  EXPECT_EQ(seq.slots[0].id, sp.bos);
  EXPECT_EQ(seq.slots[1].id, sp.boi);
  EXPECT_EQ(seq.slots[18].id, sp.sep);
  EXPECT_EQ(seq.slots[28].id, sp.eoi);
  EXPECT_EQ(seq.slots[37].id, sp.eos);
  for (int i = 0; i < 16; ++i) EXPECT_EQ(seq.slots[2 + i].id, kVocab.image_id(grid.ids[static_cast<std::size_t>(i)]));
  for (int i = 0; i < 9; ++i) {
    const auto& s = seq.slots[19 + i];
    EXPECT_EQ(s.kind, SlotKind::continuous);
    EXPECT_EQ(s.cont_row, i);
    EXPECT_FALSE(s.loss_masked);
  }
  const auto mask = seq.mask();
  for (int i = 0; i < 38; ++i) EXPECT_EQ(mask[static_cast<std::size_t>(i)], i >= 34) << i;
  EXPECT_EQ(build_loss_mask(seq, Task::understanding, kVocab), mask);
  EXPECT_NO_THROW(check_vocab_ranges(seq, kVocab));
}

TEST(AssembleUnderstanding, EmptyAnswerIsUsageError) {
  Rng rng(2);
  EXPECT_THROW(assemble_understanding(grid_of(2, 2, rng), Matrix<double>(), text_of(2, rng), {}, kVocab),
               UsageError);
}

TEST(AssembleUnderstanding, DiscreteOnlyKeepsSeparator) {
  Rng rng(3);
  const auto seq = assemble_understanding(grid_of(2, 2, rng), Matrix<double>(), text_of(2, rng),
                                          text_of(1, rng), kVocab);
  EXPECT_EQ(seq.length(), 1 + 1 + 4 + 1 + 1 + 2 + 1 + 1);
  EXPECT_EQ(seq.continuous_count(), 0);
  EXPECT_EQ(seq.slots[6].id, SpecialVocab::of(kVocab).sep);
}

TEST(AssembleGeneration, LengthAndMask) {
  Rng rng(4);
  const auto grid = grid_of(4, 4, rng);
  const auto prompt = text_of(4, rng);
  const auto seq = assemble_generation(prompt, grid, kVocab);
  EXPECT_EQ(seq.slots, assemble_generation(prompt, grid, kVocab).slots);
  EXPECT_EQ(seq.length(), 24);
  EXPECT_EQ(seq.masked_count(), 18);
  EXPECT_EQ(seq.continuous_count(), 0);
  const auto mask = seq.mask();
  for (int i = 0; i < 24; ++i) EXPECT_EQ(mask[static_cast<std::size_t>(i)], i >= 6) << i;
  EXPECT_EQ(build_loss_mask(seq, Task::generation, kVocab), mask);
}

TEST(AssembleGeneration, EmptyPromptUsesUncond) {
  Rng rng(5);
  const auto seq = assemble_generation({}, grid_of(4, 4, rng), kVocab);
  EXPECT_EQ(seq.length(), 21);
  EXPECT_EQ(seq.slots[1].id, SpecialVocab::of(kVocab).uncond);
  EXPECT_TRUE(parse(seq, kVocab).prompt.empty());
  const auto prefix = generation_prefix({}, kVocab);
  EXPECT_EQ(prefix.length(), 3);
  EXPECT_EQ(prefix.slots[1].id, SpecialVocab::of(kVocab).uncond);
}

TEST(Parse, RoundTripsRandomSequences) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const int h = 1 + static_cast<int>(rng.below(5)), w = 1 + static_cast<int>(rng.below(5));
    const auto grid = grid_of(h, w, rng);
    const auto prompt = text_of(static_cast<int>(rng.below(6)), rng);
    if (trial % 2 == 0) {
      Matrix<double> cont = Matrix<double>::Random(static_cast<Index>(rng.below(10)), 4);
      const auto answer = text_of(1 + static_cast<int>(rng.below(4)), rng);
      const auto seq = assemble_understanding(grid, cont, prompt, answer, kVocab);
      const auto p = parse(seq, kVocab);
      EXPECT_EQ(p.task, Task::understanding);
      EXPECT_EQ(p.image_codes, grid.ids);
      EXPECT_EQ(p.continuous, cont);
      EXPECT_EQ(p.prompt, prompt);
      EXPECT_EQ(p.answer, answer);
    } else {
      const auto seq = assemble_generation(prompt, grid, kVocab);
      const auto p = parse(seq, kVocab);
      EXPECT_EQ(p.task, Task::generation);
      EXPECT_EQ(p.image_codes, grid.ids);
      EXPECT_EQ(p.prompt, prompt);
      EXPECT_TRUE(p.answer.empty());
    }
  }
}

TEST(Parse, MissingSeparatorNamesPosition) {
  Rng rng(7);
  auto seq = assemble_understanding(grid_of(4, 4, rng), Matrix<double>::Random(9, 4), text_of(5, rng),
                                    text_of(3, rng), kVocab);
  seq.slots.erase(seq.slots.begin() + 18);
  try {
    parse(seq, kVocab);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.position(), 18u);
  }
}

TEST(Parse, StructuralViolations) {
  Rng rng(8);
  const auto good = assemble_generation(text_of(3, rng), grid_of(2, 2, rng), kVocab);
  auto no_bos = good;
  no_bos.slots.erase(no_bos.slots.begin());
  EXPECT_THROW(parse(no_bos, kVocab), ParseError);
  auto trailing = good;
  trailing.slots.push_back(good.slots.back());
  EXPECT_THROW(parse(trailing, kVocab), ParseError);
  auto truncated = good;
  truncated.slots.pop_back();
  EXPECT_THROW(parse(truncated, kVocab), ParseError);
}

TEST(CheckVocabRanges, RejectsOutOfRangeIds) {
  Rng rng(9);
  auto seq = assemble_generation(text_of(3, rng), grid_of(2, 2, rng), kVocab);
  seq.slots[6].id = 12;  // text id in an image slot
  try {
    check_vocab_ranges(seq, kVocab);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.position(), 6u);
  }
}

TEST(BuildLossMask, UnlabeledSlotIsUsageError) {
  MultimodalSequence seq;
  seq.slots.push_back(Slot{});
  EXPECT_THROW(build_loss_mask(seq, Task::generation, kVocab), UsageError);
}

}  // namespace
}  // namespace unitoken
