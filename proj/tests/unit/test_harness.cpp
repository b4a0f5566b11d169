#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "unitoken/harness/ablation.hpp"
#include "unitoken/harness/scenes.hpp"

namespace unitoken {
namespace {

std::vector<SceneObject> sorted(std::vector<SceneObject> v) {
  std::sort(v.begin(), v.end(), [](const SceneObject& a, const SceneObject& b) { return a.cell < b.cell; });
  return v;
}

TEST(Scenes, DetectInvertsRenderForOneAndTwoObjects) {
  int checked = 0;
  for (int s1 = 0; s1 < kShapeCount; ++s1) {
    for (int c1 = 0; c1 < kColorCount; ++c1) {
      for (int p1 = 0; p1 < kCells; ++p1) {
        const SceneObject a{static_cast<ShapeKind>(s1), static_cast<Color>(c1), p1};
        ASSERT_EQ(detect(render(Scene{{a}, {}})), std::vector<SceneObject>{a});
        ++checked;
        for (int s2 = s1 + 1; s2 < kShapeCount; ++s2) {
          for (int c2 = 0; c2 < kColorCount; ++c2) {
            for (int p2 = 0; p2 < kCells; ++p2) {
              if (p2 == p1) continue;
              const SceneObject b{static_cast<ShapeKind>(s2), static_cast<Color>(c2), p2};
              const auto objs = sorted({a, b});
              ASSERT_EQ(detect(render(Scene{objs, {}})), objs);
              ++checked;
            }
          }
        }
      }
    }
  }
  EXPECT_EQ(checked, 162 + 3 * 36 * 72);
}

TEST(Scenes, DetectInvertsRenderForRandomScenes) {
  Rng rng(1);
  for (int i = 0; i < 3000; ++i) {
    const auto scene = random_scene(rng, 3);
    ASSERT_EQ(detect(render(scene)), scene.objects) << caption(scene);
  }
}

TEST(Scenes, BlankImageHasNoObjects) {
  EXPECT_TRUE(detect(Image(kSceneSide, kSceneSide)).empty());
  Scene empty;
  EXPECT_EQ(score_generation(empty, Image(kSceneSide, kSceneSide)).attribute, 1.0);
}

TEST(Scenes, RandomScenesRespectConstraints) {
  Rng rng(2);
  std::map<Color, int> colors;
  const int n = 6000;
  for (int i = 0; i < n; ++i) {
    const auto scene = random_scene(rng, 3);
    ASSERT_GE(scene.objects.size(), 1u);
    ASSERT_LE(scene.objects.size(), 3u);
    for (std::size_t j = 0; j < scene.objects.size(); ++j) {
      if (j > 0) {
        EXPECT_LT(scene.objects[j - 1].cell, scene.objects[j].cell);
      }
      for (std::size_t k = 0; k < j; ++k) EXPECT_NE(scene.objects[j].shape, scene.objects[k].shape);
    }
    ++colors[scene.objects.front().color];
  }
  // χ² against uniform colors; 5 degrees of freedom, 0.999 quantile ≈ 20.5.
  double chi2 = 0.0;
  for (int c = 0; c < kColorCount; ++c) {
    const double observed = colors[static_cast<Color>(c)], expected = n / 6.0;
    chi2 += (observed - expected) * (observed - expected) / expected;
  }
  EXPECT_LT(chi2, 20.5);
}

TEST(Scenes, TextScenesReadBack) {
  Rng rng(3);
  for (int i = 0; i < 300; ++i) {
    const auto scene = random_text_scene(rng);
    ASSERT_EQ(detect_text(render(scene)), scene.text);
  }
  for (char a = 'A'; a <= 'Z'; ++a) {
    const std::string s(1, a);
    EXPECT_EQ(detect_text(render(Scene{{}, s + s})), s + s);
  }
  EXPECT_THROW(render(Scene{{}, "TOOLONG"}), UsageError);
}

TEST(Scenes, GlyphsAreDistinct) {
  std::vector<Image> images;
  for (char a = 'A'; a <= 'Z'; ++a) images.push_back(render(Scene{{}, std::string(1, a)}));
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) EXPECT_FALSE(images[i] == images[j]) << i << " " << j;
  }
}

TEST(Captions, ParseRoundTrip) {
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    const auto scene = random_scene(rng, 3);
    const auto parsed = parse_caption(caption(scene));
    ASSERT_TRUE(parsed.has_value()) << caption(scene);
    EXPECT_EQ(*parsed, scene);
  }
  EXPECT_FALSE(parse_caption("purple hexagon center").has_value());
  EXPECT_FALSE(parse_caption("").has_value());
}

TEST(Datasets, CountsOrderAndDeterminism) {
  const DatasetSpec spec{30, 20, 0.3, 3, 9};
  const auto a = make_dataset(spec), b = make_dataset(spec);
  ASSERT_EQ(a.size(), 50u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].task, i < 30 ? Task::understanding : Task::generation);
    EXPECT_EQ(a[i].prompt, b[i].prompt);
    EXPECT_EQ(a[i].image, b[i].image);
    if (a[i].task == Task::generation) {
      const auto scene = parse_caption(a[i].prompt);
      ASSERT_TRUE(scene.has_value());
      EXPECT_EQ(render(*scene), a[i].image);
    }
  }
  EXPECT_THROW(make_dataset(DatasetSpec{0, 0, 0.0, 3, 0}), UsageError);

  const auto paired = make_paired_dataset(5, 1);
  ASSERT_EQ(paired.size(), 10u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(paired[i].image, paired[i + 5].image);

  const auto captions = make_caption_dataset(5, 2);
  for (const auto& s : captions) {
    EXPECT_EQ(s.task, Task::understanding);
    EXPECT_TRUE(parse_caption(s.answer).has_value());
  }
}

TEST(EvalUnderstanding, OracleAndChanceAnswerers) {
  const auto data = make_dataset(DatasetSpec{400, 10, 0.2, 3, 5});
  const auto oracle = eval_understanding([](const Sample& s) { return s.answer; }, data);
  EXPECT_EQ(oracle.total, 400);
  EXPECT_DOUBLE_EQ(oracle.accuracy, 1.0);

  // Uniform guesses among the six colors on color questions only.
  Rng scene_rng(6), guess_rng(7);
  Dataset color_qs;
  while (color_qs.size() < 3000) {
    const auto scene = random_scene(scene_rng, 3);
    const auto qa = ask(scene, scene_rng);
    if (qa.kind == QuestionKind::color) color_qs.push_back({Task::understanding, {}, qa.question, qa.answer, {}});
  }
  const auto chance = eval_understanding(
      [&](const Sample&) { return std::string(color_name(static_cast<Color>(guess_rng.below(6)))); }, color_qs);
  const double p = 1.0 / 6.0, sd = std::sqrt(p * (1 - p) / 3000.0);
  EXPECT_NEAR(chance.accuracy, p, 4 * sd);
  EXPECT_EQ(eval_understanding([](const Sample&) { return std::string(); }, color_qs).accuracy, 0.0);
}

TEST(ScoreGeneration, PartialCredit) {
  const Scene want{{SceneObject{ShapeKind::square, Color::red, 0}, SceneObject{ShapeKind::circle, Color::blue, 4}}, {}};
  EXPECT_DOUBLE_EQ(score_generation(want, render(want)).attribute, 1.0);
  EXPECT_TRUE(score_generation(want, render(want)).exact);
  // Circle right, square recolored and moved: 3 + 1 of 6 checks.
  const Scene got{{SceneObject{ShapeKind::circle, Color::blue, 4}, SceneObject{ShapeKind::square, Color::green, 8}}, {}};
  const auto s = score_generation(want, render(got));
  EXPECT_NEAR(s.attribute, 4.0 / 6.0, 1e-12);
  EXPECT_FALSE(s.exact);
  EXPECT_EQ(score_generation(want, Image(kSceneSide, kSceneSide)).attribute, 0.0);
  const auto bad = score_generation(want, Image(12, 12));
  EXPECT_TRUE(bad.undecodable);
  EXPECT_EQ(bad.attribute, 0.0);
}

TEST(EvalGeneration, SeedStatistics) {
  const std::vector<std::string> prompts = {"red square top left", "blue circle center"};
  const auto perfect = eval_generation(
      [](const std::string& p, std::uint64_t) { return render(*parse_caption(p)); }, prompts, {1, 2, 3});
  EXPECT_DOUBLE_EQ(perfect.overall, 1.0);
  EXPECT_DOUBLE_EQ(perfect.overall_sd, 0.0);
  EXPECT_EQ(perfect.seeds, 3);
  // Perfect on even seeds, blank on odd ones.
  const auto alternating = eval_generation(
      [](const std::string& p, std::uint64_t seed) {
        return seed % 2 == 0 ? render(*parse_caption(p)) : Image(kSceneSide, kSceneSide);
      },
      prompts, {0, 1});
  EXPECT_DOUBLE_EQ(alternating.overall, 0.5);
  EXPECT_NEAR(alternating.overall_sd, std::sqrt(0.5), 1e-12);
  EXPECT_THROW(eval_generation([](const std::string&, std::uint64_t) { return Image(); }, {"not a caption"}, {0}),
               UsageError);
}

AblationRow fake_row(const std::string& key, double score) {
  AblationRow r;
  r.key = key;
  r.group = key.substr(0, key.find('/'));
  r.data = key.substr(key.find('/') + 1);
  r.steps = 10;
  r.final_loss = 1.0 + score;
  r.und_samples = 10;
  r.gen_samples = 10;
  r.target_und_fraction = 0.5;
  r.realized_und_fraction = 0.5;
  r.und_general = score;
  r.und_textread = score / 2;
  r.gen_overall = score / 3;
  r.gen_attribute = score / 4;
  r.gen_overall_sd = 0.0;
  r.gen_attribute_sd = 0.0;
  if (r.data == "und-only") r.gen_overall = r.gen_attribute = r.gen_overall_sd = r.gen_attribute_sd = std::nullopt;
  if (r.data == "gen-only") r.und_general = r.und_textread = std::nullopt;
  return r;
}

AblationReport fake_report(const std::string& kind) {
  AblationReport r;
  r.kind = kind;
  double score = 0.1;
  for (const auto& k : ablation_row_keys(kind)) r.rows.push_back(fake_row(k, score += 0.1));
  finalize_report(r);
  return r;
}

TEST(AblationReport, SchemaAndJsonRoundTrip) {
  for (const std::string kind : {"interference", "proportion"}) {
    const auto report = fake_report(kind);
    const auto doc = report.to_json();
    EXPECT_TRUE(validate_report_json(doc).empty()) << kind;
    const auto back = AblationReport::from_json(doc);
    EXPECT_EQ(back.rows, report.rows);
    EXPECT_EQ(back.to_json().dump(), doc.dump());
    EXPECT_FALSE(report.table().empty());
    for (std::size_t i = 0; i < report.rows.size(); ++i) EXPECT_EQ(report.rows[i].key, ablation_row_keys(kind)[i]);
  }
  EXPECT_THROW(ablation_row_keys("other"), UsageError);
  auto doc = fake_report("proportion").to_json();
  auto swapped = doc;
  std::swap(swapped["rows"][0], swapped["rows"][1]);
  EXPECT_FALSE(validate_report_json(swapped, true).empty());
  doc.erase("rows");
  EXPECT_FALSE(validate_report_json(doc).empty());
}

TEST(AblationReport, MergeIsOrderIndependent) {
  const auto full = fake_report("interference");
  AblationReport a{"interference", {}, {}}, b{"interference", {}, {}};
  for (std::size_t i = 0; i < full.rows.size(); ++i) (i % 2 ? a : b).rows.push_back(full.rows[i]);
  const auto ab = merge_reports({a, b}), ba = merge_reports({b, a});
  EXPECT_EQ(ab.to_json().dump(), ba.to_json().dump());
  EXPECT_EQ(ab.rows, full.rows);
  EXPECT_EQ(merge_reports({full, a}).to_json().dump(), ab.to_json().dump());

  auto conflict = a;
  conflict.rows.front().final_loss += 1.0;
  EXPECT_THROW(merge_reports({a, conflict}), UsageError);
  EXPECT_THROW(merge_reports({a, fake_report("proportion")}), UsageError);
  EXPECT_THROW(merge_reports({}), UsageError);
}

TEST(Ablation, TinyInterferenceRows) {
  AblationConfig cfg;
  cfg.model.vit.cell = 24;
  cfg.model.vit.patch = 6;
  cfg.model.vit.blocks = 1;
  cfg.model.lm.width = 32;
  cfg.model.lm.blocks = 1;
  cfg.model.lm.context = 160;
  cfg.stage.steps = 2;
  cfg.stage.batch_size = 2;
  cfg.train = {6, 6, 0.0, 2, 1};
  cfg.eval = {3, 2, 0.0, 2, 2};
  cfg.gen_seeds = 1;
  cfg.mixture_check_draws = 1000;
  VQTokenizer<float> tok(VQConfig{}, 3);
  const auto report = run_interference(cfg, tok, {"unified/gen-only", "unified/und-only"});
  // A partial report lists only the requested rows, in canonical order.
  EXPECT_FALSE(validate_report_json(report.to_json()).empty());
  EXPECT_TRUE(validate_report_json(report.to_json(), true).empty());
  EXPECT_EQ(AblationReport::from_json(report.to_json()).rows, report.rows);
  ASSERT_EQ(report.rows.size(), 2u);
  const auto& und = report.rows[0];
  const auto& gen = report.rows[1];
  EXPECT_EQ(und.key, "unified/und-only");
  EXPECT_EQ(gen.key, "unified/gen-only");
  EXPECT_FALSE(und.failed) << und.error;
  EXPECT_FALSE(gen.failed) << gen.error;
  EXPECT_TRUE(und.und_general.has_value());
  EXPECT_FALSE(und.gen_overall.has_value());
  EXPECT_FALSE(und.gen_attribute.has_value());
  EXPECT_TRUE(gen.gen_overall.has_value());
  EXPECT_FALSE(gen.und_general.has_value());
  EXPECT_DOUBLE_EQ(und.realized_und_fraction, 1.0);
  EXPECT_DOUBLE_EQ(gen.realized_und_fraction, 0.0);
  EXPECT_THROW(run_interference(cfg, tok, {"unified/nothing"}), UsageError);
}

}  // namespace
}  // namespace unitoken
