#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "unitoken/core/image.hpp"
#include "unitoken/core/rng.hpp"
#include "unitoken/train/dataset.hpp"

namespace unitoken {

enum class ShapeKind { circle, square, triangle };
enum class Color { red, green, blue, yellow, magenta, cyan };

inline constexpr int kShapeCount = 3;
inline constexpr int kColorCount = 6;
inline constexpr int kCells = 9;            // 3×3 placement grid
inline constexpr Index kSceneSide = 24;     // pixels
inline constexpr Index kCellSide = 8;

const char* shape_name(ShapeKind s);
const char* color_name(Color c);
/// "top left", "top", ..., "center", ..., "bottom right".
const char* cell_name(int cell);
std::array<float, 3> color_rgb(Color c);

struct SceneObject {
  ShapeKind shape = ShapeKind::circle;
  Color color = Color::red;
  int cell = 4;

  bool operator==(const SceneObject&) const = default;
  auto operator<=>(const SceneObject&) const = default;
};

/// 1–3 objects with distinct shapes in distinct cells, or (when `text` is
/// set) only white capital letters.
struct Scene {
  std::vector<SceneObject> objects;  // sorted by cell
  std::string text;

  bool operator==(const Scene&) const = default;
};

/// Deterministic rendering on a black 24×24 canvas: each object fills a 6×6
/// mask inset in its 8×8 cell.
Image render(const Scene& scene);

/// 6×6 binary masks of the three shapes.
const std::array<std::array<std::array<bool, 6>, 6>, 3>& shape_masks();

/// Inverts render() for object scenes: bright connected components are
/// grouped by the cell of their centroid; each cell's inset mask is matched
/// to the nearest shape template and its mean color to the nearest palette
/// entry. Components smaller than a few pixels are ignored.
std::vector<SceneObject> detect(const Image& image);

/// Reads white 3×5 glyphs back into text (for rendered text scenes).
std::string detect_text(const Image& image);

/// Caption listing every object, e.g. "red square top left and blue circle center".
std::string caption(const Scene& scene);

Scene random_scene(Rng& rng, int max_objects = 3);
Scene random_text_scene(Rng& rng);

enum class QuestionKind { color, count, where, text };

struct QuestionAnswer {
  QuestionKind kind = QuestionKind::color;
  std::string question;
  std::string answer;
};

/// A template question about `scene` chosen by `rng`; text scenes always get
/// the reading question.
QuestionAnswer ask(const Scene& scene, Rng& rng);

struct DatasetSpec {
  int understanding = 100;
  int generation = 100;
  double textread_fraction = 0.0;   // share of understanding samples that read text
  int max_objects = 3;
  std::uint64_t seed = 0;
};

/// Understanding samples pair a scene with a template question; generation
/// samples pair a caption with its rendering. Order: understanding first.
Dataset make_dataset(const DatasetSpec& spec);

/// One understanding and one generation sample per scene (the same image),
/// `count` scenes in all. Order: understanding first.
Dataset make_paired_dataset(int count, std::uint64_t seed, int max_objects = 3);

/// Caption-as-answer understanding samples for the alignment stage.
Dataset make_caption_dataset(int count, std::uint64_t seed, int max_objects = 3);

/// Scenes behind a dataset's samples are recoverable from their captions.
std::optional<Scene> parse_caption(const std::string& text);

}  // namespace unitoken
