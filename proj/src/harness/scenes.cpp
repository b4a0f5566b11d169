#include "unitoken/harness/scenes.hpp"

#include <algorithm>
#include <map>
#include <numeric>

namespace unitoken {

namespace {

constexpr const char* kShapeNames[] = {"circle", "square", "triangle"};
constexpr const char* kColorNames[] = {"red", "green", "blue", "yellow", "magenta", "cyan"};
constexpr const char* kCellNames[] = {"top left", "top",    "top right",   "left",        "center",
                                      "right",    "bottom left", "bottom", "bottom right"};
constexpr const char* kCountWords[] = {"zero", "one", "two", "three"};

// 3×5 capitals, rows top to bottom.
constexpr std::array<std::array<const char*, 5>, 26> kFont = {{
    {".#.", "#.#", "###", "#.#", "#.#"}, {"##.", "#.#", "##.", "#.#", "##."}, {".##", "#..", "#..", "#..", ".##"},
    {"##.", "#.#", "#.#", "#.#", "##."}, {"###", "#..", "##.", "#..", "###"}, {"###", "#..", "##.", "#..", "#.."},
    {".##", "#..", "#.#", "#.#", ".##"}, {"#.#", "#.#", "###", "#.#", "#.#"}, {"###", ".#.", ".#.", ".#.", "###"},
    {"..#", "..#", "..#", "#.#", ".#."}, {"#.#", "#.#", "##.", "#.#", "#.#"}, {"#..", "#..", "#..", "#..", "###"},
    {"#.#", "###", "###", "#.#", "#.#"}, {"##.", "#.#", "#.#", "#.#", "#.#"}, {".#.", "#.#", "#.#", "#.#", ".#."},
    {"##.", "#.#", "##.", "#..", "#.."}, {".#.", "#.#", "#.#", "##.", ".##"}, {"##.", "#.#", "##.", "#.#", "#.#"},
    {".##", "#..", ".#.", "..#", "##."}, {"###", ".#.", ".#.", ".#.", ".#."}, {"#.#", "#.#", "#.#", "#.#", "###"},
    {"#.#", "#.#", "#.#", "#.#", ".#."}, {"#.#", "#.#", "###", "###", "#.#"}, {"#.#", "#.#", ".#.", "#.#", "#.#"},
    {"#.#", "#.#", ".#.", ".#.", ".#."}, {"###", "..#", ".#.", "#..", "###"},
}};

constexpr Index kTextTop = 9;

Index text_left(std::size_t letters) {
  const Index width = static_cast<Index>(letters) * 4 - 1;
  return (kSceneSide - width) / 2;
}

bool bright(const Image& img, Index y, Index x) { return img.at(y, x).maxCoeff() > 0.5f; }

}  // namespace

const char* shape_name(ShapeKind s) { return kShapeNames[static_cast<int>(s)]; }
const char* color_name(Color c) { return kColorNames[static_cast<int>(c)]; }

const char* cell_name(int cell) {
  if (cell < 0 || cell >= kCells) throw UsageError("cell index outside the 3x3 grid");
  return kCellNames[cell];
}

std::array<float, 3> color_rgb(Color c) {
  switch (c) {
    case Color::red: return {1, 0, 0};
    case Color::green: return {0, 1, 0};
    case Color::blue: return {0, 0, 1};
    case Color::yellow: return {1, 1, 0};
    case Color::magenta: return {1, 0, 1};
    case Color::cyan: return {0, 1, 1};
  }
  return {0, 0, 0};
}

const std::array<std::array<std::array<bool, 6>, 6>, 3>& shape_masks() {
  static const auto masks = [] {
    std::array<std::array<std::array<bool, 6>, 6>, 3> m{};
    for (int y = 0; y < 6; ++y) {
      for (int x = 0; x < 6; ++x) {
        const double dy = y - 2.5, dx = x - 2.5;
        m[0][y][x] = dx * dx + dy * dy <= 7.5;
        m[1][y][x] = true;
        const int half = y / 2 + 1;  // rows pair up: widths 2, 4, 6
        m[2][y][x] = std::abs(dx) < half;
      }
    }
    return m;
  }();
  return masks;
}

Image render(const Scene& scene) {
  Image img(kSceneSide, kSceneSide, 3);
  const auto& masks = shape_masks();
  for (const auto& obj : scene.objects) {
    if (obj.cell < 0 || obj.cell >= kCells) throw UsageError("render: cell outside the grid");
    const auto rgb = color_rgb(obj.color);
    const Index y0 = (obj.cell / 3) * kCellSide + 1, x0 = (obj.cell % 3) * kCellSide + 1;
    const auto& mask = masks[static_cast<std::size_t>(obj.shape)];
    for (int y = 0; y < 6; ++y) {
      for (int x = 0; x < 6; ++x) {
        if (mask[y][x]) img.at(y0 + y, x0 + x) << rgb[0], rgb[1], rgb[2];
      }
    }
  }
  if (!scene.text.empty()) {
    if (scene.text.size() > 5) throw UsageError("render: text longer than 5 letters");
    const Index left = text_left(scene.text.size());
    for (std::size_t i = 0; i < scene.text.size(); ++i) {
      const char ch = scene.text[i];
      if (ch < 'A' || ch > 'Z') throw UsageError("render: text must be capital letters");
      const auto& glyph = kFont[static_cast<std::size_t>(ch - 'A')];
      for (int y = 0; y < 5; ++y) {
        for (int x = 0; x < 3; ++x) {
          if (glyph[y][x] == '#') img.at(kTextTop + y, left + static_cast<Index>(i) * 4 + x).setOnes();
        }
      }
    }
  }
  return img;
}

std::vector<SceneObject> detect(const Image& image) {
  if (image.height != kSceneSide || image.width != kSceneSide || image.channels() != 3) return {};
  const Index n = kSceneSide * kSceneSide;
  std::vector<int> label(static_cast<std::size_t>(n), -1);
  std::map<int, std::vector<Index>> cell_pixels;
  int next = 0;
  std::vector<Index> stack;
  for (Index start = 0; start < n; ++start) {
    if (label[static_cast<std::size_t>(start)] != -1 || !bright(image, start / kSceneSide, start % kSceneSide)) {
      continue;
    }
    std::vector<Index> comp;
    stack.assign(1, start);
    label[static_cast<std::size_t>(start)] = next;
    while (!stack.empty()) {
      const Index p = stack.back();
      stack.pop_back();
      comp.push_back(p);
      const Index y = p / kSceneSide, x = p % kSceneSide;
      const Index ny[] = {y - 1, y + 1, y, y};
      const Index nx[] = {x, x, x - 1, x + 1};
      for (int k = 0; k < 4; ++k) {
        if (ny[k] < 0 || ny[k] >= kSceneSide || nx[k] < 0 || nx[k] >= kSceneSide) continue;
        const Index q = ny[k] * kSceneSide + nx[k];
        if (label[static_cast<std::size_t>(q)] == -1 && bright(image, ny[k], nx[k])) {
          label[static_cast<std::size_t>(q)] = next;
          stack.push_back(q);
        }
      }
    }
    ++next;
    if (comp.size() < 4) continue;
    double cy = 0, cx = 0;
    for (Index p : comp) {
      cy += static_cast<double>(p / kSceneSide);
      cx += static_cast<double>(p % kSceneSide);
    }
    cy /= static_cast<double>(comp.size());
    cx /= static_cast<double>(comp.size());
    const int cell = static_cast<int>(cy / kCellSide) * 3 + static_cast<int>(cx / kCellSide);
    auto& px = cell_pixels[cell];
    px.insert(px.end(), comp.begin(), comp.end());
  }

  std::vector<SceneObject> out;
  const auto& masks = shape_masks();
  for (const auto& [cell, pixels] : cell_pixels) {
    const Index y0 = (cell / 3) * kCellSide + 1, x0 = (cell % 3) * kCellSide + 1;
    std::array<std::array<bool, 6>, 6> seen{};
    Eigen::RowVector3d rgb = Eigen::RowVector3d::Zero();
    for (Index p : pixels) {
      const Index y = p / kSceneSide - y0, x = p % kSceneSide - x0;
      if (y >= 0 && y < 6 && x >= 0 && x < 6) seen[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)] = true;
      rgb += image.pixels.row(p).cast<double>();
    }
    rgb /= static_cast<double>(pixels.size());
    int best_shape = 0, best_dist = 1 << 30;
    for (int s = 0; s < kShapeCount; ++s) {
      int dist = 0;
      for (int y = 0; y < 6; ++y) {
        for (int x = 0; x < 6; ++x) dist += masks[static_cast<std::size_t>(s)][y][x] != seen[y][x] ? 1 : 0;
      }
      if (dist < best_dist) {
        best_dist = dist;
        best_shape = s;
      }
    }
    int best_color = 0;
    double best_err = 1e30;
    for (int c = 0; c < kColorCount; ++c) {
      const auto ref = color_rgb(static_cast<Color>(c));
      const double err = (rgb - Eigen::RowVector3d(ref[0], ref[1], ref[2])).squaredNorm();
      if (err < best_err) {
        best_err = err;
        best_color = c;
      }
    }
    out.push_back({static_cast<ShapeKind>(best_shape), static_cast<Color>(best_color), cell});
  }
  return out;
}

std::string detect_text(const Image& image) {
  if (image.height != kSceneSide || image.width != kSceneSide) return {};
  // Every glyph lights its first and last column, so the lit extent fixes
  // the letter count.
  Index xmin = kSceneSide, xmax = -1;
  for (Index y = kTextTop; y < kTextTop + 5; ++y) {
    for (Index x = 0; x < kSceneSide; ++x) {
      if (bright(image, y, x)) {
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
      }
    }
  }
  if (xmax < 0) return {};
  const Index letters = (xmax - xmin + 2 + 2) / 4;
  std::string text;
  for (Index i = 0; i < letters; ++i) {
    int best = 0, best_dist = 1 << 30;
    for (int g = 0; g < 26; ++g) {
      int dist = 0;
      for (int y = 0; y < 5; ++y) {
        for (int x = 0; x < 3; ++x) {
          const Index px = xmin + i * 4 + x;
          const bool lit = px < kSceneSide && bright(image, kTextTop + y, px);
          dist += lit != (kFont[static_cast<std::size_t>(g)][y][x] == '#') ? 1 : 0;
        }
      }
      if (dist < best_dist) {
        best_dist = dist;
        best = g;
      }
    }
    text.push_back(static_cast<char>('A' + best));
  }
  return text;
}

std::string caption(const Scene& scene) {
  std::string out;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& o = scene.objects[i];
    if (i > 0) out += " and ";
    out += std::string(color_name(o.color)) + " " + shape_name(o.shape) + " " + cell_name(o.cell);
  }
  return out;
}

std::optional<Scene> parse_caption(const std::string& text) {
  Scene scene;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find(" and ", pos);
    if (end == std::string::npos) end = text.size();
    const std::string part = text.substr(pos, end - pos);
    SceneObject obj;
    bool ok = false;
    for (int c = 0; c < kColorCount && !ok; ++c) {
      for (int s = 0; s < kShapeCount && !ok; ++s) {
        for (int cell = 0; cell < kCells && !ok; ++cell) {
          if (part == std::string(kColorNames[c]) + " " + kShapeNames[s] + " " + kCellNames[cell]) {
            obj = {static_cast<ShapeKind>(s), static_cast<Color>(c), cell};
            ok = true;
          }
        }
      }
    }
    if (!ok) return std::nullopt;
    scene.objects.push_back(obj);
    if (end == text.size()) break;
    pos = end + 5;
  }
  std::sort(scene.objects.begin(), scene.objects.end(),
            [](const SceneObject& a, const SceneObject& b) { return a.cell < b.cell; });
  return scene;
}

Scene random_scene(Rng& rng, int max_objects) {
  if (max_objects < 1 || max_objects > kShapeCount) throw UsageError("max_objects must be in [1, 3]");
  const int n = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_objects)));
  std::array<int, kShapeCount> shapes{0, 1, 2};
  std::array<int, kCells> cells{};
  std::iota(cells.begin(), cells.end(), 0);
  // Partial Fisher-Yates on both lists.
  for (int i = 0; i < n; ++i) {
    std::swap(shapes[static_cast<std::size_t>(i)],
              shapes[static_cast<std::size_t>(i + static_cast<int>(rng.below(static_cast<std::uint64_t>(kShapeCount - i))))]);
    std::swap(cells[static_cast<std::size_t>(i)],
              cells[static_cast<std::size_t>(i + static_cast<int>(rng.below(static_cast<std::uint64_t>(kCells - i))))]);
  }
  Scene scene;
  for (int i = 0; i < n; ++i) {
    scene.objects.push_back({static_cast<ShapeKind>(shapes[static_cast<std::size_t>(i)]),
                             static_cast<Color>(rng.below(kColorCount)), cells[static_cast<std::size_t>(i)]});
  }
  std::sort(scene.objects.begin(), scene.objects.end(),
            [](const SceneObject& a, const SceneObject& b) { return a.cell < b.cell; });
  return scene;
}

Scene random_text_scene(Rng& rng) {
  Scene scene;
  const int n = 2 + static_cast<int>(rng.below(3));
  for (int i = 0; i < n; ++i) scene.text.push_back(static_cast<char>('A' + rng.below(26)));
  return scene;
}

QuestionAnswer ask(const Scene& scene, Rng& rng) {
  if (!scene.text.empty()) return {QuestionKind::text, "what does the text say?", scene.text};
  if (scene.objects.empty()) throw UsageError("ask: empty scene");
  const auto kind = static_cast<QuestionKind>(rng.below(3));
  const auto& obj = scene.objects[rng.below(scene.objects.size())];
  switch (kind) {
    case QuestionKind::color:
      return {kind, std::string("what color is the ") + shape_name(obj.shape) + "?", color_name(obj.color)};
    case QuestionKind::count:
      return {kind, "how many shapes are there?", kCountWords[scene.objects.size()]};
    default:
      return {QuestionKind::where, std::string("where is the ") + shape_name(obj.shape) + "?", cell_name(obj.cell)};
  }
}

Dataset make_dataset(const DatasetSpec& spec) {
  if (spec.understanding < 0 || spec.generation < 0 || spec.understanding + spec.generation == 0) {
    throw UsageError("make_dataset: counts must be >= 0 and not both zero");
  }
  Rng rng(spec.seed);
  Dataset data;
  data.reserve(static_cast<std::size_t>(spec.understanding + spec.generation));
  for (int i = 0; i < spec.understanding; ++i) {
    const bool text = spec.textread_fraction > 0.0 && rng.bernoulli(spec.textread_fraction);
    const Scene scene = text ? random_text_scene(rng) : random_scene(rng, spec.max_objects);
    const auto qa = ask(scene, rng);
    data.push_back({Task::understanding, render(scene), qa.question, qa.answer, {}});
  }
  for (int i = 0; i < spec.generation; ++i) {
    const Scene scene = random_scene(rng, spec.max_objects);
    data.push_back({Task::generation, render(scene), caption(scene), {}, {}});
  }
  return data;
}

Dataset make_paired_dataset(int count, std::uint64_t seed, int max_objects) {
  if (count <= 0) throw UsageError("make_paired_dataset: count must be positive");
  Rng rng(seed);
  Dataset und, gen;
  for (int i = 0; i < count; ++i) {
    const Scene scene = random_scene(rng, max_objects);
    const auto qa = ask(scene, rng);
    Image image = render(scene);
    und.push_back({Task::understanding, image, qa.question, qa.answer, {}});
    gen.push_back({Task::generation, std::move(image), caption(scene), {}, {}});
  }
  und.insert(und.end(), gen.begin(), gen.end());
  return und;
}

Dataset make_caption_dataset(int count, std::uint64_t seed, int max_objects) {
  if (count <= 0) throw UsageError("make_caption_dataset: count must be positive");
  Rng rng(seed);
  Dataset data;
  for (int i = 0; i < count; ++i) {
    const Scene scene = random_scene(rng, max_objects);
    data.push_back({Task::understanding, render(scene), "describe the image.", caption(scene), {}});
  }
  return data;
}

}  // namespace unitoken
