#include "jowl/synthgen.hpp"

#include <algorithm>
#include <array>
#include <stdexcept>

#include "jowl/rng.hpp"

namespace jowl::synthgen {

namespace {

const std::array<std::string, 3> kShapeWords = {"circle", "square", "triangle"};
const std::array<std::string, 3> kColorWords = {"red", "green", "blue"};

bool is_shape_word(const std::string& w, Shape* out) {
  for (std::size_t i = 0; i < 3; ++i)
    if (kShapeWords[i] == w) {
      if (out) *out = static_cast<Shape>(i);
      return true;
    }
  return false;
}

bool is_color_word(const std::string& w, Color* out) {
  for (std::size_t i = 0; i < 3; ++i)
    if (kColorWords[i] == w) {
      if (out) *out = static_cast<Color>(i);
      return true;
    }
  return false;
}

bool object_matches(const SceneObject& o, const std::string& w) {
  Shape s;
  Color c;
  if (is_shape_word(w, &s)) return o.shape == s;
  if (is_color_word(w, &c)) return o.color == c;
  return false;
}

void set_rgb(Image& img, std::size_t y, std::size_t x, Color c) {
  img.at(y, x, 0) = c == Color::kRed ? 1.0 : 0.0;
  img.at(y, x, 1) = c == Color::kGreen ? 1.0 : 0.0;
  img.at(y, x, 2) = c == Color::kBlue ? 1.0 : 0.0;
}

// Pixel-center membership tests in cell-local coordinates [0, 16).
bool inside_square(double px, double py) {
  return px >= 1.0 && px <= 15.0 && py >= 1.0 && py <= 15.0;
}

bool inside_circle(double px, double py) {
  double dx = px - 8.0, dy = py - 8.0;
  return dx * dx + dy * dy <= 7.5 * 7.5;
}

// Right triangle spanning the cell: vertices (0,0), (0,16), (16,16).
bool inside_triangle(double px, double py) {
  return px <= py;
}

void rebuild_derived(Scene& scene) {
  std::sort(scene.objects.begin(), scene.objects.end(),
            [](const SceneObject& a, const SceneObject& b) {
              return a.row != b.row ? a.row < b.row : a.col < b.col;
            });

  scene.gt_boxes.clear();
  for (const SceneObject& o : scene.objects) {
    GtBox box;
    box.concepts = {color_word(o.color), shape_word(o.shape)};
    box.x = static_cast<double>(o.col) / kGrid;
    box.y = static_cast<double>(o.row) / kGrid;
    box.w = 1.0 / kGrid;
    box.h = 1.0 / kGrid;
    scene.gt_boxes.push_back(std::move(box));
  }

  scene.caption.clear();
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    if (i) scene.caption.push_back("and");
    scene.caption.push_back(color_word(scene.objects[i].color));
    scene.caption.push_back(shape_word(scene.objects[i].shape));
  }
  scene.caption.push_back("<eos>");

  scene.qa.clear();
  for (const std::string& w : concept_words())
    scene.qa.push_back({{"contains", w, "?"}, scene.contains(w)});
  for (const std::string& w : concept_words())
    scene.qa.push_back({{"likely", w, "?"}, scene.contains(w)});

  scene.image = render_scene(scene);
}

std::size_t attribute_dim(const std::string& w) {
  if (is_shape_word(w, nullptr)) return 0;
  if (is_color_word(w, nullptr)) return 1;
  throw std::invalid_argument("unknown concept word: " + w);
}

void set_attribute(SceneObject& o, const std::string& w) {
  Shape s;
  Color c;
  if (is_shape_word(w, &s))
    o.shape = s;
  else if (is_color_word(w, &c))
    o.color = c;
}

// Replace attribute with a uniform draw among the other two values.
void clear_attribute(SceneObject& o, const std::string& w, SplitMix64& rng) {
  Shape s;
  Color c;
  if (is_shape_word(w, &s)) {
    std::size_t pick = rng.below(2);
    for (std::size_t i = 0, seen = 0; i < 3; ++i) {
      if (static_cast<Shape>(i) == s) continue;
      if (seen++ == pick) {
        o.shape = static_cast<Shape>(i);
        return;
      }
    }
  } else if (is_color_word(w, &c)) {
    std::size_t pick = rng.below(2);
    for (std::size_t i = 0, seen = 0; i < 3; ++i) {
      if (static_cast<Color>(i) == c) continue;
      if (seen++ == pick) {
        o.color = static_cast<Color>(i);
        return;
      }
    }
  }
}

bool scene_contains(const std::vector<SceneObject>& objs,
                    const std::string& w) {
  for (const SceneObject& o : objs)
    if (object_matches(o, w)) return true;
  return false;
}

// Forces P(b present | a present) = p exactly. Only runs when a is present;
// the draw u decides the target, then the minimal edit establishes it.
void apply_bias(std::vector<SceneObject>& objs, const BiasSpec& spec,
                SplitMix64& rng) {
  if (!scene_contains(objs, spec.concept_a)) return;
  bool want_b = rng.uniform() < spec.co_occurrence_prob;
  bool have_b = scene_contains(objs, spec.concept_b);
  if (want_b == have_b) return;

  std::size_t dim_a = attribute_dim(spec.concept_a);
  std::size_t dim_b = attribute_dim(spec.concept_b);

  if (!want_b) {
    // Strip b from every carrier. Carriers never overlap the sole source of
    // a when the dimensions coincide (an attribute has one value), and a
    // different dimension is untouched entirely.
    for (SceneObject& o : objs)
      if (object_matches(o, spec.concept_b)) clear_attribute(o, spec.concept_b, rng);
    return;
  }

  // Need b present. Candidates are objects whose edit cannot erase a.
  std::vector<std::size_t> candidates;
  std::size_t a_carriers = 0;
  for (const SceneObject& o : objs)
    if (object_matches(o, spec.concept_a)) ++a_carriers;
  for (std::size_t i = 0; i < objs.size(); ++i) {
    bool carries_a = object_matches(objs[i], spec.concept_a);
    if (dim_a != dim_b || !carries_a || a_carriers > 1) candidates.push_back(i);
  }
  if (!candidates.empty()) {
    set_attribute(objs[candidates[rng.below(candidates.size())]],
                  spec.concept_b);
    return;
  }
  // Lone a-carrier and same dimension: add a fresh object in a free cell.
  std::vector<std::pair<std::size_t, std::size_t>> free_cells;
  for (std::size_t r = 0; r < kGrid; ++r)
    for (std::size_t c = 0; c < kGrid; ++c) {
      bool used = false;
      for (const SceneObject& o : objs)
        if (o.row == r && o.col == c) used = true;
      if (!used) free_cells.push_back({r, c});
    }
  auto cell = free_cells[rng.below(free_cells.size())];
  SceneObject fresh;
  fresh.shape = static_cast<Shape>(rng.below(3));
  fresh.color = static_cast<Color>(rng.below(3));
  fresh.row = cell.first;
  fresh.col = cell.second;
  set_attribute(fresh, spec.concept_b);
  objs.push_back(fresh);
}

void validate_bias(const BiasSpec& spec) {
  attribute_dim(spec.concept_a);
  attribute_dim(spec.concept_b);
  if (spec.concept_a == spec.concept_b)
    throw std::invalid_argument("bias spec: concepts must differ");
  if (spec.co_occurrence_prob < 0.0 || spec.co_occurrence_prob > 1.0)
    throw std::invalid_argument("bias spec: probability outside [0,1]");
}

}  // namespace

const std::string& shape_word(Shape s) {
  return kShapeWords[static_cast<std::size_t>(s)];
}

const std::string& color_word(Color c) {
  return kColorWords[static_cast<std::size_t>(c)];
}

const std::vector<std::string>& concept_words() {
  static const std::vector<std::string> words = {"circle", "square",
                                                 "triangle", "red",
                                                 "green",  "blue"};
  return words;
}

Image Image::black(std::size_t w, std::size_t h) {
  Image img;
  img.width = w;
  img.height = h;
  img.pixels.assign(w * h * 3, 0.0);
  return img;
}

bool Scene::contains(const std::string& concept_word) const {
  return scene_contains(objects, concept_word);
}

std::vector<std::string> Scene::present_concepts() const {
  std::vector<std::string> out;
  for (const std::string& w : concept_words())
    if (contains(w)) out.push_back(w);
  return out;
}

Scene generate_scene(std::uint64_t seed, const std::optional<BiasSpec>& bias) {
  if (bias) validate_bias(*bias);
  SplitMix64 rng(seed);

  std::size_t n_objects = 1 + rng.below(3);

  // Distinct cells via a partial Fisher-Yates over all 16.
  std::array<std::size_t, kGrid * kGrid> cells;
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
  for (std::size_t i = 0; i < n_objects; ++i) {
    std::size_t j = i + rng.below(cells.size() - i);
    std::swap(cells[i], cells[j]);
  }

  Scene scene;
  for (std::size_t i = 0; i < n_objects; ++i) {
    SceneObject o;
    o.shape = static_cast<Shape>(rng.below(3));
    o.color = static_cast<Color>(rng.below(3));
    o.row = cells[i] / kGrid;
    o.col = cells[i] % kGrid;
    scene.objects.push_back(o);
  }

  if (bias) apply_bias(scene.objects, *bias, rng);

  rebuild_derived(scene);
  return scene;
}

Image render_scene(const Scene& scene) {
  Image img = Image::black();
  for (const SceneObject& o : scene.objects) {
    std::size_t y0 = o.row * kCell;
    std::size_t x0 = o.col * kCell;
    for (std::size_t py = 0; py < kCell; ++py)
      for (std::size_t px = 0; px < kCell; ++px) {
        double cx = static_cast<double>(px) + 0.5;
        double cy = static_cast<double>(py) + 0.5;
        bool in = false;
        switch (o.shape) {
          case Shape::kCircle: in = inside_circle(cx, cy); break;
          case Shape::kSquare: in = inside_square(cx, cy); break;
          case Shape::kTriangle: in = inside_triangle(cx, cy); break;
        }
        if (in) set_rgb(img, y0 + py, x0 + px, o.color);
      }
  }
  return img;
}

Dataset make_dataset(const DatasetConfig& config) {
  if (config.n_train == 0 || config.n_val == 0 || config.n_test == 0)
    throw std::invalid_argument("dataset config: split sizes must be positive");
  if (config.bias) validate_bias(*config.bias);

  Dataset ds;
  auto fill = [&](std::vector<Scene>& split, std::uint64_t split_id,
                  std::size_t count) {
    split.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
      split.push_back(
          generate_scene(stream_key(config.seed, split_id, i), config.bias));
  };
  fill(ds.train, kStreamTrainSplit, config.n_train);
  fill(ds.val, kStreamValSplit, config.n_val);
  fill(ds.test, kStreamTestSplit, config.n_test);
  return ds;
}

}  // namespace jowl::synthgen
