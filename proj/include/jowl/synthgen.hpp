#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace jowl::synthgen {

// World geometry: 64x64 RGB raster over a 4x4 grid of 16 px cells.
inline constexpr std::size_t kImageSize = 64;
inline constexpr std::size_t kGrid = 4;
inline constexpr std::size_t kCell = kImageSize / kGrid;

enum class Shape { kCircle, kSquare, kTriangle };
enum class Color { kRed, kGreen, kBlue };

const std::string& shape_word(Shape s);
const std::string& color_word(Color c);
// The six concept words: circle, square, triangle, red, green, blue.
const std::vector<std::string>& concept_words();

struct Image {
  std::size_t width = kImageSize;
  std::size_t height = kImageSize;
  std::vector<double> pixels;  // height*width*3 row-major, values in [0,1]

  static Image black(std::size_t w = kImageSize, std::size_t h = kImageSize);
  double& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * 3 + c];
  }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }
};

struct SceneObject {
  Shape shape;
  Color color;
  std::size_t row, col;  // grid cell
};

struct GtBox {
  std::vector<std::string> concepts;  // color word + shape word
  double x, y, w, h;                  // normalized, top-left corner
};

struct QaPair {
  std::vector<std::string> question;  // e.g. {"contains","circle","?"}
  bool yes;
};

struct Scene {
  std::vector<SceneObject> objects;  // sorted by (row, col)
  Image image;
  std::vector<GtBox> gt_boxes;
  std::vector<std::string> caption;  // ends with "<eos>"
  std::vector<QaPair> qa;

  bool contains(const std::string& concept_word) const;
  std::vector<std::string> present_concepts() const;
};

struct BiasSpec {
  std::string concept_a;
  std::string concept_b;
  double co_occurrence_prob;  // P(b present | a present)
};

struct DatasetConfig {
  std::uint64_t seed = 0;
  std::size_t n_train = 0, n_val = 0, n_test = 0;
  std::optional<BiasSpec> bias;
};

struct Dataset {
  std::vector<Scene> train, val, test;
};

// Deterministic scene construction: same (seed, bias) gives a bit-identical
// scene. With bias {a, b, p}, scenes containing concept a contain concept b
// with probability exactly p over seeds.
Scene generate_scene(std::uint64_t seed, const std::optional<BiasSpec>& bias);

// Renders objects into a fresh raster. Pixel membership is decided by exact
// geometric tests on pixel centers, no anti-aliasing, so the output is
// bit-deterministic across platforms.
Image render_scene(const Scene& scene);

// Splits use disjoint generator streams (seed, split, index). Rejects zero
// counts or an invalid bias spec.
Dataset make_dataset(const DatasetConfig& config);

}  // namespace jowl::synthgen
