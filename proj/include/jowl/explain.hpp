#pragma once

#include <string>
#include <vector>

#include "jowl/models.hpp"
#include "jowl/synthgen.hpp"

namespace jowl::explain {

// Cosine relevance of each detection box to the next generated token.
struct RelevanceScores {
  std::vector<double> r;  // one entry per vision token, in [-1, 1]
};

// Two-phase saliency grid. Raw maps carry a covered mask (pixels under no
// box stay uncovered); normalized maps are dense in [0, 1].
struct SaliencyMap {
  std::size_t height = 0, width = 0;
  std::vector<double> values;
  std::vector<char> covered;
  bool normalized = false;

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

struct GaResult {
  RelevanceScores scores;
  models::DetectionOutput detection;
  std::size_t top_index;   // argmax of the final logit row
  std::string top_word;
};

// Runs the joint model with the single query {concept}, then compares the
// gradient of the winning output logit against the gradient of every
// per-token detection score, both taken w.r.t. the shared vision embedding.
// A zero-norm gradient yields relevance 0.
GaResult ga_scores(const models::ModelParams& params,
                   const synthgen::Image& image,
                   const std::vector<std::string>& prompt,
                   const std::string& concept);

// Per-pixel maximum of box relevance over all boxes covering the pixel.
// Boxes map to pixel rectangles [round(y*H), round(y*H) + max(1, round(h*H)))
// and likewise in x, clamped to the image.
SaliencyMap composite_map(const RelevanceScores& scores,
                          const models::DetectionOutput& detection,
                          std::size_t height, std::size_t width);

// Uncovered pixels take the covered minimum (an all-uncovered map becomes
// all zeros), then min-max rescaling to [0, 1]; constant maps become zeros.
SaliencyMap normalize_map(const SaliencyMap& raw);

// Grayscale underlay with saliency as red intensity; inputs must match in
// size and the output stays within [0, 1].
synthgen::Image render_overlay(const synthgen::Image& image,
                               const SaliencyMap& map);

}  // namespace jowl::explain
