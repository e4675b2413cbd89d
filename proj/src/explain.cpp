#include "jowl/explain.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace jowl::explain {

using diffcore::NodeId;
using diffcore::Tape;

GaResult ga_scores(const models::ModelParams& params,
                   const synthgen::Image& image,
                   const std::vector<std::string>& prompt,
                   const std::string& concept) {
  const models::Tokenizer& tok = models::tokenizer();
  std::size_t concept_idx = tok.concept_id(concept);  // rejects OOV

  Tensor embedding =
      models::encode_vision(params, image, models::Encoder::kDetector);
  std::vector<std::size_t> ids = models::prompt_ids(prompt);
  std::size_t S = params.arch.seq_len();

  Tape tape;
  models::Bound B(tape, params);
  NodeId emb = tape.leaf(embedding);
  NodeId aligned = build_align(B, emb);
  NodeId logits = build_lm(B, aligned, ids);
  NodeId z = build_detection_scores(B, emb, {concept_idx});
  NodeId boxes = build_boxes(B, emb);

  const Tensor& lv = tape.forward(logits);
  std::size_t last = lv.rows() - 1;
  std::size_t s = models::argmax_row(lv, last);

  Tensor grad_token = tape.grad(tape.pick(logits, last, s), emb);

  GaResult res;
  res.top_index = s;
  res.top_word = tok.word(s);
  res.scores.r.resize(S);
  for (std::size_t i = 0; i < S; ++i) {
    Tensor grad_box = tape.grad(tape.pick(z, i, 0), emb);
    res.scores.r[i] = cosine_similarity(grad_token.data, grad_box.data);
  }

  const Tensor& zv = tape.value(z);
  const Tensor& bv = tape.value(boxes);
  res.detection.queries = {concept};
  for (std::size_t i = 0; i < S; ++i) {
    models::DetectionBox b;
    b.z = {zv.at(i, 0)};
    b.x = bv.at(i, 0);
    b.y = bv.at(i, 1);
    b.w = std::min(bv.at(i, 2), 1.0 - b.x);
    b.h = std::min(bv.at(i, 3), 1.0 - b.y);
    res.detection.boxes.push_back(std::move(b));
  }
  return res;
}

namespace {

struct PixelRect {
  std::size_t x0, x1, y0, y1;  // half-open; empty when degenerate
};

PixelRect to_pixels(const models::DetectionBox& b, std::size_t height,
                    std::size_t width) {
  long y0 = std::lround(b.y * static_cast<double>(height));
  long x0 = std::lround(b.x * static_cast<double>(width));
  long hh = std::max(1L, std::lround(b.h * static_cast<double>(height)));
  long ww = std::max(1L, std::lround(b.w * static_cast<double>(width)));
  PixelRect r;
  r.y0 = static_cast<std::size_t>(std::clamp(y0, 0L, static_cast<long>(height)));
  r.x0 = static_cast<std::size_t>(std::clamp(x0, 0L, static_cast<long>(width)));
  r.y1 = static_cast<std::size_t>(
      std::clamp(y0 + hh, 0L, static_cast<long>(height)));
  r.x1 = static_cast<std::size_t>(
      std::clamp(x0 + ww, 0L, static_cast<long>(width)));
  return r;
}

}  // namespace

SaliencyMap composite_map(const RelevanceScores& scores,
                          const models::DetectionOutput& detection,
                          std::size_t height, std::size_t width) {
  if (scores.r.size() != detection.boxes.size())
    throw std::invalid_argument("composite_map: score/box count mismatch");
  SaliencyMap map;
  map.height = height;
  map.width = width;
  map.values.assign(height * width, 0.0);
  map.covered.assign(height * width, 0);

  for (std::size_t i = 0; i < detection.boxes.size(); ++i) {
    PixelRect rect = to_pixels(detection.boxes[i], height, width);
    double r = scores.r[i];
    for (std::size_t y = rect.y0; y < rect.y1; ++y)
      for (std::size_t x = rect.x0; x < rect.x1; ++x) {
        std::size_t k = y * width + x;
        if (!map.covered[k]) {
          map.values[k] = r;
          map.covered[k] = 1;
        } else {
          map.values[k] = std::max(map.values[k], r);
        }
      }
  }
  return map;
}

SaliencyMap normalize_map(const SaliencyMap& raw) {
  SaliencyMap out = raw;
  out.normalized = true;

  double lo = 0.0, hi = 0.0;
  bool any = false;
  for (std::size_t k = 0; k < raw.values.size(); ++k) {
    if (!raw.covered[k]) continue;
    if (!any) {
      lo = hi = raw.values[k];
      any = true;
    } else {
      lo = std::min(lo, raw.values[k]);
      hi = std::max(hi, raw.values[k]);
    }
  }
  if (!any) {
    std::fill(out.values.begin(), out.values.end(), 0.0);
    std::fill(out.covered.begin(), out.covered.end(), 1);
    return out;
  }
  for (std::size_t k = 0; k < out.values.size(); ++k)
    if (!out.covered[k]) {
      out.values[k] = lo;
      out.covered[k] = 1;
    }
  if (hi == lo) {
    std::fill(out.values.begin(), out.values.end(), 0.0);
    return out;
  }
  for (double& v : out.values) v = (v - lo) / (hi - lo);
  return out;
}

synthgen::Image render_overlay(const synthgen::Image& image,
                               const SaliencyMap& map) {
  if (image.width != map.width || image.height != map.height)
    throw std::invalid_argument("render_overlay: size mismatch");
  synthgen::Image out = synthgen::Image::black(image.width, image.height);
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x) {
      double gray = 0.299 * image.at(y, x, 0) + 0.587 * image.at(y, x, 1) +
                    0.114 * image.at(y, x, 2);
      double s = map.at(y, x);
      out.at(y, x, 0) = 0.5 * gray + 0.5 * s;
      out.at(y, x, 1) = 0.5 * gray * (1.0 - s);
      out.at(y, x, 2) = 0.5 * gray * (1.0 - s);
    }
  return out;
}

}  // namespace jowl::explain
