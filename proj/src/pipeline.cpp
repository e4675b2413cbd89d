#include "jowl/pipeline.hpp"

#include <stdexcept>

namespace jowl::pipeline {

JointOutput run_joint(const models::ModelParams& params,
                      const synthgen::Image& image,
                      const std::vector<std::string>& prompt,
                      const models::QuerySet& queries, std::size_t gen_steps) {
  JointOutput out;
  out.embedding =
      models::encode_vision(params, image, models::Encoder::kDetector);
  Tensor aligned = models::align(params, out.embedding);
  std::vector<std::size_t> ids = models::prompt_ids(prompt);
  Tensor logits = models::lm_forward(params, aligned, ids);
  out.owl = models::detect(params, out.embedding, queries);

  std::size_t last = logits.rows() - 1;
  out.last_logits.assign(logits.data.begin() + last * logits.cols(),
                         logits.data.begin() + (last + 1) * logits.cols());
  if (gen_steps > 0)
    out.generated = models::decode_greedy(params, aligned, ids, gen_steps);
  return out;
}

models::DetectionOutput filter_boxes(const models::DetectionOutput& output,
                                     double threshold) {
  if (threshold < 0.0 || threshold > 1.0)
    throw std::invalid_argument("filter_boxes: threshold outside [0,1]");
  models::DetectionOutput kept;
  kept.queries = output.queries;
  for (const models::DetectionBox& b : output.boxes) {
    double mq = 0.0;
    for (double z : b.z) mq = std::max(mq, z);
    if (mq >= threshold) kept.boxes.push_back(b);
  }
  return kept;
}

}  // namespace jowl::pipeline
