#pragma once

#include <string>
#include <vector>

#include "jowl/models.hpp"
#include "jowl/synthgen.hpp"

namespace jowl::pipeline {

// Both heads of the joint model evaluated from one shared vision embedding.
struct JointOutput {
  std::vector<double> last_logits;      // final-position vocabulary logits
  std::vector<std::size_t> generated;   // greedy continuation ids
  models::DetectionOutput owl;
  Tensor embedding;                     // the shared detector embedding
};

// Encode once, then language and detection outputs from the same embedding.
// Changing the query set can never change the language output.
JointOutput run_joint(const models::ModelParams& params,
                      const synthgen::Image& image,
                      const std::vector<std::string>& prompt,
                      const models::QuerySet& queries, std::size_t gen_steps);

// Keeps boxes whose maximal query score reaches the threshold, in order.
models::DetectionOutput filter_boxes(const models::DetectionOutput& output,
                                     double threshold);

}  // namespace jowl::pipeline
