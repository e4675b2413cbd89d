#pragma once

#include <map>
#include <string>
#include <vector>

#include "jowl/models.hpp"
#include "jowl/synthgen.hpp"

namespace jowl::attack {

// Concepts to suppress (minus) and to amplify (plus). Disjoint, non-empty,
// all drawn from the concept vocabulary.
struct ConceptSets {
  std::vector<std::string> c_minus;
  std::vector<std::string> c_plus;
  void validate() const;
  models::QuerySet joined() const;  // c_minus followed by c_plus
};

struct AttackConfig {
  double delta = 0.0;  // perturbation magnitude, must be > 0
  void validate() const;
};

// Default magnitude: 0.05 times the RMS of the clean embedding entries.
double default_delta(const Tensor& embedding);

struct AttackResult {
  Tensor adversarial;   // perturbed embedding
  Tensor perturbation;  // entries in {-delta, 0, +delta}
  double loss_before;   // adversarial loss at the clean embedding
};

// Signed score sum: concepts to suppress count positive, concepts to amplify
// negative. The detection must have been run with queries c_minus ++ c_plus.
double adv_loss(const models::DetectionOutput& detection,
                const ConceptSets& sets);

// Single-step sign-gradient perturbation of the shared vision embedding.
// The gradient is taken of adv_loss w.r.t. the full embedding; entries with
// an exactly-zero gradient stay untouched (sign(0) = 0).
AttackResult semantic_fgsm(const models::ModelParams& params,
                           const Tensor& embedding, const ConceptSets& sets,
                           const AttackConfig& config);
AttackResult semantic_fgsm(const models::ModelParams& params,
                           const synthgen::Image& image,
                           const ConceptSets& sets, const AttackConfig& config);

// Before/after view of both heads: maximal detection score for every concept
// in the swap, and the language model probe score. Pure measurement.
struct EffectReport {
  std::vector<std::string> probe_prompt;
  double delta = 0.0;
  std::map<std::string, double> max_q_before, max_q_after;
  double lm_before = 0.0, lm_after = 0.0;
  double loss_before = 0.0, loss_after = 0.0;
};

EffectReport attack_effect_report(const models::ModelParams& params,
                                  const synthgen::Image& image,
                                  const ConceptSets& sets,
                                  const AttackConfig& config,
                                  const std::vector<std::string>& probe_prompt);

}  // namespace jowl::attack
