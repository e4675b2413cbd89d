#pragma once

#include <string>
#include <vector>

#include "jowl/attack.hpp"
#include "jowl/models.hpp"
#include "jowl/synthgen.hpp"

namespace jowl::harness {

// Maximal detection score over all vision tokens for a single query.
double max_q(const models::ModelParams& params, const Tensor& embedding,
             const std::string& concept);
double max_q(const models::ModelParams& params, const synthgen::Image& image,
             const std::string& concept);

// Yes-probability of the answer distribution after one forward pass:
// p(yes) / (p(yes) + p(no)) from the softmax of the final logit row.
// The probe must end with "?".
double score_answer(const models::ModelParams& params, const Tensor& embedding,
                    const std::vector<std::string>& probe_prompt);
double score_answer(const models::ModelParams& params,
                    const synthgen::Image& image,
                    const std::vector<std::string>& probe_prompt);

// Mean max_q bucketed by ground-truth presence x the model's yes/no answer
// to "contains <concept> ?" over every (scene, concept) pair. Answers other
// than yes/no count as no and are tallied separately.
struct HallucinationReport {
  double mean_gt_yes = 0.0, mean_gt_no = 0.0;
  double mean_neg_yes = 0.0, mean_neg_no = 0.0;
  std::size_t n_gt_yes = 0, n_gt_no = 0, n_neg_yes = 0, n_neg_no = 0;
  std::size_t malformed = 0;
};

HallucinationReport hallucination_report(
    const models::ModelParams& params,
    const std::vector<synthgen::Scene>& scenes);

struct BiasRow {
  std::string property;
  std::vector<std::string> c_minus, c_plus;
  double mean_delta = 0.0;   // mean of (after - before) probe scores
  double mean_before = 0.0;
  double mean_after = 0.0;
  std::size_t n = 0;
  double p_value = 1.0;      // two-sided t-test of mean delta against 0
};

struct BiasReport {
  std::vector<BiasRow> rows;  // probed property first, then the swap
                              // concepts themselves as effectiveness rows
};

// Probes "likely <property> ?" before and after the concept-swap attack on
// every test scene containing all the suppressed concepts. Rejects an empty
// qualifying subset.
BiasReport bias_report(const models::ModelParams& params,
                       const std::vector<synthgen::Scene>& scenes,
                       const attack::ConceptSets& sets,
                       const std::string& property,
                       const attack::AttackConfig& config);

// Two-sided one-sample Student t-test p-value for mean(xs) == 0.
double t_test_two_sided_p(const std::vector<double>& xs);

// Evaluation parallelism cap from JOWL_THREADS (default 1). Aggregation is
// index-ordered, so results do not depend on the thread count.
std::size_t eval_threads();

}  // namespace jowl::harness
