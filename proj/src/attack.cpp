#include "jowl/attack.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "jowl/harness.hpp"

namespace jowl::attack {

using diffcore::NodeId;
using diffcore::Tape;

void ConceptSets::validate() const {
  if (c_minus.empty() || c_plus.empty())
    throw std::invalid_argument("concept sets: both sets must be non-empty");
  const models::Tokenizer& tok = models::tokenizer();
  for (const std::string& w : c_minus) tok.concept_id(w);
  for (const std::string& w : c_plus) tok.concept_id(w);
  for (const std::string& a : c_minus)
    for (const std::string& b : c_plus)
      if (a == b)
        throw std::invalid_argument("concept sets: '" + a +
                                    "' appears on both sides");
}

models::QuerySet ConceptSets::joined() const {
  models::QuerySet q = c_minus;
  q.insert(q.end(), c_plus.begin(), c_plus.end());
  return q;
}

void AttackConfig::validate() const {
  if (!(delta > 0.0))
    throw std::invalid_argument("attack config: delta must be > 0");
}

double default_delta(const Tensor& embedding) {
  double ms = 0.0;
  for (double v : embedding.data) ms += v * v;
  ms /= static_cast<double>(embedding.size());
  return 0.05 * std::sqrt(ms);
}

double adv_loss(const models::DetectionOutput& detection,
                const ConceptSets& sets) {
  sets.validate();
  if (detection.queries != sets.joined())
    throw std::invalid_argument(
        "adv_loss: detection queries do not match the concept sets");
  double loss = 0.0;
  std::size_t n_minus = sets.c_minus.size();
  for (const models::DetectionBox& b : detection.boxes) {
    for (std::size_t j = 0; j < n_minus; ++j) loss += b.z[j];
    for (std::size_t j = n_minus; j < b.z.size(); ++j) loss -= b.z[j];
  }
  return loss;
}

AttackResult semantic_fgsm(const models::ModelParams& params,
                           const Tensor& embedding, const ConceptSets& sets,
                           const AttackConfig& config) {
  sets.validate();
  config.validate();
  const models::Tokenizer& tok = models::tokenizer();
  std::vector<std::size_t> qids;
  for (const std::string& w : sets.joined()) qids.push_back(tok.concept_id(w));

  Tape tape;
  models::Bound B(tape, params);
  NodeId emb = tape.leaf(embedding);
  NodeId z = build_detection_scores(B, emb, qids);
  std::size_t n_minus = sets.c_minus.size();
  std::size_t n_total = qids.size();
  NodeId minus_sum = tape.sum(tape.slice_cols(z, 0, n_minus));
  NodeId plus_sum = tape.sum(tape.slice_cols(z, n_minus, n_total));
  NodeId loss = tape.sub(minus_sum, plus_sum);

  AttackResult res;
  res.loss_before = tape.forward(loss).data[0];
  Tensor grad = tape.grad(loss, emb);

  res.perturbation = Tensor::zeros(embedding.shape);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    double g = grad.data[i];
    res.perturbation.data[i] =
        g > 0.0 ? -config.delta : g < 0.0 ? config.delta : 0.0;
  }
  res.adversarial = embedding;
  for (std::size_t i = 0; i < grad.size(); ++i)
    res.adversarial.data[i] += res.perturbation.data[i];
  return res;
}

AttackResult semantic_fgsm(const models::ModelParams& params,
                           const synthgen::Image& image,
                           const ConceptSets& sets,
                           const AttackConfig& config) {
  return semantic_fgsm(
      params, models::encode_vision(params, image, models::Encoder::kDetector),
      sets, config);
}

EffectReport attack_effect_report(const models::ModelParams& params,
                                  const synthgen::Image& image,
                                  const ConceptSets& sets,
                                  const AttackConfig& config,
                                  const std::vector<std::string>& probe_prompt) {
  Tensor embedding =
      models::encode_vision(params, image, models::Encoder::kDetector);
  AttackResult res = semantic_fgsm(params, embedding, sets, config);

  EffectReport report;
  report.probe_prompt = probe_prompt;
  report.delta = config.delta;
  report.loss_before = res.loss_before;
  for (const std::string& w : sets.joined()) {
    report.max_q_before[w] = harness::max_q(params, embedding, w);
    report.max_q_after[w] = harness::max_q(params, res.adversarial, w);
  }
  models::DetectionOutput after =
      models::detect(params, res.adversarial, sets.joined());
  report.loss_after = adv_loss(after, sets);
  report.lm_before = harness::score_answer(params, embedding, probe_prompt);
  report.lm_after = harness::score_answer(params, res.adversarial, probe_prompt);
  return report;
}

}  // namespace jowl::attack
