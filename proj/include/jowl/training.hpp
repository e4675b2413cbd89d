#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "jowl/models.hpp"
#include "jowl/synthgen.hpp"

namespace jowl::training {

struct TrainConfig {
  double lr = 0.05;
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  bool momentum = true;  // momentum 0.9, else plain SGD
  void validate() const;
};

struct TrainReport {
  std::vector<double> train_loss;  // one entry per epoch
  std::vector<double> val_loss;    // initial value plus one entry per epoch
  double wall_time_s = 0.0;        // informational; kept out of saved reports
};

// Thrown when a stage produces a non-finite loss; carries the partial report.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, TrainReport report)
      : std::runtime_error(what), report(std::move(report)) {}
  TrainReport report;
};

// Stage 1: detection trunk + head. Binary cross entropy on query scores over
// all concepts (a token is positive for a query when its patch center lies
// inside a ground-truth box carrying that concept) plus L1 box regression on
// positive tokens.
TrainReport pretrain_detector(models::ModelParams& params,
                              const synthgen::Dataset& data,
                              const TrainConfig& config);

// Stage 2: reference encoder + language model, causal cross entropy over
// caption tokens and question answers with the reference vision prefix.
TrainReport pretrain_mllm(models::ModelParams& params,
                          const synthgen::Dataset& data,
                          const TrainConfig& config);

// Stage 3: alignment MLP only, mean over tokens of the squared L2 distance
// between the reference embedding and the aligned detector embedding.
// Everything outside "align." stays bit-identical.
TrainReport train_alignment(models::ModelParams& params,
                            const synthgen::Dataset& data,
                            const TrainConfig& config);

// Fraction of (scene, concept) pairs where thresholding the maximal query
// score at 0.5 agrees with ground-truth presence.
double detection_accuracy(const models::ModelParams& params,
                          const std::vector<synthgen::Scene>& scenes);

// Fraction of presence questions answered correctly by greedy decoding.
// The aligned pipeline reads vision through align(detector); the reference
// pipeline uses the reference encoder directly.
enum class Pipeline { kAligned, kReference };
double qa_accuracy(const models::ModelParams& params,
                   const std::vector<synthgen::Scene>& scenes,
                   Pipeline pipeline);

// Mean alignment loss over scenes; the quantity train_alignment minimizes.
double alignment_loss(const models::ModelParams& params,
                      const std::vector<synthgen::Scene>& scenes);

}  // namespace jowl::training
