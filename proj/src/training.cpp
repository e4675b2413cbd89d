#include "jowl/training.hpp"

#include <chrono>
#include <cmath>
#include <map>
#include <numeric>

#include "jowl/rng.hpp"

namespace jowl::training {

using diffcore::NodeId;
using diffcore::Tape;
using models::Bound;
using models::ModelParams;
using models::Stage;
using synthgen::Scene;

namespace {

void check_finite(double loss, const char* stage, TrainReport& report) {
  if (!std::isfinite(loss))
    throw TrainingDiverged(std::string(stage) + ": non-finite loss",
                           report);
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed,
                                  std::uint64_t stage, std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  SplitMix64 rng = make_stream(seed, kStreamShuffle + stage, epoch);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    std::size_t j = i + rng.below(n - i);
    std::swap(idx[i], idx[j]);
  }
  return idx;
}

class Sgd {
 public:
  Sgd(double lr, bool momentum) : lr_(lr), momentum_(momentum) {}

  void accumulate(const std::vector<std::pair<std::string, Tensor>>& named,
                  const std::vector<Tensor>& grads) {
    for (std::size_t i = 0; i < named.size(); ++i) {
      auto [it, fresh] = sum_.try_emplace(named[i].first, grads[i]);
      if (!fresh)
        for (std::size_t j = 0; j < grads[i].size(); ++j)
          it->second.data[j] += grads[i].data[j];
    }
    ++count_;
  }

  void step(ModelParams& params) {
    if (count_ == 0) return;
    double inv = 1.0 / static_cast<double>(count_);
    for (auto& [name, g] : sum_) {
      Tensor& p = params.find(name);
      auto [vit, fresh] = velocity_.try_emplace(name, Tensor::zeros(p.shape));
      Tensor& v = vit->second;
      for (std::size_t j = 0; j < p.size(); ++j) {
        double gm = g.data[j] * inv;
        v.data[j] = momentum_ ? 0.9 * v.data[j] + gm : gm;
        p.data[j] -= lr_ * v.data[j];
      }
    }
    sum_.clear();
    count_ = 0;
  }

 private:
  double lr_;
  bool momentum_;
  std::map<std::string, Tensor> sum_;
  std::map<std::string, Tensor> velocity_;
  std::size_t count_ = 0;
};

// --- detector stage ---------------------------------------------------------

struct DetectorTargets {
  Tensor scores;      // S x |concepts|, 1 where the patch center is in a box
  Tensor box;         // S x 4
  Tensor box_mask;    // S x 4, rows of positive tokens
  std::size_t n_positive = 0;
};

DetectorTargets detector_targets(const Scene& scene,
                                 const models::ArchConfig& arch) {
  const auto& concepts = synthgen::concept_words();
  std::size_t S = arch.seq_len(), g = arch.grid();
  DetectorTargets t{Tensor::zeros({S, concepts.size()}),
                    Tensor::zeros({S, 4}), Tensor::zeros({S, 4}), 0};
  for (std::size_t pr = 0; pr < g; ++pr)
    for (std::size_t pc = 0; pc < g; ++pc) {
      std::size_t i = pr * g + pc;
      double cx = (static_cast<double>(pc) + 0.5) / static_cast<double>(g);
      double cy = (static_cast<double>(pr) + 0.5) / static_cast<double>(g);
      for (const synthgen::GtBox& box : scene.gt_boxes) {
        if (cx < box.x || cx >= box.x + box.w || cy < box.y ||
            cy >= box.y + box.h)
          continue;
        for (const std::string& w : box.concepts)
          for (std::size_t q = 0; q < concepts.size(); ++q)
            if (concepts[q] == w) t.scores.at(i, q) = 1.0;
        t.box.at(i, 0) = box.x;
        t.box.at(i, 1) = box.y;
        t.box.at(i, 2) = box.w;
        t.box.at(i, 3) = box.h;
        for (std::size_t c = 0; c < 4; ++c) t.box_mask.at(i, c) = 1.0;
        ++t.n_positive;
      }
    }
  return t;
}

NodeId detector_loss(Bound& B, const Scene& scene) {
  Tape& t = B.tape();
  const models::ArchConfig& arch = B.params().arch;
  DetectorTargets targets = detector_targets(scene, arch);
  std::size_t S = arch.seq_len();
  std::vector<std::size_t> qids(models::Tokenizer::concept_count());
  std::iota(qids.begin(), qids.end(), 0);

  NodeId patches = t.constant(models::image_to_patches(scene.image, arch));
  NodeId emb = build_encoder(B, patches, models::Encoder::kDetector);
  NodeId logits = build_detection_logits(B, emb, qids);
  NodeId bce = t.scale(t.bce_logits_sum(logits, t.constant(targets.scores)),
                       1.0 / static_cast<double>(S * qids.size()));

  NodeId boxes = build_boxes(B, emb);
  NodeId l1 = t.scale(
      t.sum(t.mul(t.abs(t.sub(boxes, t.constant(targets.box))),
                  t.constant(targets.box_mask))),
      1.0 / static_cast<double>(4 * std::max<std::size_t>(1, targets.n_positive)));
  return t.add(bce, l1);
}

double eval_detector_loss(const ModelParams& params,
                          const std::vector<Scene>& scenes) {
  double total = 0.0;
  for (const Scene& s : scenes) {
    Tape tape;
    Bound B(tape, params);
    total += tape.forward(detector_loss(B, s)).data[0];
  }
  return total / static_cast<double>(scenes.size());
}

// --- language model stage ---------------------------------------------------

// Caption prediction plus a deterministic rotation of question-answer pairs.
NodeId mllm_loss(Bound& B, const Scene& scene,
                 const std::vector<std::size_t>& qa_subset) {
  Tape& t = B.tape();
  const models::ArchConfig& arch = B.params().arch;
  std::size_t S = arch.seq_len();
  const models::Tokenizer& tok = models::tokenizer();

  NodeId patches = t.constant(models::image_to_patches(scene.image, arch));
  NodeId emb = build_encoder(B, patches, models::Encoder::kReference);

  std::vector<std::size_t> cap = models::prompt_ids(scene.caption);
  NodeId cap_logits = build_lm(B, emb, cap);
  std::vector<std::size_t> cap_targets(cap.begin() + 1, cap.end());
  NodeId loss = t.cross_entropy(
      t.slice_rows(cap_logits, S, S + cap.size() - 1), cap_targets);

  if (!qa_subset.empty()) {
    NodeId qa_sum{};
    for (std::size_t k = 0; k < qa_subset.size(); ++k) {
      const synthgen::QaPair& qa = scene.qa[qa_subset[k]];
      std::size_t ans = qa.yes ? tok.yes() : tok.no();
      std::vector<std::size_t> ids = models::prompt_ids(qa.question);
      ids.push_back(ans);
      NodeId logits = build_lm(B, emb, ids);
      std::size_t row = S + ids.size() - 2;  // "?" predicts the answer
      NodeId lk = t.cross_entropy(t.slice_rows(logits, row, row + 1), {ans});
      qa_sum = k == 0 ? lk : t.add(qa_sum, lk);
    }
    loss = t.add(
        loss, t.scale(qa_sum, 1.0 / static_cast<double>(qa_subset.size())));
  }
  return loss;
}

std::vector<std::size_t> qa_rotation(std::size_t total, std::size_t take,
                                     std::size_t epoch, std::size_t scene_idx) {
  std::vector<std::size_t> out;
  std::size_t start = (epoch * 5 + scene_idx * 3) % total;
  for (std::size_t j = 0; j < take && j < total; ++j)
    out.push_back((start + j) % total);
  return out;
}

std::vector<std::size_t> all_qa(const Scene& s) {
  std::vector<std::size_t> out(s.qa.size());
  std::iota(out.begin(), out.end(), 0);
  return out;
}

double eval_mllm_loss(const ModelParams& params,
                      const std::vector<Scene>& scenes) {
  double total = 0.0;
  for (const Scene& s : scenes) {
    Tape tape;
    Bound B(tape, params);
    total += tape.forward(mllm_loss(B, s, all_qa(s))).data[0];
  }
  return total / static_cast<double>(scenes.size());
}

// --- alignment stage ---------------------------------------------------------

NodeId alignment_loss_node(Bound& B, const Tensor& det_emb,
                           const Tensor& ref_emb) {
  Tape& t = B.tape();
  NodeId out = build_align(B, t.constant(det_emb));
  NodeId diff = t.sub(out, t.constant(ref_emb));
  return t.scale(t.sum(t.mul(diff, diff)),
                 1.0 / static_cast<double>(det_emb.rows()));
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("train config: lr must be > 0");
  if (batch_size == 0)
    throw std::invalid_argument("train config: batch size must be > 0");
}

TrainReport pretrain_detector(ModelParams& params, const synthgen::Dataset& data,
                              const TrainConfig& config) {
  config.validate();
  TrainReport report;
  if (config.epochs == 0) return report;
  auto t0 = std::chrono::steady_clock::now();
  auto prefixes = ModelParams::stage_prefixes(Stage::kDetector);
  Sgd opt(config.lr, config.momentum);

  report.val_loss.push_back(eval_detector_loss(params, data.val));
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    auto order = shuffled(data.train.size(), config.seed, 0, epoch);
    for (std::size_t b = 0; b < order.size(); ++b) {
      Tape tape;
      Bound B(tape, params, prefixes);
      NodeId loss = detector_loss(B, data.train[order[b]]);
      double lv = tape.forward(loss).data[0];
      check_finite(lv, "detector", report);
      epoch_loss += lv;
      std::vector<diffcore::NodeId> ids;
      for (const auto& [n, id] : B.leaves()) ids.push_back(id);
      opt.accumulate(B.leaves(), tape.grad_multi(loss, ids));
      if ((b + 1) % config.batch_size == 0 || b + 1 == order.size())
        opt.step(params);
    }
    report.train_loss.push_back(epoch_loss / double(order.size()));
    report.val_loss.push_back(eval_detector_loss(params, data.val));
    check_finite(report.val_loss.back(), "detector", report);
  }
  params.flags.detector = true;
  report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return report;
}

TrainReport pretrain_mllm(ModelParams& params, const synthgen::Dataset& data,
                          const TrainConfig& config) {
  config.validate();
  TrainReport report;
  if (config.epochs == 0) return report;
  auto t0 = std::chrono::steady_clock::now();
  auto prefixes = ModelParams::stage_prefixes(Stage::kMllm);
  Sgd opt(config.lr, config.momentum);
  constexpr std::size_t kQaPerStep = 4;

  report.val_loss.push_back(eval_mllm_loss(params, data.val));
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    auto order = shuffled(data.train.size(), config.seed, 1, epoch);
    for (std::size_t b = 0; b < order.size(); ++b) {
      const Scene& scene = data.train[order[b]];
      Tape tape;
      Bound B(tape, params, prefixes);
      NodeId loss = mllm_loss(
          B, scene, qa_rotation(scene.qa.size(), kQaPerStep, epoch, order[b]));
      double lv = tape.forward(loss).data[0];
      check_finite(lv, "mllm", report);
      epoch_loss += lv;
      std::vector<diffcore::NodeId> ids;
      for (const auto& [n, id] : B.leaves()) ids.push_back(id);
      opt.accumulate(B.leaves(), tape.grad_multi(loss, ids));
      if ((b + 1) % config.batch_size == 0 || b + 1 == order.size())
        opt.step(params);
    }
    report.train_loss.push_back(epoch_loss / double(order.size()));
    report.val_loss.push_back(eval_mllm_loss(params, data.val));
    check_finite(report.val_loss.back(), "mllm", report);
  }
  params.flags.mllm = true;
  report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return report;
}

TrainReport train_alignment(ModelParams& params, const synthgen::Dataset& data,
                            const TrainConfig& config) {
  config.validate();
  TrainReport report;
  if (config.epochs == 0) return report;
  auto t0 = std::chrono::steady_clock::now();
  auto prefixes = ModelParams::stage_prefixes(Stage::kAlign);
  Sgd opt(config.lr, config.momentum);

  // Both encoders are frozen here, so their embeddings can be cached once.
  auto embed_split = [&](const std::vector<Scene>& scenes,
                         std::vector<std::pair<Tensor, Tensor>>& out) {
    out.reserve(scenes.size());
    for (const Scene& s : scenes)
      out.push_back(
          {models::encode_vision(params, s.image, models::Encoder::kDetector),
           models::encode_vision(params, s.image,
                                 models::Encoder::kReference)});
  };
  std::vector<std::pair<Tensor, Tensor>> train_emb, val_emb;
  embed_split(data.train, train_emb);
  embed_split(data.val, val_emb);

  auto eval_val = [&]() {
    double total = 0.0;
    for (const auto& [det, ref] : val_emb) {
      Tape tape;
      Bound B(tape, params);
      total += tape.forward(alignment_loss_node(B, det, ref)).data[0];
    }
    return total / double(val_emb.size());
  };

  report.val_loss.push_back(eval_val());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    auto order = shuffled(train_emb.size(), config.seed, 2, epoch);
    for (std::size_t b = 0; b < order.size(); ++b) {
      const auto& [det, ref] = train_emb[order[b]];
      Tape tape;
      Bound B(tape, params, prefixes);
      NodeId loss = alignment_loss_node(B, det, ref);
      double lv = tape.forward(loss).data[0];
      check_finite(lv, "align", report);
      epoch_loss += lv;
      std::vector<diffcore::NodeId> ids;
      for (const auto& [n, id] : B.leaves()) ids.push_back(id);
      opt.accumulate(B.leaves(), tape.grad_multi(loss, ids));
      if ((b + 1) % config.batch_size == 0 || b + 1 == order.size())
        opt.step(params);
    }
    report.train_loss.push_back(epoch_loss / double(order.size()));
    report.val_loss.push_back(eval_val());
    check_finite(report.val_loss.back(), "align", report);
  }
  params.flags.align = true;
  report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return report;
}

double detection_accuracy(const ModelParams& params,
                          const std::vector<Scene>& scenes) {
  const auto& concepts = synthgen::concept_words();
  std::size_t correct = 0, total = 0;
  for (const Scene& s : scenes) {
    Tensor emb =
        models::encode_vision(params, s.image, models::Encoder::kDetector);
    models::DetectionOutput det = models::detect(params, emb, concepts);
    for (std::size_t q = 0; q < concepts.size(); ++q) {
      double mq = 0.0;
      for (const models::DetectionBox& b : det.boxes)
        mq = std::max(mq, b.z[q]);
      bool predicted = mq >= 0.5;
      if (predicted == s.contains(concepts[q])) ++correct;
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

double qa_accuracy(const ModelParams& params, const std::vector<Scene>& scenes,
                   Pipeline pipeline) {
  const models::Tokenizer& tok = models::tokenizer();
  std::size_t correct = 0, total = 0;
  for (const Scene& s : scenes) {
    Tensor vision =
        pipeline == Pipeline::kReference
            ? models::encode_vision(params, s.image, models::Encoder::kReference)
            : models::align(params, models::encode_vision(
                                        params, s.image,
                                        models::Encoder::kDetector));
    for (const synthgen::QaPair& qa : s.qa) {
      if (qa.question[0] != "contains") continue;
      Tensor logits =
          models::lm_forward(params, vision, models::prompt_ids(qa.question));
      std::size_t pred = models::argmax_row(logits, logits.rows() - 1);
      std::size_t want = qa.yes ? tok.yes() : tok.no();
      if (pred == want) ++correct;
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

double alignment_loss(const ModelParams& params,
                      const std::vector<Scene>& scenes) {
  double total = 0.0;
  for (const Scene& s : scenes) {
    Tensor det =
        models::encode_vision(params, s.image, models::Encoder::kDetector);
    Tensor ref =
        models::encode_vision(params, s.image, models::Encoder::kReference);
    Tensor aligned = models::align(params, det);
    double l = 0.0;
    for (std::size_t j = 0; j < ref.size(); ++j) {
      double d = aligned.data[j] - ref.data[j];
      l += d * d;
    }
    total += l / static_cast<double>(det.rows());
  }
  return total / static_cast<double>(scenes.size());
}

}  // namespace jowl::training
