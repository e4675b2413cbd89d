#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "jowl/synthgen.hpp"
#include "jowl/tape.hpp"
#include "jowl/tensor.hpp"

namespace jowl::models {

// Word-level tokenizer over the fixed workbench vocabulary. Bijective on
// vocabulary words; anything else is rejected.
class Tokenizer {
 public:
  Tokenizer();
  std::vector<std::size_t> tokenize(const std::vector<std::string>& words) const;
  std::vector<std::string> detokenize(const std::vector<std::size_t>& ids) const;
  std::size_t id(const std::string& word) const;
  const std::string& word(std::size_t id) const;
  std::size_t size() const { return words_.size(); }
  bool knows(const std::string& word) const;

  std::size_t bos() const { return 0; }
  std::size_t eos() const { return 1; }
  std::size_t yes() const { return yes_; }
  std::size_t no() const { return no_; }

  // Concept ids in the order of synthgen::concept_words().
  std::size_t concept_id(const std::string& word) const;
  static std::size_t concept_count() { return 6; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, std::size_t> index_;
  std::size_t yes_ = 0, no_ = 0;
};

struct ArchConfig {
  std::size_t image_size = synthgen::kImageSize;
  std::size_t patch = synthgen::kCell;
  std::size_t d_v = 32;          // detection embedding width
  std::size_t d_l = 48;          // language embedding width
  std::size_t d_q = 16;          // query scoring width
  std::size_t align_hidden = 128;
  std::size_t enc_blocks = 2, enc_heads = 2;
  std::size_t lm_blocks = 2, lm_heads = 2;
  std::size_t max_prompt = 32;

  std::size_t grid() const { return image_size / patch; }
  std::size_t seq_len() const { return grid() * grid(); }  // vision tokens S
  std::size_t patch_dim() const { return patch * patch * 3; }
  std::size_t context() const { return seq_len() + max_prompt; }
  void validate() const;
};

enum class Stage { kDetector, kMllm, kAlign };

struct StageFlags {
  bool detector = false;
  bool mllm = false;
  bool align = false;
};

// Named parameter store. Tensor order is the canonical architecture order,
// which checkpoints and initialisation streams both follow.
struct ModelParams {
  ArchConfig arch;
  std::vector<std::pair<std::string, Tensor>> tensors;
  StageFlags flags;
  std::uint64_t dataset_hash = 0;

  static ModelParams init(const ArchConfig& arch, std::uint64_t seed);
  // All-zero weights with unit layer-norm gains; degenerate reference point.
  static ModelParams zeros(const ArchConfig& arch);

  Tensor& find(const std::string& name);
  const Tensor& find(const std::string& name) const;
  bool has(const std::string& name) const;
  std::vector<std::string> names_with_prefix(const std::string& prefix) const;
  // Parameter name prefixes owned by a training stage.
  static std::vector<std::string> stage_prefixes(Stage stage);
};

struct ParamSpec {
  std::string name;
  std::vector<std::size_t> shape;
  enum class Init { kScaledUniform, kZero, kOne } init;
};
std::vector<ParamSpec> arch_param_specs(const ArchConfig& arch);

using QuerySet = std::vector<std::string>;

struct DetectionBox {
  std::vector<double> z;  // one score per query, in [0,1]
  double x, y, w, h;      // normalized top-left box, clamped into [0,1]^2
};

struct DetectionOutput {
  std::vector<DetectionBox> boxes;  // exactly S entries
  QuerySet queries;
};

enum class Encoder { kDetector, kReference };

// --- Tape-level graph builders -------------------------------------------
//
// Bound resolves parameter names to tape nodes. Parameters whose name starts
// with a trainable prefix become leaves (differentiable); everything else is
// recorded as a constant.
class Bound {
 public:
  Bound(diffcore::Tape& tape, const ModelParams& params,
        std::vector<std::string> trainable_prefixes = {});
  diffcore::NodeId operator()(const std::string& name);
  const std::vector<std::pair<std::string, diffcore::NodeId>>& leaves() const {
    return leaves_;
  }
  diffcore::Tape& tape() { return *tape_; }
  const ModelParams& params() const { return *params_; }

 private:
  diffcore::Tape* tape_;
  const ModelParams* params_;
  std::vector<std::string> prefixes_;
  std::map<std::string, diffcore::NodeId> cache_;
  std::vector<std::pair<std::string, diffcore::NodeId>> leaves_;
};

// Rasters to patch rows: one row of patch*patch*3 values per vision token.
Tensor image_to_patches(const synthgen::Image& image, const ArchConfig& arch);

// Vision transformer trunk: patch projection + position embedding +
// enc_blocks attention blocks + final layer norm. Output is S x width.
diffcore::NodeId build_encoder(Bound& bound, diffcore::NodeId patches,
                               Encoder which);

// Per-token alignment MLP, d_v -> hidden -> hidden -> d_l with GELU.
diffcore::NodeId build_align(Bound& bound, diffcore::NodeId vision);

// Pre-activation detection scores, tau * <proj(t_i), q_j> + bias, S x |Q|.
diffcore::NodeId build_detection_logits(Bound& bound, diffcore::NodeId vision,
                                        const std::vector<std::size_t>& query_ids);

// Query-conditioned detection scores, sigmoid of the logits above.
diffcore::NodeId build_detection_scores(Bound& bound, diffcore::NodeId vision,
                                        const std::vector<std::size_t>& query_ids);

// Per-token box head, sigmoid(linear), shape S x 4 as (x, y, w, h).
diffcore::NodeId build_boxes(Bound& bound, diffcore::NodeId vision);

// Causal language model over [vision tokens | embedded prompt]; returns the
// (S+n) x vocab logit matrix. Prompt may be empty.
diffcore::NodeId build_lm(Bound& bound, diffcore::NodeId aligned_vision,
                          const std::vector<std::size_t>& prompt_ids);

// --- Inference wrappers ----------------------------------------------------

// Patch-embeds and encodes an image with the chosen encoder. The detector
// output has width d_v, the reference encoder width d_l.
Tensor encode_vision(const ModelParams& params, const synthgen::Image& image,
                     Encoder which);

// Detection over a precomputed detector embedding. Box coordinates do not
// depend on the queries. Unknown query words are rejected.
DetectionOutput detect(const ModelParams& params, const Tensor& embedding,
                       const QuerySet& queries);

Tensor align(const ModelParams& params, const Tensor& embedding);

// Logits over [vision | prompt]. Rejects prompts past the context limit.
Tensor lm_forward(const ModelParams& params, const Tensor& aligned_vision,
                  const std::vector<std::size_t>& prompt_ids);

// Greedy continuation: repeatedly append the argmax of the last logit row
// (ties break to the lowest id), stopping at <eos>, `steps` tokens, or the
// context limit. Returns only the generated ids.
std::vector<std::size_t> decode_greedy(const ModelParams& params,
                                       const Tensor& aligned_vision,
                                       std::vector<std::size_t> prompt_ids,
                                       std::size_t steps);

std::size_t argmax_row(const Tensor& m, std::size_t row);

const Tokenizer& tokenizer();

// [<bos>] + tokenized words; the standard prompt encoding.
std::vector<std::size_t> prompt_ids(const std::vector<std::string>& words);

}  // namespace jowl::models
