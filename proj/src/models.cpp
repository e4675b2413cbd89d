#include "jowl/models.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>

#include "jowl/rng.hpp"

namespace jowl::models {

using diffcore::NodeId;
using diffcore::Tape;

// ---------------------------------------------------------------------------
// Tokenizer

Tokenizer::Tokenizer() {
  words_ = {"<bos>", "<eos>", "<pad>"};
  for (const std::string& w : synthgen::concept_words()) words_.push_back(w);
  for (const std::string& w :
       {"contains", "likely", "?", "yes", "no", "and"})
    words_.push_back(w);
  for (std::size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = i;
  yes_ = index_.at("yes");
  no_ = index_.at("no");
}

std::vector<std::size_t> Tokenizer::tokenize(
    const std::vector<std::string>& words) const {
  std::vector<std::size_t> ids;
  ids.reserve(words.size());
  for (const std::string& w : words) ids.push_back(id(w));
  return ids;
}

std::vector<std::string> Tokenizer::detokenize(
    const std::vector<std::size_t>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (std::size_t i : ids) out.push_back(word(i));
  return out;
}

std::size_t Tokenizer::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end())
    throw std::invalid_argument("tokenizer: unknown word '" + word + "'");
  return it->second;
}

const std::string& Tokenizer::word(std::size_t id) const {
  if (id >= words_.size())
    throw std::invalid_argument("tokenizer: id out of range");
  return words_[id];
}

bool Tokenizer::knows(const std::string& word) const {
  return index_.count(word) > 0;
}

std::size_t Tokenizer::concept_id(const std::string& word) const {
  const auto& concepts = synthgen::concept_words();
  for (std::size_t i = 0; i < concepts.size(); ++i)
    if (concepts[i] == word) return i;
  throw std::invalid_argument("tokenizer: '" + word + "' is not a concept");
}

const Tokenizer& tokenizer() {
  static const Tokenizer tok;
  return tok;
}

std::vector<std::size_t> prompt_ids(const std::vector<std::string>& words) {
  std::vector<std::size_t> ids = {tokenizer().bos()};
  for (std::size_t id : tokenizer().tokenize(words)) ids.push_back(id);
  return ids;
}

// ---------------------------------------------------------------------------
// Architecture

void ArchConfig::validate() const {
  if (image_size == 0 || patch == 0 || image_size % patch != 0)
    throw std::invalid_argument("arch: image size must be a patch multiple");
  if (d_v == 0 || d_l == 0 || d_q == 0 || align_hidden == 0)
    throw std::invalid_argument("arch: widths must be positive");
  if (enc_heads == 0 || d_v % enc_heads != 0)
    throw std::invalid_argument("arch: d_v must divide into encoder heads");
  if (d_l % enc_heads != 0)
    throw std::invalid_argument("arch: d_l must divide into encoder heads");
  if (lm_heads == 0 || d_l % lm_heads != 0)
    throw std::invalid_argument("arch: d_l must divide into lm heads");
  if (max_prompt == 0) throw std::invalid_argument("arch: max_prompt");
}

namespace {

void block_specs(std::vector<ParamSpec>& out, const std::string& prefix,
                 std::size_t d) {
  using I = ParamSpec::Init;
  std::size_t h = 4 * d;
  out.push_back({prefix + ".ln1.g", {d}, I::kOne});
  out.push_back({prefix + ".ln1.b", {d}, I::kZero});
  for (const char* w : {"wq", "wk", "wv", "wo"})
    out.push_back({prefix + ".attn." + std::string(w), {d, d}, I::kScaledUniform});
  for (const char* b : {"bq", "bk", "bv", "bo"})
    out.push_back({prefix + ".attn." + std::string(b), {d}, I::kZero});
  out.push_back({prefix + ".ln2.g", {d}, I::kOne});
  out.push_back({prefix + ".ln2.b", {d}, I::kZero});
  out.push_back({prefix + ".mlp.w1", {d, h}, I::kScaledUniform});
  out.push_back({prefix + ".mlp.b1", {h}, I::kZero});
  out.push_back({prefix + ".mlp.w2", {h, d}, I::kScaledUniform});
  out.push_back({prefix + ".mlp.b2", {d}, I::kZero});
}

void encoder_specs(std::vector<ParamSpec>& out, const ArchConfig& arch,
                   const std::string& prefix, std::size_t d) {
  using I = ParamSpec::Init;
  out.push_back({prefix + ".patch.w", {arch.patch_dim(), d}, I::kScaledUniform});
  out.push_back({prefix + ".patch.b", {d}, I::kZero});
  out.push_back({prefix + ".pos", {arch.seq_len(), d}, I::kScaledUniform});
  for (std::size_t b = 0; b < arch.enc_blocks; ++b)
    block_specs(out, prefix + ".blk" + std::to_string(b), d);
  out.push_back({prefix + ".lnf.g", {d}, I::kOne});
  out.push_back({prefix + ".lnf.b", {d}, I::kZero});
}

}  // namespace

std::vector<ParamSpec> arch_param_specs(const ArchConfig& arch) {
  using I = ParamSpec::Init;
  arch.validate();
  std::size_t vocab = tokenizer().size();
  std::vector<ParamSpec> out;

  encoder_specs(out, arch, "det", arch.d_v);
  out.push_back({"head.proj.w", {arch.d_v, arch.d_q}, I::kScaledUniform});
  out.push_back({"head.proj.b", {arch.d_q}, I::kZero});
  out.push_back(
      {"head.query.emb", {Tokenizer::concept_count(), arch.d_q}, I::kScaledUniform});
  out.push_back({"head.tau", {1}, I::kOne});
  out.push_back({"head.bias", {1}, I::kZero});
  out.push_back({"head.box.w", {arch.d_v, 4}, I::kScaledUniform});
  out.push_back({"head.box.b", {4}, I::kZero});

  encoder_specs(out, arch, "ref", arch.d_l);

  out.push_back({"align.w1", {arch.d_v, arch.align_hidden}, I::kScaledUniform});
  out.push_back({"align.b1", {arch.align_hidden}, I::kZero});
  out.push_back(
      {"align.w2", {arch.align_hidden, arch.align_hidden}, I::kScaledUniform});
  out.push_back({"align.b2", {arch.align_hidden}, I::kZero});
  out.push_back({"align.w3", {arch.align_hidden, arch.d_l}, I::kScaledUniform});
  out.push_back({"align.b3", {arch.d_l}, I::kZero});

  out.push_back({"lm.tok.emb", {vocab, arch.d_l}, I::kScaledUniform});
  out.push_back({"lm.pos", {arch.context(), arch.d_l}, I::kScaledUniform});
  for (std::size_t b = 0; b < arch.lm_blocks; ++b)
    block_specs(out, "lm.blk" + std::to_string(b), arch.d_l);
  out.push_back({"lm.lnf.g", {arch.d_l}, I::kOne});
  out.push_back({"lm.lnf.b", {arch.d_l}, I::kZero});
  out.push_back({"lm.out.w", {arch.d_l, vocab}, I::kScaledUniform});
  out.push_back({"lm.out.b", {vocab}, I::kZero});
  return out;
}

ModelParams ModelParams::init(const ArchConfig& arch, std::uint64_t seed) {
  ModelParams p;
  p.arch = arch;
  auto specs = arch_param_specs(arch);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const ParamSpec& s = specs[i];
    Tensor t = Tensor::zeros(s.shape);
    switch (s.init) {
      case ParamSpec::Init::kZero:
        break;
      case ParamSpec::Init::kOne:
        std::fill(t.data.begin(), t.data.end(), 1.0);
        break;
      case ParamSpec::Init::kScaledUniform: {
        // fan_in + fan_out: rows + cols for matrices, extent + extent for
        // embeddings and position tables alike.
        double fan = static_cast<double>(t.rows() + t.cols());
        double bound = std::sqrt(6.0 / fan);
        SplitMix64 rng = make_stream(seed, kStreamParamInit, i);
        for (double& v : t.data) v = rng.uniform(-bound, bound);
        break;
      }
    }
    p.tensors.push_back({s.name, std::move(t)});
  }
  return p;
}

ModelParams ModelParams::zeros(const ArchConfig& arch) {
  ModelParams p;
  p.arch = arch;
  for (const ParamSpec& s : arch_param_specs(arch)) {
    Tensor t = Tensor::zeros(s.shape);
    if (s.init == ParamSpec::Init::kOne)
      std::fill(t.data.begin(), t.data.end(), 1.0);
    p.tensors.push_back({s.name, std::move(t)});
  }
  return p;
}

Tensor& ModelParams::find(const std::string& name) {
  for (auto& [n, t] : tensors)
    if (n == name) return t;
  throw std::invalid_argument("params: no tensor named '" + name + "'");
}

const Tensor& ModelParams::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw std::invalid_argument("params: no tensor named '" + name + "'");
}

bool ModelParams::has(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

std::vector<std::string> ModelParams::names_with_prefix(
    const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [n, t] : tensors)
    if (n.rfind(prefix, 0) == 0) out.push_back(n);
  return out;
}

std::vector<std::string> ModelParams::stage_prefixes(Stage stage) {
  switch (stage) {
    case Stage::kDetector: return {"det.", "head."};
    case Stage::kMllm: return {"ref.", "lm."};
    case Stage::kAlign: return {"align."};
  }
  return {};
}

// ---------------------------------------------------------------------------
// Graph builders

Bound::Bound(Tape& tape, const ModelParams& params,
             std::vector<std::string> trainable_prefixes)
    : tape_(&tape), params_(&params), prefixes_(std::move(trainable_prefixes)) {}

NodeId Bound::operator()(const std::string& name) {
  auto it = cache_.find(name);
  if (it != cache_.end()) return it->second;
  const Tensor& t = params_->find(name);
  bool trainable = false;
  for (const std::string& p : prefixes_)
    if (name.rfind(p, 0) == 0) trainable = true;
  NodeId id = trainable ? tape_->leaf(t) : tape_->constant(t);
  if (trainable) leaves_.push_back({name, id});
  cache_[name] = id;
  return id;
}

Tensor image_to_patches(const synthgen::Image& image, const ArchConfig& arch) {
  if (image.width != arch.image_size || image.height != arch.image_size)
    throw std::invalid_argument("image size does not match architecture");
  std::size_t g = arch.grid(), p = arch.patch;
  Tensor out = Tensor::zeros({g * g, arch.patch_dim()});
  for (std::size_t pr = 0; pr < g; ++pr)
    for (std::size_t pc = 0; pc < g; ++pc) {
      double* row = &out.data[(pr * g + pc) * arch.patch_dim()];
      std::size_t k = 0;
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          for (std::size_t c = 0; c < 3; ++c)
            row[k++] = image.at(pr * p + y, pc * p + x, c);
    }
  return out;
}

namespace {

// Pre-norm transformer block; mask (if any) is added to attention scores.
NodeId build_block(Bound& B, NodeId x, const std::string& prefix,
                   std::size_t heads, std::optional<NodeId> mask) {
  Tape& t = B.tape();
  std::size_t d = t.value(x).cols();
  std::size_t dh = d / heads;

  NodeId a = t.layer_norm(x, B(prefix + ".ln1.g"), B(prefix + ".ln1.b"));
  NodeId q = t.add(t.matmul(a, B(prefix + ".attn.wq")), B(prefix + ".attn.bq"));
  NodeId k = t.add(t.matmul(a, B(prefix + ".attn.wk")), B(prefix + ".attn.bk"));
  NodeId v = t.add(t.matmul(a, B(prefix + ".attn.wv")), B(prefix + ".attn.bv"));

  NodeId merged{};
  for (std::size_t h = 0; h < heads; ++h) {
    NodeId qh = t.slice_cols(q, h * dh, (h + 1) * dh);
    NodeId kh = t.slice_cols(k, h * dh, (h + 1) * dh);
    NodeId vh = t.slice_cols(v, h * dh, (h + 1) * dh);
    NodeId scores =
        t.scale(t.matmul(qh, t.transpose(kh)), 1.0 / std::sqrt(double(dh)));
    if (mask) scores = t.add(scores, *mask);
    NodeId oh = t.matmul(t.softmax_rows(scores), vh);
    merged = h == 0 ? oh : t.concat_cols(merged, oh);
  }
  NodeId proj =
      t.add(t.matmul(merged, B(prefix + ".attn.wo")), B(prefix + ".attn.bo"));
  x = t.add(x, proj);

  NodeId a2 = t.layer_norm(x, B(prefix + ".ln2.g"), B(prefix + ".ln2.b"));
  NodeId hmid =
      t.gelu(t.add(t.matmul(a2, B(prefix + ".mlp.w1")), B(prefix + ".mlp.b1")));
  NodeId m =
      t.add(t.matmul(hmid, B(prefix + ".mlp.w2")), B(prefix + ".mlp.b2"));
  return t.add(x, m);
}

Tensor causal_mask(std::size_t n) {
  Tensor m = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m.at(i, j) = -1e30;
  return m;
}

}  // namespace

NodeId build_encoder(Bound& B, NodeId patches, Encoder which) {
  Tape& t = B.tape();
  const ArchConfig& arch = B.params().arch;
  std::string prefix = which == Encoder::kDetector ? "det" : "ref";
  NodeId x = t.add(t.matmul(patches, B(prefix + ".patch.w")),
                   B(prefix + ".patch.b"));
  x = t.add(x, B(prefix + ".pos"));
  for (std::size_t b = 0; b < arch.enc_blocks; ++b)
    x = build_block(B, x, prefix + ".blk" + std::to_string(b), arch.enc_heads,
                    std::nullopt);
  return t.layer_norm(x, B(prefix + ".lnf.g"), B(prefix + ".lnf.b"));
}

NodeId build_align(Bound& B, NodeId vision) {
  Tape& t = B.tape();
  NodeId h1 = t.gelu(t.add(t.matmul(vision, B("align.w1")), B("align.b1")));
  NodeId h2 = t.gelu(t.add(t.matmul(h1, B("align.w2")), B("align.b2")));
  return t.add(t.matmul(h2, B("align.w3")), B("align.b3"));
}

NodeId build_detection_logits(Bound& B, NodeId vision,
                              const std::vector<std::size_t>& query_ids) {
  Tape& t = B.tape();
  NodeId proj = t.add(t.matmul(vision, B("head.proj.w")), B("head.proj.b"));
  NodeId queries = t.embed(B("head.query.emb"), query_ids);
  NodeId logits = t.matmul(proj, t.transpose(queries));
  return t.add(t.mul(logits, B("head.tau")), B("head.bias"));
}

NodeId build_detection_scores(Bound& B, NodeId vision,
                              const std::vector<std::size_t>& query_ids) {
  return B.tape().sigmoid(build_detection_logits(B, vision, query_ids));
}

NodeId build_boxes(Bound& B, NodeId vision) {
  Tape& t = B.tape();
  return t.sigmoid(t.add(t.matmul(vision, B("head.box.w")), B("head.box.b")));
}

NodeId build_lm(Bound& B, NodeId aligned_vision,
                const std::vector<std::size_t>& prompt_ids) {
  Tape& t = B.tape();
  const ArchConfig& arch = B.params().arch;
  std::size_t S = arch.seq_len();
  std::size_t n = prompt_ids.size();
  if (n > arch.max_prompt)
    throw std::invalid_argument("lm: prompt of " + std::to_string(n) +
                                " tokens exceeds context limit " +
                                std::to_string(arch.max_prompt));
  NodeId x = aligned_vision;
  if (n > 0) {
    NodeId tok = t.embed(B("lm.tok.emb"), prompt_ids);
    x = t.concat_rows(aligned_vision, tok);
  }
  x = t.add(x, t.slice_rows(B("lm.pos"), 0, S + n));
  NodeId mask = t.constant(causal_mask(S + n));
  for (std::size_t b = 0; b < arch.lm_blocks; ++b)
    x = build_block(B, x, "lm.blk" + std::to_string(b), arch.lm_heads, mask);
  x = t.layer_norm(x, B("lm.lnf.g"), B("lm.lnf.b"));
  return t.add(t.matmul(x, B("lm.out.w")), B("lm.out.b"));
}

// ---------------------------------------------------------------------------
// Inference

Tensor encode_vision(const ModelParams& params, const synthgen::Image& image,
                     Encoder which) {
  Tape tape;
  Bound B(tape, params);
  NodeId patches = tape.constant(image_to_patches(image, params.arch));
  NodeId out = build_encoder(B, patches, which);
  return tape.forward(out);
}

DetectionOutput detect(const ModelParams& params, const Tensor& embedding,
                       const QuerySet& queries) {
  if (queries.empty())
    throw std::invalid_argument("detect: query set must be non-empty");
  std::vector<std::size_t> qids;
  for (const std::string& q : queries)
    qids.push_back(tokenizer().concept_id(q));

  Tape tape;
  Bound B(tape, params);
  NodeId emb = tape.constant(embedding);
  NodeId scores = build_detection_scores(B, emb, qids);
  NodeId boxes = build_boxes(B, emb);
  const Tensor& z = tape.forward(scores);
  const Tensor& bx = tape.value(boxes);

  DetectionOutput out;
  out.queries = queries;
  std::size_t S = z.rows();
  for (std::size_t i = 0; i < S; ++i) {
    DetectionBox b;
    b.z.resize(queries.size());
    for (std::size_t j = 0; j < queries.size(); ++j) b.z[j] = z.at(i, j);
    b.x = bx.at(i, 0);
    b.y = bx.at(i, 1);
    b.w = std::min(bx.at(i, 2), 1.0 - b.x);
    b.h = std::min(bx.at(i, 3), 1.0 - b.y);
    out.boxes.push_back(std::move(b));
  }
  return out;
}

Tensor align(const ModelParams& params, const Tensor& embedding) {
  Tape tape;
  Bound B(tape, params);
  NodeId out = build_align(B, tape.constant(embedding));
  return tape.forward(out);
}

Tensor lm_forward(const ModelParams& params, const Tensor& aligned_vision,
                  const std::vector<std::size_t>& prompt_ids) {
  for (std::size_t id : prompt_ids)
    if (id >= tokenizer().size())
      throw std::invalid_argument("lm: prompt id out of vocabulary");
  Tape tape;
  Bound B(tape, params);
  NodeId out = build_lm(B, tape.constant(aligned_vision), prompt_ids);
  return tape.forward(out);
}

std::size_t argmax_row(const Tensor& m, std::size_t row) {
  std::size_t best = 0;
  double bv = m.at(row, 0);
  for (std::size_t j = 1; j < m.cols(); ++j)
    if (m.at(row, j) > bv) {
      bv = m.at(row, j);
      best = j;
    }
  return best;
}

std::vector<std::size_t> decode_greedy(const ModelParams& params,
                                       const Tensor& aligned_vision,
                                       std::vector<std::size_t> prompt_ids,
                                       std::size_t steps) {
  std::vector<std::size_t> generated;
  for (std::size_t s = 0; s < steps; ++s) {
    if (prompt_ids.size() >= params.arch.max_prompt) break;
    Tensor logits = lm_forward(params, aligned_vision, prompt_ids);
    std::size_t next = argmax_row(logits, logits.rows() - 1);
    generated.push_back(next);
    if (next == tokenizer().eos()) break;
    prompt_ids.push_back(next);
  }
  return generated;
}

}  // namespace jowl::models
