#include "jowl/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "jowl/rng.hpp"

namespace jowl::diffcore {

namespace {

constexpr double kLnEps = 1e-5;  // layer norm variance floor
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_bwd(double x) {
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
         x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

double sigmoid_fwd(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// Broadcast category of b against a: 0 same shape, 1 scalar, 2 row vector.
int broadcast_kind(const Tensor& a, const Tensor& b) {
  if (a.same_shape(b)) return 0;
  if (b.size() == 1) return 1;
  if (b.rank() == 1 && b.shape[0] == a.cols() && a.rank() == 2) return 2;
  return -1;
}

double bvalue(const Tensor& b, int kind, std::size_t i, std::size_t cols) {
  switch (kind) {
    case 0: return b.data[i];
    case 1: return b.data[0];
    default: return b.data[i % cols];
  }
}

}  // namespace

const char* Tape::op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConstant: return "constant";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kRelu: return "relu";
    case Op::kGelu: return "gelu";
    case Op::kSigmoid: return "sigmoid";
    case Op::kAbs: return "abs";
    case Op::kSoftmaxRows: return "softmax_rows";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kEmbed: return "embed";
    case Op::kConcatRows: return "concat_rows";
    case Op::kConcatCols: return "concat_cols";
    case Op::kSliceRows: return "slice_rows";
    case Op::kSliceCols: return "slice_cols";
    case Op::kPick: return "pick";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kL2Norm: return "l2_norm";
    case Op::kCrossEntropy: return "cross_entropy";
    case Op::kBceLogitsSum: return "bce_logits_sum";
  }
  return "?";
}

void Tape::fail(std::size_t node_index, const std::string& msg) const {
  throw std::invalid_argument("tape node " + std::to_string(node_index) +
                              ": " + msg);
}

NodeId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return NodeId{nodes_.size() - 1};
}

const Tape::Node& Tape::node(NodeId id) const {
  if (id.v >= nodes_.size())
    throw std::invalid_argument("tape: node id out of range");
  return nodes_[id.v];
}

void Tape::require_valid(NodeId id, const char* what) const {
  if (id.v >= nodes_.size())
    throw std::invalid_argument(std::string("tape: ") + what +
                                " refers to unknown node");
}

NodeId Tape::leaf(Tensor v) {
  return push({Op::kLeaf, {}, {}, 0.0, std::move(v)});
}

NodeId Tape::constant(Tensor v) {
  return push({Op::kConstant, {}, {}, 0.0, std::move(v)});
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  require_valid(a, "matmul lhs");
  require_valid(b, "matmul rhs");
  const Tensor& ta = nodes_[a.v].value;
  const Tensor& tb = nodes_[b.v].value;
  if (tb.rank() != 2) fail(nodes_.size(), "matmul rhs must be rank 2");
  if (ta.cols() != tb.rows())
    fail(nodes_.size(), "matmul shape mismatch " + ta.shape_str() + " x " +
                            tb.shape_str());
  return push({Op::kMatMul,
               {a.v, b.v},
               {},
               0.0,
               Tensor::zeros({ta.rows(), tb.cols()})});
}

NodeId Tape::transpose(NodeId a) {
  require_valid(a, "transpose input");
  const Tensor& ta = nodes_[a.v].value;
  return push(
      {Op::kTranspose, {a.v}, {}, 0.0, Tensor::zeros({ta.cols(), ta.rows()})});
}

NodeId Tape::add(NodeId a, NodeId b) {
  require_valid(a, "add lhs");
  require_valid(b, "add rhs");
  const Tensor& ta = nodes_[a.v].value;
  const Tensor& tb = nodes_[b.v].value;
  if (broadcast_kind(ta, tb) < 0)
    fail(nodes_.size(),
         "add shape mismatch " + ta.shape_str() + " + " + tb.shape_str());
  return push({Op::kAdd, {a.v, b.v}, {}, 0.0, Tensor::zeros(ta.shape)});
}

NodeId Tape::sub(NodeId a, NodeId b) {
  require_valid(a, "sub lhs");
  require_valid(b, "sub rhs");
  const Tensor& ta = nodes_[a.v].value;
  const Tensor& tb = nodes_[b.v].value;
  if (broadcast_kind(ta, tb) < 0)
    fail(nodes_.size(),
         "sub shape mismatch " + ta.shape_str() + " - " + tb.shape_str());
  return push({Op::kSub, {a.v, b.v}, {}, 0.0, Tensor::zeros(ta.shape)});
}

NodeId Tape::mul(NodeId a, NodeId b) {
  require_valid(a, "mul lhs");
  require_valid(b, "mul rhs");
  const Tensor& ta = nodes_[a.v].value;
  const Tensor& tb = nodes_[b.v].value;
  if (broadcast_kind(ta, tb) < 0)
    fail(nodes_.size(),
         "mul shape mismatch " + ta.shape_str() + " * " + tb.shape_str());
  return push({Op::kMul, {a.v, b.v}, {}, 0.0, Tensor::zeros(ta.shape)});
}

NodeId Tape::scale(NodeId a, double s) {
  require_valid(a, "scale input");
  return push(
      {Op::kScale, {a.v}, {}, s, Tensor::zeros(nodes_[a.v].value.shape)});
}

NodeId Tape::relu(NodeId a) {
  require_valid(a, "relu input");
  return push({Op::kRelu, {a.v}, {}, 0.0, Tensor::zeros(nodes_[a.v].value.shape)});
}

NodeId Tape::gelu(NodeId a) {
  require_valid(a, "gelu input");
  return push({Op::kGelu, {a.v}, {}, 0.0, Tensor::zeros(nodes_[a.v].value.shape)});
}

NodeId Tape::sigmoid(NodeId a) {
  require_valid(a, "sigmoid input");
  return push(
      {Op::kSigmoid, {a.v}, {}, 0.0, Tensor::zeros(nodes_[a.v].value.shape)});
}

NodeId Tape::abs(NodeId a) {
  require_valid(a, "abs input");
  return push({Op::kAbs, {a.v}, {}, 0.0, Tensor::zeros(nodes_[a.v].value.shape)});
}

NodeId Tape::softmax_rows(NodeId a) {
  require_valid(a, "softmax input");
  return push({Op::kSoftmaxRows,
               {a.v},
               {},
               0.0,
               Tensor::zeros(nodes_[a.v].value.shape)});
}

NodeId Tape::layer_norm(NodeId x, NodeId gain, NodeId bias) {
  require_valid(x, "layer_norm input");
  require_valid(gain, "layer_norm gain");
  require_valid(bias, "layer_norm bias");
  const Tensor& tx = nodes_[x.v].value;
  const Tensor& tg = nodes_[gain.v].value;
  const Tensor& tb = nodes_[bias.v].value;
  if (tg.size() != tx.cols() || tb.size() != tx.cols())
    fail(nodes_.size(), "layer_norm gain/bias must match columns of " +
                            tx.shape_str());
  return push(
      {Op::kLayerNorm, {x.v, gain.v, bias.v}, {}, 0.0, Tensor::zeros(tx.shape)});
}

NodeId Tape::embed(NodeId table, std::vector<std::size_t> ids) {
  require_valid(table, "embed table");
  const Tensor& tt = nodes_[table.v].value;
  if (tt.rank() != 2) fail(nodes_.size(), "embed table must be rank 2");
  if (ids.empty()) fail(nodes_.size(), "embed requires at least one index");
  for (std::size_t id : ids)
    if (id >= tt.rows())
      fail(nodes_.size(), "embed index " + std::to_string(id) +
                              " out of range for table " + tt.shape_str());
  Tensor out = Tensor::zeros({ids.size(), tt.cols()});
  return push({Op::kEmbed, {table.v}, std::move(ids), 0.0, std::move(out)});
}

NodeId Tape::concat_rows(NodeId a, NodeId b) {
  require_valid(a, "concat_rows lhs");
  require_valid(b, "concat_rows rhs");
  const Tensor& ta = nodes_[a.v].value;
  const Tensor& tb = nodes_[b.v].value;
  if (ta.cols() != tb.cols())
    fail(nodes_.size(), "concat_rows column mismatch " + ta.shape_str() +
                            " | " + tb.shape_str());
  return push({Op::kConcatRows,
               {a.v, b.v},
               {},
               0.0,
               Tensor::zeros({ta.rows() + tb.rows(), ta.cols()})});
}

NodeId Tape::concat_cols(NodeId a, NodeId b) {
  require_valid(a, "concat_cols lhs");
  require_valid(b, "concat_cols rhs");
  const Tensor& ta = nodes_[a.v].value;
  const Tensor& tb = nodes_[b.v].value;
  if (ta.rows() != tb.rows())
    fail(nodes_.size(), "concat_cols row mismatch " + ta.shape_str() + " | " +
                            tb.shape_str());
  return push({Op::kConcatCols,
               {a.v, b.v},
               {},
               0.0,
               Tensor::zeros({ta.rows(), ta.cols() + tb.cols()})});
}

NodeId Tape::slice_rows(NodeId a, std::size_t lo, std::size_t hi) {
  require_valid(a, "slice_rows input");
  const Tensor& ta = nodes_[a.v].value;
  if (lo >= hi || hi > ta.rows())
    fail(nodes_.size(), "slice_rows [" + std::to_string(lo) + "," +
                            std::to_string(hi) + ") out of " + ta.shape_str());
  return push({Op::kSliceRows,
               {a.v},
               {lo, hi},
               0.0,
               Tensor::zeros({hi - lo, ta.cols()})});
}

NodeId Tape::slice_cols(NodeId a, std::size_t lo, std::size_t hi) {
  require_valid(a, "slice_cols input");
  const Tensor& ta = nodes_[a.v].value;
  if (lo >= hi || hi > ta.cols())
    fail(nodes_.size(), "slice_cols [" + std::to_string(lo) + "," +
                            std::to_string(hi) + ") out of " + ta.shape_str());
  return push({Op::kSliceCols,
               {a.v},
               {lo, hi},
               0.0,
               Tensor::zeros({ta.rows(), hi - lo})});
}

NodeId Tape::pick(NodeId a, std::size_t r, std::size_t c) {
  require_valid(a, "pick input");
  const Tensor& ta = nodes_[a.v].value;
  if (r >= ta.rows() || c >= ta.cols())
    fail(nodes_.size(), "pick (" + std::to_string(r) + "," +
                            std::to_string(c) + ") out of " + ta.shape_str());
  return push({Op::kPick, {a.v}, {r, c}, 0.0, Tensor::zeros({1})});
}

NodeId Tape::sum(NodeId a) {
  require_valid(a, "sum input");
  return push({Op::kSum, {a.v}, {}, 0.0, Tensor::zeros({1})});
}

NodeId Tape::mean(NodeId a) {
  require_valid(a, "mean input");
  return push({Op::kMean, {a.v}, {}, 0.0, Tensor::zeros({1})});
}

NodeId Tape::l2_norm(NodeId a) {
  require_valid(a, "l2_norm input");
  return push({Op::kL2Norm, {a.v}, {}, 0.0, Tensor::zeros({1})});
}

NodeId Tape::cross_entropy(NodeId logits, std::vector<std::size_t> targets) {
  require_valid(logits, "cross_entropy logits");
  const Tensor& tl = nodes_[logits.v].value;
  if (targets.size() != tl.rows())
    fail(nodes_.size(), "cross_entropy: " + std::to_string(targets.size()) +
                            " targets for " + tl.shape_str());
  for (std::size_t t : targets)
    if (t >= tl.cols())
      fail(nodes_.size(), "cross_entropy target out of range");
  return push(
      {Op::kCrossEntropy, {logits.v}, std::move(targets), 0.0, Tensor::zeros({1})});
}

NodeId Tape::bce_logits_sum(NodeId logits, NodeId targets) {
  require_valid(logits, "bce logits");
  require_valid(targets, "bce targets");
  const Tensor& tl = nodes_[logits.v].value;
  const Tensor& tt = nodes_[targets.v].value;
  if (!tl.same_shape(tt))
    fail(nodes_.size(), "bce shape mismatch " + tl.shape_str() + " vs " +
                            tt.shape_str());
  return push(
      {Op::kBceLogitsSum, {logits.v, targets.v}, {}, 0.0, Tensor::zeros({1})});
}

void Tape::set_leaf(NodeId id, Tensor v) {
  require_valid(id, "set_leaf");
  Node& n = nodes_[id.v];
  if (n.op != Op::kLeaf)
    throw std::invalid_argument("tape: set_leaf on a non-leaf node");
  if (!n.value.same_shape(v))
    throw std::invalid_argument("tape: set_leaf shape " + v.shape_str() +
                                " does not match " + n.value.shape_str());
  n.value = std::move(v);
  evaluated_ = std::min(evaluated_, id.v);
}

bool Tape::is_leaf(NodeId id) const { return node(id).op == Op::kLeaf; }

const Tensor& Tape::value(NodeId id) const { return node(id).value; }

void Tape::eval_node(std::size_t i) {
  Node& n = nodes_[i];
  Tensor& out = n.value;
  switch (n.op) {
    case Op::kLeaf:
    case Op::kConstant:
      break;
    case Op::kMatMul: {
      const Tensor& a = nodes_[n.parents[0]].value;
      const Tensor& b = nodes_[n.parents[1]].value;
      std::size_t m = a.rows(), k = a.cols(), c = b.cols();
      std::fill(out.data.begin(), out.data.end(), 0.0);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t x = 0; x < k; ++x) {
          double av = a.data[r * k + x];
          if (av == 0.0) continue;
          const double* brow = &b.data[x * c];
          double* orow = &out.data[r * c];
          for (std::size_t j = 0; j < c; ++j) orow[j] += av * brow[j];
        }
      break;
    }
    case Op::kTranspose: {
      const Tensor& a = nodes_[n.parents[0]].value;
      std::size_t r = a.rows(), c = a.cols();
      for (std::size_t i2 = 0; i2 < r; ++i2)
        for (std::size_t j = 0; j < c; ++j)
          out.data[j * r + i2] = a.data[i2 * c + j];
      break;
    }
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul: {
      const Tensor& a = nodes_[n.parents[0]].value;
      const Tensor& b = nodes_[n.parents[1]].value;
      int kind = broadcast_kind(a, b);
      std::size_t cols = a.cols();
      for (std::size_t j = 0; j < a.size(); ++j) {
        double bv = bvalue(b, kind, j, cols);
        out.data[j] = n.op == Op::kAdd   ? a.data[j] + bv
                      : n.op == Op::kSub ? a.data[j] - bv
                                         : a.data[j] * bv;
      }
      break;
    }
    case Op::kScale: {
      const Tensor& a = nodes_[n.parents[0]].value;
      for (std::size_t j = 0; j < a.size(); ++j) out.data[j] = n.dattr * a.data[j];
      break;
    }
    case Op::kRelu: {
      const Tensor& a = nodes_[n.parents[0]].value;
      for (std::size_t j = 0; j < a.size(); ++j)
        out.data[j] = a.data[j] > 0.0 ? a.data[j] : 0.0;
      break;
    }
    case Op::kGelu: {
      const Tensor& a = nodes_[n.parents[0]].value;
      for (std::size_t j = 0; j < a.size(); ++j) out.data[j] = gelu_fwd(a.data[j]);
      break;
    }
    case Op::kSigmoid: {
      const Tensor& a = nodes_[n.parents[0]].value;
      for (std::size_t j = 0; j < a.size(); ++j)
        out.data[j] = sigmoid_fwd(a.data[j]);
      break;
    }
    case Op::kAbs: {
      const Tensor& a = nodes_[n.parents[0]].value;
      for (std::size_t j = 0; j < a.size(); ++j) out.data[j] = std::fabs(a.data[j]);
      break;
    }
    case Op::kSoftmaxRows: {
      const Tensor& a = nodes_[n.parents[0]].value;
      std::size_t r = a.rows(), c = a.cols();
      for (std::size_t i2 = 0; i2 < r; ++i2) {
        const double* in = &a.data[i2 * c];
        double* o = &out.data[i2 * c];
        double m = in[0];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, in[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          o[j] = std::exp(in[j] - m);
          s += o[j];
        }
        for (std::size_t j = 0; j < c; ++j) o[j] /= s;
      }
      break;
    }
    case Op::kLayerNorm: {
      const Tensor& x = nodes_[n.parents[0]].value;
      const Tensor& g = nodes_[n.parents[1]].value;
      const Tensor& b = nodes_[n.parents[2]].value;
      std::size_t r = x.rows(), c = x.cols();
      for (std::size_t i2 = 0; i2 < r; ++i2) {
        const double* in = &x.data[i2 * c];
        double* o = &out.data[i2 * c];
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += in[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (in[j] - mu) * (in[j] - mu);
        var /= static_cast<double>(c);
        double inv = 1.0 / std::sqrt(var + kLnEps);
        for (std::size_t j = 0; j < c; ++j)
          o[j] = (in[j] - mu) * inv * g.data[j] + b.data[j];
      }
      break;
    }
    case Op::kEmbed: {
      const Tensor& t = nodes_[n.parents[0]].value;
      std::size_t c = t.cols();
      for (std::size_t i2 = 0; i2 < n.iattr.size(); ++i2)
        std::copy_n(&t.data[n.iattr[i2] * c], c, &out.data[i2 * c]);
      break;
    }
    case Op::kConcatRows: {
      const Tensor& a = nodes_[n.parents[0]].value;
      const Tensor& b = nodes_[n.parents[1]].value;
      std::copy(a.data.begin(), a.data.end(), out.data.begin());
      std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.size());
      break;
    }
    case Op::kConcatCols: {
      const Tensor& a = nodes_[n.parents[0]].value;
      const Tensor& b = nodes_[n.parents[1]].value;
      std::size_t r = a.rows(), ca = a.cols(), cb = b.cols();
      for (std::size_t i2 = 0; i2 < r; ++i2) {
        std::copy_n(&a.data[i2 * ca], ca, &out.data[i2 * (ca + cb)]);
        std::copy_n(&b.data[i2 * cb], cb, &out.data[i2 * (ca + cb) + ca]);
      }
      break;
    }
    case Op::kSliceRows: {
      const Tensor& a = nodes_[n.parents[0]].value;
      std::size_t c = a.cols();
      std::copy_n(&a.data[n.iattr[0] * c], (n.iattr[1] - n.iattr[0]) * c,
                  out.data.begin());
      break;
    }
    case Op::kSliceCols: {
      const Tensor& a = nodes_[n.parents[0]].value;
      std::size_t c = a.cols(), w = n.iattr[1] - n.iattr[0];
      for (std::size_t i2 = 0; i2 < a.rows(); ++i2)
        std::copy_n(&a.data[i2 * c + n.iattr[0]], w, &out.data[i2 * w]);
      break;
    }
    case Op::kPick: {
      const Tensor& a = nodes_[n.parents[0]].value;
      out.data[0] = a.at(n.iattr[0], n.iattr[1]);
      break;
    }
    case Op::kSum: {
      const Tensor& a = nodes_[n.parents[0]].value;
      double s = 0.0;
      for (double v : a.data) s += v;
      out.data[0] = s;
      break;
    }
    case Op::kMean: {
      const Tensor& a = nodes_[n.parents[0]].value;
      double s = 0.0;
      for (double v : a.data) s += v;
      out.data[0] = s / static_cast<double>(a.size());
      break;
    }
    case Op::kL2Norm: {
      const Tensor& a = nodes_[n.parents[0]].value;
      double s = 0.0;
      for (double v : a.data) s += v * v;
      out.data[0] = std::sqrt(s);
      break;
    }
    case Op::kCrossEntropy: {
      const Tensor& a = nodes_[n.parents[0]].value;
      std::size_t r = a.rows(), c = a.cols();
      double total = 0.0;
      for (std::size_t i2 = 0; i2 < r; ++i2) {
        const double* in = &a.data[i2 * c];
        double m = in[0];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, in[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(in[j] - m);
        total += m + std::log(s) - in[n.iattr[i2]];
      }
      out.data[0] = total / static_cast<double>(r);
      break;
    }
    case Op::kBceLogitsSum: {
      const Tensor& x = nodes_[n.parents[0]].value;
      const Tensor& t = nodes_[n.parents[1]].value;
      double total = 0.0;
      for (std::size_t j = 0; j < x.size(); ++j) {
        double v = x.data[j];
        total += std::max(v, 0.0) - v * t.data[j] +
                 std::log1p(std::exp(-std::fabs(v)));
      }
      out.data[0] = total;
      break;
    }
  }
}

const Tensor& Tape::forward(NodeId out) {
  require_valid(out, "forward output");
  for (std::size_t i = evaluated_; i < nodes_.size(); ++i) eval_node(i);
  evaluated_ = nodes_.size();
  return nodes_[out.v].value;
}

void Tape::backward(std::size_t out, std::vector<Tensor>& adj,
                    std::vector<char>& has) const {
  adj.assign(nodes_.size(), Tensor());
  has.assign(nodes_.size(), 0);
  adj[out] = Tensor::scalar(1.0);
  has[out] = 1;

  auto touch = [&](std::size_t p) -> Tensor& {
    if (!has[p]) {
      adj[p] = Tensor::zeros(nodes_[p].value.shape);
      has[p] = 1;
    }
    return adj[p];
  };

  for (std::size_t idx = out + 1; idx-- > 0;) {
    if (!has[idx]) continue;
    const Node& n = nodes_[idx];
    const Tensor& g = adj[idx];
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConstant:
        break;
      case Op::kMatMul: {
        const Tensor& a = nodes_[n.parents[0]].value;
        const Tensor& b = nodes_[n.parents[1]].value;
        Tensor& da = touch(n.parents[0]);
        Tensor& db = touch(n.parents[1]);
        std::size_t m = a.rows(), k = a.cols(), c = b.cols();
        // da += g * b^T
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t x = 0; x < k; ++x) {
            double s = 0.0;
            const double* grow = &g.data[r * c];
            const double* brow = &b.data[x * c];
            for (std::size_t j = 0; j < c; ++j) s += grow[j] * brow[j];
            da.data[r * k + x] += s;
          }
        // db += a^T * g
        for (std::size_t x = 0; x < k; ++x)
          for (std::size_t r = 0; r < m; ++r) {
            double av = a.data[r * k + x];
            if (av == 0.0) continue;
            const double* grow = &g.data[r * c];
            double* drow = &db.data[x * c];
            for (std::size_t j = 0; j < c; ++j) drow[j] += av * grow[j];
          }
        break;
      }
      case Op::kTranspose: {
        const Tensor& a = nodes_[n.parents[0]].value;
        Tensor& da = touch(n.parents[0]);
        std::size_t r = a.rows(), c = a.cols();
        for (std::size_t i2 = 0; i2 < r; ++i2)
          for (std::size_t j = 0; j < c; ++j)
            da.data[i2 * c + j] += g.data[j * r + i2];
        break;
      }
      case Op::kAdd:
      case Op::kSub: {
        const Tensor& a = nodes_[n.parents[0]].value;
        const Tensor& b = nodes_[n.parents[1]].value;
        Tensor& da = touch(n.parents[0]);
        Tensor& db = touch(n.parents[1]);
        int kind = broadcast_kind(a, b);
        double sgn = n.op == Op::kSub ? -1.0 : 1.0;
        std::size_t cols = a.cols();
        for (std::size_t j = 0; j < a.size(); ++j) {
          da.data[j] += g.data[j];
          std::size_t bj = kind == 0 ? j : kind == 1 ? 0 : j % cols;
          db.data[bj] += sgn * g.data[j];
        }
        break;
      }
      case Op::kMul: {
        const Tensor& a = nodes_[n.parents[0]].value;
        const Tensor& b = nodes_[n.parents[1]].value;
        Tensor& da = touch(n.parents[0]);
        Tensor& db = touch(n.parents[1]);
        int kind = broadcast_kind(a, b);
        std::size_t cols = a.cols();
        for (std::size_t j = 0; j < a.size(); ++j) {
          double bv = bvalue(b, kind, j, cols);
          da.data[j] += g.data[j] * bv;
          std::size_t bj = kind == 0 ? j : kind == 1 ? 0 : j % cols;
          db.data[bj] += g.data[j] * a.data[j];
        }
        break;
      }
      case Op::kScale: {
        Tensor& da = touch(n.parents[0]);
        for (std::size_t j = 0; j < g.size(); ++j)
          da.data[j] += n.dattr * g.data[j];
        break;
      }
      case Op::kRelu: {
        const Tensor& a = nodes_[n.parents[0]].value;
        Tensor& da = touch(n.parents[0]);
        for (std::size_t j = 0; j < a.size(); ++j)
          if (a.data[j] > 0.0) da.data[j] += g.data[j];
        break;
      }
      case Op::kGelu: {
        const Tensor& a = nodes_[n.parents[0]].value;
        Tensor& da = touch(n.parents[0]);
        for (std::size_t j = 0; j < a.size(); ++j)
          da.data[j] += g.data[j] * gelu_bwd(a.data[j]);
        break;
      }
      case Op::kSigmoid: {
        Tensor& da = touch(n.parents[0]);
        for (std::size_t j = 0; j < g.size(); ++j) {
          double y = n.value.data[j];
          da.data[j] += g.data[j] * y * (1.0 - y);
        }
        break;
      }
      case Op::kAbs: {
        const Tensor& a = nodes_[n.parents[0]].value;
        Tensor& da = touch(n.parents[0]);
        for (std::size_t j = 0; j < a.size(); ++j) {
          double s = a.data[j] > 0.0 ? 1.0 : a.data[j] < 0.0 ? -1.0 : 0.0;
          da.data[j] += g.data[j] * s;
        }
        break;
      }
      case Op::kSoftmaxRows: {
        Tensor& da = touch(n.parents[0]);
        std::size_t r = n.value.rows(), c = n.value.cols();
        for (std::size_t i2 = 0; i2 < r; ++i2) {
          const double* p = &n.value.data[i2 * c];
          const double* gr = &g.data[i2 * c];
          double inner = 0.0;
          for (std::size_t j = 0; j < c; ++j) inner += gr[j] * p[j];
          for (std::size_t j = 0; j < c; ++j)
            da.data[i2 * c + j] += p[j] * (gr[j] - inner);
        }
        break;
      }
      case Op::kLayerNorm: {
        const Tensor& x = nodes_[n.parents[0]].value;
        const Tensor& gv = nodes_[n.parents[1]].value;
        Tensor& dx = touch(n.parents[0]);
        Tensor& dg = touch(n.parents[1]);
        Tensor& db = touch(n.parents[2]);
        std::size_t r = x.rows(), c = x.cols();
        std::vector<double> xhat(c);
        for (std::size_t i2 = 0; i2 < r; ++i2) {
          const double* in = &x.data[i2 * c];
          const double* gr = &g.data[i2 * c];
          double mu = 0.0;
          for (std::size_t j = 0; j < c; ++j) mu += in[j];
          mu /= static_cast<double>(c);
          double var = 0.0;
          for (std::size_t j = 0; j < c; ++j) var += (in[j] - mu) * (in[j] - mu);
          var /= static_cast<double>(c);
          double inv = 1.0 / std::sqrt(var + kLnEps);
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            xhat[j] = (in[j] - mu) * inv;
            double t = gv.data[j] * gr[j];
            m1 += t;
            m2 += t * xhat[j];
          }
          m1 /= static_cast<double>(c);
          m2 /= static_cast<double>(c);
          for (std::size_t j = 0; j < c; ++j) {
            dg.data[j] += gr[j] * xhat[j];
            db.data[j] += gr[j];
            dx.data[i2 * c + j] +=
                (gv.data[j] * gr[j] - m1 - xhat[j] * m2) * inv;
          }
        }
        break;
      }
      case Op::kEmbed: {
        const Tensor& t = nodes_[n.parents[0]].value;
        Tensor& dt = touch(n.parents[0]);
        std::size_t c = t.cols();
        for (std::size_t i2 = 0; i2 < n.iattr.size(); ++i2) {
          const double* gr = &g.data[i2 * c];
          double* dr = &dt.data[n.iattr[i2] * c];
          for (std::size_t j = 0; j < c; ++j) dr[j] += gr[j];
        }
        break;
      }
      case Op::kConcatRows: {
        const Tensor& a = nodes_[n.parents[0]].value;
        Tensor& da = touch(n.parents[0]);
        Tensor& db = touch(n.parents[1]);
        for (std::size_t j = 0; j < a.size(); ++j) da.data[j] += g.data[j];
        for (std::size_t j = 0; j < db.size(); ++j)
          db.data[j] += g.data[a.size() + j];
        break;
      }
      case Op::kConcatCols: {
        const Tensor& a = nodes_[n.parents[0]].value;
        const Tensor& b = nodes_[n.parents[1]].value;
        Tensor& da = touch(n.parents[0]);
        Tensor& db = touch(n.parents[1]);
        std::size_t r = a.rows(), ca = a.cols(), cb = b.cols();
        for (std::size_t i2 = 0; i2 < r; ++i2) {
          for (std::size_t j = 0; j < ca; ++j)
            da.data[i2 * ca + j] += g.data[i2 * (ca + cb) + j];
          for (std::size_t j = 0; j < cb; ++j)
            db.data[i2 * cb + j] += g.data[i2 * (ca + cb) + ca + j];
        }
        break;
      }
      case Op::kSliceRows: {
        const Tensor& a = nodes_[n.parents[0]].value;
        Tensor& da = touch(n.parents[0]);
        std::size_t c = a.cols();
        for (std::size_t j = 0; j < g.size(); ++j)
          da.data[n.iattr[0] * c + j] += g.data[j];
        break;
      }
      case Op::kSliceCols: {
        const Tensor& a = nodes_[n.parents[0]].value;
        Tensor& da = touch(n.parents[0]);
        std::size_t c = a.cols(), w = n.iattr[1] - n.iattr[0];
        for (std::size_t i2 = 0; i2 < a.rows(); ++i2)
          for (std::size_t j = 0; j < w; ++j)
            da.data[i2 * c + n.iattr[0] + j] += g.data[i2 * w + j];
        break;
      }
      case Op::kPick: {
        const Tensor& a = nodes_[n.parents[0]].value;
        Tensor& da = touch(n.parents[0]);
        da.data[n.iattr[0] * a.cols() + n.iattr[1]] += g.data[0];
        break;
      }
      case Op::kSum: {
        Tensor& da = touch(n.parents[0]);
        for (std::size_t j = 0; j < da.size(); ++j) da.data[j] += g.data[0];
        break;
      }
      case Op::kMean: {
        Tensor& da = touch(n.parents[0]);
        double s = g.data[0] / static_cast<double>(da.size());
        for (std::size_t j = 0; j < da.size(); ++j) da.data[j] += s;
        break;
      }
      case Op::kL2Norm: {
        const Tensor& a = nodes_[n.parents[0]].value;
        Tensor& da = touch(n.parents[0]);
        double norm = n.value.data[0];
        if (norm > 0.0) {
          double s = g.data[0] / norm;
          for (std::size_t j = 0; j < a.size(); ++j)
            da.data[j] += s * a.data[j];
        }
        break;
      }
      case Op::kCrossEntropy: {
        const Tensor& a = nodes_[n.parents[0]].value;
        Tensor& da = touch(n.parents[0]);
        std::size_t r = a.rows(), c = a.cols();
        double scale = g.data[0] / static_cast<double>(r);
        std::vector<double> p(c);
        for (std::size_t i2 = 0; i2 < r; ++i2) {
          const double* in = &a.data[i2 * c];
          double m = in[0];
          for (std::size_t j = 1; j < c; ++j) m = std::max(m, in[j]);
          double s = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            p[j] = std::exp(in[j] - m);
            s += p[j];
          }
          for (std::size_t j = 0; j < c; ++j) {
            double soft = p[j] / s;
            double target = j == n.iattr[i2] ? 1.0 : 0.0;
            da.data[i2 * c + j] += scale * (soft - target);
          }
        }
        break;
      }
      case Op::kBceLogitsSum: {
        const Tensor& x = nodes_[n.parents[0]].value;
        const Tensor& t = nodes_[n.parents[1]].value;
        Tensor& dx = touch(n.parents[0]);
        Tensor& dt = touch(n.parents[1]);
        for (std::size_t j = 0; j < x.size(); ++j) {
          dx.data[j] += g.data[0] * (sigmoid_fwd(x.data[j]) - t.data[j]);
          dt.data[j] += g.data[0] * (-x.data[j]);
        }
        break;
      }
    }
  }
}

Tensor Tape::grad(NodeId scalar_out, NodeId leaf) {
  return std::move(grad_multi(scalar_out, {leaf})[0]);
}

std::vector<Tensor> Tape::grad_multi(NodeId scalar_out,
                                     const std::vector<NodeId>& leaves) {
  require_valid(scalar_out, "grad output");
  for (NodeId l : leaves) {
    require_valid(l, "grad leaf");
    if (nodes_[l.v].op != Op::kLeaf)
      throw std::invalid_argument("tape: grad target node " +
                                  std::to_string(l.v) + " is not a leaf");
  }
  forward(scalar_out);
  if (nodes_[scalar_out.v].value.size() != 1)
    throw std::invalid_argument(
        "tape: grad requires a scalar output, node " +
        std::to_string(scalar_out.v) + " has shape " +
        nodes_[scalar_out.v].value.shape_str());

  std::vector<Tensor> adj;
  std::vector<char> has;
  backward(scalar_out.v, adj, has);

  std::vector<Tensor> result;
  result.reserve(leaves.size());
  for (NodeId l : leaves) {
    if (has[l.v])
      result.push_back(std::move(adj[l.v]));
    else
      result.push_back(Tensor::zeros(nodes_[l.v].value.shape));
  }
  return result;
}

double Tape::check_gradients(NodeId scalar_out, NodeId leaf,
                             std::size_t n_samples, double step) {
  Tensor analytic = grad(scalar_out, leaf);
  Tensor original = nodes_[leaf.v].value;
  std::size_t n = original.size();

  std::vector<std::size_t> coords(n);
  std::iota(coords.begin(), coords.end(), 0);
  if (n_samples < n) {
    SplitMix64 rng = make_stream(kStreamGradCheck, leaf.v, n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) {
      std::size_t j = i + rng.below(n - i);
      std::swap(coords[i], coords[j]);
    }
    coords.resize(n_samples);
  }

  double worst = 0.0;
  for (std::size_t c : coords) {
    Tensor t = original;
    t.data[c] = original.data[c] + step;
    set_leaf(leaf, std::move(t));
    double fp = forward(scalar_out).data[0];
    t = original;
    t.data[c] = original.data[c] - step;
    set_leaf(leaf, std::move(t));
    double fm = forward(scalar_out).data[0];
    double numeric = (fp - fm) / (2.0 * step);
    double a = analytic.data[c];
    double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-12});
    worst = std::max(worst, std::fabs(a - numeric) / denom);
  }
  set_leaf(leaf, std::move(original));
  forward(scalar_out);
  return worst;
}

}  // namespace jowl::diffcore
