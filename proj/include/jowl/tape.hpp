#pragma once

#include <cstddef>
#include <vector>

#include "jowl/tensor.hpp"

namespace jowl::diffcore {

struct NodeId {
  std::size_t v;
};

// Reverse-mode differentiation over a recorded operator graph.
//
// A tape is built once (single writer), then evaluated and differentiated
// any number of times. Leaves are the designated inputs: their values can
// be replaced with set_leaf, which invalidates the cached forward pass.
// All reductions accumulate left-to-right so repeated runs are
// bit-identical.
class Tape {
 public:
  // Inputs.
  NodeId leaf(Tensor v);
  NodeId constant(Tensor v);

  // Linear algebra. Operands must be rank 1 or 2; rank 1 acts as one row.
  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);

  // Elementwise with limited broadcasting on the right operand:
  // same shape, a scalar {1}, or a row vector matching the columns of a.
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double s);

  NodeId relu(NodeId a);
  NodeId gelu(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId abs(NodeId a);

  // Row-wise softmax at temperature 1, computed with max subtraction.
  NodeId softmax_rows(NodeId a);

  // Row-wise layer normalization with learnable gain/bias vectors.
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias);

  // Rows of `table` selected by fixed indices.
  NodeId embed(NodeId table, std::vector<std::size_t> ids);

  NodeId concat_rows(NodeId a, NodeId b);
  NodeId concat_cols(NodeId a, NodeId b);
  NodeId slice_rows(NodeId a, std::size_t lo, std::size_t hi);
  NodeId slice_cols(NodeId a, std::size_t lo, std::size_t hi);
  // Single element as a scalar.
  NodeId pick(NodeId a, std::size_t r, std::size_t c);

  // Reductions to a scalar {1}.
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId l2_norm(NodeId a);

  // Mean over rows of -log softmax(logits)[row, target[row]].
  NodeId cross_entropy(NodeId logits, std::vector<std::size_t> targets);
  // Sum over entries of the numerically stable binary cross entropy
  // between sigmoid(logits) and targets.
  NodeId bce_logits_sum(NodeId logits, NodeId targets);

  void set_leaf(NodeId id, Tensor v);
  bool is_leaf(NodeId id) const;
  std::size_t node_count() const { return nodes_.size(); }

  // Evaluates the graph and returns the value of `out`.
  const Tensor& forward(NodeId out);
  // Value from the last forward pass.
  const Tensor& value(NodeId id) const;

  // Exact reverse-mode gradient of a scalar output w.r.t. one leaf.
  Tensor grad(NodeId scalar_out, NodeId leaf);
  // One reverse sweep shared across several leaves.
  std::vector<Tensor> grad_multi(NodeId scalar_out,
                                 const std::vector<NodeId>& leaves);

  // Compares grad() against central finite differences on n_samples
  // coordinates of `leaf`; returns the worst relative error with
  // denominator max(|analytic|, |numeric|, 1e-12).
  double check_gradients(NodeId scalar_out, NodeId leaf,
                         std::size_t n_samples, double step);

 private:
  enum class Op {
    kLeaf,
    kConstant,
    kMatMul,
    kTranspose,
    kAdd,
    kSub,
    kMul,
    kScale,
    kRelu,
    kGelu,
    kSigmoid,
    kAbs,
    kSoftmaxRows,
    kLayerNorm,
    kEmbed,
    kConcatRows,
    kConcatCols,
    kSliceRows,
    kSliceCols,
    kPick,
    kSum,
    kMean,
    kL2Norm,
    kCrossEntropy,
    kBceLogitsSum,
  };

  struct Node {
    Op op;
    std::vector<std::size_t> parents;
    std::vector<std::size_t> iattr;
    double dattr = 0.0;
    Tensor value;
  };

  NodeId push(Node n);
  const Node& node(NodeId id) const;
  void require_valid(NodeId id, const char* what) const;
  void eval_node(std::size_t i);
  void backward(std::size_t out, std::vector<Tensor>& adj,
                std::vector<char>& has) const;
  static const char* op_name(Op op);
  [[noreturn]] void fail(std::size_t node_index, const std::string& msg) const;

  std::vector<Node> nodes_;
  std::size_t evaluated_ = 0;  // nodes [0, evaluated_) hold fresh values
};

}  // namespace jowl::diffcore
