#pragma once

#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "ibd/tensor.hpp"

namespace ibd {

using NodeId = std::size_t;

enum class Op {
  Leaf,
  Add,
  Sub,
  Mul,
  Scale,
  AddConst,
  MatMul,
  Conv2d,
  MaxPool2,
  Relu,
  Tanh,
  Sigmoid,
  Flatten,
  SoftmaxXent,
  L2Norm,
  LinfPenalty,
  Select,
  Sum,
  Mean,
  Custom,
};

const char* op_name(Op op);

// User-supplied primitive. `backward` returns one gradient per input (same shapes as inputs).
struct CustomOp {
  std::string name;
  std::function<Tensor(const std::vector<const Tensor*>&)> forward;
  std::function<std::vector<Tensor>(const std::vector<const Tensor*>&, const Tensor& out, const Tensor& grad_out)>
      backward;
};

// Non-owning bindings of leaf names to tensors. Bound tensors must outlive the evaluation.
class Feed {
 public:
  Feed& bind(const std::string& name, const Tensor& t) {
    bound_[name] = &t;
    return *this;
  }
  Feed& bind(const ParamSet& params) {
    for (const auto& [name, t] : params) bound_[name] = &t;
    return *this;
  }
  const Tensor* find(const std::string& name) const {
    auto it = bound_.find(name);
    return it == bound_.end() ? nullptr : it->second;
  }

 private:
  std::unordered_map<std::string, const Tensor*> bound_;
};

// Forward values of every node, indexed by NodeId.
struct Tape {
  std::vector<Tensor> values;
  const Tensor& operator[](NodeId id) const { return values.at(id); }
};

// Static computation graph. Nodes are appended in topological order; evaluation
// and differentiation never mutate the graph.
//
// Shape conventions: images are NHWC, conv kernels are [KH, KW, Cin, Cout] with
// stride 1 and "same" zero padding; MatMul is [M, K] x [K, N].
class Graph {
 public:
  NodeId leaf(const std::string& name);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double k);
  NodeId add_const(NodeId a, double k);
  NodeId matmul(NodeId a, NodeId b);
  NodeId conv2d(NodeId x, NodeId kernel, NodeId bias);
  NodeId conv2d(NodeId x, NodeId kernel);
  NodeId max_pool2(NodeId x);
  NodeId relu(NodeId x);
  NodeId tanh(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId flatten(NodeId x);
  // Mean cross-entropy of softmax(logits [B, N]) against integer labels [B].
  NodeId softmax_xent(NodeId logits, NodeId labels);
  NodeId l2_norm(NodeId x);
  // sum_i max(|x_i| - rho, 0) with rho a scalar node.
  NodeId linf_penalty(NodeId x, NodeId rho);
  // Gathers `indices` along the last axis.
  NodeId select(NodeId x, std::vector<std::size_t> indices);
  NodeId sum(NodeId x);
  NodeId mean(NodeId x);
  NodeId custom(CustomOp op, std::vector<NodeId> inputs);

  void set_output(const std::string& name, NodeId id);
  NodeId output_id(const std::string& name) const;
  NodeId leaf_id(const std::string& name) const;
  bool has_leaf(const std::string& name) const { return leaves_.count(name) != 0; }
  std::size_t node_count() const noexcept { return nodes_.size(); }
  Op op(NodeId id) const { return nodes_.at(id).op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }

  Tape forward(const Feed& feed) const;
  std::map<std::string, Tensor> evaluate(const Feed& feed) const;

  // Reverse-mode gradients of scalar node `loss` with respect to the named leaves.
  // Leaves the loss does not depend on receive zero tensors.
  std::map<std::string, Tensor> backward(const Tape& tape, NodeId loss, const std::vector<std::string>& wrt) const;
  std::map<std::string, Tensor> gradient(const Feed& feed, const std::string& loss,
                                         const std::vector<std::string>& wrt) const;

 private:
  struct Node {
    Op op = Op::Leaf;
    std::vector<NodeId> inputs;
    std::string name;  // leaf name
    double k = 0.0;    // Scale / AddConst
    std::vector<std::size_t> indices;  // Select
    int custom = -1;
  };

  static Node make_node(Op op, std::vector<NodeId> inputs, double k = 0.0);
  NodeId push(Node n);
  Tensor compute(NodeId id, const Tape& tape) const;
  void propagate(NodeId id, const Tape& tape, const Tensor& grad_out, std::vector<Tensor>& grads,
                 const std::vector<char>& needs) const;

  std::vector<Node> nodes_;
  std::vector<CustomOp> customs_;
  std::map<std::string, NodeId> leaves_;
  std::map<std::string, NodeId> outputs_;
};

// Largest relative error between analytic and central-difference gradients of `loss`
// over every coordinate of the `wrt` leaves, evaluated at the point described by `feed`.
double gradient_check(const Graph& graph, const Feed& feed, const std::string& loss,
                      const std::vector<std::string>& wrt, double eps);

}  // namespace ibd
