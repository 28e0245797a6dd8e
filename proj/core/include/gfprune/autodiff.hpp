#pragma once

// Reverse-mode differentiation over a closed vocabulary of dense primitives.
//
// A Record is an append-only list of nodes in topological order. Gradients are
// built symbolically: append_backward() emits the adjoint computation as new
// nodes of the same vocabulary, so a gradient can itself be differentiated.
// That is how the exact Hessian-vector product is obtained (reverse over
// reverse), with no full Hessian ever materialised.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gfprune/tensor.hpp"

namespace gfprune::ad {

using NodeId = std::uint32_t;

enum class Op : std::uint8_t {
  kInput,
  kFill,            // constant tensor of one value
  kMatMul,          // op(a) * op(b), optional transposes
  kAdd,
  kSub,
  kMul,             // elementwise
  kScale,           // a * constant
  kBroadcastRows,   // [n] or [1,n] -> [rows,n]
  kSumRows,         // [rows,n] -> shape of the broadcast source
  kBroadcastScalar, // [1] -> any shape
  kSum,             // any -> [1]
  kSumSquares,      // any -> [1]
  kActivation,      // k-th derivative of SiLU or tanh, elementwise
  kConcat,          // along the last axis, rank-2
  kSlice,           // column range, rank-2
  kPadColumns,      // adjoint of kSlice
};

enum class Activation : std::uint8_t { kSiLU, kTanh };

/// Highest derivative order of an activation the engine can evaluate.
inline constexpr int kMaxActivationOrder = 3;

struct Node {
  Op op = Op::kInput;
  NodeId a = 0;
  NodeId b = 0;
  Shape shape;
  std::string name;       // kInput
  double value = 0.0;     // kFill, kScale
  bool trans_a = false;   // kMatMul
  bool trans_b = false;   // kMatMul
  Activation act = Activation::kSiLU;
  int order = 0;          // kActivation
  std::size_t begin = 0;  // kSlice, kPadColumns
  std::size_t end = 0;    // kSlice, kPadColumns (end == total width for pad)
};

std::string_view op_name(Op op);
int arity(Op op);

/// ComputationRecord: the graph of primitive operations.
class Record {
 public:
  NodeId input(std::string name, Shape shape);
  NodeId fill(Shape shape, double value);
  NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId broadcast_rows(NodeId v, std::size_t rows);
  NodeId sum_rows(NodeId x, Shape out_shape);
  NodeId broadcast_scalar(NodeId s, Shape shape);
  NodeId sum(NodeId x);
  NodeId sum_squares(NodeId x);
  NodeId activation(NodeId x, Activation act, int order = 0);
  NodeId concat(NodeId a, NodeId b);
  NodeId slice(NodeId x, std::size_t begin, std::size_t end);
  NodeId pad_columns(NodeId x, std::size_t begin, std::size_t total);

  void set_output(NodeId id);
  NodeId output() const;
  bool has_output() const noexcept { return output_.has_value(); }

  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  const Shape& shape(NodeId id) const { return nodes_.at(id).shape; }
  std::size_t size() const noexcept { return nodes_.size(); }

  std::optional<NodeId> find_input(std::string_view name) const;
  std::vector<std::string> input_names() const;

  /// Emits the adjoint of scalar node `out` with respect to each node in
  /// `wrt`. Returns one node per entry of `wrt`; inputs that `out` does not
  /// depend on get a zero-filled node.
  std::vector<NodeId> append_backward(NodeId out, std::span<const NodeId> wrt);

 private:
  NodeId push(Node n);
  void check_id(NodeId id) const;

  std::vector<Node> nodes_;
  std::optional<NodeId> output_;
};

/// A record together with a fixed set of target nodes; evaluates only what the
/// targets depend on. Stateless between runs.
class Program {
 public:
  Program(Record record, std::vector<NodeId> targets);

  std::vector<Tensor> run(const NamedTensors& inputs) const;

  const Record& record() const noexcept { return record_; }
  const std::vector<NodeId>& targets() const noexcept { return targets_; }

 private:
  Record record_;
  std::vector<NodeId> targets_;
  std::vector<char> needed_;
};

/// Loss value and gradients with respect to a fixed list of inputs.
class GradientProgram {
 public:
  GradientProgram(const Record& record, std::vector<std::string> wrt);

  struct Result {
    double value = 0.0;
    NamedTensors grads;
  };
  Result run(const NamedTensors& inputs) const;

  const std::vector<std::string>& wrt() const noexcept { return wrt_; }

 private:
  std::vector<std::string> wrt_;
  std::optional<Program> program_;
};

enum class HvpMethod { kDoubleBackprop, kFiniteDifference };

std::string_view hvp_method_name(HvpMethod m);
HvpMethod parse_hvp_method(std::string_view s);

/// Hessian-vector products by reverse-over-reverse differentiation. The
/// direction enters as extra inputs named "<param>@v".
class HvpProgram {
 public:
  HvpProgram(const Record& record, std::vector<std::string> wrt);

  NamedTensors run(const NamedTensors& inputs, const NamedTensors& v) const;

 private:
  std::vector<std::string> wrt_;
  std::optional<Program> program_;
};

Tensor forward(const Record& record, const NamedTensors& inputs);

NamedTensors gradient(const Record& record, const NamedTensors& inputs,
                      const std::vector<std::string>& wrt);

/// Default central-difference step: 1e-4 * (1 + max |theta|).
double default_fd_step(const NamedTensors& inputs, const std::vector<std::string>& wrt);

NamedTensors hessian_vector_product(const Record& record, const NamedTensors& inputs,
                                    const std::vector<std::string>& wrt, const NamedTensors& v,
                                    HvpMethod method, double fd_step = 0.0);

/// Central finite-difference HVP built from any gradient routine.
NamedTensors finite_difference_hvp(const GradientProgram& grad, const NamedTensors& inputs,
                                   const NamedTensors& v, double fd_step);

}  // namespace gfprune::ad
