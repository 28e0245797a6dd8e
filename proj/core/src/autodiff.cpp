#include "gfprune/autodiff.hpp"

#include <Eigen/Core>
#include <cmath>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "gfprune/error.hpp"

namespace gfprune::ad {

namespace {

#if defined(__GLIBC__)
// Node values are freed and reallocated on every run. With glibc's default
// mmap threshold each activation buffer becomes an mmap/munmap pair, which
// costs more than the arithmetic on small networks.
[[maybe_unused]] const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();
#endif

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::size_t rows_of(const Shape& s) { return s.size() >= 2 ? s[0] : 1; }
std::size_t cols_of(const Shape& s) { return s.empty() ? 1 : s.back(); }

ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(rows_of(t.shape())),
                  static_cast<Eigen::Index>(cols_of(t.shape())));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double silu_derivative(double x, int order) {
  const double s = sigmoid(x);
  const double u = s * (1.0 - s);
  switch (order) {
    case 0:
      return x * s;
    case 1:
      return s * (1.0 + x * (1.0 - s));
    case 2:
      return u * (2.0 + x * (1.0 - 2.0 * s));
    case 3: {
      const double h = 2.0 + x * (1.0 - 2.0 * s);
      return u * ((1.0 - 2.0 * s) * (h + 1.0) - 2.0 * x * u);
    }
    default:
      throw ArgumentError("SiLU derivative order " + std::to_string(order) + " unsupported");
  }
}

double tanh_derivative(double x, int order) {
  const double t = std::tanh(x);
  const double q = 1.0 - t * t;
  switch (order) {
    case 0:
      return t;
    case 1:
      return q;
    case 2:
      return -2.0 * t * q;
    case 3:
      return -2.0 * q * (1.0 - 3.0 * t * t);
    default:
      throw ArgumentError("tanh derivative order " + std::to_string(order) + " unsupported");
  }
}

Tensor evaluate_node(const Node& n, const std::vector<Tensor>& v) {
  switch (n.op) {
    case Op::kInput:
      throw ArgumentError("internal: input nodes are bound, not evaluated");
    case Op::kFill:
      return Tensor(n.shape, n.value);
    case Op::kMatMul: {
      Tensor out(n.shape);
      const auto a = as_matrix(v[n.a]);
      const auto b = as_matrix(v[n.b]);
      MutMap o(out.data().data(), static_cast<Eigen::Index>(n.shape[0]),
               static_cast<Eigen::Index>(n.shape[1]));
      if (!n.trans_a && !n.trans_b) {
        o.noalias() = a * b;
      } else if (!n.trans_a && n.trans_b) {
        o.noalias() = a * b.transpose();
      } else if (n.trans_a && !n.trans_b) {
        o.noalias() = a.transpose() * b;
      } else {
        o.noalias() = a.transpose() * b.transpose();
      }
      return out;
    }
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul: {
      Tensor out(n.shape);
      const auto& x = v[n.a].raw();
      const auto& y = v[n.b].raw();
      auto& o = out.raw();
      if (n.op == Op::kAdd) {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
      } else if (n.op == Op::kSub) {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
      } else {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
      }
      return out;
    }
    case Op::kScale: {
      Tensor out = v[n.a];
      for (double& x : out.raw()) x *= n.value;
      return out;
    }
    case Op::kBroadcastRows: {
      Tensor out(n.shape);
      const auto& src = v[n.a].raw();
      const std::size_t c = src.size();
      for (std::size_t r = 0; r < n.shape[0]; ++r) {
        std::copy(src.begin(), src.end(), out.raw().begin() + static_cast<std::ptrdiff_t>(r * c));
      }
      return out;
    }
    case Op::kSumRows: {
      Tensor out(n.shape, 0.0);
      const Tensor& x = v[n.a];
      const std::size_t r = rows_of(x.shape());
      const std::size_t c = cols_of(x.shape());
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[j] += x[i * c + j];
      }
      return out;
    }
    case Op::kBroadcastScalar:
      return Tensor(n.shape, v[n.a].item());
    case Op::kSum: {
      double s = 0.0;
      for (double x : v[n.a].data()) s += x;
      return Tensor::scalar(s);
    }
    case Op::kSumSquares: {
      double s = 0.0;
      for (double x : v[n.a].data()) s += x * x;
      return Tensor::scalar(s);
    }
    case Op::kActivation: {
      Tensor out = v[n.a];
      if (n.act == Activation::kSiLU) {
        for (double& x : out.raw()) x = silu_derivative(x, n.order);
      } else {
        for (double& x : out.raw()) x = tanh_derivative(x, n.order);
      }
      return out;
    }
    case Op::kConcat: {
      Tensor out(n.shape);
      const Tensor& x = v[n.a];
      const Tensor& y = v[n.b];
      const std::size_t r = n.shape[0];
      const std::size_t ca = x.shape()[1];
      const std::size_t cb = y.shape()[1];
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < ca; ++j) out.at(i, j) = x.at(i, j);
        for (std::size_t j = 0; j < cb; ++j) out.at(i, ca + j) = y.at(i, j);
      }
      return out;
    }
    case Op::kSlice: {
      Tensor out(n.shape);
      const Tensor& x = v[n.a];
      for (std::size_t i = 0; i < n.shape[0]; ++i) {
        for (std::size_t j = n.begin; j < n.end; ++j) out.at(i, j - n.begin) = x.at(i, j);
      }
      return out;
    }
    case Op::kPadColumns: {
      Tensor out(n.shape, 0.0);
      const Tensor& x = v[n.a];
      const std::size_t w = x.shape()[1];
      for (std::size_t i = 0; i < n.shape[0]; ++i) {
        for (std::size_t j = 0; j < w; ++j) out.at(i, n.begin + j) = x.at(i, j);
      }
      return out;
    }
  }
  throw ArgumentError("internal: unknown op");
}

}  // namespace

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kFill: return "fill";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kBroadcastRows: return "broadcast_rows";
    case Op::kSumRows: return "sum_rows";
    case Op::kBroadcastScalar: return "broadcast_scalar";
    case Op::kSum: return "sum";
    case Op::kSumSquares: return "sum_squares";
    case Op::kActivation: return "activation";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kPadColumns: return "pad_columns";
  }
  return "?";
}

int arity(Op op) {
  switch (op) {
    case Op::kInput:
    case Op::kFill:
      return 0;
    case Op::kMatMul:
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul:
    case Op::kConcat:
      return 2;
    default:
      return 1;
  }
}

// ---------------------------------------------------------------------------
// Record construction

void Record::check_id(NodeId id) const {
  if (id >= nodes_.size()) throw ArgumentError("node id " + std::to_string(id) + " out of range");
}

NodeId Record::push(Node n) {
  for (auto d : n.shape) {
    if (d == 0) throw ShapeError(std::string(op_name(n.op)) + ": zero extent in result shape");
  }
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Record::input(std::string name, Shape shape) {
  if (find_input(name)) throw ArgumentError("duplicate input name '" + name + "'");
  Node n;
  n.op = Op::kInput;
  n.name = std::move(name);
  n.shape = std::move(shape);
  return push(std::move(n));
}

NodeId Record::fill(Shape shape, double value) {
  Node n;
  n.op = Op::kFill;
  n.shape = std::move(shape);
  n.value = value;
  return push(std::move(n));
}

NodeId Record::matmul(NodeId a, NodeId b, bool trans_a, bool trans_b) {
  check_id(a);
  check_id(b);
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  if (sa.size() != 2 || sb.size() != 2) throw ShapeError("matmul needs rank-2 operands");
  const std::size_t ar = trans_a ? sa[1] : sa[0];
  const std::size_t ac = trans_a ? sa[0] : sa[1];
  const std::size_t br = trans_b ? sb[1] : sb[0];
  const std::size_t bc = trans_b ? sb[0] : sb[1];
  if (ac != br) {
    throw ShapeError("matmul inner mismatch: " + shape_string(sa) + (trans_a ? "^T" : "") + " x " +
                     shape_string(sb) + (trans_b ? "^T" : ""));
  }
  Node n;
  n.op = Op::kMatMul;
  n.a = a;
  n.b = b;
  n.trans_a = trans_a;
  n.trans_b = trans_b;
  n.shape = {ar, bc};
  return push(std::move(n));
}

namespace {
Node binary(Op op, NodeId a, NodeId b, const Shape& sa, const Shape& sb) {
  if (sa != sb) {
    throw ShapeError(std::string(op_name(op)) + " shape mismatch: " + shape_string(sa) + " vs " +
                     shape_string(sb));
  }
  Node n;
  n.op = op;
  n.a = a;
  n.b = b;
  n.shape = sa;
  return n;
}
}  // namespace

NodeId Record::add(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  return push(binary(Op::kAdd, a, b, shape(a), shape(b)));
}

NodeId Record::sub(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  return push(binary(Op::kSub, a, b, shape(a), shape(b)));
}

NodeId Record::mul(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  return push(binary(Op::kMul, a, b, shape(a), shape(b)));
}

NodeId Record::scale(NodeId a, double c) {
  check_id(a);
  Node n;
  n.op = Op::kScale;
  n.a = a;
  n.value = c;
  n.shape = shape(a);
  return push(std::move(n));
}

NodeId Record::broadcast_rows(NodeId v, std::size_t rows) {
  check_id(v);
  const Shape& s = shape(v);
  if (!(s.size() == 1 || (s.size() == 2 && s[0] == 1))) {
    throw ShapeError("broadcast_rows needs [n] or [1,n], got " + shape_string(s));
  }
  Node n;
  n.op = Op::kBroadcastRows;
  n.a = v;
  n.shape = {rows, s.back()};
  return push(std::move(n));
}

NodeId Record::sum_rows(NodeId x, Shape out_shape) {
  check_id(x);
  const Shape& s = shape(x);
  if (s.size() != 2 || shape_size(out_shape) != s[1]) {
    throw ShapeError("sum_rows: cannot reduce " + shape_string(s) + " to " + shape_string(out_shape));
  }
  Node n;
  n.op = Op::kSumRows;
  n.a = x;
  n.shape = std::move(out_shape);
  return push(std::move(n));
}

NodeId Record::broadcast_scalar(NodeId s, Shape shape_out) {
  check_id(s);
  if (shape_size(shape(s)) != 1) throw ShapeError("broadcast_scalar needs a one-element operand");
  Node n;
  n.op = Op::kBroadcastScalar;
  n.a = s;
  n.shape = std::move(shape_out);
  return push(std::move(n));
}

NodeId Record::sum(NodeId x) {
  check_id(x);
  Node n;
  n.op = Op::kSum;
  n.a = x;
  n.shape = {1};
  return push(std::move(n));
}

NodeId Record::sum_squares(NodeId x) {
  check_id(x);
  Node n;
  n.op = Op::kSumSquares;
  n.a = x;
  n.shape = {1};
  return push(std::move(n));
}

NodeId Record::activation(NodeId x, Activation act, int order) {
  check_id(x);
  if (order < 0 || order > kMaxActivationOrder) {
    throw ArgumentError("activation derivative order " + std::to_string(order) + " unsupported");
  }
  Node n;
  n.op = Op::kActivation;
  n.a = x;
  n.act = act;
  n.order = order;
  n.shape = shape(x);
  return push(std::move(n));
}

NodeId Record::concat(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  if (sa.size() != 2 || sb.size() != 2 || sa[0] != sb[0]) {
    throw ShapeError("concat needs rank-2 operands with equal rows: " + shape_string(sa) + ", " +
                     shape_string(sb));
  }
  Node n;
  n.op = Op::kConcat;
  n.a = a;
  n.b = b;
  n.shape = {sa[0], sa[1] + sb[1]};
  return push(std::move(n));
}

NodeId Record::slice(NodeId x, std::size_t begin, std::size_t end) {
  check_id(x);
  const Shape& s = shape(x);
  if (s.size() != 2 || begin >= end || end > s[1]) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                     shape_string(s));
  }
  Node n;
  n.op = Op::kSlice;
  n.a = x;
  n.begin = begin;
  n.end = end;
  n.shape = {s[0], end - begin};
  return push(std::move(n));
}

NodeId Record::pad_columns(NodeId x, std::size_t begin, std::size_t total) {
  check_id(x);
  const Shape& s = shape(x);
  if (s.size() != 2 || begin + s[1] > total) {
    throw ShapeError("pad_columns does not fit " + shape_string(s) + " at " + std::to_string(begin));
  }
  Node n;
  n.op = Op::kPadColumns;
  n.a = x;
  n.begin = begin;
  n.end = total;
  n.shape = {s[0], total};
  return push(std::move(n));
}

void Record::set_output(NodeId id) {
  check_id(id);
  output_ = id;
}

NodeId Record::output() const {
  if (!output_) throw ArgumentError("record has no output node");
  return *output_;
}

std::optional<NodeId> Record::find_input(std::string_view name) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].op == Op::kInput && nodes_[i].name == name) return static_cast<NodeId>(i);
  }
  return std::nullopt;
}

std::vector<std::string> Record::input_names() const {
  std::vector<std::string> names;
  for (const auto& n : nodes_) {
    if (n.op == Op::kInput) names.push_back(n.name);
  }
  return names;
}

// ---------------------------------------------------------------------------
// Symbolic reverse pass

std::vector<NodeId> Record::append_backward(NodeId out, std::span<const NodeId> wrt) {
  check_id(out);
  if (shape_size(shape(out)) != 1) {
    throw ShapeError("gradient requires a scalar output, got " + shape_string(shape(out)));
  }
  const std::size_t n0 = out + 1;
  std::vector<char> depends(n0, 0);
  for (NodeId w : wrt) {
    check_id(w);
    if (w < n0) depends[w] = 1;
  }
  for (std::size_t i = 0; i < n0; ++i) {
    const Node& n = nodes_[i];
    const int k = arity(n.op);
    if (k >= 1 && depends[n.a]) depends[i] = 1;
    if (k >= 2 && depends[n.b]) depends[i] = 1;
  }

  std::vector<std::optional<NodeId>> adj(n0);
  auto accumulate = [&](NodeId target, NodeId contribution) {
    if (!depends[target]) return;
    adj[target] = adj[target] ? add(*adj[target], contribution) : contribution;
  };

  if (depends[out]) adj[out] = fill(shape(out), 1.0);

  for (std::size_t idx = n0; idx-- > 0;) {
    if (!adj[idx] || !depends[idx]) continue;
    const NodeId gy = *adj[idx];
    // Copy: push() below may reallocate nodes_.
    const Node n = nodes_[idx];
    switch (n.op) {
      case Op::kInput:
      case Op::kFill:
        break;
      case Op::kMatMul:
        if (depends[n.a]) {
          accumulate(n.a, n.trans_a ? matmul(n.b, gy, n.trans_b, true)
                                    : matmul(gy, n.b, false, !n.trans_b));
        }
        if (depends[n.b]) {
          accumulate(n.b, n.trans_b ? matmul(gy, n.a, true, n.trans_a)
                                    : matmul(n.a, gy, !n.trans_a, false));
        }
        break;
      case Op::kAdd:
        accumulate(n.a, gy);
        accumulate(n.b, gy);
        break;
      case Op::kSub:
        accumulate(n.a, gy);
        if (depends[n.b]) accumulate(n.b, scale(gy, -1.0));
        break;
      case Op::kMul:
        if (depends[n.a]) accumulate(n.a, mul(gy, n.b));
        if (depends[n.b]) accumulate(n.b, mul(gy, n.a));
        break;
      case Op::kScale:
        accumulate(n.a, scale(gy, n.value));
        break;
      case Op::kBroadcastRows:
        accumulate(n.a, sum_rows(gy, nodes_[n.a].shape));
        break;
      case Op::kSumRows:
        accumulate(n.a, broadcast_rows(gy, nodes_[n.a].shape[0]));
        break;
      case Op::kBroadcastScalar:
        accumulate(n.a, sum(gy));
        break;
      case Op::kSum:
        accumulate(n.a, broadcast_scalar(gy, nodes_[n.a].shape));
        break;
      case Op::kSumSquares: {
        const NodeId spread = broadcast_scalar(gy, nodes_[n.a].shape);
        accumulate(n.a, scale(mul(spread, n.a), 2.0));
        break;
      }
      case Op::kActivation: {
        const NodeId deriv = activation(n.a, n.act, n.order + 1);
        accumulate(n.a, mul(gy, deriv));
        break;
      }
      case Op::kConcat: {
        const std::size_t ca = nodes_[n.a].shape[1];
        const std::size_t total = n.shape[1];
        if (depends[n.a]) accumulate(n.a, slice(gy, 0, ca));
        if (depends[n.b]) accumulate(n.b, slice(gy, ca, total));
        break;
      }
      case Op::kSlice:
        accumulate(n.a, pad_columns(gy, n.begin, nodes_[n.a].shape[1]));
        break;
      case Op::kPadColumns:
        accumulate(n.a, slice(gy, n.begin, n.begin + nodes_[n.a].shape[1]));
        break;
    }
  }

  std::vector<NodeId> result;
  result.reserve(wrt.size());
  for (NodeId w : wrt) {
    if (w < n0 && adj[w]) {
      result.push_back(*adj[w]);
    } else {
      result.push_back(fill(shape(w), 0.0));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

Program::Program(Record record, std::vector<NodeId> targets)
    : record_(std::move(record)), targets_(std::move(targets)) {
  needed_.assign(record_.size(), 0);
  for (NodeId t : targets_) {
    if (t >= record_.size()) throw ArgumentError("program target out of range");
    needed_[t] = 1;
  }
  for (std::size_t i = record_.size(); i-- > 0;) {
    if (!needed_[i]) continue;
    const Node& n = record_.node(static_cast<NodeId>(i));
    const int k = arity(n.op);
    if (k >= 1) needed_[n.a] = 1;
    if (k >= 2) needed_[n.b] = 1;
  }
}

std::vector<Tensor> Program::run(const NamedTensors& inputs) const {
  const auto& nodes = record_.nodes();
  std::vector<Tensor> values(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (!needed_[i]) continue;
    const Node& n = nodes[i];
    if (n.op == Op::kInput) {
      auto it = inputs.find(n.name);
      if (it == inputs.end()) throw ArgumentError("missing input '" + n.name + "'");
      if (it->second.shape() != n.shape) {
        throw ShapeError("input '" + n.name + "' has shape " + shape_string(it->second.shape()) +
                         ", record expects " + shape_string(n.shape));
      }
      values[i] = it->second;
    } else {
      values[i] = evaluate_node(n, values);
    }
  }
  std::vector<Tensor> out;
  out.reserve(targets_.size());
  for (NodeId t : targets_) {
    if (!values[t].all_finite()) {
      throw NumericError("non-finite value at node " + std::to_string(t) + " (" +
                         std::string(op_name(nodes[t].op)) + ")");
    }
    out.push_back(values[t]);
  }
  return out;
}

GradientProgram::GradientProgram(const Record& record, std::vector<std::string> wrt)
    : wrt_(std::move(wrt)) {
  Record r = record;
  std::vector<NodeId> ids;
  for (const auto& name : wrt_) {
    auto id = r.find_input(name);
    if (!id) throw ArgumentError("unknown parameter '" + name + "'");
    ids.push_back(*id);
  }
  const NodeId out = r.output();
  std::vector<NodeId> targets{out};
  for (NodeId g : r.append_backward(out, ids)) targets.push_back(g);
  program_.emplace(std::move(r), std::move(targets));
}

GradientProgram::Result GradientProgram::run(const NamedTensors& inputs) const {
  auto values = program_->run(inputs);
  Result res;
  res.value = values[0].item();
  for (std::size_t i = 0; i < wrt_.size(); ++i) res.grads[wrt_[i]] = std::move(values[i + 1]);
  return res;
}

std::string_view hvp_method_name(HvpMethod m) {
  return m == HvpMethod::kDoubleBackprop ? "exact" : "finite-difference";
}

HvpMethod parse_hvp_method(std::string_view s) {
  if (s == "exact" || s == "double-backprop" || s == "exact-double-backprop") {
    return HvpMethod::kDoubleBackprop;
  }
  if (s == "finite-difference" || s == "fd" || s == "central-finite-difference") {
    return HvpMethod::kFiniteDifference;
  }
  throw ArgumentError("unknown HVP method '" + std::string(s) + "'");
}

HvpProgram::HvpProgram(const Record& record, std::vector<std::string> wrt) : wrt_(std::move(wrt)) {
  Record r = record;
  std::vector<NodeId> ids;
  for (const auto& name : wrt_) {
    auto id = r.find_input(name);
    if (!id) throw ArgumentError("unknown parameter '" + name + "'");
    ids.push_back(*id);
  }
  const auto grads = r.append_backward(r.output(), ids);
  std::optional<NodeId> inner;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const NodeId v = r.input(wrt_[i] + "@v", r.shape(ids[i]));
    const NodeId term = r.sum(r.mul(grads[i], v));
    inner = inner ? r.add(*inner, term) : term;
  }
  if (!inner) throw ArgumentError("HVP needs at least one parameter");
  program_.emplace(r, r.append_backward(*inner, ids));
}

NamedTensors HvpProgram::run(const NamedTensors& inputs, const NamedTensors& v) const {
  NamedTensors all = inputs;
  for (const auto& name : wrt_) {
    auto it = v.find(name);
    if (it == v.end()) throw ArgumentError("HVP direction missing '" + name + "'");
    all[name + "@v"] = it->second;
  }
  auto values = program_->run(all);
  NamedTensors out;
  for (std::size_t i = 0; i < wrt_.size(); ++i) out[wrt_[i]] = std::move(values[i]);
  return out;
}

Tensor forward(const Record& record, const NamedTensors& inputs) {
  Program p(record, {record.output()});
  return std::move(p.run(inputs)[0]);
}

NamedTensors gradient(const Record& record, const NamedTensors& inputs,
                      const std::vector<std::string>& wrt) {
  return GradientProgram(record, wrt).run(inputs).grads;
}

double default_fd_step(const NamedTensors& inputs, const std::vector<std::string>& wrt) {
  double m = 0.0;
  for (const auto& name : wrt) {
    auto it = inputs.find(name);
    if (it != inputs.end()) m = std::max(m, max_abs(it->second));
  }
  return 1e-4 * (1.0 + m);
}

NamedTensors finite_difference_hvp(const GradientProgram& grad, const NamedTensors& inputs,
                                   const NamedTensors& v, double fd_step) {
  if (!(fd_step > 0.0)) throw ArgumentError("finite-difference HVP needs fd_step > 0");
  NamedTensors plus = inputs;
  NamedTensors minus = inputs;
  for (const auto& name : grad.wrt()) {
    auto dir = v.find(name);
    if (dir == v.end()) throw ArgumentError("HVP direction missing '" + name + "'");
    auto base = inputs.find(name);
    if (base == inputs.end()) throw ArgumentError("missing input '" + name + "'");
    if (!dir->second.same_shape(base->second)) {
      throw ShapeError("HVP direction '" + name + "' has the wrong shape");
    }
    Tensor& p = plus[name];
    Tensor& m = minus[name];
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] += fd_step * dir->second[i];
      m[i] -= fd_step * dir->second[i];
    }
  }
  const auto gp = grad.run(plus).grads;
  const auto gm = grad.run(minus).grads;
  NamedTensors out;
  for (const auto& name : grad.wrt()) {
    Tensor t = gp.at(name);
    const Tensor& b = gm.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = (t[i] - b[i]) / (2.0 * fd_step);
    if (!t.all_finite()) throw NumericError("non-finite finite-difference HVP");
    out[name] = std::move(t);
  }
  return out;
}

NamedTensors hessian_vector_product(const Record& record, const NamedTensors& inputs,
                                    const std::vector<std::string>& wrt, const NamedTensors& v,
                                    HvpMethod method, double fd_step) {
  for (const auto& name : wrt) {
    auto it = v.find(name);
    auto id = record.find_input(name);
    if (!id) throw ArgumentError("unknown parameter '" + name + "'");
    if (it == v.end() || it->second.shape() != record.shape(*id)) {
      throw ShapeError("HVP direction for '" + name + "' missing or misshaped");
    }
  }
  if (method == HvpMethod::kDoubleBackprop) return HvpProgram(record, wrt).run(inputs, v);
  return finite_difference_hvp(GradientProgram(record, wrt), inputs, v, fd_step);
}

}  // namespace gfprune::ad
