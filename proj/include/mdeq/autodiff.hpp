#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mdeq/tensor.hpp"

/// Reverse-mode automatic differentiation over dense matrices.
///
/// A Graph is built once by a GraphBuilder and is immutable afterwards. Leaves
/// are named; every evaluate/gradient call supplies its own binding table, so
/// one graph may be evaluated from several threads at once. Shapes are
/// resolved at evaluation time from the bound leaves, which lets a single
/// graph serve any batch size.
namespace mdeq::ad {

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Scale,
  Shift,
  MatMul,
  BatchMatMul,
  Transpose,
  Tanh,
  Exp,
  Log,
  Softplus,
  Square,
  Sqrt,
  Sum,
  Mean,
  RowSum,
  SliceCols,
  ConcatCols,
  Reshape,
  Clamp,
  LogSumExpRows,
  StopGradient,
  RowFunction,
  CholeskySolve,
};

const char* op_name(Op op) noexcept;

/// Scalar function applied to every row of an operand, with its gradient.
///
/// `fn(row, grad)` returns the value; when `grad` is non-empty it must also
/// write d value / d row into it. Must be safe to call concurrently.
struct RowFunction {
  std::string name;
  std::function<double(std::span<const double>, std::span<double>)> fn;
};

struct Node {
  Op op = Op::Leaf;
  std::vector<int> in;
  double a = 0.0;
  double b = 0.0;
  std::size_t i0 = 0;
  std::size_t i1 = 0;
  std::size_t i2 = 0;
  bool flag = false;
  int slot = -1;  // leaf name index or constant index
  std::shared_ptr<const RowFunction> fn;
};

using Bindings = std::unordered_map<std::string, Tensor>;

class Graph {
 public:
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  const std::vector<std::string>& leaf_names() const noexcept { return leaf_names_; }
  const std::vector<Tensor>& constants() const noexcept { return constants_; }
  const std::vector<std::pair<std::string, int>>& outputs() const noexcept { return outputs_; }
  int output_id(const std::string& name) const;
  int primary_output() const { return outputs_.front().second; }

 private:
  friend class GraphBuilder;
  std::vector<Node> nodes_;
  std::vector<std::string> leaf_names_;
  std::vector<Tensor> constants_;
  std::vector<std::pair<std::string, int>> outputs_;
};

class GraphBuilder;

/// Handle to a node under construction.
class Var {
 public:
  Var() = default;
  Var(GraphBuilder* builder, int id) : builder_(builder), id_(id) {}
  int id() const noexcept { return id_; }
  GraphBuilder* builder() const noexcept { return builder_; }
  bool valid() const noexcept { return builder_ != nullptr; }

 private:
  GraphBuilder* builder_ = nullptr;
  int id_ = -1;
};

class GraphBuilder {
 public:
  /// Leaf bound by name at evaluation time. Repeated names share one node.
  Var leaf(const std::string& name);
  Var constant(Tensor value);
  Var scalar(double value) { return constant(Tensor::scalar(value)); }

  // Elementwise binary ops broadcast along any extent equal to 1.
  Var add(Var a, Var b) { return binary(Op::Add, a, b); }
  Var sub(Var a, Var b) { return binary(Op::Sub, a, b); }
  Var mul(Var a, Var b) { return binary(Op::Mul, a, b); }
  Var div(Var a, Var b) { return binary(Op::Div, a, b); }
  Var neg(Var a) { return unary(Op::Neg, a); }
  Var scale(Var a, double s);
  Var shift(Var a, double s);
  Var matmul(Var a, Var b) { return binary(Op::MatMul, a, b); }
  /// Row-wise small matrix product: row r of `a` is an n x k matrix, row r of
  /// `b` is k x m (or m x k when `transpose_b`); row r of the result is n x m.
  Var batch_matmul(Var a, Var b, std::size_t n, std::size_t k, std::size_t m,
                   bool transpose_b = false);
  Var transpose(Var a) { return unary(Op::Transpose, a); }
  Var tanh(Var a) { return unary(Op::Tanh, a); }
  Var exp(Var a) { return unary(Op::Exp, a); }
  Var log(Var a) { return unary(Op::Log, a); }
  Var softplus(Var a) { return unary(Op::Softplus, a); }
  Var square(Var a) { return unary(Op::Square, a); }
  Var sqrt(Var a) { return unary(Op::Sqrt, a); }
  Var sum(Var a) { return unary(Op::Sum, a); }
  Var mean(Var a) { return unary(Op::Mean, a); }
  Var row_sum(Var a) { return unary(Op::RowSum, a); }
  Var slice_cols(Var a, std::size_t begin, std::size_t end);
  Var concat_cols(const std::vector<Var>& parts);
  /// Reinterpret as (size / cols) x cols.
  Var reshape(Var a, std::size_t cols);
  Var clamp(Var a, double lo, double hi);
  Var logsumexp_rows(Var a) { return unary(Op::LogSumExpRows, a); }
  Var stop_gradient(Var a) { return unary(Op::StopGradient, a); }
  Var row_function(Var a, std::shared_ptr<const RowFunction> fn);
  /// Solves sym(A) X = B through a Cholesky factorization of sym(A).
  Var cholesky_solve(Var a, Var b) { return binary(Op::CholeskySolve, a, b); }

  Graph build(Var output);
  Graph build(const std::vector<std::pair<std::string, Var>>& outputs);

  std::size_t size() const noexcept { return graph_.nodes_.size(); }

 private:
  Var push(Node node);
  Var unary(Op op, Var a);
  Var binary(Op op, Var a, Var b);
  void check(Var v) const;

  Graph graph_;
  std::unordered_map<std::string, int> leaf_ids_;
};

// Operator sugar for graph construction.
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator*(double s, Var a);
Var operator+(Var a, double s);

/// All node values of one forward pass.
class Evaluation {
 public:
  const Tensor& value(int node) const { return *values_[static_cast<std::size_t>(node)]; }
  const Tensor& output(const std::string& name) const;
  const Tensor& output() const { return value(graph_->primary_output()); }
  /// Per-node side data kept for the backward pass (row-function gradients).
  const Tensor& aux(int node) const { return aux_[static_cast<std::size_t>(node)]; }

 private:
  friend Evaluation evaluate_all(const Graph&, const Bindings&);
  friend struct Engine;
  const Graph* graph_ = nullptr;
  std::vector<Tensor> owned_;
  std::vector<const Tensor*> values_;
  std::vector<Tensor> aux_;
};

/// Forward value of the primary output.
Tensor evaluate(const Graph& graph, const Bindings& bindings);
Evaluation evaluate_all(const Graph& graph, const Bindings& bindings);

struct GradientResult {
  Tensor value;
  std::map<std::string, Tensor> grads;
};

/// Reverse-mode cotangents of the (scalar) primary output w.r.t. named leaves.
GradientResult gradient(const Graph& graph, const Bindings& bindings,
                        const std::vector<std::string>& wrt);

}  // namespace mdeq::ad
