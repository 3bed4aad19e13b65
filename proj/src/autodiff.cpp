#include "mdeq/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "mdeq/errors.hpp"
#include "mdeq/linalg.hpp"

namespace mdeq::ad {

const char* op_name(Op op) noexcept {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::Shift: return "shift";
    case Op::MatMul: return "matmul";
    case Op::BatchMatMul: return "batch_matmul";
    case Op::Transpose: return "transpose";
    case Op::Tanh: return "tanh";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Softplus: return "softplus";
    case Op::Square: return "square";
    case Op::Sqrt: return "sqrt";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::RowSum: return "row_sum";
    case Op::SliceCols: return "slice_cols";
    case Op::ConcatCols: return "concat_cols";
    case Op::Reshape: return "reshape";
    case Op::Clamp: return "clamp";
    case Op::LogSumExpRows: return "logsumexp_rows";
    case Op::StopGradient: return "stop_gradient";
    case Op::RowFunction: return "row_function";
    case Op::CholeskySolve: return "cholesky_solve";
  }
  return "?";
}

int Graph::output_id(const std::string& name) const {
  for (const auto& [n, id] : outputs_)
    if (n == name) return id;
  throw Error("graph has no output named '" + name + "'");
}

// ---------------------------------------------------------------------------
// Construction

void GraphBuilder::check(Var v) const {
  if (v.builder() != this || v.id() < 0 || static_cast<std::size_t>(v.id()) >= graph_.nodes_.size()) {
    throw Error("variable does not belong to this graph builder");
  }
}

Var GraphBuilder::push(Node node) {
  for (int id : node.in) {
    if (id < 0 || static_cast<std::size_t>(id) >= graph_.nodes_.size()) {
      throw Error("operand id out of order");
    }
  }
  graph_.nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(graph_.nodes_.size() - 1));
}

Var GraphBuilder::leaf(const std::string& name) {
  if (auto it = leaf_ids_.find(name); it != leaf_ids_.end()) return Var(this, it->second);
  Node n;
  n.op = Op::Leaf;
  n.slot = static_cast<int>(graph_.leaf_names_.size());
  graph_.leaf_names_.push_back(name);
  Var v = push(std::move(n));
  leaf_ids_.emplace(name, v.id());
  return v;
}

Var GraphBuilder::constant(Tensor value) {
  Node n;
  n.op = Op::Constant;
  n.slot = static_cast<int>(graph_.constants_.size());
  graph_.constants_.push_back(std::move(value));
  return push(std::move(n));
}

Var GraphBuilder::unary(Op op, Var a) {
  check(a);
  Node n;
  n.op = op;
  n.in = {a.id()};
  return push(std::move(n));
}

Var GraphBuilder::binary(Op op, Var a, Var b) {
  check(a);
  check(b);
  Node n;
  n.op = op;
  n.in = {a.id(), b.id()};
  return push(std::move(n));
}

Var GraphBuilder::scale(Var a, double s) {
  check(a);
  Node n;
  n.op = Op::Scale;
  n.in = {a.id()};
  n.a = s;
  return push(std::move(n));
}

Var GraphBuilder::shift(Var a, double s) {
  check(a);
  Node n;
  n.op = Op::Shift;
  n.in = {a.id()};
  n.a = s;
  return push(std::move(n));
}

Var GraphBuilder::batch_matmul(Var a, Var b, std::size_t n_, std::size_t k, std::size_t m,
                               bool transpose_b) {
  check(a);
  check(b);
  Node n;
  n.op = Op::BatchMatMul;
  n.in = {a.id(), b.id()};
  n.i0 = n_;
  n.i1 = k;
  n.i2 = m;
  n.flag = transpose_b;
  return push(std::move(n));
}

Var GraphBuilder::slice_cols(Var a, std::size_t begin, std::size_t end) {
  check(a);
  if (end <= begin) throw ShapeError("empty column slice");
  Node n;
  n.op = Op::SliceCols;
  n.in = {a.id()};
  n.i0 = begin;
  n.i1 = end;
  return push(std::move(n));
}

Var GraphBuilder::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Node n;
  n.op = Op::ConcatCols;
  for (const auto& p : parts) {
    check(p);
    n.in.push_back(p.id());
  }
  return push(std::move(n));
}

Var GraphBuilder::reshape(Var a, std::size_t cols) {
  check(a);
  Node n;
  n.op = Op::Reshape;
  n.in = {a.id()};
  n.i0 = cols;
  return push(std::move(n));
}

Var GraphBuilder::clamp(Var a, double lo, double hi) {
  check(a);
  Node n;
  n.op = Op::Clamp;
  n.in = {a.id()};
  n.a = lo;
  n.b = hi;
  return push(std::move(n));
}

Var GraphBuilder::row_function(Var a, std::shared_ptr<const RowFunction> fn) {
  check(a);
  Node n;
  n.op = Op::RowFunction;
  n.in = {a.id()};
  n.fn = std::move(fn);
  return push(std::move(n));
}

Graph GraphBuilder::build(Var output) { return build({{"output", output}}); }

Graph GraphBuilder::build(const std::vector<std::pair<std::string, Var>>& outputs) {
  if (outputs.empty()) throw Error("graph needs at least one output");
  Graph g = graph_;
  g.outputs_.clear();
  for (const auto& [name, v] : outputs) {
    check(v);
    g.outputs_.emplace_back(name, v.id());
  }
  return g;
}

Var operator+(Var a, Var b) { return a.builder()->add(a, b); }
Var operator-(Var a, Var b) { return a.builder()->sub(a, b); }
Var operator*(Var a, Var b) { return a.builder()->mul(a, b); }
Var operator/(Var a, Var b) { return a.builder()->div(a, b); }
Var operator-(Var a) { return a.builder()->neg(a); }
Var operator*(double s, Var a) { return a.builder()->scale(a, s); }
Var operator+(Var a, double s) { return a.builder()->shift(a, s); }

// ---------------------------------------------------------------------------
// Evaluation

namespace {

std::size_t broadcast_extent(std::size_t a, std::size_t b, std::size_t node) {
  if (a == b || b == 1) return a;
  if (a == 1) return b;
  throw ShapeError("broadcast mismatch " + std::to_string(a) + " vs " + std::to_string(b) +
                   " at node " + std::to_string(node));
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor sym_part(const Tensor& a) {
  Tensor s = a;
  const auto n = a.rows();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) s(i, j) = 0.5 * (a(i, j) + a(j, i));
  return s;
}

// Adds `g` (shaped like the broadcast result) into `acc`, summing over the
// extents along which `acc` was broadcast.
void reduce_into(Tensor& acc, const Tensor& g, double factor = 1.0) {
  const auto ra = acc.rows(), ca = acc.cols();
  const auto r = g.rows(), c = g.cols();
  if (ra == r && ca == c) {
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += factor * g[i];
    return;
  }
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) acc(ra == 1 ? 0 : i, ca == 1 ? 0 : j) += factor * g(i, j);
}

}  // namespace

struct Engine {
  static void forward(const Graph& g, const Bindings& bindings, Evaluation& ev, bool need_aux);
  static void compute(const Graph& g, std::size_t id, Evaluation& ev, bool need_aux);
};

void Engine::forward(const Graph& g, const Bindings& bindings, Evaluation& ev, bool need_aux) {
  const auto& nodes = g.nodes();
  ev.graph_ = &g;
  ev.owned_.assign(nodes.size(), Tensor());
  ev.values_.assign(nodes.size(), nullptr);
  ev.aux_.assign(nodes.size(), Tensor());
  for (std::size_t id = 0; id < nodes.size(); ++id) {
    const Node& n = nodes[id];
    if (n.op == Op::Leaf) {
      const auto& name = g.leaf_names()[static_cast<std::size_t>(n.slot)];
      auto it = bindings.find(name);
      if (it == bindings.end()) throw Error("unbound leaf '" + name + "'");
      if (!it->second.all_finite()) {
        throw NumericalError("non-finite value bound to leaf '" + name + "'",
                             static_cast<std::ptrdiff_t>(id));
      }
      ev.values_[id] = &it->second;
      continue;
    }
    if (n.op == Op::Constant) {
      ev.values_[id] = &g.constants()[static_cast<std::size_t>(n.slot)];
      continue;
    }
    compute(g, id, ev, need_aux);
    ev.values_[id] = &ev.owned_[id];
    if (!ev.owned_[id].all_finite()) {
      throw NumericalError(std::string("non-finite intermediate at node ") + std::to_string(id) + " (" +
                               op_name(n.op) + ")",
                           static_cast<std::ptrdiff_t>(id));
    }
  }
}

void Engine::compute(const Graph& g, std::size_t id, Evaluation& ev, bool need_aux) {
  const Node& n = g.nodes()[id];
  auto in = [&](std::size_t k) -> const Tensor& { return *ev.values_[static_cast<std::size_t>(n.in[k])]; };
  Tensor& out = ev.owned_[id];

  auto unary_map = [&](auto&& f) {
    const Tensor& a = in(0);
    out = Tensor({a.rows(), a.cols()});
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  };

  switch (n.op) {
    case Op::Leaf:
    case Op::Constant:
      break;
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const auto ra = a.rows(), ca = a.cols(), rb = b.rows(), cb = b.cols();
      const auto r = broadcast_extent(ra, rb, id), c = broadcast_extent(ca, cb, id);
      out = Tensor({r, c});
      for (std::size_t i = 0; i < r; ++i) {
        const double* ap = a.data().data() + (ra == 1 ? 0 : i) * ca;
        const double* bp = b.data().data() + (rb == 1 ? 0 : i) * cb;
        double* op = out.data().data() + i * c;
        for (std::size_t j = 0; j < c; ++j) {
          const double x = ap[ca == 1 ? 0 : j];
          const double y = bp[cb == 1 ? 0 : j];
          switch (n.op) {
            case Op::Add: op[j] = x + y; break;
            case Op::Sub: op[j] = x - y; break;
            case Op::Mul: op[j] = x * y; break;
            default: op[j] = x / y; break;
          }
        }
      }
      break;
    }
    case Op::Neg: unary_map([](double x) { return -x; }); break;
    case Op::Scale: unary_map([s = n.a](double x) { return s * x; }); break;
    case Op::Shift: unary_map([s = n.a](double x) { return x + s; }); break;
    case Op::Tanh: unary_map([](double x) { return std::tanh(x); }); break;
    case Op::Exp: unary_map([](double x) { return std::exp(x); }); break;
    case Op::Log: unary_map([](double x) { return std::log(x); }); break;
    case Op::Softplus: unary_map(softplus); break;
    case Op::Square: unary_map([](double x) { return x * x; }); break;
    case Op::Sqrt: unary_map([](double x) { return std::sqrt(x); }); break;
    case Op::StopGradient: unary_map([](double x) { return x; }); break;
    case Op::Clamp: unary_map([lo = n.a, hi = n.b](double x) { return std::clamp(x, lo, hi); }); break;
    case Op::MatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.cols() != b.rows()) {
        throw ShapeError("matmul mismatch " + a.shape_string() + " * " + b.shape_string() + " at node " +
                         std::to_string(id));
      }
      out = matmul(a, b);
      break;
    }
    case Op::BatchMatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const auto nn = n.i0, k = n.i1, m = n.i2;
      if (a.cols() != nn * k || b.cols() != k * m) {
        throw ShapeError("batch_matmul row sizes do not match declared dims at node " + std::to_string(id));
      }
      const auto r = broadcast_extent(a.rows(), b.rows(), id);
      out = Tensor({r, nn * m});
      for (std::size_t row = 0; row < r; ++row) {
        const double* ap = a.data().data() + (a.rows() == 1 ? 0 : row) * a.cols();
        const double* bp = b.data().data() + (b.rows() == 1 ? 0 : row) * b.cols();
        double* op = out.data().data() + row * nn * m;
        for (std::size_t i = 0; i < nn; ++i)
          for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += ap[i * k + p] * (n.flag ? bp[j * k + p] : bp[p * m + j]);
            op[i * m + j] = s;
          }
      }
      break;
    }
    case Op::Transpose: out = in(0).transposed(); break;
    case Op::Sum: {
      double s = 0.0;
      for (double v : in(0).data()) s += v;
      out = Tensor::scalar(s);
      break;
    }
    case Op::Mean: {
      double s = 0.0;
      for (double v : in(0).data()) s += v;
      out = Tensor::scalar(s / static_cast<double>(in(0).size()));
      break;
    }
    case Op::RowSum: {
      const Tensor& a = in(0);
      out = Tensor({a.rows(), 1});
      for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (double v : a.row_span(i)) s += v;
        out[i] = s;
      }
      break;
    }
    case Op::SliceCols: {
      const Tensor& a = in(0);
      if (n.i1 > a.cols()) throw ShapeError("column slice out of range at node " + std::to_string(id));
      const auto w = n.i1 - n.i0;
      out = Tensor({a.rows(), w});
      for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < w; ++j) out(i, j) = a(i, n.i0 + j);
      break;
    }
    case Op::ConcatCols: {
      const auto r = in(0).rows();
      std::size_t c = 0;
      for (std::size_t k = 0; k < n.in.size(); ++k) {
        if (in(k).rows() != r) throw ShapeError("concat row mismatch at node " + std::to_string(id));
        c += in(k).cols();
      }
      out = Tensor({r, c});
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.in.size(); ++k) {
        const Tensor& a = in(k);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < a.cols(); ++j) out(i, off + j) = a(i, j);
        off += a.cols();
      }
      break;
    }
    case Op::Reshape: {
      const Tensor& a = in(0);
      if (n.i0 == 0 || a.size() % n.i0 != 0) {
        throw ShapeError("cannot reshape " + a.shape_string() + " to " + std::to_string(n.i0) +
                         " columns at node " + std::to_string(id));
      }
      out = Tensor({a.size() / n.i0, n.i0}, a.storage());
      break;
    }
    case Op::LogSumExpRows: {
      const Tensor& a = in(0);
      out = Tensor({a.rows(), 1});
      for (std::size_t i = 0; i < a.rows(); ++i) {
        auto r = a.row_span(i);
        const double mx = *std::max_element(r.begin(), r.end());
        double s = 0.0;
        for (double v : r) s += std::exp(v - mx);
        out[i] = mx + std::log(s);
      }
      break;
    }
    case Op::RowFunction: {
      const Tensor& a = in(0);
      out = Tensor({a.rows(), 1});
      if (need_aux) ev.aux_[id] = Tensor({a.rows(), a.cols()});
      for (std::size_t i = 0; i < a.rows(); ++i) {
        std::span<double> grad;
        if (need_aux) grad = ev.aux_[id].row_span(i);
        out[i] = n.fn->fn(a.row_span(i), grad);
      }
      break;
    }
    case Op::CholeskySolve: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.rows() != a.cols() || b.rows() != a.rows()) {
        throw ShapeError("cholesky_solve shape mismatch at node " + std::to_string(id));
      }
      const Tensor l = linalg::cholesky_factor(sym_part(a));
      out = linalg::cholesky_solve(l, b);
      break;
    }
  }
}

Evaluation evaluate_all(const Graph& graph, const Bindings& bindings) {
  Evaluation ev;
  Engine::forward(graph, bindings, ev, false);
  return ev;
}

const Tensor& Evaluation::output(const std::string& name) const { return value(graph_->output_id(name)); }

Tensor evaluate(const Graph& graph, const Bindings& bindings) {
  return evaluate_all(graph, bindings).output();
}

GradientResult gradient(const Graph& graph, const Bindings& bindings, const std::vector<std::string>& wrt) {
  const auto& nodes = graph.nodes();
  const int out_id = graph.primary_output();

  std::vector<int> wanted_nodes;
  for (const auto& name : wrt) {
    auto it = std::find(graph.leaf_names().begin(), graph.leaf_names().end(), name);
    if (it == graph.leaf_names().end()) throw Error("unknown leaf '" + name + "' requested in gradient");
    const int slot = static_cast<int>(it - graph.leaf_names().begin());
    for (std::size_t id = 0; id < nodes.size(); ++id)
      if (nodes[id].op == Op::Leaf && nodes[id].slot == slot) wanted_nodes.push_back(static_cast<int>(id));
  }

  Evaluation ev;
  Engine::forward(graph, bindings, ev, true);
  const Tensor& out = ev.value(out_id);
  if (!out.is_scalar()) throw ShapeError("gradient requires a scalar output, got " + out.shape_string());

  // Only nodes that lie on a path from a requested leaf carry cotangents.
  std::vector<char> requires_grad(nodes.size(), 0);
  for (int id : wanted_nodes) requires_grad[static_cast<std::size_t>(id)] = 1;
  for (std::size_t id = 0; id < nodes.size(); ++id) {
    const Node& n = nodes[id];
    if (n.op == Op::Leaf || n.op == Op::Constant || n.op == Op::StopGradient) continue;
    for (int k : n.in)
      if (requires_grad[static_cast<std::size_t>(k)]) requires_grad[id] = 1;
  }

  std::vector<Tensor> grads(nodes.size());
  std::vector<char> has(nodes.size(), 0);
  auto acc = [&](int id, auto&& fill) {
    const auto u = static_cast<std::size_t>(id);
    if (!requires_grad[u]) return;
    if (!has[u]) {
      const Tensor& v = ev.value(id);
      grads[u] = Tensor({v.rows(), v.cols()});
      has[u] = 1;
    }
    fill(grads[u]);
  };

  GradientResult result;
  result.value = out;
  if (requires_grad[static_cast<std::size_t>(out_id)]) {
    grads[static_cast<std::size_t>(out_id)] = Tensor({out.rows(), out.cols()}, 1.0);
    has[static_cast<std::size_t>(out_id)] = 1;
  }

  for (std::size_t id = nodes.size(); id-- > 0;) {
    if (!has[id] || !requires_grad[id]) continue;
    const Node& n = nodes[id];
    const Tensor& G = grads[id];
    const Tensor& y = ev.value(static_cast<int>(id));
    auto x = [&](std::size_t k) -> const Tensor& { return ev.value(n.in[k]); };
    auto elementwise = [&](auto&& dfdx) {
      acc(n.in[0], [&](Tensor& g) {
        const Tensor& a = x(0);
        for (std::size_t i = 0; i < a.size(); ++i) g[i] += G[i] * dfdx(a[i], y[i]);
      });
    };

    switch (n.op) {
      case Op::Leaf:
      case Op::Constant:
      case Op::StopGradient:
        break;
      case Op::Add:
        acc(n.in[0], [&](Tensor& g) { reduce_into(g, G); });
        acc(n.in[1], [&](Tensor& g) { reduce_into(g, G); });
        break;
      case Op::Sub:
        acc(n.in[0], [&](Tensor& g) { reduce_into(g, G); });
        acc(n.in[1], [&](Tensor& g) { reduce_into(g, G, -1.0); });
        break;
      case Op::Mul:
      case Op::Div: {
        const Tensor& a = x(0);
        const Tensor& b = x(1);
        const auto r = G.rows(), c = G.cols();
        auto at = [](const Tensor& t, std::size_t i, std::size_t j) {
          return t(t.rows() == 1 ? 0 : i, t.cols() == 1 ? 0 : j);
        };
        Tensor ga({r, c}), gb({r, c});
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double av = at(a, i, j), bv = at(b, i, j), gv = G(i, j);
            if (n.op == Op::Mul) {
              ga(i, j) = gv * bv;
              gb(i, j) = gv * av;
            } else {
              ga(i, j) = gv / bv;
              gb(i, j) = -gv * av / (bv * bv);
            }
          }
        acc(n.in[0], [&](Tensor& g) { reduce_into(g, ga); });
        acc(n.in[1], [&](Tensor& g) { reduce_into(g, gb); });
        break;
      }
      case Op::Neg: elementwise([](double, double) { return -1.0; }); break;
      case Op::Scale: elementwise([s = n.a](double, double) { return s; }); break;
      case Op::Shift: elementwise([](double, double) { return 1.0; }); break;
      case Op::Tanh: elementwise([](double, double t) { return 1.0 - t * t; }); break;
      case Op::Exp: elementwise([](double, double e) { return e; }); break;
      case Op::Log: elementwise([](double v, double) { return 1.0 / v; }); break;
      case Op::Softplus: elementwise([](double v, double) { return sigmoid(v); }); break;
      case Op::Square: elementwise([](double v, double) { return 2.0 * v; }); break;
      case Op::Sqrt: elementwise([](double, double s) { return 0.5 / s; }); break;
      case Op::Clamp:
        elementwise([lo = n.a, hi = n.b](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
        break;
      case Op::MatMul:
        acc(n.in[0], [&](Tensor& g) { g = g + matmul_nt(G, x(1)); });
        acc(n.in[1], [&](Tensor& g) { g = g + matmul_tn(x(0), G); });
        break;
      case Op::BatchMatMul: {
        const Tensor& a = x(0);
        const Tensor& b = x(1);
        const auto nn = n.i0, k = n.i1, m = n.i2;
        const auto rows = G.rows();
        const bool tb = n.flag;
        acc(n.in[0], [&](Tensor& g) {
          for (std::size_t row = 0; row < rows; ++row) {
            const double* bp = b.data().data() + (b.rows() == 1 ? 0 : row) * b.cols();
            const double* gp = G.data().data() + row * nn * m;
            double* out = g.data().data() + (a.rows() == 1 ? 0 : row) * a.cols();
            for (std::size_t i = 0; i < nn; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                double s = 0.0;
                for (std::size_t j = 0; j < m; ++j) s += gp[i * m + j] * (tb ? bp[j * k + p] : bp[p * m + j]);
                out[i * k + p] += s;
              }
          }
        });
        acc(n.in[1], [&](Tensor& g) {
          for (std::size_t row = 0; row < rows; ++row) {
            const double* ap = a.data().data() + (a.rows() == 1 ? 0 : row) * a.cols();
            const double* gp = G.data().data() + row * nn * m;
            double* out = g.data().data() + (b.rows() == 1 ? 0 : row) * b.cols();
            for (std::size_t p = 0; p < k; ++p)
              for (std::size_t j = 0; j < m; ++j) {
                double s = 0.0;
                for (std::size_t i = 0; i < nn; ++i) s += ap[i * k + p] * gp[i * m + j];
                if (tb)
                  out[j * k + p] += s;
                else
                  out[p * m + j] += s;
              }
          }
        });
        break;
      }
      case Op::Transpose:
        acc(n.in[0], [&](Tensor& g) { g = g + G.transposed(); });
        break;
      case Op::Sum:
        acc(n.in[0], [&](Tensor& g) {
          for (auto& v : g.storage()) v += G[0];
        });
        break;
      case Op::Mean:
        acc(n.in[0], [&](Tensor& g) {
          const double s = G[0] / static_cast<double>(g.size());
          for (auto& v : g.storage()) v += s;
        });
        break;
      case Op::RowSum:
        acc(n.in[0], [&](Tensor& g) {
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (auto& v : g.row_span(i)) v += G[i];
        });
        break;
      case Op::SliceCols:
        acc(n.in[0], [&](Tensor& g) {
          for (std::size_t i = 0; i < G.rows(); ++i)
            for (std::size_t j = 0; j < G.cols(); ++j) g(i, n.i0 + j) += G(i, j);
        });
        break;
      case Op::ConcatCols: {
        std::size_t off = 0;
        for (std::size_t k = 0; k < n.in.size(); ++k) {
          const auto w = x(k).cols();
          acc(n.in[k], [&](Tensor& g) {
            for (std::size_t i = 0; i < G.rows(); ++i)
              for (std::size_t j = 0; j < w; ++j) g(i, j) += G(i, off + j);
          });
          off += w;
        }
        break;
      }
      case Op::Reshape:
        acc(n.in[0], [&](Tensor& g) {
          for (std::size_t i = 0; i < G.size(); ++i) g[i] += G[i];
        });
        break;
      case Op::LogSumExpRows:
        acc(n.in[0], [&](Tensor& g) {
          const Tensor& a = x(0);
          for (std::size_t i = 0; i < a.rows(); ++i)
            for (std::size_t j = 0; j < a.cols(); ++j) g(i, j) += G[i] * std::exp(a(i, j) - y[i]);
        });
        break;
      case Op::RowFunction:
        acc(n.in[0], [&](Tensor& g) {
          const Tensor& aux = ev.aux(id);
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) g(i, j) += G[i] * aux(i, j);
        });
        break;
      case Op::CholeskySolve: {
        const Tensor l = linalg::cholesky_factor(sym_part(x(0)));
        const Tensor gb = linalg::cholesky_solve(l, G);
        acc(n.in[1], [&](Tensor& g) { g = g + gb; });
        acc(n.in[0], [&](Tensor& g) { g = g + sym_part(-1.0 * matmul(gb, y.transposed())); });
        break;
      }
    }
  }

  for (const auto& name : wrt) {
    const auto slot = static_cast<int>(std::find(graph.leaf_names().begin(), graph.leaf_names().end(), name) -
                                       graph.leaf_names().begin());
    for (std::size_t id = 0; id < nodes.size(); ++id) {
      if (nodes[id].op != Op::Leaf || nodes[id].slot != slot) continue;
      if (has[id]) {
        result.grads[name] = grads[id].reshaped(ev.value(static_cast<int>(id)).shape());
      } else {
        result.grads[name] = Tensor(ev.value(static_cast<int>(id)).shape(), 0.0);
      }
    }
  }
  return result;
}

}  // namespace mdeq::ad
