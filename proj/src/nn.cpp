#include "mdeq/nn.hpp"

#include <cmath>

namespace mdeq {

namespace {

Tensor glorot(std::size_t in, std::size_t out, Rng& rng) {
  Tensor w({in, out});
  const double sd = 1.0 / std::sqrt(static_cast<double>(in));
  for (double& v : w.data()) v = sd * rng.normal();
  return w;
}

void add_bias_tanh(Tensor& h, const Tensor& b, bool activate) {
  const std::size_t c = h.cols();
  for (std::size_t i = 0; i < h.rows(); ++i) {
    auto row = h.row_span(i);
    for (std::size_t j = 0; j < c; ++j) {
      row[j] += b[j];
      if (activate) row[j] = std::tanh(row[j]);
    }
  }
}

}  // namespace

Mlp Mlp::init(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
  Mlp m;
  m.w1 = glorot(in, hidden, rng);
  m.b1 = Tensor({1, hidden});
  m.w2 = glorot(hidden, hidden, rng);
  m.b2 = Tensor({1, hidden});
  m.w3 = Tensor({hidden, out});
  m.b3 = Tensor({1, out});
  return m;
}

std::size_t Mlp::parameter_count() const {
  return w1.size() + b1.size() + w2.size() + b2.size() + w3.size() + b3.size();
}

Tensor Mlp::forward(const Tensor& x) const {
  Tensor h = matmul(x, w1);
  add_bias_tanh(h, b1, true);
  Tensor h2 = matmul(h, w2);
  add_bias_tanh(h2, b2, true);
  Tensor out = matmul(h2, w3);
  add_bias_tanh(out, b3, false);
  return out;
}

ad::Var Mlp::graph(ad::GraphBuilder& gb, ad::Var x, const std::string& prefix) const {
  ad::Var h = gb.tanh(gb.matmul(x, gb.leaf(prefix + ".w1")) + gb.leaf(prefix + ".b1"));
  h = gb.tanh(gb.matmul(h, gb.leaf(prefix + ".w2")) + gb.leaf(prefix + ".b2"));
  return gb.matmul(h, gb.leaf(prefix + ".w3")) + gb.leaf(prefix + ".b3");
}

void Mlp::visit(const std::string& prefix, const std::function<void(const std::string&, Tensor&)>& fn) {
  fn(prefix + ".w1", w1);
  fn(prefix + ".b1", b1);
  fn(prefix + ".w2", w2);
  fn(prefix + ".b2", b2);
  fn(prefix + ".w3", w3);
  fn(prefix + ".b3", b3);
}

void Mlp::visit(const std::string& prefix,
                const std::function<void(const std::string&, const Tensor&)>& fn) const {
  fn(prefix + ".w1", w1);
  fn(prefix + ".b1", b1);
  fn(prefix + ".w2", w2);
  fn(prefix + ".b2", b2);
  fn(prefix + ".w3", w3);
  fn(prefix + ".b3", b3);
}

}  // namespace mdeq
