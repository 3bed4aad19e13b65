#pragma once

#include <functional>
#include <map>
#include <string>

#include "mdeq/autodiff.hpp"
#include "mdeq/rng.hpp"
#include "mdeq/tensor.hpp"

namespace mdeq {

/// Perceptron with two tanh hidden layers: in -> h -> h -> out.
struct Mlp {
  Tensor w1, b1, w2, b2, w3, b3;

  static Mlp init(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng);
  std::size_t in_dim() const { return w1.rows(); }
  std::size_t out_dim() const { return w3.cols(); }
  std::size_t parameter_count() const;

  /// Plain forward pass on a batch (rows x in).
  Tensor forward(const Tensor& x) const;
  /// Graph version; weights are leaves named prefix + ".w1" etc.
  ad::Var graph(ad::GraphBuilder& gb, ad::Var x, const std::string& prefix) const;

  void visit(const std::string& prefix, const std::function<void(const std::string&, Tensor&)>& fn);
  void visit(const std::string& prefix, const std::function<void(const std::string&, const Tensor&)>& fn) const;
};

/// Named parameter tensors, ordered by name.
using ParameterMap = std::map<std::string, Tensor>;

}  // namespace mdeq
