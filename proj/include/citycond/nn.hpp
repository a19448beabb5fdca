#pragma once

#include <string>
#include <vector>

#include "citycond/rng.hpp"
#include "citycond/tensor.hpp"

namespace citycond {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

size_t param_count(const ParamList& params);

// [in x out] weight with entries ~ U(-1/sqrt(in), 1/sqrt(in)).
Tensor fanin_uniform(size_t in, size_t out, Rng& rng);

// Dense layer y = x W + b over row-major batches x: [m x in].
// Weights use fan-in scaled uniform init, biases start at zero.
struct Linear {
  Tensor w;  // [in x out]
  Tensor b;  // [out]; undefined when constructed without bias

  Linear() = default;
  Linear(size_t in, size_t out, Rng& rng, bool bias = true);

  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
  size_t param_count() const;
};

// Two-layer perceptron with tanh hidden activation.
struct Mlp2 {
  Linear l1, l2;

  Mlp2() = default;
  Mlp2(size_t in, size_t hidden, size_t out, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
  size_t param_count() const;
};

// Normalizes the last axis of a [m x d] tensor; learnable gain and bias.
struct LayerNorm {
  Tensor gain;  // [d]
  Tensor bias;  // [d]
  double eps = 1e-5;

  LayerNorm() = default;
  explicit LayerNorm(size_t d);

  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
  size_t param_count() const;
};

}  // namespace citycond
