#include "citycond/nn.hpp"

#include <cmath>

namespace citycond {

size_t param_count(const ParamList& params) {
  size_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

Tensor fanin_uniform(size_t in, size_t out, Rng& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(in));
  return Tensor::uniform({in, out}, rng, -bound, bound, /*requires_grad=*/true);
}

Linear::Linear(size_t in, size_t out, Rng& rng, bool bias) {
  w = fanin_uniform(in, out, rng);
  if (bias) b = Tensor::zeros({out}, /*requires_grad=*/true);
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = matmul(x, w);
  if (b.defined()) y = add(y, b);
  return y;
}

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".w", w});
  if (b.defined()) out.push_back({prefix + ".b", b});
}

size_t Linear::param_count() const { return w.size() + (b.defined() ? b.size() : 0); }

Mlp2::Mlp2(size_t in, size_t hidden, size_t out, Rng& rng)
    : l1(in, hidden, rng), l2(hidden, out, rng) {}

Tensor Mlp2::forward(const Tensor& x) const { return l2.forward(tanh(l1.forward(x))); }

void Mlp2::collect(ParamList& out, const std::string& prefix) const {
  l1.collect(out, prefix + ".l1");
  l2.collect(out, prefix + ".l2");
}

size_t Mlp2::param_count() const { return l1.param_count() + l2.param_count(); }

LayerNorm::LayerNorm(size_t d) {
  gain = Tensor::full({d}, 1.0, /*requires_grad=*/true);
  bias = Tensor::zeros({d}, /*requires_grad=*/true);
}

Tensor LayerNorm::forward(const Tensor& x) const {
  size_t m = x.dim(0);
  Tensor mu = reshape(mean(x, 1), {m, 1});
  Tensor centered = sub(x, mu);
  Tensor var = reshape(mean(mul(centered, centered), 1), {m, 1});
  Tensor inv = div(centered, sqrt(add_scalar(var, eps)));
  return add(mul(inv, gain), bias);
}

void LayerNorm::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gain", gain});
  out.push_back({prefix + ".bias", bias});
}

size_t LayerNorm::param_count() const { return gain.size() + bias.size(); }

}  // namespace citycond
