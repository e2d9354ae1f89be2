#include "dipp/nn.hpp"

#include <cmath>

#include "dipp/ops.hpp"

namespace dipp::nn {

Tensor ParamStore::add(const std::string& name, Tensor value) {
  if (params_.count(name)) throw ConfigError("duplicate parameter name " + name);
  value.set_requires_grad(true);
  params_.emplace(name, value);
  return value;
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter " + name);
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [_, p] : params_) p.zero_grad();
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.numel();
  return n;
}

Tensor init_tensor(Shape shape, Init init, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  std::vector<double> values(numel_of(shape), 0.0);
  if (init == Init::Xavier) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& v : values) v = rng.uniform(-a, a);
  }
  return Tensor::from(std::move(shape), std::move(values));
}

Linear Linear::create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                      Rng& rng, Init init, bool bias) {
  Linear l;
  l.w = store.add(name + ".w", init_tensor({in, out}, init, in, out, rng));
  if (bias) l.b = store.add(name + ".b", Tensor::zeros({out}));
  return l;
}

Tensor Linear::operator()(const Tensor& x) const {
  return b.defined() ? ops::linear(x, w, b) : ops::linear(x, w);
}

LayerNorm LayerNorm::create(ParamStore& store, const std::string& name, std::size_t dim) {
  LayerNorm ln;
  ln.gamma = store.add(name + ".gamma", Tensor::full({dim}, 1.0));
  ln.beta = store.add(name + ".beta", Tensor::zeros({dim}));
  return ln;
}

Tensor LayerNorm::operator()(const Tensor& x) const { return ops::layer_norm(x, gamma, beta, eps); }

FeedForward FeedForward::create(ParamStore& store, const std::string& name, std::size_t dim,
                                std::size_t hidden, Rng& rng, bool zero_out) {
  FeedForward f;
  f.in = Linear::create(store, name + ".in", dim, hidden, rng);
  f.out = Linear::create(store, name + ".out", hidden, dim, rng, zero_out ? Init::Zero : Init::Xavier);
  return f;
}

Tensor FeedForward::operator()(const Tensor& x) const { return out(ops::relu(in(x))); }

Conv2d Conv2d::create(ParamStore& store, const std::string& name, std::size_t cin, std::size_t cout,
                      std::size_t ksize, Rng& rng, kernels::PadMode pad) {
  Conv2d c;
  c.w = store.add(name + ".w",
                  init_tensor({ksize, ksize, cin, cout}, Init::Xavier, ksize * ksize * cin,
                              ksize * ksize * cout, rng));
  c.b = store.add(name + ".b", Tensor::zeros({cout}));
  c.pad = pad;
  return c;
}

Tensor Conv2d::operator()(const Tensor& x) const { return ops::conv2d(x, w, b, pad); }

}  // namespace dipp::nn
