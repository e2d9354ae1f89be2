#pragma once

// Parameter registry and the small learnable building blocks shared by the
// featurizers, encoder and decoder.

#include <cstddef>
#include <map>
#include <string>

#include "dipp/kernels.hpp"
#include "dipp/rng.hpp"
#include "dipp/tensor.hpp"

namespace dipp::nn {

class ParamStore {
 public:
  // Registers a trainable leaf; names must be unique.
  Tensor add(const std::string& name, Tensor value);
  Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::map<std::string, Tensor>& all() { return params_; }
  const std::map<std::string, Tensor>& all() const { return params_; }
  void zero_grad();
  std::size_t scalar_count() const;

 private:
  std::map<std::string, Tensor> params_;
};

enum class Init {
  Xavier,  // uniform(+-sqrt(6/(fan_in+fan_out)))
  Zero,
};

Tensor init_tensor(Shape shape, Init init, std::size_t fan_in, std::size_t fan_out, Rng& rng);

struct Linear {
  Tensor w;
  Tensor b;  // undefined when the layer has no bias

  static Linear create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                       Rng& rng, Init init = Init::Xavier, bool bias = true);
  Tensor operator()(const Tensor& x) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;
  double eps = 1e-5;

  static LayerNorm create(ParamStore& store, const std::string& name, std::size_t dim);
  Tensor operator()(const Tensor& x) const;
};

// Linear(C, hidden) -> ReLU -> Linear(hidden, C)
struct FeedForward {
  Linear in;
  Linear out;

  static FeedForward create(ParamStore& store, const std::string& name, std::size_t dim,
                            std::size_t hidden, Rng& rng, bool zero_out);
  Tensor operator()(const Tensor& x) const;
};

struct Conv2d {
  Tensor w;  // [K,K,Cin,Cout]
  Tensor b;
  kernels::PadMode pad = kernels::PadMode::Zeros;

  static Conv2d create(ParamStore& store, const std::string& name, std::size_t cin, std::size_t cout,
                       std::size_t ksize, Rng& rng, kernels::PadMode pad = kernels::PadMode::Zeros);
  Tensor operator()(const Tensor& x) const;
};

}  // namespace dipp::nn
