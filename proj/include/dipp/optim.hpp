#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dipp/tensor.hpp"

namespace dipp {

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
};

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled; 0 gives plain Adam
};

// One bias-corrected Adam update of `param` in place using `grad`.
void adam_step(std::span<double> param, std::span<const double> grad, AdamState& state,
               const AdamHyper& hyper);

// Adam over a named parameter set. Parameters without a grad buffer are
// treated as having zero gradient.
class Adam {
 public:
  void step(std::map<std::string, Tensor>& params, const AdamHyper& hyper);
  std::map<std::string, AdamState>& states() { return states_; }
  const std::map<std::string, AdamState>& states() const { return states_; }

 private:
  std::map<std::string, AdamState> states_;
};

// One-cycle schedule: cosine warm-up from lr_max/div_factor to lr_max over
// the first `pct_up` of steps, then cosine anneal to lr_max*final_ratio. beta1
// moves inversely between beta1_max and beta1_min.
struct OneCycle {
  double lr_max = 1e-3;
  double div_factor = 10.0;
  double final_ratio = 1e-4;
  double pct_up = 0.4;
  double beta1_min = 0.85;
  double beta1_max = 0.95;

  double lr(std::size_t step, std::size_t total) const;
  double beta1(std::size_t step, std::size_t total) const;
};

}  // namespace dipp
