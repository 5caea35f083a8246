#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "s2gr/numerics/tape.hpp"

namespace s2gr::nx {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::int64_t step = 0;
};

/// Bias-corrected Adam step over parallel lists of parameters and gradients.
/// Moments are created on the first call; later calls require identical
/// shapes (ShapeError otherwise).
template <typename T>
void adam_update(std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads,
                 AdamState<T>& state);

// Convenience wrapper over a ParameterStore.
template <typename T>
class Adam {
 public:
  Adam(ParameterStore<T>& store, AdamConfig config);
  // Applies one update from the store's accumulated gradients. Returns the
  // pre-clip global gradient norm.
  double step();
  const AdamState<T>& state() const { return state_; }

 private:
  ParameterStore<T>& store_;
  AdamState<T> state_;
};

}  // namespace s2gr::nx
