#include "s2gr/numerics/adam.hpp"

#include <cmath>

namespace s2gr::nx {

template <typename T>
void adam_update(std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads,
                 AdamState<T>& state) {
  if (params.size() != grads.size()) throw ShapeError("adam_update: params/grads count mismatch");
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.push_back(Tensor<T>::zeros_like(*p));
      state.v.push_back(Tensor<T>::zeros_like(*p));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_update: state/params count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(*grads[i]) || !params[i]->same_shape(state.m[i]))
      throw ShapeError("adam_update: shape mismatch at parameter " + std::to_string(i));
  }

  const AdamConfig& c = state.config;
  double clip = 1.0;
  if (c.clip_norm > 0) {
    double sq = 0;
    for (const auto* g : grads)
      for (T x : g->data) sq += static_cast<double>(x) * x;
    const double norm = std::sqrt(sq);
    if (norm > c.clip_norm) clip = c.clip_norm / norm;
  }

  state.step += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T step_size = static_cast<T>(c.lr / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(c.eps);
  const T cl = static_cast<T>(clip);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i]->data;
    const auto& g = grads[i]->data;
    auto& m = state.m[i].data;
    auto& v = state.v[i].data;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const T gj = g[j] * cl;
      m[j] = b1 * m[j] + (T(1) - b1) * gj;
      v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
      p[j] -= step_size * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
    }
  }
}

template <typename T>
Adam<T>::Adam(ParameterStore<T>& store, AdamConfig config) : store_(store) {
  state_.config = config;
}

template <typename T>
double Adam<T>::step() {
  std::vector<Tensor<T>*> params;
  std::vector<const Tensor<T>*> grads;
  double sq = 0;
  for (std::size_t i = 0; i < store_.size(); ++i) {
    params.push_back(&store_[i].value);
    grads.push_back(&store_[i].grad);
    for (T x : store_[i].grad.data) sq += static_cast<double>(x) * x;
  }
  adam_update<T>(params, grads, state_);
  return std::sqrt(sq);
}

template void adam_update<float>(std::span<Tensor<float>* const>, std::span<const Tensor<float>* const>,
                                 AdamState<float>&);
template void adam_update<double>(std::span<Tensor<double>* const>,
                                  std::span<const Tensor<double>* const>, AdamState<double>&);
template class Adam<float>;
template class Adam<double>;

}  // namespace s2gr::nx
