#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "s2gr/numerics/tensor.hpp"

namespace s2gr::nx {

// A trainable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  void zero_grad() { grad = Tensor<T>::zeros_like(value); }
};

// Ordered, name-addressed collection of parameters. Pointers stay valid for
// the store's lifetime.
template <typename T>
class ParameterStore {
 public:
  Parameter<T>& add(std::string name, Tensor<T> init) {
    for (const auto& p : params_)
      if (p->name == name) throw ConfigError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = std::move(name);
    p->value = std::move(init);
    p->grad = Tensor<T>::zeros_like(p->value);
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<T>* find(std::string_view name) {
    for (auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }
  const Parameter<T>* find(std::string_view name) const {
    for (const auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.numel();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
};

template <typename T>
class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  // Gradient after Tape::backward; zeros if none reached this node.
  Tensor<T> grad() const { return tape_->grad_or_zero(id_); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  T item() const { return value().data.at(0); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

  Tape<T>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

// Reverse-mode tape. Ops push nodes in topological order; backward walks the
// nodes in reverse. Parameters bound with `param` receive their gradients in
// Parameter::grad (accumulated).
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return Var<T>(this, push(std::move(value), false, nullptr)); }
  Var<T> leaf(Tensor<T> value) {
    return Var<T>(this, push(std::move(value), grad_enabled_, nullptr));
  }
  Var<T> param(Parameter<T>& p) {
    const int id = push(p.value, grad_enabled_, nullptr);
    nodes_[id].param = &p;
    return Var<T>(this, id);
  }

  // Records a computed node. `inputs_need_grad` decides whether a backward
  // closure is kept at all.
  int push(Tensor<T> value, bool needs_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad && grad_enabled_;
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  const Tensor<T>& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].needs_grad; }
  bool grad_enabled() const { return grad_enabled_; }

  // Gradient buffer for a node, allocated on first touch.
  Tensor<T>& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.data.empty()) n.grad = Tensor<T>::zeros_like(n.value);
    return n.grad;
  }
  bool has_grad(int id) const { return !nodes_[id].grad.data.empty(); }
  Tensor<T> grad_or_zero(int id) const {
    const Node& n = nodes_[id];
    return n.grad.data.empty() ? Tensor<T>::zeros_like(n.value) : n.grad;
  }

  void backward(const Var<T>& root) {
    if (root.tape() != this) throw ShapeError("backward: var belongs to another tape");
    if (value(root.id()).numel() != 1) throw ShapeError("backward: root must be a scalar");
    if (!nodes_[root.id()].needs_grad) return;
    grad(root.id()).data[0] += T(1);
    for (int id = root.id(); id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.needs_grad || n.grad.data.empty()) continue;
      if (n.backward) n.backward(*this, id);
      if (n.param != nullptr) {
        auto& pg = n.param->grad;
        if (pg.data.size() != n.grad.data.size()) pg = Tensor<T>::zeros_like(n.param->value);
        for (std::size_t i = 0; i < pg.data.size(); ++i) pg.data[i] += n.grad.data[i];
      }
    }
  }

  // Stop-gradient bookkeeping. In Record mode every stop_gradient output is
  // remembered; in Replay mode stop_gradient returns the remembered values in
  // call order instead of its input. Finite-difference checks use Replay so
  // that the blocked branches are held fixed at the base point.
  enum class StopGradMode { kPassThrough, kRecord, kReplay };
  void set_stop_grad_mode(StopGradMode mode, std::vector<Tensor<T>> replay = {}) {
    sg_mode_ = mode;
    sg_values_ = std::move(replay);
    sg_cursor_ = 0;
  }
  StopGradMode stop_grad_mode() const { return sg_mode_; }
  const std::vector<Tensor<T>>& recorded_stop_grads() const { return sg_values_; }
  Tensor<T> stop_grad_value(const Tensor<T>& input) {
    switch (sg_mode_) {
      case StopGradMode::kRecord:
        sg_values_.push_back(input);
        return input;
      case StopGradMode::kReplay:
        if (sg_cursor_ >= sg_values_.size()) throw ShapeError("stop_gradient replay exhausted");
        return sg_values_[sg_cursor_++];
      default:
        return input;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    Backward backward;
    Parameter<T>* param = nullptr;
  };

  std::vector<Node> nodes_;
  bool grad_enabled_;
  StopGradMode sg_mode_ = StopGradMode::kPassThrough;
  std::vector<Tensor<T>> sg_values_;
  std::size_t sg_cursor_ = 0;
};

}  // namespace s2gr::nx
