#pragma once

// Minimal define-by-run reverse-mode autodiff over dense f64 tensors.
//
// A Tape records every operation whose inputs require gradients, in
// creation order. Because an op's output is always created after its
// inputs, walking the tape backwards visits every node after all of its
// consumers, so a single reverse sweep computes all gradients.
//
// Tapes are meant to be rebuilt every training step. A tensor keeps a raw
// pointer to the tape that recorded it; using it after the tape is gone is
// only valid for reading values.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace irt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  Tape* tape = nullptr;
  std::function<void(Node&)> backward;  // pushes this->grad into inputs

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape);
  static Tensor scalar(double v) { return constant({}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  // Empty span if no gradient reached this tensor.
  std::span<const double> grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  Tape* tape() const { return node_->tape; }

  double item() const;
  double operator[](std::size_t flat) const { return node_->value[flat]; }

  // Value-only copy, disconnected from any tape.
  Tensor detach() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared_node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Gradient-tracked leaf. Gradients accumulate into leaf.grad().
  Tensor leaf(Shape shape, std::vector<double> values);
  Tensor leaf(const Tensor& value_source);

  void record(const std::shared_ptr<Node>& node) { nodes_.push_back(node); }

  // Root must be a single-element tensor. Gradients accumulate additively;
  // calling backward twice on the same tape doubles leaf gradients.
  void backward(const Tensor& root);

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::shared_ptr<Node>> nodes_;
};

// Convenience: Tape::backward on the root's own tape; no-op for constants.
void backward(const Tensor& root);

namespace detail {

// Builds an op result. If any input requires grad, the node is recorded on
// that input's tape with the given backward rule.
Tensor make_result(Shape shape, std::vector<double> value,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward_rule,
                   const char* op_name);

Tensor make_result(Shape shape, std::vector<double> value,
                   const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward_rule,
                   const char* op_name);

}  // namespace detail

}  // namespace irt
