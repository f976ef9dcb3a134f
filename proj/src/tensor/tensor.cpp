#include "irt/tensor.hpp"

#include <cmath>
#include <sstream>

#include "irt/errors.hpp"

namespace irt {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kOk: return "ok";
    case ErrorCode::kUsage: return "usage";
    case ErrorCode::kDimension: return "dimension";
    case ErrorCode::kDomain: return "domain";
    case ErrorCode::kContract: return "contract";
    case ErrorCode::kNumeric: return "numeric";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kSchema: return "schema";
    case ErrorCode::kRotation: return "rotation";
    case ErrorCode::kPalette: return "palette";
    case ErrorCode::kConfiguration: return "configuration";
    case ErrorCode::kCheckpoint: return "checkpoint";
    case ErrorCode::kCapability: return "capability";
  }
  return "unknown";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    fail(ErrorCode::kDimension, "constant: shape " + shape_str(shape) +
                                    " does not match " +
                                    std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape) {
  std::vector<double> v(shape_numel(shape), 0.0);
  return constant(std::move(shape), std::move(v));
}

double Tensor::item() const {
  if (numel() != 1) {
    fail(ErrorCode::kContract, "item() on tensor of shape " + shape_str(shape()));
  }
  return node_->value[0];
}

Tensor Tensor::detach() const { return constant(shape(), node_->value); }

Tensor Tape::leaf(Shape shape, std::vector<double> values) {
  Tensor t = Tensor::constant(std::move(shape), std::move(values));
  t.node()->requires_grad = true;
  t.node()->tape = this;
  record(t.shared_node());
  return t;
}

Tensor Tape::leaf(const Tensor& value_source) {
  return leaf(value_source.shape(),
              std::vector<double>(value_source.values().begin(),
                                  value_source.values().end()));
}

void Tape::backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1) {
    fail(ErrorCode::kContract,
         "backward: root must be a scalar, got " +
             (root.defined() ? shape_str(root.shape()) : std::string("undefined")));
  }
  if (!root.requires_grad()) return;
  root.node()->ensure_grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.backward && !n.grad.empty()) n.backward(n);
  }
}

void backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1) {
    fail(ErrorCode::kContract, "backward: root must be a scalar");
  }
  if (root.tape() == nullptr) return;
  root.tape()->backward(root);
}

namespace detail {
namespace {

Tensor finish(Shape shape, std::vector<double> value, Tape* tape,
              std::function<void(Node&)> backward_rule, const char* op_name) {
  for (double v : value) {
    if (!std::isfinite(v)) {
      fail(ErrorCode::kNumeric, std::string("non-finite output from op '") +
                                    op_name + "'");
    }
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (tape != nullptr) {
    node->requires_grad = true;
    node->tape = tape;
    node->backward = std::move(backward_rule);
    tape->record(node);
  }
  return Tensor(std::move(node));
}

}  // namespace

Tensor make_result(Shape shape, std::vector<double> value,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward_rule,
                   const char* op_name) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) {
      tape = t->tape();
      break;
    }
  }
  return finish(std::move(shape), std::move(value), tape,
                std::move(backward_rule), op_name);
}

Tensor make_result(Shape shape, std::vector<double> value,
                   const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward_rule,
                   const char* op_name) {
  Tape* tape = nullptr;
  for (const Tensor& t : inputs) {
    if (t.defined() && t.requires_grad()) {
      tape = t.tape();
      break;
    }
  }
  return finish(std::move(shape), std::move(value), tape,
                std::move(backward_rule), op_name);
}

}  // namespace detail
}  // namespace irt
