#pragma once

// Named parameter storage, per-step tape binding, ordered gradient
// reduction across workers, and the Adam update.

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "irt/tensor.hpp"

namespace irt {

// Insertion-ordered map of named value tensors (never tape-attached).
class ParamStore {
 public:
  void set(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }
  std::size_t total_values() const;

  // All names starting with `prefix`, in insertion order.
  std::vector<std::string> names_with_prefix(const std::string& prefix) const;
  // Copies every entry of `other` whose name starts with `prefix`.
  void copy_from(const ParamStore& other, const std::string& prefix);

 private:
  std::vector<std::string> names_;
  std::map<std::string, Tensor> index_;
};

// Name -> tensor lookup consumed by model code; a Binding converts to it.
using ParamFn = std::function<Tensor(const std::string&)>;

// Gradients keyed by parameter name; std::map keeps reduction order fixed.
using Gradients = std::map<std::string, std::vector<double>>;

// Binds a ParamStore onto one worker's tape for one step. Parameters whose
// name matches a trainable prefix become gradient-tracked leaves (copies);
// all others are shared read-only constants and never receive gradients.
class Binding {
 public:
  // tape == nullptr binds everything as constants (inference).
  Binding(const ParamStore& store, Tape* tape,
          std::vector<std::string> trainable_prefixes);

  Tensor operator()(const std::string& name) const;
  bool is_trainable(const std::string& name) const;

  // Gradients of all trainable leaves (zeros where none flowed).
  Gradients gradients() const;

 private:
  const ParamStore& store_;
  std::vector<std::string> prefixes_;
  std::map<std::string, Tensor> leaves_;
};

// Sums per-worker gradients in worker order so that a fixed worker count
// always produces the same bits.
Gradients reduce_gradients(const std::vector<Gradients>& per_worker);

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // lr_t = lr * decay_rate^(t / decay_steps)
  double decay_rate = 0.1;
  double decay_steps = 250000.0;
};

class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}

  void step(ParamStore& params, const Gradients& grads);
  double current_lr() const;
  std::int64_t steps_taken() const { return t_; }

  // Moment buffers are exposed for checkpointing.
  ParamStore export_state() const;
  void import_state(const ParamStore& state, std::int64_t steps);

 private:
  AdamConfig config_;
  std::int64_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

// Glorot-uniform matrix [rows, cols] and zero bias helpers.
Tensor glorot_uniform(std::size_t rows, std::size_t cols, std::mt19937_64& rng);
Tensor filled(Shape shape, double value);

// 64-bit FNV-1a over the raw bytes of every tensor under `prefix`.
std::uint64_t hash_params(const ParamStore& store, const std::string& prefix);

}  // namespace irt
