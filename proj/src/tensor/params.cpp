#include "irt/params.hpp"

#include <cmath>
#include <cstring>

#include "irt/errors.hpp"

namespace irt {

void ParamStore::set(const std::string& name, Tensor value) {
  if (!index_.count(name)) names_.push_back(name);
  index_[name] = std::move(value);
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorCode::kCheckpoint, "missing parameter '" + name + "'");
  return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorCode::kCheckpoint, "missing parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::total_values() const {
  std::size_t n = 0;
  for (const auto& [_, t] : index_) n += t.numel();
  return n;
}

std::vector<std::string> ParamStore::names_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& n : names_) {
    if (n.rfind(prefix, 0) == 0) out.push_back(n);
  }
  return out;
}

void ParamStore::copy_from(const ParamStore& other, const std::string& prefix) {
  for (const auto& n : other.names_with_prefix(prefix)) set(n, other.get(n).detach());
}

Binding::Binding(const ParamStore& store, Tape* tape,
                 std::vector<std::string> trainable_prefixes)
    : store_(store), prefixes_(std::move(trainable_prefixes)) {
  if (tape == nullptr) {
    prefixes_.clear();
    return;
  }
  for (const auto& name : store.names()) {
    if (is_trainable(name)) leaves_.emplace(name, tape->leaf(store.get(name)));
  }
}

bool Binding::is_trainable(const std::string& name) const {
  for (const auto& p : prefixes_) {
    if (name.rfind(p, 0) == 0) return true;
  }
  return false;
}

Tensor Binding::operator()(const std::string& name) const {
  auto it = leaves_.find(name);
  if (it != leaves_.end()) return it->second;
  return store_.get(name);
}

Gradients Binding::gradients() const {
  Gradients out;
  for (const auto& [name, leaf] : leaves_) {
    auto g = leaf.grad();
    if (g.empty()) {
      out[name].assign(leaf.numel(), 0.0);
    } else {
      out[name].assign(g.begin(), g.end());
    }
  }
  return out;
}

Gradients reduce_gradients(const std::vector<Gradients>& per_worker) {
  Gradients total;
  for (const auto& worker : per_worker) {
    for (const auto& [name, g] : worker) {
      auto& dst = total[name];
      if (dst.empty()) {
        dst = g;
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      }
    }
  }
  return total;
}

double Adam::current_lr() const {
  return config_.lr *
         std::pow(config_.decay_rate, static_cast<double>(t_) / config_.decay_steps);
}

void Adam::step(ParamStore& params, const Gradients& grads) {
  const double lr = current_lr();
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    auto values = params.get(name).mutable_values();
    if (values.size() != g.size()) {
      fail(ErrorCode::kDimension, "adam: gradient size mismatch for " + name);
    }
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      values[i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

ParamStore Adam::export_state() const {
  ParamStore out;
  for (const auto& [name, m] : m_) {
    out.set("adam/m/" + name, Tensor::constant({m.size()}, m));
    out.set("adam/v/" + name, Tensor::constant({m.size()}, v_.at(name)));
  }
  return out;
}

void Adam::import_state(const ParamStore& state, std::int64_t steps) {
  m_.clear();
  v_.clear();
  t_ = steps;
  const std::string mp = "adam/m/";
  for (const auto& key : state.names_with_prefix(mp)) {
    const std::string name = key.substr(mp.size());
    auto mv = state.get(key).values();
    auto vv = state.get("adam/v/" + name).values();
    m_[name].assign(mv.begin(), mv.end());
    v_[name].assign(vv.begin(), vv.end());
  }
}

Tensor glorot_uniform(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = dist(rng);
  return Tensor::constant({rows, cols}, std::move(v));
}

Tensor filled(Shape shape, double value) {
  std::vector<double> v(shape_numel(shape), value);
  return Tensor::constant(std::move(shape), std::move(v));
}

std::uint64_t hash_params(const ParamStore& store, const std::string& prefix) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& name : store.names_with_prefix(prefix)) {
    mix(name.data(), name.size());
    auto v = store.get(name).values();
    mix(v.data(), v.size() * sizeof(double));
  }
  return h;
}

}  // namespace irt
