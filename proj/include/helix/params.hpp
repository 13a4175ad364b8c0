#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "helix/rng.hpp"
#include "helix/tensor.hpp"

namespace helix {

/// Named parameter collection. Paths are dot-separated, unique, and iterated
/// in lexicographic order (std::map). Non-trainable entries hold buffers such
/// as batch-norm running statistics.
template <class S>
class ParamSetT {
 public:
  struct Entry {
    TensorT<S> tensor;
    bool trainable = true;
  };

  TensorT<S>& add(const std::string& path, TensorT<S> t, bool trainable = true) {
    if (entries_.count(path)) throw PreconditionError("ParamSet: duplicate path " + path);
    t.set_requires_grad(trainable);
    auto& e = entries_[path];
    e.tensor = std::move(t);
    e.trainable = trainable;
    return e.tensor;
  }

  bool contains(const std::string& path) const { return entries_.count(path) > 0; }

  TensorT<S>& get(const std::string& path) {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw PreconditionError("ParamSet: unknown path " + path);
    return it->second.tensor;
  }
  const TensorT<S>& get(const std::string& path) const {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw PreconditionError("ParamSet: unknown path " + path);
    return it->second.tensor;
  }
  bool trainable(const std::string& path) const { return entries_.at(path).trainable; }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  std::size_t size() const { return entries_.size(); }

  std::vector<std::string> paths() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
  }

  void zero_grads() {
    for (auto& [k, e] : entries_) e.tensor.node()->clear_grad();
  }

 private:
  std::map<std::string, Entry> entries_;
};

using ParamSet = ParamSetT<double>;

/// Total trainable scalar count.
template <class S>
std::int64_t count_params(const ParamSetT<S>& ps) {
  std::int64_t n = 0;
  for (const auto& [k, e] : ps)
    if (e.trainable) n += e.tensor.numel();
  return n;
}

namespace init {

/// He-normal: stddev sqrt(2 / fan_in).
template <class S>
TensorT<S> he_normal(const Shape& shape, std::int64_t fan_in, Rng& rng) {
  TensorT<S> t = TensorT<S>::zeros(shape);
  S sd = std::sqrt(S(2) / static_cast<S>(fan_in));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t.values()[i] = static_cast<S>(rng.normal(0.0, 1.0)) * sd;
  return t;
}

}  // namespace init

}  // namespace helix
