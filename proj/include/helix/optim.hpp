#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "helix/params.hpp"

namespace helix {

enum class OptimizerKind { SgdMomentum, Adam };

/// Per-parameter optimizer buffers plus hyperparameters. An optimizer owns a
/// fixed subset of parameter paths chosen at construction, so that disjoint
/// optimizers (SGD for the backbone, Adam for the attention modules) can act
/// on one ParamSet.
template <class S>
struct OptimizerStateT {
  OptimizerKind kind = OptimizerKind::SgdMomentum;
  S lr = S(0.1);
  S momentum = S(0.9);
  S weight_decay = S(0);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  std::uint64_t step_count = 0;
  std::vector<std::string> paths;
  std::map<std::string, ArrX<S>> velocity;  // SGD
  std::map<std::string, ArrX<S>> m1, m2;    // Adam moments

  static OptimizerStateT sgd(const std::vector<std::string>& paths, S lr, S momentum, S wd) {
    OptimizerStateT st;
    st.kind = OptimizerKind::SgdMomentum;
    st.lr = lr;
    st.momentum = momentum;
    st.weight_decay = wd;
    st.paths = paths;
    return st;
  }
  static OptimizerStateT adam(const std::vector<std::string>& paths, S lr, S wd = S(0)) {
    OptimizerStateT st;
    st.kind = OptimizerKind::Adam;
    st.lr = lr;
    st.weight_decay = wd;
    st.paths = paths;
    return st;
  }
};

using OptimizerState = OptimizerStateT<double>;

/// Trainable paths of `ps` whose path starts with one of the given prefixes.
template <class S>
std::vector<std::string> select_paths(const ParamSetT<S>& ps,
                                      const std::vector<std::string>& prefixes) {
  std::vector<std::string> out;
  for (const auto& [k, e] : ps) {
    if (!e.trainable) continue;
    for (const auto& p : prefixes)
      if (k.rfind(p, 0) == 0) {
        out.push_back(k);
        break;
      }
  }
  return out;
}

/// SGD with momentum; weight decay is added to the gradient. Grads are zeroed
/// after the step.
template <class S>
void sgd_step(ParamSetT<S>& ps, OptimizerStateT<S>& st) {
  st.step_count++;
  for (const auto& path : st.paths) {
    TensorT<S>& p = ps.get(path);
    if (!p.has_grad()) throw PreconditionError("sgd_step: missing grad for " + path);
    ArrX<S> g = p.grad() + st.weight_decay * p.values();
    auto it = st.velocity.find(path);
    if (it == st.velocity.end())
      it = st.velocity.emplace(path, ArrX<S>::Zero(p.numel())).first;
    if (it->second.size() != p.numel()) throw PreconditionError("sgd_step: buffer shape mismatch");
    it->second = st.momentum * it->second + g;
    p.values() -= st.lr * it->second;
    p.node()->clear_grad();
  }
}

/// Adam with bias correction; weight decay is added to the gradient (L2).
template <class S>
void adam_step(ParamSetT<S>& ps, OptimizerStateT<S>& st) {
  st.step_count++;
  S t = static_cast<S>(st.step_count);
  S bc1 = S(1) - std::pow(st.beta1, t);
  S bc2 = S(1) - std::pow(st.beta2, t);
  for (const auto& path : st.paths) {
    TensorT<S>& p = ps.get(path);
    if (!p.has_grad()) throw PreconditionError("adam_step: missing grad for " + path);
    ArrX<S> g = p.grad() + st.weight_decay * p.values();
    auto i1 = st.m1.find(path);
    if (i1 == st.m1.end()) i1 = st.m1.emplace(path, ArrX<S>::Zero(p.numel())).first;
    auto i2 = st.m2.find(path);
    if (i2 == st.m2.end()) i2 = st.m2.emplace(path, ArrX<S>::Zero(p.numel())).first;
    i1->second = st.beta1 * i1->second + (S(1) - st.beta1) * g;
    i2->second = st.beta2 * i2->second + (S(1) - st.beta2) * g * g;
    ArrX<S> mhat = i1->second / bc1;
    ArrX<S> vhat = i2->second / bc2;
    p.values() -= st.lr * mhat / (vhat.sqrt() + st.eps);
    p.node()->clear_grad();
  }
}

template <class S>
void optimizer_step(ParamSetT<S>& ps, OptimizerStateT<S>& st) {
  if (st.kind == OptimizerKind::SgdMomentum)
    sgd_step(ps, st);
  else
    adam_step(ps, st);
}

}  // namespace helix
