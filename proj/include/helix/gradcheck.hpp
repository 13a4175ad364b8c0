#pragma once

#include <functional>
#include <map>
#include <string>

#include "helix/params.hpp"

namespace helix {

/// Central finite differences of a scalar function with respect to every
/// trainable parameter: (fn(p+h) - fn(p-h)) / 2h elementwise. `fn` must be a
/// deterministic pure function of the parameter values.
template <class S>
std::map<std::string, ArrX<S>> finite_diff_grad(const std::function<S()>& fn, ParamSetT<S>& ps,
                                                S h = S(1e-5)) {
  std::map<std::string, ArrX<S>> out;
  for (auto& [path, e] : ps) {
    if (!e.trainable) continue;
    ArrX<S> g(e.tensor.numel());
    for (std::int64_t i = 0; i < e.tensor.numel(); ++i) {
      S orig = e.tensor.values()[i];
      e.tensor.values()[i] = orig + h;
      S fp = fn();
      e.tensor.values()[i] = orig - h;
      S fm = fn();
      e.tensor.values()[i] = orig;
      g[i] = (fp - fm) / (S(2) * h);
    }
    out.emplace(path, std::move(g));
  }
  return out;
}

/// Max relative error between analytic grads stored on the params and the
/// finite-difference reference, with an absolute floor for near-zero entries.
template <class S>
S max_grad_rel_error(ParamSetT<S>& ps, const std::map<std::string, ArrX<S>>& ref,
                     S floor = S(1e-6)) {
  S worst = S(0);
  for (auto& [path, g] : ref) {
    const TensorT<S>& p = ps.get(path);
    if (!p.has_grad()) throw PreconditionError("max_grad_rel_error: missing grad for " + path);
    for (std::int64_t i = 0; i < g.size(); ++i) {
      S denom = std::max({std::abs(g[i]), std::abs(p.grad()[i]), floor});
      S err = std::abs(g[i] - p.grad()[i]) / denom;
      if (err > worst) worst = err;
    }
  }
  return worst;
}

}  // namespace helix
