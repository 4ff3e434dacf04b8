#pragma once

#include <vector>

#include "metaseg/ops.hpp"

namespace metaseg {

namespace detail {

/// Value-only evaluation of fn at the given inputs (no tape).
template <class S, class Fn>
S eval_scalar(Fn&& fn, const std::vector<Tensor<S>>& inputs) {
  Graph<S> g;
  g.set_grad_enabled(false);
  std::vector<Var<S>> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(g.leaf(t, false));
  Var<S> y = fn(g, vars);
  require<ShapeError>(y.value().is_scalar(), "grad_check: fn must return a scalar");
  return y.value().data[0];
}

}  // namespace detail

/// Compares reverse-mode gradients of a scalar-valued fn against central
/// finite differences. Returns the max over all coordinates of
/// |analytic - fd| / max(1, |fd|).
template <class S, class Fn>
double grad_check(Fn&& fn, const std::vector<Tensor<S>>& inputs, double eps = 1e-5) {
  require<ConfigError>(eps > 1e-8 && eps < 1e-3, "grad_check: eps out of range");
  Graph<S> g;
  std::vector<Var<S>> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(g.leaf(t, true));
  Var<S> y = fn(g, vars);
  require<ShapeError>(y.value().is_scalar(), "grad_check: fn must return a scalar");
  Gradients<S> grads = g.backward(y);

  double worst = 0.0;
  std::vector<Tensor<S>> probe = inputs;
  for (size_t i = 0; i < inputs.size(); ++i) {
    const Tensor<S>& an = grads.at(vars[i]);
    for (Eigen::Index j = 0; j < inputs[i].numel(); ++j) {
      const S keep = probe[i].data[j];
      probe[i].data[j] = keep + static_cast<S>(eps);
      const double fp = static_cast<double>(detail::eval_scalar(fn, probe));
      probe[i].data[j] = keep - static_cast<S>(eps);
      const double fm = static_cast<double>(detail::eval_scalar(fn, probe));
      probe[i].data[j] = keep;
      const double fd = (fp - fm) / (2.0 * eps);
      const double a = static_cast<double>(an.data[j]);
      const double rel = std::abs(a - fd) / std::max(1.0, std::abs(fd));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace metaseg
