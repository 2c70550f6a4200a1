// Copyright (c) 2026 The depthlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ============================================================================
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "depthlab/graph.hpp"

namespace depthlab {

/// Builds a scalar loss on `g` from the leaf `theta`.
template <typename S>
using LossBuilder = std::function<Var<S>(Graph<S>&, Var<S>)>;

/// Max over coordinates of |g_autodiff - g_fd| / max(1e-12, |g_fd|), with
/// central differences of step `step * max(1, |theta_i|)`. A non-finite
/// evaluation makes the result +inf.
template <typename S>
S finite_diff_check(const LossBuilder<S>& f, const TensorT<S>& theta, S step) {
  Graph<S> g;
  Var<S> leaf = g.leaf(theta);
  Var<S> loss = f(g, leaf);
  g.backward(loss);
  const TensorT<S> analytic = g.grad(leaf);

  auto eval = [&](const TensorT<S>& point) {
    Graph<S> h;
    return f(h, h.constant(point)).value()(0, 0);
  };

  S worst = 0;
  TensorT<S> point = theta;
  for (Index i = 0; i < theta.size(); ++i) {
    const S x = theta.data()[i];
    const S h = step * std::max<S>(S(1), std::abs(x));
    point.data()[i] = x + h;
    const S up = eval(point);
    point.data()[i] = x - h;
    const S down = eval(point);
    point.data()[i] = x;
    const S fd = (up - down) / (S(2) * h);
    const S ad = analytic.data()[i];
    if (!std::isfinite(fd) || !std::isfinite(ad)) return std::numeric_limits<S>::infinity();
    worst = std::max(worst, std::abs(ad - fd) / std::max<S>(S(1e-12), std::abs(fd)));
  }
  return worst;
}

}  // namespace depthlab
