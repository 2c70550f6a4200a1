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
#include <string>

#include "depthlab/gradcheck.hpp"
#include "depthlab/model.hpp"
#include "depthlab/rng.hpp"

namespace depthlab::testing {

inline ModelConfig toy_config(Index depth = 2, Index d = 16, Index heads = 2, Index kv = 1) {
  ModelConfig c;
  c.depth = depth;
  c.d_model = d;
  c.n_heads = heads;
  c.n_kv_heads = kv;
  c.mlp_hidden = 2 * d;
  c.vocab_size = 32;
  c.max_seq_len = 64;
  c.init_std = 0.3;
  return c;
}

inline Batch random_batch(Rng rng, Index n_seqs, Index seq_len, Index vocab) {
  std::vector<int> ids(static_cast<std::size_t>(n_seqs * seq_len));
  for (auto& t : ids) t = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(vocab));
  return Batch(n_seqs, seq_len, std::move(ids));
}

/// Max relative error between the autodiff gradient (long double) and finite
/// differences over every coordinate of every parameter of the loss.
/// Each coordinate first gets a fourth-order central stencil on the double
/// forward pass; coordinates where that estimate is not conclusively within
/// 1e-7 are redone with second-order differences in long double.
inline long double model_gradient_check(const Model& model, const Batch& batch, long double step = 1e-6L) {
  using LD = long double;
  const ModelT<LD> m = model.cast<LD>();
  ParamsT<LD> grads;
  loss_and_grad<LD>(m, batch, &grads);
  std::vector<TensorT<LD>> analytic;
  for_each_param(grads, [&](const std::string&, const TensorT<LD>& t) { analytic.push_back(t); });

  auto rel = [](LD ad, LD fd) { return std::abs(ad - fd) / std::max<LD>(LD(1e-12), std::abs(fd)); };
  Model work = model;
  std::vector<Tensor*> slots;
  for_each_param(work.params, [&](const std::string&, Tensor& t) { slots.push_back(&t); });
  ModelT<LD> wl = m;
  std::vector<TensorT<LD>*> lslots;
  for_each_param(wl.params, [&](const std::string&, TensorT<LD>& t) { lslots.push_back(&t); });

  long double worst = 0;
  for (std::size_t k = 0; k < slots.size(); ++k) {
    for (Index i = 0; i < slots[k]->size(); ++i) {
      const LD ad = analytic[k].data()[i];
      double& x = slots[k]->data()[i];
      const double x0 = x;
      const double h = 1e-4 * std::max(1.0, std::abs(x0));
      auto at = [&](double dx) {
        x = x0 + dx;
        return static_cast<LD>(loss(work, batch).total);
      };
      const LD fd4 = (LD(8) * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (LD(12) * static_cast<LD>(h));
      x = x0;
      LD err = rel(ad, fd4);
      if (!(err <= 1e-7L)) {
        LD& y = lslots[k]->data()[i];
        const LD y0 = y;
        const LD hl = step * std::max<LD>(LD(1), std::abs(y0));
        auto atl = [&](LD dy) {
          y = y0 + dy;
          Graph<LD> g;
          return loss_graph<LD>(g, wl, batch, [](Graph<LD>& gr, const std::string&, const TensorT<LD>& t) {
                   return gr.constant(t);
                 }).value()(0, 0);
        };
        const LD fd = (atl(hl) - atl(-hl)) / (LD(2) * hl);
        y = y0;
        err = std::isfinite(fd) && std::isfinite(ad) ? rel(ad, fd) : std::numeric_limits<LD>::infinity();
      }
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace depthlab::testing
