// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Central finite differences against loss_and_gradient.

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "reflect/encoder.hpp"

namespace gradcheck {

inline std::vector<double*> parameter_slots(reflect::ModelParams<double>& p) {
  std::vector<double*> slots;
  auto add = [&](auto& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) slots.push_back(m.data() + i);
  };
  for (auto& l : p.encoder) {
    add(l.weight);
    add(l.bias);
  }
  add(p.predictor_weight);
  add(p.predictor_bias);
  return slots;
}

struct Problem {
  reflect::ModelParams<double> params;
  Eigen::MatrixXd x;
  std::vector<int> labels;
  std::vector<double> weights;
  reflect::TrainOptions options;
  std::uint64_t dropout_seed = 0;
};

inline double loss_at(const Problem& pr, const reflect::ModelParams<double>& p) {
  reflect::Rng rng(pr.dropout_seed);  // same masks on every evaluation
  return reflect::loss_and_gradient<double>(p, pr.x, pr.labels, pr.weights, pr.options, &rng, nullptr).weighted_mean;
}

struct Result {
  double worst_relative = 0;  // max over entries of |a - n| / max(|a|, |n|), entries above the floor only
  double worst_absolute = 0;  // max |a - n| over the remaining entries
};

/// Compares every analytic partial derivative with a central difference of step h.
/// Entries where both values are below `floor` are judged by absolute error.
inline Result compare(const Problem& pr, double h = 1e-6, double floor = 1e-6) {
  reflect::ModelParams<double> grad;
  reflect::Rng rng(pr.dropout_seed);
  reflect::loss_and_gradient<double>(pr.params, pr.x, pr.labels, pr.weights, pr.options, &rng, &grad);

  reflect::ModelParams<double> probe = pr.params;
  auto slots = parameter_slots(probe);
  reflect::ModelParams<double> grad_copy = grad;
  auto analytic = parameter_slots(grad_copy);

  Result r;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const double saved = *slots[i];
    *slots[i] = saved + h;
    const double up = loss_at(pr, probe);
    *slots[i] = saved - h;
    const double down = loss_at(pr, probe);
    *slots[i] = saved;
    const double numeric = (up - down) / (2 * h);
    const double a = *analytic[i];
    const double scale = std::max(std::abs(a), std::abs(numeric));
    if (scale > floor) r.worst_relative = std::max(r.worst_relative, std::abs(a - numeric) / scale);
    else r.worst_absolute = std::max(r.worst_absolute, std::abs(a - numeric));
  }
  return r;
}

/// A small random model and batch; hidden width, sizes and labels all vary
/// with the seed.
inline Problem random_problem(std::uint64_t seed, reflect::LossKind kind, double dropout) {
  reflect::Rng rng(seed);
  const int in = 3 + static_cast<int>(reflect::uniform_index(rng, 4));
  const int hidden = 3 + static_cast<int>(reflect::uniform_index(rng, 5));
  const int emb = 2 + static_cast<int>(reflect::uniform_index(rng, 4));
  const int k = 2 + static_cast<int>(reflect::uniform_index(rng, 4));
  const int batch = 1 + static_cast<int>(reflect::uniform_index(rng, 5));
  Problem pr;
  pr.params = reflect::init_model<double>(in, {hidden}, emb, k, seed);
  for (Eigen::Index i = 0; i < pr.params.predictor_bias.size(); ++i)
    pr.params.predictor_bias(i) = 0.1 * reflect::standard_normal(rng);
  for (auto& l : pr.params.encoder)
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = 0.1 * reflect::standard_normal(rng);
  pr.x.resize(in, batch);
  for (Eigen::Index i = 0; i < pr.x.size(); ++i) pr.x.data()[i] = reflect::standard_normal(rng);
  for (int b = 0; b < batch; ++b) {
    pr.labels.push_back(static_cast<int>(reflect::uniform_index(rng, k)));
    pr.weights.push_back(reflect::uniform01(rng));
  }
  pr.options.head = {kind, 0.2, kind == reflect::LossKind::CrossEntropy ? 32.0 : 4.0};
  pr.options.dropout = dropout;
  pr.dropout_seed = seed * 7 + 1;
  return pr;
}

}  // namespace gradcheck
