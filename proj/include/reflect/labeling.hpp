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

// Pseudo-label bookkeeping: per-sample label history with mode correction,
// and a two-component Gaussian mixture over log teacher losses that yields
// the probability that a sample's label is clean.

#pragma once

#include <span>
#include <utility>
#include <vector>

#include "reflect/common.hpp"

namespace reflect {

/// One ring buffer of the last L labels per sample.
class LabelQueue {
 public:
  LabelQueue(int num_samples, int capacity);

  /// Pushes `label` for `sample` (evicting the oldest entry when full) and
  /// returns the most frequent label in that sample's history. Ties go to the
  /// label seen most recently.
  int enqueue_and_correct(int sample, int label);

  /// Oldest first.
  std::vector<int> contents(int sample) const;

  int capacity() const { return capacity_; }
  int num_samples() const { return static_cast<int>(sizes_.size()); }

 private:
  int capacity_;
  std::vector<int> storage_;  // num_samples x capacity
  std::vector<int> heads_;    // next write slot
  std::vector<int> sizes_;
};

/// -log p(label), with the probability floored at kLogEpsilon.
double teacher_loss(std::span<const double> probs, int label);

struct NoiseModel {
  double pi = 0.5;  // weight of the low-loss (clean) component
  double mu1 = 0.0, var1 = 1.0;
  double mu2 = 0.0, var2 = 1.0;
  bool degenerate = false;  // all samples treated as clean
  int iterations = 0;
  std::vector<double> log_likelihood;  // per EM step, starting at the initial guess
};

struct GmmOptions {
  int max_iters = 200;
  double tol = 1e-6;
  double variance_floor = 1e-6;
};

/// EM fit of a two-component 1-D mixture to log(max(loss, eps)).
/// Components are returned with mu1 < mu2.
NoiseModel fit_noise_gmm(std::span<const double> losses, const GmmOptions& opt = {});

/// Posterior weights of the (clean, noisy) components at log(loss).
std::pair<double, double> component_posteriors(const NoiseModel& model, double loss);

/// Posterior of the clean component; 1 for a degenerate model.
double clean_probability(const NoiseModel& model, double loss);

}  // namespace reflect
