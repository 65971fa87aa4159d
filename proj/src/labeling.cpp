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

#include "reflect/labeling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace reflect {

LabelQueue::LabelQueue(int num_samples, int capacity) : capacity_(capacity) {
  if (num_samples < 0 || capacity < 1) throw ConfigError("label queue: capacity must be >= 1");
  storage_.assign(static_cast<std::size_t>(num_samples) * capacity, -1);
  heads_.assign(static_cast<std::size_t>(num_samples), 0);
  sizes_.assign(static_cast<std::size_t>(num_samples), 0);
}

int LabelQueue::enqueue_and_correct(int sample, int label) {
  if (sample < 0 || sample >= num_samples()) throw ConfigError("label queue: sample index out of range");
  if (label < 0) throw ConfigError("label queue: negative cluster id");
  int* ring = storage_.data() + static_cast<std::size_t>(sample) * capacity_;
  int& head = heads_[sample];
  int& size = sizes_[sample];
  ring[head] = label;
  head = (head + 1) % capacity_;
  size = std::min(size + 1, capacity_);
  if (size == 1) return label;

  // Walk newest to oldest; the first label reaching the top count wins, which
  // gives the recency tie-break.
  int best = label, best_count = 0;
  for (int back = 0; back < size; ++back) {
    const int cand = ring[(head - 1 - back + 2 * capacity_) % capacity_];
    int count = 0;
    for (int j = 0; j < size; ++j) count += ring[j] == cand;
    if (count > best_count) {
      best = cand;
      best_count = count;
    }
  }
  return best;
}

std::vector<int> LabelQueue::contents(int sample) const {
  if (sample < 0 || sample >= num_samples()) throw ConfigError("label queue: sample index out of range");
  const int* ring = storage_.data() + static_cast<std::size_t>(sample) * capacity_;
  const int size = sizes_[sample];
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(size));
  for (int i = size; i > 0; --i) out.push_back(ring[(heads_[sample] - i + 2 * capacity_) % capacity_]);
  return out;
}

double teacher_loss(std::span<const double> probs, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= probs.size())
    throw ConfigError("teacher_loss: label out of range");
  return -std::log(std::max(probs[static_cast<std::size_t>(label)], kLogEpsilon));
}

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

double log_normal(double x, double mu, double var) {
  const double d = x - mu;
  return -0.5 * (kLog2Pi + std::log(var) + d * d / var);
}

double log_add(double a, double b) {
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double mixture_log_likelihood(const std::vector<double>& x, const NoiseModel& m) {
  double ll = 0;
  const double lp1 = std::log(m.pi), lp2 = std::log1p(-m.pi);
  for (double xi : x) ll += log_add(lp1 + log_normal(xi, m.mu1, m.var1), lp2 + log_normal(xi, m.mu2, m.var2));
  return ll;
}

}  // namespace

NoiseModel fit_noise_gmm(std::span<const double> losses, const GmmOptions& opt) {
  if (losses.size() < 2) throw ConfigError("fit_noise_gmm: need at least two losses");
  std::vector<double> x(losses.size());
  for (std::size_t i = 0; i < losses.size(); ++i) {
    if (!(losses[i] >= 0.0) || !std::isfinite(losses[i]))
      throw NumericalError("fit_noise_gmm: losses must be finite and non-negative");
    x[i] = std::log(std::max(losses[i], kLogEpsilon));
  }
  const double n = static_cast<double>(x.size());
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double var = 0;
  for (double xi : x) var += (xi - mean) * (xi - mean);
  var /= n;

  NoiseModel m;
  if (var <= opt.variance_floor) {
    m.degenerate = true;
    m.pi = 1.0;
    m.mu1 = m.mu2 = mean;
    m.var1 = m.var2 = std::max(var, opt.variance_floor);
    return m;
  }
  m.mu1 = percentile(x, 0.25);
  m.mu2 = percentile(x, 0.75);
  if (m.mu1 == m.mu2) {
    m.mu1 = mean - 0.5 * std::sqrt(var);
    m.mu2 = mean + 0.5 * std::sqrt(var);
  }
  m.var1 = m.var2 = var;
  m.pi = 0.5;
  m.log_likelihood.push_back(mixture_log_likelihood(x, m));

  std::vector<double> gamma(x.size());
  for (int it = 0; it < opt.max_iters; ++it) {
    const double lp1 = std::log(m.pi), lp2 = std::log1p(-m.pi);
    double g_sum = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double a = lp1 + log_normal(x[i], m.mu1, m.var1);
      const double b = lp2 + log_normal(x[i], m.mu2, m.var2);
      gamma[i] = std::exp(a - log_add(a, b));
      g_sum += gamma[i];
    }
    const double h_sum = n - g_sum;
    // A component that lost all mass keeps its parameters; pi is held away
    // from {0, 1} so both logs stay finite.
    if (g_sum > 0) {
      double s = 0;
      for (std::size_t i = 0; i < x.size(); ++i) s += gamma[i] * x[i];
      m.mu1 = s / g_sum;
      double v = 0;
      for (std::size_t i = 0; i < x.size(); ++i) v += gamma[i] * (x[i] - m.mu1) * (x[i] - m.mu1);
      m.var1 = std::max(v / g_sum, opt.variance_floor);
    }
    if (h_sum > 0) {
      double s = 0;
      for (std::size_t i = 0; i < x.size(); ++i) s += (1.0 - gamma[i]) * x[i];
      m.mu2 = s / h_sum;
      double v = 0;
      for (std::size_t i = 0; i < x.size(); ++i) v += (1.0 - gamma[i]) * (x[i] - m.mu2) * (x[i] - m.mu2);
      m.var2 = std::max(v / h_sum, opt.variance_floor);
    }
    m.pi = std::clamp(g_sum / n, 1e-12, 1.0 - 1e-12);
    m.iterations = it + 1;
    m.log_likelihood.push_back(mixture_log_likelihood(x, m));
    const auto sz = m.log_likelihood.size();
    if (std::abs(m.log_likelihood[sz - 1] - m.log_likelihood[sz - 2]) < opt.tol) break;
  }
  if (m.mu1 > m.mu2) {
    std::swap(m.mu1, m.mu2);
    std::swap(m.var1, m.var2);
    m.pi = 1.0 - m.pi;
  }
  return m;
}

std::pair<double, double> component_posteriors(const NoiseModel& model, double loss) {
  if (model.degenerate) return {1.0, 0.0};
  const double x = std::log(std::max(loss, kLogEpsilon));
  const double a = std::log(model.pi) + log_normal(x, model.mu1, model.var1);
  const double b = std::log1p(-model.pi) + log_normal(x, model.mu2, model.var2);
  const double z = log_add(a, b);
  const double clean = std::exp(a - z);
  return {clean, 1.0 - clean};
}

double clean_probability(const NoiseModel& model, double loss) {
  return std::clamp(component_posteriors(model, loss).first, 0.0, 1.0);
}

}  // namespace reflect
