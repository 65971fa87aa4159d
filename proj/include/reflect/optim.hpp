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

#pragma once

#include <cmath>
#include <cstdint>

#include "reflect/encoder.hpp"

namespace reflect {

/// Adam with bias-corrected moments.
template <typename Scalar>
class Adam {
 public:
  explicit Adam(const ModelParams<Scalar>& like, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : m_(ModelParams<Scalar>::zeros_like(like)),
        v_(ModelParams<Scalar>::zeros_like(like)),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps) {}

  /// Throws NumericalError (and leaves params untouched) on a non-finite gradient.
  void step(ModelParams<Scalar>& params, const ModelParams<Scalar>& grad, double lr) {
    if (!grad.all_finite()) throw NumericalError("non-finite gradient");
    ++t_;
    const Scalar b1 = Scalar(beta1_), b2 = Scalar(beta2_);
    zip_tensors(m_, grad, [&](auto& m, const auto& g) { m = b1 * m + (Scalar(1) - b1) * g; });
    zip_tensors(v_, grad, [&](auto& v, const auto& g) {
      v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
    });
    if (lr == 0.0) return;
    const Scalar c1 = Scalar(1) - std::pow(b1, Scalar(t_));
    const Scalar c2 = Scalar(1) - std::pow(b2, Scalar(t_));
    const Scalar step = Scalar(lr) / c1;
    const Scalar eps = Scalar(eps_);
    // params -= lr * m_hat / (sqrt(v_hat) + eps)
    ModelParams<Scalar> update = m_;
    zip_tensors(update, v_, [&](auto& u, const auto& v) {
      u = (step * u.array() / ((v.array() / c2).sqrt() + eps)).matrix();
    });
    zip_tensors(params, update, [](auto& p, const auto& u) { p -= u; });
  }

  std::int64_t steps() const { return t_; }

 private:
  ModelParams<Scalar> m_, v_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

/// Cosine annealing from lr_max at step 0 to lr_min at total_steps.
inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max, double lr_min) {
  if (total_steps <= 0) return lr_max;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(3.141592653589793 * t));
}

/// EMA momentum, linear in step from `start` to `end`.
inline double momentum_schedule(std::int64_t step, std::int64_t total_steps, double start = 0.999,
                                double end = 0.9999) {
  if (total_steps <= 0) return start;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return start + (end - start) * t;
}

/// teacher <- lambda * teacher + (1 - lambda) * student, on every tensor.
/// Written as teacher + (1 - lambda)(student - teacher) so teacher == student
/// is an exact fixed point; lambda == 0 copies the student.
template <typename Scalar>
void ema_update(ModelParams<Scalar>& teacher, const ModelParams<Scalar>& student, double lambda) {
  if (!(lambda >= 0.0 && lambda < 1.0)) throw ConfigError("ema_update: lambda must lie in [0, 1)");
  if (!same_shape(teacher, student)) throw ConfigError("ema_update: teacher/student shape mismatch");
  if (lambda == 0.0) {
    teacher = student;
    return;
  }
  const Scalar rate = Scalar(1.0 - lambda);
  zip_tensors(teacher, student, [rate](auto& t, const auto& s) { t += rate * (s - t); });
}

}  // namespace reflect
