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

#include <doctest.h>

#include <cmath>
#include <limits>

#include "reflect/optim.hpp"

using namespace reflect;

namespace {

double max_abs_diff(const ModelParams<double>& a, const ModelParams<double>& b) {
  double m = 0;
  ModelParams<double> d = a;
  zip_tensors(d, b, [&](auto& x, const auto& y) { m = std::max(m, (x - y).cwiseAbs().maxCoeff()); });
  return m;
}

}  // namespace

TEST_CASE("adam") {
  auto p = init_model<double>(3, {4}, 2, 3, 1);
  auto g = ModelParams<double>::zeros_like(p);
  g.predictor_weight.setConstant(0.5);
  g.encoder[0].weight(0, 0) = -2.0;

  SUBCASE("zero learning rate leaves parameters untouched") {
    const auto before = p;
    Adam<double> adam(p);
    adam.step(p, g, 0.0);
    CHECK(p == before);
    CHECK(adam.steps() == 1);
  }
  SUBCASE("first step moves every touched entry by lr against the gradient sign") {
    const auto before = p;
    Adam<double> adam(p);
    adam.step(p, g, 0.01);
    // Bias-corrected first step is lr * g / (|g| + eps).
    CHECK(p.predictor_weight(0, 0) == doctest::Approx(before.predictor_weight(0, 0) - 0.01).epsilon(1e-6));
    CHECK(p.encoder[0].weight(0, 0) == doctest::Approx(before.encoder[0].weight(0, 0) + 0.01).epsilon(1e-6));
    CHECK(p.encoder[0].weight(1, 1) == before.encoder[0].weight(1, 1));
  }
  SUBCASE("non-finite gradient") {
    const auto before = p;
    g.predictor_bias(0) = std::numeric_limits<double>::infinity();
    Adam<double> adam(p);
    CHECK_THROWS_AS(adam.step(p, g, 0.01), NumericalError);
    CHECK(p == before);
  }
}

TEST_CASE("learning-rate and momentum schedules") {
  CHECK(cosine_lr(0, 100, 1e-2, 1e-4) == doctest::Approx(1e-2));
  CHECK(cosine_lr(100, 100, 1e-2, 1e-4) == doctest::Approx(1e-4));
  CHECK(cosine_lr(50, 100, 1e-2, 1e-4) == doctest::Approx(0.5 * (1e-2 + 1e-4)));

  CHECK(momentum_schedule(0, 1000) == 0.999);
  CHECK(momentum_schedule(1000, 1000) == doctest::Approx(0.9999).epsilon(1e-15));
  CHECK(momentum_schedule(500, 1000) == doctest::Approx(0.99945).epsilon(1e-15));
  for (int s = 1; s <= 1000; ++s) CHECK(momentum_schedule(s, 1000) >= momentum_schedule(s - 1, 1000));
}

TEST_CASE("exponential moving average") {
  const auto student = init_model<double>(4, {5}, 3, 4, 1);
  const auto start = init_model<double>(4, {5}, 3, 4, 2);

  SUBCASE("lambda zero copies") {
    auto t = start;
    ema_update(t, student, 0.0);
    CHECK(t == student);
  }
  SUBCASE("fixed point") {
    auto t = student;
    for (double lambda : {0.1, 0.5, 0.999, 0.9999}) {
      ema_update(t, student, lambda);
      CHECK(t == student);
    }
  }
  SUBCASE("geometric decay towards a constant student") {
    const double lambda = 0.9;
    auto t = start;
    for (int step = 0; step < 10; ++step) ema_update(t, student, lambda);
    // t - s == lambda^10 (q - s) entrywise
    auto expect = start;
    zip_tensors(expect, student, [&](auto& q, const auto& s) { q = s + std::pow(lambda, 10) * (q - s); });
    CHECK(max_abs_diff(t, expect) < 1e-10);
  }
  SUBCASE("affine in both arguments") {
    const auto other = init_model<double>(4, {5}, 3, 4, 3);
    const double lambda = 0.75, a = 0.3;
    // mixing teachers and students with weights (a, 1-a) commutes with the update
    auto mix_t = start, mix_s = student;
    zip_tensors(mix_t, other, [&](auto& x, const auto& y) { x = a * x + (1 - a) * y; });
    zip_tensors(mix_s, start, [&](auto& x, const auto& y) { x = a * x + (1 - a) * y; });
    auto lhs = mix_t;
    ema_update(lhs, mix_s, lambda);
    auto t1 = start, t2 = other;
    ema_update(t1, student, lambda);
    ema_update(t2, start, lambda);
    auto rhs = t1;
    zip_tensors(rhs, t2, [&](auto& x, const auto& y) { x = a * x + (1 - a) * y; });
    CHECK(max_abs_diff(lhs, rhs) < 1e-14);
    // and the update itself is lambda * t + (1 - lambda) * s
    auto direct = start;
    zip_tensors(direct, student, [&](auto& x, const auto& y) { x = lambda * x + (1 - lambda) * y; });
    auto t = start;
    ema_update(t, student, lambda);
    CHECK(max_abs_diff(t, direct) < 1e-15);
  }
  SUBCASE("errors") {
    auto t = start;
    CHECK_THROWS_AS(ema_update(t, student, 1.0), ConfigError);
    CHECK_THROWS_AS(ema_update(t, student, -0.1), ConfigError);
    const auto wrong = init_model<double>(4, {6}, 3, 4, 1);
    CHECK_THROWS_AS(ema_update(t, wrong, 0.5), ConfigError);
  }
}
