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

#include "reflect/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>

namespace reflect {
namespace {

void check_pair(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw ConfigError("label pair: length mismatch");
  if (predicted.empty()) throw ConfigError("label pair: empty");
}

std::vector<int> compact(std::span<const int> labels, int* count) {
  std::unordered_map<int, int> ids;
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, inserted] = ids.try_emplace(labels[i], static_cast<int>(ids.size()));
    out[i] = it->second;
  }
  *count = static_cast<int>(ids.size());
  return out;
}

double entropy(const VectorXd& counts, double n) {
  double h = 0;
  for (Eigen::Index i = 0; i < counts.size(); ++i)
    if (counts(i) > 0) h -= counts(i) / n * std::log(counts(i) / n);
  return h;
}

void check_trials(std::span<const double> scores, std::span<const bool> targets) {
  if (scores.size() != targets.size()) throw ConfigError("scores/targets length mismatch");
  const auto nt = std::count(targets.begin(), targets.end(), true);
  if (nt == 0 || nt == static_cast<long>(targets.size()))
    throw ConfigError("need at least one target and one non-target trial");
  for (double s : scores)
    if (!std::isfinite(s)) throw NumericalError("non-finite verification score");
}

double cross(const std::pair<double, double>& o, const std::pair<double, double>& a,
             const std::pair<double, double>& b) {
  return (a.first - o.first) * (b.second - o.second) - (a.second - o.second) * (b.first - o.first);
}

}  // namespace

MatrixXd contingency_table(std::span<const int> predicted, std::span<const int> truth) {
  check_pair(predicted, truth);
  int kp = 0, kt = 0;
  const auto p = compact(predicted, &kp);
  const auto t = compact(truth, &kt);
  MatrixXd c = MatrixXd::Zero(kp, kt);
  for (std::size_t i = 0; i < p.size(); ++i) c(p[i], t[i]) += 1.0;
  return c;
}

double nmi(std::span<const int> predicted, std::span<const int> truth) {
  const MatrixXd c = contingency_table(predicted, truth);
  const double n = static_cast<double>(predicted.size());
  const VectorXd rows = c.rowwise().sum();
  const VectorXd cols = c.colwise().sum().transpose();
  const double hp = entropy(rows, n), ht = entropy(cols, n);
  if (hp == 0.0 && ht == 0.0) return 1.0;
  double mi = 0;
  for (Eigen::Index r = 0; r < c.rows(); ++r)
    for (Eigen::Index k = 0; k < c.cols(); ++k)
      if (c(r, k) > 0) mi += c(r, k) / n * std::log(c(r, k) * n / (rows(r) * cols(k)));
  return std::clamp(mi / (0.5 * (hp + ht)), 0.0, 1.0);
}

std::vector<int> solve_assignment(const MatrixXd& cost) {
  const bool transposed = cost.rows() > cost.cols();
  const MatrixXd a = transposed ? MatrixXd(cost.transpose()) : cost;
  const auto n = static_cast<int>(a.rows());
  const auto m = static_cast<int>(a.cols());
  // Shortest augmenting path with potentials, rows 1..n, cols 1..m.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> match_col(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    match_col[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = match_col[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[match_col[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match_col[j0] != 0);
    do {
      const int j1 = way[j0];
      match_col[j0] = match_col[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= m; ++j)
    if (match_col[j] != 0) row_to_col[match_col[j] - 1] = j - 1;
  if (!transposed) return row_to_col;
  std::vector<int> out(static_cast<std::size_t>(cost.rows()), -1);
  for (int i = 0; i < n; ++i) out[row_to_col[i]] = i;
  return out;
}

double hungarian_accuracy(std::span<const int> predicted, std::span<const int> truth) {
  const MatrixXd c = contingency_table(predicted, truth);
  const auto match = solve_assignment(-c);
  double hit = 0;
  for (std::size_t r = 0; r < match.size(); ++r)
    if (match[r] >= 0) hit += c(static_cast<Eigen::Index>(r), match[r]);
  return 100.0 * hit / static_cast<double>(predicted.size());
}

double mean_max_purity(std::span<const int> predicted, std::span<const int> truth) {
  const MatrixXd c = contingency_table(predicted, truth);
  double total = 0;
  for (Eigen::Index r = 0; r < c.rows(); ++r) total += c.row(r).maxCoeff() / c.row(r).sum();
  return 100.0 * total / static_cast<double>(c.rows());
}

double cosine_score(const VectorXd& z1, const VectorXd& z2) {
  if (z1.size() != z2.size()) throw ConfigError("cosine_score: dimension mismatch");
  const double n1 = z1.norm(), n2 = z2.norm();
  if (!(n1 > 0.0) || !(n2 > 0.0)) throw NumericalError("cosine_score: zero-norm embedding");
  return std::clamp(z1.dot(z2) / (n1 * n2), -1.0, 1.0);
}

std::vector<std::pair<double, double>> roc_points(std::span<const double> scores,
                                                  std::span<const bool> targets) {
  check_trials(scores, targets);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  const auto nt = static_cast<double>(std::count(targets.begin(), targets.end(), true));
  const auto nn = static_cast<double>(targets.size()) - nt;

  std::vector<std::pair<double, double>> pts;
  long misses = 0, false_alarms = static_cast<long>(nn);
  pts.emplace_back(1.0, 0.0);
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) {
      if (targets[order[i]]) ++misses;
      else --false_alarms;
    }
    pts.emplace_back(static_cast<double>(false_alarms) / nn, static_cast<double>(misses) / nt);
  }
  return pts;
}

double eer(std::span<const double> scores, std::span<const bool> targets) {
  const auto pts = roc_points(scores, targets);
  // Lower-left convex hull; pts are ordered by decreasing P_fa, increasing P_miss.
  std::vector<std::pair<double, double>> hull;
  for (const auto& p : pts) {
    while (hull.size() >= 2 && cross(hull[hull.size() - 2], hull.back(), p) >= 0) hull.pop_back();
    hull.push_back(p);
  }
  for (std::size_t i = 0; i + 1 < hull.size(); ++i) {
    const auto [fa1, miss1] = hull[i];
    const auto [fa2, miss2] = hull[i + 1];
    const double d1 = miss1 - fa1, d2 = miss2 - fa2;
    if (d1 <= 0.0 && d2 >= 0.0) {
      if (d1 == d2) return 100.0 * fa1;
      const double t = -d1 / (d2 - d1);
      return 100.0 * (fa1 + t * (fa2 - fa1));
    }
  }
  return 100.0 * hull.back().first;  // unreachable: the hull spans (1,0) to (0,1)
}

double normalized_dcf(double p_miss, double p_fa, const DcfParams& params) {
  const double c = params.c_miss * p_miss * params.p_target + params.c_fa * p_fa * (1.0 - params.p_target);
  return c / std::min(params.c_miss * params.p_target, params.c_fa * (1.0 - params.p_target));
}

double min_dcf(std::span<const double> scores, std::span<const bool> targets, const DcfParams& params) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& [fa, miss] : roc_points(scores, targets)) best = std::min(best, normalized_dcf(miss, fa, params));
  return best;
}

}  // namespace reflect
