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

// Pseudo-label generation: k-means for the initial labels, and the two
// online assignment rules (argmax, balanced optimal transport).

#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <ostream>
#include <span>
#include <vector>

#include "reflect/common.hpp"

namespace reflect {

template <typename Scalar>
struct ClusterModel {
  Mat<Scalar> centroids;        // K x D
  std::vector<int> assignment;  // one label per sample
  std::vector<Scalar> inertia_history;  // after every assignment step
  int iterations = 0;

  Scalar inertia() const { return inertia_history.empty() ? Scalar(0) : inertia_history.back(); }
};

/// Lloyd's algorithm with k-means++ seeding. `points` holds one sample per row.
/// A cluster that empties is re-seeded at the point farthest from its centroid.
template <typename Scalar>
ClusterModel<Scalar> kmeans(const Mat<Scalar>& points, int num_clusters, int max_iters,
                            std::uint64_t seed) {
  const Eigen::Index n = points.rows();
  const Eigen::Index k = num_clusters;
  if (points.cols() < 1) throw ConfigError("kmeans: points need at least one dimension");
  if (k < 1 || n < k) throw ConfigError("kmeans: need at least K points (N=" + std::to_string(n) +
                                        ", K=" + std::to_string(k) + ")");
  if (!points.allFinite()) throw NumericalError("kmeans: non-finite input");

  ClusterModel<Scalar> model;
  model.centroids.resize(k, points.cols());
  Rng rng(stream_seed(seed, 0x6b6d));

  // k-means++ seeding
  std::vector<Scalar> d2(static_cast<std::size_t>(n), std::numeric_limits<Scalar>::infinity());
  Eigen::Index first = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(n)));
  model.centroids.row(0) = points.row(first);
  for (Eigen::Index c = 1; c < k; ++c) {
    Scalar total = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const Scalar d = (points.row(i) - model.centroids.row(c - 1)).squaredNorm();
      d2[i] = std::min(d2[i], d);
      total += d2[i];
    }
    Eigen::Index pick = 0;
    if (total > Scalar(0)) {
      Scalar target = Scalar(uniform01(rng)) * total;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        target -= d2[i];
        if (target < Scalar(0) && d2[i] > Scalar(0)) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(n)));
    }
    model.centroids.row(c) = points.row(pick);
  }

  auto& labels = model.assignment;
  labels.assign(static_cast<std::size_t>(n), -1);
  std::vector<Scalar> dist(static_cast<std::size_t>(n));
  for (int iter = 0; iter < std::max(max_iters, 1); ++iter) {
    bool changed = false;
    Scalar inertia = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      Scalar best_d = std::numeric_limits<Scalar>::infinity();
      for (Eigen::Index c = 0; c < k; ++c) {
        const Scalar d = (points.row(i) - model.centroids.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(c);
        }
      }
      changed |= labels[i] != best;
      labels[i] = best;
      dist[i] = best_d;
      inertia += best_d;
    }
    model.inertia_history.push_back(inertia);
    model.iterations = iter + 1;
    if (!changed && iter > 0) break;

    Mat<Scalar> sums = Mat<Scalar>::Zero(k, points.cols());
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(labels[i]) += points.row(i);
      ++counts[static_cast<std::size_t>(labels[i])];
    }
    for (Eigen::Index c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        model.centroids.row(c) = sums.row(c) / Scalar(counts[c]);
        continue;
      }
      // Empty: move onto the currently worst-served point.
      Eigen::Index far = 0;
      for (Eigen::Index i = 1; i < n; ++i)
        if (dist[i] > dist[far]) far = i;
      model.centroids.row(c) = points.row(far);
      dist[far] = 0;
    }
  }
  return model;
}

/// Index of the largest entry; ties go to the smallest index.
template <typename Derived>
int argmax_assign(const Eigen::MatrixBase<Derived>& probs) {
  int best = 0;
  for (Eigen::Index k = 1; k < probs.size(); ++k)
    if (probs(k) > probs(best)) best = static_cast<int>(k);
  return best;
}

template <typename Scalar>
std::vector<int> argmax_columns(const Mat<Scalar>& probs) {
  std::vector<int> out(static_cast<std::size_t>(probs.cols()));
  for (Eigen::Index i = 0; i < probs.cols(); ++i) out[i] = argmax_assign(probs.col(i));
  return out;
}

struct SinkhornOptions {
  double lambda = 25.0;
  int max_iters = 300;
  double tol = 1e-6;
};

template <typename Scalar>
struct SinkhornResult {
  Mat<Scalar> plan;         // Q, K x N, rows sum to 1/K and columns to 1/N
  std::vector<int> labels;  // per-column argmax of Q
  int iterations = 0;
  Scalar iterate_violation = 0;  // marginal error of the last Sinkhorn iterate
  Scalar max_violation = 0;      // marginal error of the returned plan
  bool converged = false;
};

namespace detail {
template <typename Scalar, typename Derived>
Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& v) {
  const Scalar mx = v.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  return mx + std::log((v.array() - mx).exp().sum());
}
}  // namespace detail

/// Projects a positive plan onto the transportation polytope with row sums
/// `r` and column sums `c`: scale down overfull rows, then overfull columns,
/// then spread the remaining deficit as a rank-one correction.
template <typename Scalar>
Mat<Scalar> round_to_polytope(Mat<Scalar> plan, const Vec<Scalar>& r, const Vec<Scalar>& c) {
  const Vec<Scalar> rows = plan.rowwise().sum();
  for (Eigen::Index i = 0; i < plan.rows(); ++i)
    if (rows(i) > r(i)) plan.row(i) *= r(i) / rows(i);
  const Vec<Scalar> cols = plan.colwise().sum().transpose();
  for (Eigen::Index j = 0; j < plan.cols(); ++j)
    if (cols(j) > c(j)) plan.col(j) *= c(j) / cols(j);
  const Vec<Scalar> err_r = r - plan.rowwise().sum();
  const Vec<Scalar> err_c = c - plan.colwise().sum().transpose();
  const Scalar mass = err_c.sum();
  if (mass > Scalar(0)) plan += err_r * err_c.transpose() / mass;
  return plan;
}

/// Balanced assignment by entropic optimal transport. `scaled_posteriors` is
/// the K x N matrix with entries p(k|x_i)/N. The Gibbs kernel is
/// exp(lambda * p(k|x_i)), i.e. lambda acts on the per-sample posterior, and
/// the scalings u, v are iterated in the log domain until both marginals are
/// within `tol` of (1/K, 1/N). The last iterate is rounded onto the polytope.
template <typename Scalar>
SinkhornResult<Scalar> sinkhorn_assign(const Mat<Scalar>& scaled_posteriors,
                                       const SinkhornOptions& opt = {}) {
  const Eigen::Index k = scaled_posteriors.rows();
  const Eigen::Index n = scaled_posteriors.cols();
  if (k < 1 || n < k) throw ConfigError("sinkhorn: need at least K columns");
  if (!(opt.lambda > 0.0)) throw ConfigError("sinkhorn: lambda must be positive");
  if (!scaled_posteriors.allFinite()) throw NumericalError("sinkhorn: non-finite posteriors");

  const Mat<Scalar> log_kernel = Scalar(opt.lambda) * Scalar(n) * scaled_posteriors;
  const Scalar log_r = -std::log(Scalar(k));
  const Scalar log_c = -std::log(Scalar(n));
  Vec<Scalar> log_u = Vec<Scalar>::Zero(k);
  Vec<Scalar> log_v = Vec<Scalar>::Zero(n);

  auto violation = [&](const Mat<Scalar>& q) {
    const Scalar row_err = (q.rowwise().sum().array() - std::exp(log_r)).abs().maxCoeff();
    const Scalar col_err = (q.colwise().sum().array() - std::exp(log_c)).abs().maxCoeff();
    return std::max(row_err, col_err);
  };

  SinkhornResult<Scalar> res;
  const int iters = std::max(opt.max_iters, 1);
  for (int it = 0; it < iters; ++it) {
    for (Eigen::Index r = 0; r < k; ++r)
      log_u(r) = log_r - detail::log_sum_exp<Scalar>(log_kernel.row(r).transpose() + log_v);
    for (Eigen::Index c = 0; c < n; ++c)
      log_v(c) = log_c - detail::log_sum_exp<Scalar>(log_kernel.col(c) + log_u);
    res.iterations = it + 1;

    res.plan = ((log_kernel.colwise() + log_u).rowwise() + log_v.transpose()).array().exp().matrix();
    res.iterate_violation = violation(res.plan);
    if (res.iterate_violation < Scalar(opt.tol)) {
      res.converged = true;
      break;
    }
  }
  if (!res.converged)
    std::clog << "warning: sinkhorn stopped at " << res.iterations
              << " iterations with marginal violation " << res.iterate_violation << "\n";
  res.plan = round_to_polytope<Scalar>(res.plan, Vec<Scalar>::Constant(k, std::exp(log_r)),
                                       Vec<Scalar>::Constant(n, std::exp(log_c)));
  res.max_violation = violation(res.plan);
  res.labels = argmax_columns(res.plan);
  return res;
}

/// Collects teacher posteriors over M batches of B samples before a Sinkhorn
/// assignment. Stored columns are scaled by 1/(M*B).
class PosteriorBuffer {
 public:
  PosteriorBuffer(int num_clusters, int batch_size, int batches_per_flush);

  /// Appends a K x B block; returns true once M batches are held.
  bool accumulate(const MatrixXd& batch_posteriors, std::span<const int> indices);

  /// Returns the K x width scaled matrix; width may be short of M*B at the
  /// end of an epoch, in which case the scaling uses the actual width.
  MatrixXd matrix() const;
  const std::vector<int>& sample_indices() const { return indices_; }
  int width() const { return static_cast<int>(indices_.size()); }
  int capacity() const { return batch_size_ * batches_; }
  bool full() const { return width() >= capacity(); }
  void clear();

 private:
  int num_clusters_, batch_size_, batches_;
  std::vector<double> columns_;  // column-major K x width
  std::vector<int> indices_;
};

/// Number of distinct labels in use.
int active_cluster_count(std::span<const int> labels);

/// `global_index,cluster_id` per line.
void write_assignments(std::ostream& os, std::span<const int> indices, std::span<const int> labels);

}  // namespace reflect
