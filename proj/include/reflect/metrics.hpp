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

#include <span>
#include <utility>
#include <vector>

#include "reflect/common.hpp"

namespace reflect {

// ---------------------------------------------------------------------------
// Clustering quality. `predicted` and `truth` are parallel label arrays.

/// Mutual information over the arithmetic mean of the two entropies.
/// Two single-class partitions score 1.
double nmi(std::span<const int> predicted, std::span<const int> truth);

/// Percentage of samples covered by the best one-to-one matching of
/// predicted clusters to true classes; members of unmatched clusters count
/// as errors.
double hungarian_accuracy(std::span<const int> predicted, std::span<const int> truth);

/// Mean over non-empty predicted clusters of the dominant true-class share,
/// as a percentage.
double mean_max_purity(std::span<const int> predicted, std::span<const int> truth);

/// Rows: predicted cluster ids (compacted in order of first appearance),
/// columns: true class ids (same).
MatrixXd contingency_table(std::span<const int> predicted, std::span<const int> truth);

/// Minimum-cost perfect matching of the smaller side of a rectangular cost
/// matrix. Returns, for every row, the matched column (or -1 when rows > cols
/// and the row is left unmatched).
std::vector<int> solve_assignment(const MatrixXd& cost);

// ---------------------------------------------------------------------------
// Verification.

struct Trial {
  int a = 0;
  int b = 0;
  bool target = false;
};

/// Cosine of the angle between two embeddings.
double cosine_score(const VectorXd& z1, const VectorXd& z2);

/// (P_fa, P_miss) for every distinct threshold, accept when score >= t,
/// from accept-all (1, 0) to reject-all (0, 1).
std::vector<std::pair<double, double>> roc_points(std::span<const double> scores,
                                                  std::span<const bool> targets);

/// Equal error rate in percent, read off the convex hull of the ROC
/// (linear interpolation between hull vertices).
double eer(std::span<const double> scores, std::span<const bool> targets);

struct DcfParams {
  double c_miss = 1.0;
  double c_fa = 1.0;
  double p_target = 0.05;
};

/// Detection cost at one operating point, normalized by the cost of the best
/// trivial system.
double normalized_dcf(double p_miss, double p_fa, const DcfParams& params = {});

/// Minimum normalized detection cost over all thresholds.
double min_dcf(std::span<const double> scores, std::span<const bool> targets,
               const DcfParams& params = {});

}  // namespace reflect
