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

#include "reflect/clustering.hpp"

#include <unordered_set>

namespace reflect {

PosteriorBuffer::PosteriorBuffer(int num_clusters, int batch_size, int batches_per_flush)
    : num_clusters_(num_clusters), batch_size_(batch_size), batches_(batches_per_flush) {
  if (num_clusters < 1 || batch_size < 1 || batches_per_flush < 1)
    throw ConfigError("posterior buffer: K, B and M must be positive");
  if (static_cast<long>(batch_size) * batches_per_flush <= num_clusters)
    throw ConfigError("posterior buffer: M*B must exceed K (M*B=" +
                      std::to_string(static_cast<long>(batch_size) * batches_per_flush) +
                      ", K=" + std::to_string(num_clusters) + ")");
  columns_.reserve(static_cast<std::size_t>(num_clusters) * capacity());
  indices_.reserve(static_cast<std::size_t>(capacity()));
}

bool PosteriorBuffer::accumulate(const MatrixXd& batch_posteriors, std::span<const int> indices) {
  if (batch_posteriors.rows() != num_clusters_)
    throw ConfigError("posterior buffer: wrong number of clusters");
  if (static_cast<std::size_t>(batch_posteriors.cols()) != indices.size())
    throw ConfigError("posterior buffer: posterior/index count mismatch");
  if (full()) throw ConfigError("posterior buffer: accumulate on a full buffer");
  for (Eigen::Index c = 0; c < batch_posteriors.cols(); ++c)
    for (Eigen::Index r = 0; r < batch_posteriors.rows(); ++r)
      columns_.push_back(batch_posteriors(r, c));
  indices_.insert(indices_.end(), indices.begin(), indices.end());
  return full();
}

MatrixXd PosteriorBuffer::matrix() const {
  const auto w = static_cast<Eigen::Index>(indices_.size());
  MatrixXd m = Eigen::Map<const MatrixXd>(columns_.data(), num_clusters_, w);
  if (w > 0) m /= static_cast<double>(w);
  return m;
}

void PosteriorBuffer::clear() {
  columns_.clear();
  indices_.clear();
}

int active_cluster_count(std::span<const int> labels) {
  std::unordered_set<int> seen(labels.begin(), labels.end());
  return static_cast<int>(seen.size());
}

void write_assignments(std::ostream& os, std::span<const int> indices, std::span<const int> labels) {
  if (indices.size() != labels.size()) throw ConfigError("write_assignments: length mismatch");
  for (std::size_t i = 0; i < indices.size(); ++i) os << indices[i] << ',' << labels[i] << '\n';
}

}  // namespace reflect
