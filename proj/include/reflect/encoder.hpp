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

// MLP encoder with a K-way linear predictor, softmax / angular-margin heads,
// and the exact reverse-mode gradient of the (weighted) classification loss.
//
// Batches are column-major: one sample per column.

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "reflect/common.hpp"

namespace reflect {

template <typename Scalar>
struct DenseLayer {
  Mat<Scalar> weight;  // out x in
  Vec<Scalar> bias;    // out
};

/// Encoder layers (max(0, .) between consecutive layers, none after the last)
/// followed by a linear predictor producing K logits.
template <typename Scalar>
struct ModelParams {
  std::vector<DenseLayer<Scalar>> encoder;
  Mat<Scalar> predictor_weight;  // K x D
  Vec<Scalar> predictor_bias;    // K

  Eigen::Index input_dim() const { return encoder.front().weight.cols(); }
  Eigen::Index embedding_dim() const { return encoder.back().weight.rows(); }
  Eigen::Index num_clusters() const { return predictor_weight.rows(); }

  std::size_t num_parameters() const {
    std::size_t n = predictor_weight.size() + predictor_bias.size();
    for (const auto& l : encoder) n += l.weight.size() + l.bias.size();
    return n;
  }

  bool all_finite() const {
    for (const auto& l : encoder)
      if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
    return predictor_weight.allFinite() && predictor_bias.allFinite();
  }

  template <typename Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out;
    for (const auto& l : encoder)
      out.encoder.push_back({l.weight.template cast<Other>(), l.bias.template cast<Other>()});
    out.predictor_weight = predictor_weight.template cast<Other>();
    out.predictor_bias = predictor_bias.template cast<Other>();
    return out;
  }

  static ModelParams zeros_like(const ModelParams& p) {
    ModelParams out;
    for (const auto& l : p.encoder)
      out.encoder.push_back({Mat<Scalar>::Zero(l.weight.rows(), l.weight.cols()),
                             Vec<Scalar>::Zero(l.bias.size())});
    out.predictor_weight = Mat<Scalar>::Zero(p.predictor_weight.rows(), p.predictor_weight.cols());
    out.predictor_bias = Vec<Scalar>::Zero(p.predictor_bias.size());
    return out;
  }

  bool operator==(const ModelParams& o) const {
    if (encoder.size() != o.encoder.size()) return false;
    for (std::size_t i = 0; i < encoder.size(); ++i) {
      if (encoder[i].weight.rows() != o.encoder[i].weight.rows() ||
          encoder[i].weight.cols() != o.encoder[i].weight.cols() ||
          encoder[i].weight != o.encoder[i].weight || encoder[i].bias != o.encoder[i].bias)
        return false;
    }
    return predictor_weight.rows() == o.predictor_weight.rows() &&
           predictor_weight.cols() == o.predictor_weight.cols() &&
           predictor_weight == o.predictor_weight && predictor_bias == o.predictor_bias;
  }
};

template <typename Scalar>
bool same_shape(const ModelParams<Scalar>& a, const ModelParams<Scalar>& b) {
  if (a.encoder.size() != b.encoder.size()) return false;
  for (std::size_t i = 0; i < a.encoder.size(); ++i) {
    if (a.encoder[i].weight.rows() != b.encoder[i].weight.rows() ||
        a.encoder[i].weight.cols() != b.encoder[i].weight.cols())
      return false;
  }
  return a.predictor_weight.rows() == b.predictor_weight.rows() &&
         a.predictor_weight.cols() == b.predictor_weight.cols();
}

/// Calls f(dst_tensor, src_tensor) on every parameter tensor pair.
template <typename Scalar, typename F>
void zip_tensors(ModelParams<Scalar>& dst, const ModelParams<Scalar>& src, F&& f) {
  if (!same_shape(dst, src)) throw ConfigError("parameter shape mismatch");
  for (std::size_t i = 0; i < dst.encoder.size(); ++i) {
    f(dst.encoder[i].weight, src.encoder[i].weight);
    f(dst.encoder[i].bias, src.encoder[i].bias);
  }
  f(dst.predictor_weight, src.predictor_weight);
  f(dst.predictor_bias, src.predictor_bias);
}

template <typename Scalar, typename F>
void for_each_tensor(const ModelParams<Scalar>& p, F&& f) {
  for (const auto& l : p.encoder) {
    f(l.weight);
    f(l.bias);
  }
  f(p.predictor_weight);
  f(p.predictor_bias);
}

/// Seeded initialization: encoder weights uniform in +-sqrt(6 / fan_in),
/// predictor weights uniform in +-1/sqrt(D), biases zero.
template <typename Scalar = double>
ModelParams<Scalar> init_model(Eigen::Index input_dim, const std::vector<int>& hidden_dims,
                               Eigen::Index embedding_dim, Eigen::Index num_clusters,
                               std::uint64_t seed) {
  if (input_dim < 1 || embedding_dim < 1 || num_clusters < 2)
    throw ConfigError("init_model: invalid dimensions");
  Rng rng(stream_seed(seed, 0x1417));
  auto fill = [&rng](Mat<Scalar>& m, double bound) {
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        m(r, c) = static_cast<Scalar>((2.0 * uniform01(rng) - 1.0) * bound);
  };
  ModelParams<Scalar> p;
  Eigen::Index in = input_dim;
  std::vector<Eigen::Index> outs(hidden_dims.begin(), hidden_dims.end());
  outs.push_back(embedding_dim);
  for (Eigen::Index out : outs) {
    if (out < 1) throw ConfigError("init_model: layer width must be positive");
    DenseLayer<Scalar> l{Mat<Scalar>(out, in), Vec<Scalar>::Zero(out)};
    fill(l.weight, std::sqrt(6.0 / static_cast<double>(in)));
    p.encoder.push_back(std::move(l));
    in = out;
  }
  p.predictor_weight.resize(num_clusters, embedding_dim);
  fill(p.predictor_weight, 1.0 / std::sqrt(static_cast<double>(embedding_dim)));
  p.predictor_bias = Vec<Scalar>::Zero(num_clusters);
  return p;
}

// ---------------------------------------------------------------------------
// Forward path

template <typename Scalar>
Mat<Scalar> encode_batch(const ModelParams<Scalar>& p, const Mat<Scalar>& x) {
  if (x.rows() != p.input_dim())
    throw ConfigError("encode: input has " + std::to_string(x.rows()) +
                      " features, encoder expects " + std::to_string(p.input_dim()));
  Mat<Scalar> h = x;
  for (std::size_t i = 0; i < p.encoder.size(); ++i) {
    Mat<Scalar> a = p.encoder[i].weight * h;
    a.colwise() += p.encoder[i].bias;
    if (i + 1 < p.encoder.size()) a = a.cwiseMax(Scalar(0));
    h = std::move(a);
  }
  return h;
}

template <typename Scalar>
Vec<Scalar> encode(const ModelParams<Scalar>& p, const Vec<Scalar>& x) {
  return encode_batch(p, Mat<Scalar>(x)).col(0);
}

enum class LossKind { CrossEntropy, AdditiveAngularMargin };

struct HeadOptions {
  LossKind kind = LossKind::CrossEntropy;
  double margin = 0.2;  // AAM only
  double scale = 32.0;  // AAM only
};

/// Column-wise softmax with max-subtraction.
template <typename Scalar>
Mat<Scalar> softmax_columns(const Mat<Scalar>& logits) {
  if (!logits.allFinite()) throw NumericalError("softmax: non-finite logits");
  Mat<Scalar> out(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    const Scalar mx = logits.col(c).maxCoeff();
    out.col(c) = (logits.col(c).array() - mx).exp();
    out.col(c) /= out.col(c).sum();
  }
  return out;
}

template <typename Scalar>
Vec<Scalar> softmax(const Vec<Scalar>& logits) {
  return softmax_columns(Mat<Scalar>(logits)).col(0);
}

template <typename Scalar>
Mat<Scalar> normalize_rows(const Mat<Scalar>& m) {
  Vec<Scalar> norms = m.rowwise().norm();
  if ((norms.array() <= Scalar(0)).any()) throw NumericalError("zero-norm predictor row");
  return norms.cwiseInverse().asDiagonal() * m;
}

template <typename Scalar>
Mat<Scalar> normalize_columns(const Mat<Scalar>& m) {
  Vec<Scalar> norms = m.colwise().norm().transpose();
  if ((norms.array() <= Scalar(0)).any()) throw NumericalError("zero-norm embedding");
  return m * norms.cwiseInverse().asDiagonal();
}

/// Margin-free logits: W z + b for the softmax head, s cos(theta) for AAM.
template <typename Scalar>
Mat<Scalar> head_logits(const ModelParams<Scalar>& p, const Mat<Scalar>& z, const HeadOptions& head) {
  if (z.rows() != p.embedding_dim()) throw ConfigError("predict: embedding dimension mismatch");
  if (head.kind == LossKind::CrossEntropy) {
    Mat<Scalar> logits = p.predictor_weight * z;
    logits.colwise() += p.predictor_bias;
    return logits;
  }
  return Scalar(head.scale) * (normalize_rows(p.predictor_weight) * normalize_columns(z));
}

template <typename Scalar>
Mat<Scalar> predict_batch(const ModelParams<Scalar>& p, const Mat<Scalar>& z,
                          const HeadOptions& head = {}) {
  return softmax_columns(head_logits(p, z, head));
}

template <typename Scalar>
Vec<Scalar> predict(const ModelParams<Scalar>& p, const Vec<Scalar>& z, const HeadOptions& head = {}) {
  return predict_batch(p, Mat<Scalar>(z), head).col(0);
}

/// Label logit under an additive angular margin: cos(acos(c) + m).
template <typename Scalar>
Scalar margin_cosine(Scalar c, double margin) {
  if (margin == 0.0) return c;
  const Scalar cc = std::clamp(c, Scalar(-1), Scalar(1));
  return std::cos(std::acos(cc) + Scalar(margin));
}

// d/dc cos(acos(c) + m) = sin(acos(c) + m) / sqrt(1 - c^2)
template <typename Scalar>
Scalar margin_cosine_derivative(Scalar c, double margin) {
  if (margin == 0.0) return Scalar(1);
  const Scalar cc = std::clamp(c, Scalar(-1), Scalar(1));
  const Scalar s = std::max(std::sqrt(Scalar(1) - cc * cc), Scalar(1e-7));
  return std::sin(std::acos(cc) + Scalar(margin)) / s;
}

/// AAM logits for one embedding: s cos(theta_k) off-label, s cos(theta_y + m)
/// at the label.
template <typename Scalar>
Vec<Scalar> aam_logits(const Vec<Scalar>& z, const ModelParams<Scalar>& p, int label,
                       double margin, double scale) {
  if (!(margin >= 0.0 && margin < 1.5707963267948966) || !(scale > 0.0))
    throw ConfigError("aam_logits: margin must lie in [0, pi/2) and scale must be positive");
  if (label < 0 || label >= p.num_clusters()) throw ConfigError("aam_logits: label out of range");
  const Scalar zn = z.norm();
  if (!(zn > Scalar(0))) throw NumericalError("aam_logits: zero-norm embedding");
  Vec<Scalar> cosines = normalize_rows(p.predictor_weight) * (z / zn);
  cosines(label) = margin_cosine(cosines(label), margin);
  return Scalar(scale) * cosines;
}

/// Per-sample losses and their clean-probability weighted mean.
template <typename Scalar>
struct LossReport {
  std::vector<Scalar> per_sample_loss;
  Scalar weighted_mean = 0;
};

template <typename Scalar>
Scalar clamped_nll(Scalar prob) {
  return -std::log(std::max(prob, Scalar(kLogEpsilon)));
}

/// (1/B) sum_i w_i * -log p_i(y_i), probabilities one column per sample.
template <typename Scalar>
LossReport<Scalar> weighted_cross_entropy(const Mat<Scalar>& probs, std::span<const int> labels,
                                          std::span<const Scalar> clean_probs) {
  const auto n = static_cast<std::size_t>(probs.cols());
  if (labels.size() != n || clean_probs.size() != n)
    throw ConfigError("weighted_cross_entropy: batch length mismatch");
  if (n == 0) throw ConfigError("weighted_cross_entropy: empty batch");
  LossReport<Scalar> r;
  r.per_sample_loss.resize(n);
  Scalar total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= probs.rows())
      throw ConfigError("weighted_cross_entropy: label out of range");
    r.per_sample_loss[i] = clamped_nll(probs(labels[i], static_cast<Eigen::Index>(i)));
    total += clean_probs[i] * r.per_sample_loss[i];
  }
  r.weighted_mean = total / static_cast<Scalar>(n);
  return r;
}

// ---------------------------------------------------------------------------
// Training path: forward with dropout, loss, exact gradient.

struct TrainOptions {
  HeadOptions head;
  double dropout = 0.0;  // applied to hidden activations only
};

/// Forward + backward of the weighted classification loss over one batch.
/// `rng` drives the dropout masks and may be null when dropout is 0.
/// When `grad` is non-null it receives d(weighted_mean)/d(params).
template <typename Scalar>
LossReport<Scalar> loss_and_gradient(const ModelParams<Scalar>& p, const Mat<Scalar>& x,
                                     std::span<const int> labels, std::span<const Scalar> weights,
                                     const TrainOptions& opt, Rng* rng, ModelParams<Scalar>* grad) {
  const Eigen::Index batch = x.cols();
  const std::size_t depth = p.encoder.size();
  if (x.rows() != p.input_dim()) throw ConfigError("loss_and_gradient: input dimension mismatch");
  if (static_cast<Eigen::Index>(labels.size()) != batch ||
      static_cast<Eigen::Index>(weights.size()) != batch)
    throw ConfigError("loss_and_gradient: batch length mismatch");
  if (opt.dropout < 0.0 || opt.dropout >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
  if (opt.dropout > 0.0 && rng == nullptr) throw ConfigError("dropout requires an rng");

  // inputs[i] is the input of layer i; masks[i] is the dropout/ReLU gate
  // applied to the output of layer i (i < depth - 1).
  std::vector<Mat<Scalar>> inputs(depth);
  std::vector<Mat<Scalar>> gates(depth > 0 ? depth - 1 : 0);
  Mat<Scalar> h = x;
  const Scalar keep_scale = Scalar(1.0 / (1.0 - opt.dropout));
  for (std::size_t i = 0; i < depth; ++i) {
    inputs[i] = h;
    Mat<Scalar> a = p.encoder[i].weight * h;
    a.colwise() += p.encoder[i].bias;
    if (i + 1 < depth) {
      Mat<Scalar> gate = (a.array() > Scalar(0)).template cast<Scalar>();
      if (opt.dropout > 0.0) {
        for (Eigen::Index c = 0; c < gate.cols(); ++c)
          for (Eigen::Index r = 0; r < gate.rows(); ++r)
            gate(r, c) *= uniform01(*rng) < opt.dropout ? Scalar(0) : keep_scale;
      }
      a = a.cwiseProduct(gate);
      gates[i] = std::move(gate);
    }
    h = std::move(a);
  }
  const Mat<Scalar>& z = h;  // D x B

  Mat<Scalar> logits;
  Mat<Scalar> cosines, w_hat, z_hat;
  const Scalar scale = Scalar(opt.head.scale);
  if (opt.head.kind == LossKind::CrossEntropy) {
    logits = p.predictor_weight * z;
    logits.colwise() += p.predictor_bias;
  } else {
    w_hat = normalize_rows(p.predictor_weight);
    z_hat = normalize_columns(z);
    cosines = w_hat * z_hat;
    logits = scale * cosines;
    for (Eigen::Index i = 0; i < batch; ++i) {
      const int y = labels[static_cast<std::size_t>(i)];
      if (y < 0 || y >= p.num_clusters()) throw ConfigError("loss_and_gradient: label out of range");
      logits(y, i) = scale * margin_cosine(cosines(y, i), opt.head.margin);
    }
  }
  const Mat<Scalar> probs = softmax_columns(logits);
  LossReport<Scalar> report = weighted_cross_entropy(probs, labels, weights);
  if (grad == nullptr) return report;

  // dL/dlogits = w_i (p_i - e_y) / B, except where the log clamp is active.
  Mat<Scalar> dlogits = probs;
  for (Eigen::Index i = 0; i < batch; ++i) {
    const auto si = static_cast<std::size_t>(i);
    const int y = labels[si];
    const Scalar w = weights[si] / Scalar(batch);
    if (probs(y, i) < Scalar(kLogEpsilon)) {
      dlogits.col(i).setZero();
      continue;
    }
    dlogits(y, i) -= Scalar(1);
    dlogits.col(i) *= w;
  }

  *grad = ModelParams<Scalar>::zeros_like(p);
  Mat<Scalar> dz;
  if (opt.head.kind == LossKind::CrossEntropy) {
    grad->predictor_weight = dlogits * z.transpose();
    grad->predictor_bias = dlogits.rowwise().sum();
    dz = p.predictor_weight.transpose() * dlogits;
  } else {
    Mat<Scalar> dcos = scale * dlogits;
    for (Eigen::Index i = 0; i < batch; ++i) {
      const int y = labels[static_cast<std::size_t>(i)];
      dcos(y, i) *= margin_cosine_derivative(cosines(y, i), opt.head.margin);
    }
    const Mat<Scalar> dw_hat = dcos * z_hat.transpose();  // K x D
    const Mat<Scalar> dz_hat = w_hat.transpose() * dcos;  // D x B
    const Vec<Scalar> w_norm = p.predictor_weight.rowwise().norm();
    const Vec<Scalar> z_norm = z.colwise().norm().transpose();
    Mat<Scalar> dw(dw_hat.rows(), dw_hat.cols());
    for (Eigen::Index k = 0; k < dw.rows(); ++k) {
      const Scalar proj = w_hat.row(k).dot(dw_hat.row(k));
      dw.row(k) = (dw_hat.row(k) - proj * w_hat.row(k)) / w_norm(k);
    }
    dz.resize(dz_hat.rows(), dz_hat.cols());
    for (Eigen::Index i = 0; i < batch; ++i) {
      const Scalar proj = z_hat.col(i).dot(dz_hat.col(i));
      dz.col(i) = (dz_hat.col(i) - proj * z_hat.col(i)) / z_norm(i);
    }
    grad->predictor_weight = std::move(dw);
  }

  Mat<Scalar> delta = std::move(dz);
  for (std::size_t li = depth; li-- > 0;) {
    grad->encoder[li].weight = delta * inputs[li].transpose();
    grad->encoder[li].bias = delta.rowwise().sum();
    if (li == 0) break;
    delta = (p.encoder[li].weight.transpose() * delta).cwiseProduct(gates[li - 1]);
  }
  return report;
}

}  // namespace reflect
