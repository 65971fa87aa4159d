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

#include "reflect/pipeline.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "reflect/clustering.hpp"
#include "reflect/metrics.hpp"
#include "reflect/optim.hpp"

namespace reflect {
namespace {

// RNG stream tags; every stream is keyed by (seed, tag + counter, item).
constexpr std::uint64_t kShuffleTag = 0x5100000000ULL;
constexpr std::uint64_t kViewTag = 0x7100000000ULL;
constexpr std::uint64_t kDropoutTag = 0xd100000000ULL;

MatrixXd gather(const MatrixXd& features, std::span<const int> idx) {
  MatrixXd out(features.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = features.col(idx[j]);
  return out;
}

ViewOptions view_options(const RunConfig& cfg, const Corpus& corpus) {
  return {cfg.aug_strength, cfg.mask_fraction, cfg.aug_probability, corpus.spec.sigma_within};
}

// Augmentation noise depends only on (seed, epoch, sample), not on batch order.
MatrixXd student_batch(const RunConfig& cfg, const Corpus& corpus, std::span<const int> idx, int epoch) {
  MatrixXd x = gather(corpus.features, idx);
  const ViewOptions opt = view_options(cfg, corpus);
  for (std::size_t j = 0; j < idx.size(); ++j) {
    Rng rng(stream_seed(cfg.seed, kViewTag + static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(idx[j])));
    augment_into(x.col(static_cast<Eigen::Index>(j)), opt, rng);
  }
  return x;
}

std::vector<int> epoch_order(const RunConfig& cfg, int num_train, int epoch) {
  std::vector<int> order(static_cast<std::size_t>(num_train));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(stream_seed(cfg.seed, kShuffleTag + static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  return order;
}

int batches_per_epoch(const RunConfig& cfg, int num_train) {
  return (num_train + cfg.batch_size - 1) / cfg.batch_size;
}

std::span<const int> batch_span(const std::vector<int>& order, int b, int batch_size) {
  const std::size_t begin = static_cast<std::size_t>(b) * batch_size;
  const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(batch_size));
  return std::span<const int>(order).subspan(begin, end - begin);
}

std::vector<double> gather_values(const std::vector<double>& v, std::span<const int> idx) {
  std::vector<double> out(idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) out[j] = v[static_cast<std::size_t>(idx[j])];
  return out;
}

std::vector<int> gather_labels(const std::vector<int>& v, std::span<const int> idx) {
  std::vector<int> out(idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) out[j] = v[static_cast<std::size_t>(idx[j])];
  return out;
}

void check_finite_loss(double loss, int epoch) {
  if (!std::isfinite(loss))
    throw NumericalError("non-finite training loss in epoch " + std::to_string(epoch));
}

}  // namespace

HeadOptions head_options(const RunConfig& cfg) {
  return {cfg.loss, cfg.aam_margin, cfg.aam_scale};
}

Corpus corpus_for(const RunConfig& cfg) {
  if (!cfg.corpus_path.empty()) return read_corpus(cfg.corpus_path);
  return generate_corpus(cfg.corpus);
}

MetricSet evaluate_labels(std::span<const int> labels, const ModelParams<double>& model, const Corpus& corpus) {
  const auto truth = corpus.train_truth();
  if (labels.size() != truth.size()) throw ConfigError("evaluate: label count differs from training set size");
  MetricSet m;
  m.nmi = nmi(labels, truth);
  m.accuracy = hungarian_accuracy(labels, truth);
  m.purity = mean_max_purity(labels, truth);
  m.active_clusters = active_cluster_count(labels);
  if (corpus.trials.empty()) {
    m.eer = m.min_dcf = std::numeric_limits<double>::quiet_NaN();
    return m;
  }
  std::vector<int> needed;
  std::map<int, Eigen::Index> column;
  for (const auto& t : corpus.trials)
    for (int i : {t.a, t.b})
      if (column.try_emplace(i, static_cast<Eigen::Index>(needed.size())).second) needed.push_back(i);
  const MatrixXd z = encode_batch(model, gather(corpus.features, needed));
  std::vector<double> scores;
  auto flags = std::make_unique<bool[]>(corpus.trials.size());  // std::vector<bool> has no span view
  for (std::size_t i = 0; i < corpus.trials.size(); ++i) {
    const auto& t = corpus.trials[i];
    scores.push_back(cosine_score(z.col(column[t.a]), z.col(column[t.b])));
    flags[i] = t.target;
  }
  const std::span<const bool> target_span(flags.get(), corpus.trials.size());
  m.eer = eer(scores, target_span);
  m.min_dcf = min_dcf(scores, target_span);
  return m;
}

MetricSet evaluate(const ModelParams<double>& model, const Corpus& corpus, const HeadOptions& head) {
  const MatrixXd train = corpus.features.leftCols(corpus.num_train);
  const MatrixXd probs = predict_batch(model, encode_batch(model, train), head);
  const auto labels = argmax_columns(probs);
  return evaluate_labels(labels, model, corpus);
}

WarmState warmup(const RunConfig& cfg, const Corpus& corpus, const RunHooks& hooks) {
  cfg.validate();
  const int n = corpus.num_train;
  if (n < cfg.k_init) throw ConfigError("warmup: fewer training samples than k_init");
  if (corpus.features.rows() != cfg.corpus.input_dim && cfg.corpus_path.empty())
    throw ConfigError("warmup: corpus dimension differs from config");

  WarmState w;
  const MatrixXd train = corpus.features.leftCols(n);
  const auto km = kmeans<double>(train.transpose(), cfg.k_init, cfg.kmeans_iters, cfg.seed);
  w.initial_labels = km.assignment;

  w.student = init_model<double>(corpus.features.rows(), cfg.hidden_dims, cfg.embedding_dim, cfg.k_init, cfg.seed);
  if (cfg.predictor_centroid_init) {
    // Predictor rows start at the cluster means of the initial embeddings.
    const MatrixXd z = encode_batch(w.student, train);
    MatrixXd sums = MatrixXd::Zero(cfg.k_init, z.rows());
    VectorXd counts = VectorXd::Zero(cfg.k_init);
    for (int i = 0; i < n; ++i) {
      sums.row(w.initial_labels[i]) += z.col(i).transpose();
      counts(w.initial_labels[i]) += 1;
    }
    for (int k = 0; k < cfg.k_init; ++k)
      if (counts(k) > 0) w.student.predictor_weight.row(k) = sums.row(k) / counts(k);
    w.student.predictor_bias.setZero();
  }

  TrainOptions opt{head_options(cfg), cfg.dropout};
  opt.head.margin = 0.0;  // no margin on frozen initial labels
  Adam<double> adam(w.student);
  const int per_epoch = batches_per_epoch(cfg, n);
  const std::int64_t total = static_cast<std::int64_t>(cfg.warmup_epochs) * per_epoch;
  std::int64_t step = 0;
  const std::vector<double> ones(static_cast<std::size_t>(cfg.batch_size), 1.0);
  for (int epoch = 1; epoch <= cfg.warmup_epochs; ++epoch) {
    const auto order = epoch_order(cfg, n, epoch);
    double loss_sum = 0;
    for (int b = 0; b < per_epoch; ++b) {
      const auto idx = batch_span(order, b, cfg.batch_size);
      const MatrixXd x = student_batch(cfg, corpus, idx, epoch);
      const auto y = gather_labels(w.initial_labels, idx);
      Rng drop(stream_seed(cfg.seed, kDropoutTag, static_cast<std::uint64_t>(step)));
      ModelParams<double> grad;
      const auto rep = loss_and_gradient<double>(w.student, x, y, std::span(ones).first(idx.size()), opt, &drop, &grad);
      check_finite_loss(rep.weighted_mean, epoch);
      loss_sum += rep.weighted_mean;
      adam.step(w.student, grad, cosine_lr(step, total, cfg.lr_warmup, cfg.lr_min));
      ++step;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.phase = "warmup";
    rec.mean_loss = loss_sum / per_epoch;
    rec.pseudo = evaluate_labels(w.initial_labels, w.student, corpus);
    w.log.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (hooks.on_checkpoint) hooks.on_checkpoint(epoch, w.student, w.student);
  }
  w.teacher = w.student;
  return w;
}

RunResult ssrl_run(const RunConfig& cfg, const Corpus& corpus, const WarmState& warm, const RunHooks& hooks) {
  cfg.validate();
  const int n = corpus.num_train;
  if (static_cast<int>(warm.initial_labels.size()) != n) throw ConfigError("ssrl: warm state does not match corpus");

  RunResult r;
  r.student = warm.student;
  r.teacher = warm.teacher;
  r.labels = warm.initial_labels;
  r.p_clean.assign(static_cast<std::size_t>(n), 1.0);
  std::vector<double> teacher_losses(static_cast<std::size_t>(n), 0.0);
  LabelQueue queue(n, cfg.effective_queue_length());
  Adam<double> adam(r.student);

  const bool naive = cfg.clustering == ClusteringMode::Naive;
  const bool sinkhorn = cfg.clustering == ClusteringMode::Sinkhorn;
  std::optional<PosteriorBuffer> buffer;
  if (sinkhorn) buffer.emplace(cfg.k_init, cfg.batch_size, cfg.sinkhorn_batches);
  const SinkhornOptions sk{cfg.sinkhorn_lambda, cfg.sinkhorn_max_iters, cfg.sinkhorn_tol};
  const HeadOptions teacher_head = head_options(cfg);

  // Queue-corrects a raw label and records the loss of the corrected label
  // under `probs`, column `col`.
  auto relabel = [&](int sample, int raw, const MatrixXd& probs, Eigen::Index col) {
    const int corrected = queue.enqueue_and_correct(sample, raw);
    r.labels[static_cast<std::size_t>(sample)] = corrected;
    teacher_losses[static_cast<std::size_t>(sample)] = -std::log(std::max(probs(corrected, col), kLogEpsilon));
    return corrected;
  };

  // A short remainder at the end of an epoch is solved only when it still
  // has K columns; otherwise it carries over into the next epoch.
  auto flush = [&]() {
    if (!buffer || buffer->width() < cfg.k_init) return;
    const MatrixXd scaled = buffer->matrix();
    const double width = static_cast<double>(buffer->width());
    const auto res = sinkhorn_assign(scaled, sk);
    const MatrixXd probs = scaled * width;
    for (int j = 0; j < buffer->width(); ++j)
      relabel(buffer->sample_indices()[static_cast<std::size_t>(j)], res.labels[static_cast<std::size_t>(j)],
              probs, j);
    buffer->clear();
  };

  const int per_epoch = batches_per_epoch(cfg, n);
  const std::int64_t total = static_cast<std::int64_t>(cfg.ssrl_epochs) * per_epoch;
  std::int64_t step = 0;
  for (int e = 1; e <= cfg.ssrl_epochs; ++e) {
    const int epoch = cfg.warmup_epochs + e;
    const auto order = epoch_order(cfg, n, epoch);
    TrainOptions opt{head_options(cfg), cfg.dropout};
    if (cfg.loss == LossKind::AdditiveAngularMargin && e < cfg.aam_margin_start_epoch) opt.head.margin = 0.0;

    double loss_sum = 0, lambda = 0;
    for (int b = 0; b < per_epoch; ++b) {
      const auto idx = batch_span(order, b, cfg.batch_size);
      const MatrixXd xs = student_batch(cfg, corpus, idx, epoch);
      std::vector<int> y;
      if (naive) {
        // The student labels its own (augmented) inputs.
        const MatrixXd ps = predict_batch(r.student, encode_batch(r.student, xs), teacher_head);
        y.resize(idx.size());
        for (std::size_t j = 0; j < idx.size(); ++j)
          y[j] = relabel(idx[j], argmax_assign(ps.col(static_cast<Eigen::Index>(j))), ps,
                         static_cast<Eigen::Index>(j));
      } else {
        y = gather_labels(r.labels, idx);
      }
      const auto w = gather_values(r.p_clean, idx);

      Rng drop(stream_seed(cfg.seed, kDropoutTag + 1, static_cast<std::uint64_t>(step)));
      ModelParams<double> grad;
      const auto rep = loss_and_gradient<double>(r.student, xs, y, w, opt, &drop, &grad);
      check_finite_loss(rep.weighted_mean, epoch);
      loss_sum += rep.weighted_mean;

      if (!naive) {
        const MatrixXd xt = gather(corpus.features, idx);
        const MatrixXd pt = predict_batch(r.teacher, encode_batch(r.teacher, xt), teacher_head);
        if (sinkhorn) {
          if (buffer->accumulate(pt, idx)) flush();
        } else {
          for (std::size_t j = 0; j < idx.size(); ++j) {
            const auto col = static_cast<Eigen::Index>(j);
            relabel(idx[j], argmax_assign(pt.col(col)), pt, col);
          }
        }
      }

      adam.step(r.student, grad, cosine_lr(step, total, cfg.lr_ssrl, cfg.lr_min));
      lambda = cfg.use_ema ? momentum_schedule(step, std::max<std::int64_t>(total - 1, 1), cfg.ema_start, cfg.ema_end)
                           : 0.0;
      ema_update(r.teacher, r.student, lambda);
      if (hooks.on_step) hooks.on_step(r.student, r.teacher, lambda);
      ++step;
    }
    flush();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.phase = "ssrl";
    rec.mean_loss = loss_sum / per_epoch;
    rec.ema_lambda = lambda;
    if (cfg.use_gmm) {
      rec.noise = fit_noise_gmm(teacher_losses);
      for (int i = 0; i < n; ++i) r.p_clean[i] = clean_probability(rec.noise, teacher_losses[i]);
    } else {
      rec.noise.degenerate = true;
      rec.noise.pi = 1.0;
    }
    rec.mean_p_clean = std::accumulate(r.p_clean.begin(), r.p_clean.end(), 0.0) / n;
    rec.pseudo = evaluate_labels(r.labels, r.teacher, corpus);
    r.log.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (hooks.on_checkpoint) hooks.on_checkpoint(epoch, r.student, r.teacher);
  }
  return r;
}

namespace {

nlohmann::json metrics_json(const MetricSet& m) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"nmi", m.nmi},         {"accuracy_pct", m.accuracy},      {"purity_pct", m.purity},
          {"active_clusters", m.active_clusters}, {"eer_pct", num(m.eer)}, {"min_dcf", num(m.min_dcf)}};
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

}  // namespace

std::string to_jsonl(const EpochRecord& r) {
  nlohmann::json j = {{"epoch", r.epoch},
                      {"phase", r.phase},
                      {"mean_loss", r.mean_loss},
                      {"mean_p_clean", r.mean_p_clean},
                      {"ema_lambda", r.ema_lambda}};
  j.update(metrics_json(r.pseudo));
  return j.dump();
}

std::string metrics_csv_row(const EpochRecord& r) {
  const auto& m = r.pseudo;
  return std::to_string(r.epoch) + "," + fmt(m.nmi) + "," + fmt(m.accuracy) + "," + fmt(m.purity) + "," +
         std::to_string(m.active_clusters) + "," + fmt(m.eer) + "," + fmt(m.min_dcf);
}

std::string noise_csv_row(const EpochRecord& r) {
  const auto& g = r.noise;
  return std::to_string(r.epoch) + "," + fmt(g.pi) + "," + fmt(g.mu1) + "," + fmt(std::sqrt(g.var1)) + "," +
         fmt(g.mu2) + "," + fmt(std::sqrt(g.var2)) + "," + fmt(r.mean_p_clean);
}

AblationAxis parse_axis(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
    throw ConfigError("axis must look like name=v1,v2,...: '" + spec + "'");
  AblationAxis axis{spec.substr(0, eq), {}};
  std::stringstream ss(spec.substr(eq + 1));
  std::string item;
  while (std::getline(ss, item, ',')) axis.values.push_back(item);
  RunConfig probe;
  for (const auto& v : axis.values) apply_setting(probe, axis.key, v);  // rejects unknown keys early
  return axis;
}

namespace {

// Config text with every SSRL-only field reset, so runs that agree on the
// warm-up inputs map to the same key.
std::string warm_key(RunConfig cfg) {
  const RunConfig d;
  cfg.ssrl_epochs = d.ssrl_epochs;
  cfg.lr_ssrl = d.lr_ssrl;
  cfg.ema_start = d.ema_start;
  cfg.ema_end = d.ema_end;
  cfg.aam_margin_start_epoch = d.aam_margin_start_epoch;
  cfg.clustering = d.clustering;
  cfg.sinkhorn_batches = d.sinkhorn_batches;
  cfg.sinkhorn_lambda = d.sinkhorn_lambda;
  cfg.sinkhorn_tol = d.sinkhorn_tol;
  cfg.sinkhorn_max_iters = d.sinkhorn_max_iters;
  cfg.queue_length = d.queue_length;
  cfg.use_ema = d.use_ema;
  cfg.use_queue = d.use_queue;
  cfg.use_gmm = d.use_gmm;
  cfg.checkpoint_every = d.checkpoint_every;
  return format_config(cfg);
}

}  // namespace

std::vector<AblationRow> ablation_matrix(const RunConfig& base, const std::vector<AblationAxis>& axes) {
  std::vector<AblationRow> rows{{"", base, {}, {}, 0}};
  for (const auto& axis : axes) {
    std::vector<AblationRow> next;
    for (const auto& row : rows) {
      for (const auto& v : axis.values) {
        AblationRow r = row;
        apply_setting(r.config, axis.key, v);
        r.label += (r.label.empty() ? "" : ";") + axis.key + "=" + v;
        next.push_back(std::move(r));
      }
    }
    rows = std::move(next);
  }
  if (rows.size() == 1 && rows[0].label.empty()) rows[0].label = "base";

  std::map<std::string, Corpus> corpora;
  std::map<std::string, WarmState> warm;
  for (auto& row : rows) {
    row.config.validate();
    const std::string ckey = row.config.corpus_path.empty()
                                 ? format_config([&] { RunConfig c; c.corpus = row.config.corpus; return c; }())
                                 : row.config.corpus_path;
    auto cit = corpora.find(ckey);
    if (cit == corpora.end()) cit = corpora.emplace(ckey, corpus_for(row.config)).first;
    const Corpus& corpus = cit->second;
    const std::string wkey = ckey + "\n" + warm_key(row.config);
    auto wit = warm.find(wkey);
    if (wit == warm.end()) wit = warm.emplace(wkey, warmup(row.config, corpus)).first;
    const WarmState& w = wit->second;
    const RunResult res = ssrl_run(row.config, corpus, w);
    const HeadOptions head = head_options(row.config);
    row.warm_metrics = evaluate(w.student, corpus, head);
    row.final_metrics = evaluate(res.teacher, corpus, head);
    row.converged_k = active_cluster_count(res.labels);
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "config,eer_pct,nmi,accuracy_pct,purity_pct,converged_k\n";
  for (const auto& r : rows) {
    const auto& m = r.final_metrics;
    out += "\"" + r.label + "\"," + fmt(m.eer) + "," + fmt(m.nmi) + "," + fmt(m.accuracy) + "," + fmt(m.purity) +
           "," + std::to_string(r.converged_k) + "\n";
  }
  return out;
}

}  // namespace reflect
