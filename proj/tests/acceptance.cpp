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

// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Training criteria run on the default corpus and config.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>

#include "grad_check.hpp"
#include "oracles.hpp"
#include "reflect/checkpoint.hpp"
#include "reflect/clustering.hpp"
#include "reflect/labeling.hpp"
#include "reflect/metrics.hpp"
#include "reflect/optim.hpp"
#include "reflect/pipeline.hpp"

using namespace reflect;

namespace {

// Pinned tolerances.
constexpr int kSinkhornInstances = 200;
constexpr double kSinkhornLambda = 50.0;
constexpr double kSinkhornObjectiveRatio = 0.99;
constexpr double kMarginalTolerance = 1e-6;
constexpr double kSinkhornSeconds = 5.0;
constexpr int kHungarianPairs = 200;
constexpr int kGradientModels = 100;
constexpr double kGradientRelative = 1e-4;
constexpr double kGradientAbsolute = 1e-8;  // entries with both values below 1e-5
constexpr double kEmaDecayTolerance = 1e-10;
constexpr double kEmaDirectTolerance = 1e-15;
constexpr double kLikelihoodSlack = 1e-9;
constexpr double kGmmMeanTolerance = 0.1;
constexpr double kGmmWeightTolerance = 0.1;
constexpr double kNaiveClusterFraction = 0.2;
constexpr double kFullClusterLow = 0.5;   // times k_init
constexpr double kFullClusterHigh = 1.2;  // times the speaker count
constexpr double kTrainingSeconds = 600.0;
constexpr double kImprovementPoints = 5.0;
constexpr double kClusterVariation = 0.02;
constexpr int kStableWindow = 10;
constexpr double kEerTolerance = 1e-12;  // interpolated crossing vs exact rational reference
constexpr std::uint64_t kTrainingSeeds[] = {0, 1, 2};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = true;
  std::ostringstream detail;
};

int failures = 0;

void report(int id, const char* name, const Verdict& v) {
  std::printf("criterion %2d: %s  %s  %s\n", id, v.pass ? "PASS" : "FAIL", name, v.detail.str().c_str());
  std::fflush(stdout);
  if (!v.pass) ++failures;
}

MatrixXd random_posteriors(Rng& rng, int k, int n) {
  const double spread = 0.5 + 3.5 * uniform01(rng);
  MatrixXd logits(k, n);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = spread * standard_normal(rng);
  return softmax_columns(logits);
}

void sinkhorn_criterion() {
  Verdict v;
  Rng rng(101);
  double worst_ratio = 1e9, worst_violation = 0;
  int below = 0;
  const auto t0 = Clock::now();
  for (int t = 0; t < kSinkhornInstances; ++t) {
    // balanced instances need N to be a multiple of K
    const int k = 2 + static_cast<int>(uniform_index(rng, 3));
    const int n = k * (1 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(8 / k))));
    const MatrixXd post = random_posteriors(rng, k, n);
    const auto res = sinkhorn_assign<double>(post / n, {kSinkhornLambda, 5000, 1e-9});
    double hard = 0;
    for (int i = 0; i < n; ++i) hard += post(res.labels[i], i);
    const double ratio = hard / oracle::balanced_assignment_value(post);
    worst_ratio = std::min(worst_ratio, ratio);
    below += ratio < kSinkhornObjectiveRatio;
    worst_violation = std::max(worst_violation, res.max_violation);
  }
  const double elapsed = seconds_since(t0);
  v.pass = worst_ratio >= kSinkhornObjectiveRatio && worst_violation < kMarginalTolerance && elapsed < kSinkhornSeconds;
  v.detail << "worst objective ratio " << worst_ratio << " (" << below << " instances below " << kSinkhornObjectiveRatio
           << "), worst marginal violation " << worst_violation << ", "
           << elapsed << " s";
  report(1, "sinkhorn vs balanced brute force", v);
}

std::vector<int> random_labels(Rng& rng, std::size_t n, int k) {
  std::vector<int> out(n);
  for (auto& x : out) x = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(k)));
  return out;
}

void hungarian_criterion() {
  Verdict v;
  Rng rng(202);
  int mismatches = 0;
  for (int t = 0; t < kHungarianPairs; ++t) {
    const int kp = 1 + static_cast<int>(uniform_index(rng, 6));
    const int kt = 1 + static_cast<int>(uniform_index(rng, 6));
    const std::size_t n = 1 + uniform_index(rng, 60);
    const auto p = random_labels(rng, n, kp), q = random_labels(rng, n, kt);
    if (hungarian_accuracy(p, q) != oracle::brute_accuracy(p, q)) ++mismatches;
  }
  v.pass = mismatches == 0;
  v.detail << mismatches << " of " << kHungarianPairs << " pairs differ from brute force";
  report(2, "hungarian accuracy vs brute force", v);
}

void gradient_criterion() {
  Verdict v;
  double rel = 0, abs_err = 0;
  for (int m = 0; m < kGradientModels; ++m) {
    const auto kind = m % 2 ? LossKind::AdditiveAngularMargin : LossKind::CrossEntropy;
    const auto pr = gradcheck::random_problem(1000 + m / 2, kind, m % 4 < 2 ? 0.0 : 0.3);
    const auto r = gradcheck::compare(pr, 1e-6, 1e-5);
    rel = std::max(rel, r.worst_relative);
    abs_err = std::max(abs_err, r.worst_absolute);
  }
  v.pass = rel < kGradientRelative && abs_err < kGradientAbsolute;
  v.detail << kGradientModels << " models, worst relative error " << rel << ", worst absolute error " << abs_err;
  report(3, "finite-difference gradients (ce, aam)", v);
}

double max_abs_diff(const ModelParams<double>& a, const ModelParams<double>& b) {
  double worst = 0;
  ModelParams<double> tmp = a;
  zip_tensors(tmp, b, [&](auto& x, const auto& y) { worst = std::max(worst, (x - y).cwiseAbs().maxCoeff()); });
  return worst;
}

void ema_criterion() {
  Verdict v;
  const auto student = init_model<double>(6, {7}, 4, 5, 1);
  const auto start = init_model<double>(6, {7}, 4, 5, 2);
  double decay_err = 0;
  for (double lambda : {0.5, 0.9, 0.99, 0.999}) {
    auto t = start;
    for (int step = 0; step < 10; ++step) ema_update(t, student, lambda);
    auto expect = start;
    zip_tensors(expect, student, [&](auto& q, const auto& s) { q = (s + std::pow(lambda, 10) * (q - s)).eval(); });
    decay_err = std::max(decay_err, max_abs_diff(t, expect));
  }
  auto copy = start;
  ema_update(copy, student, 0.0);
  auto fixed = student;
  ema_update(fixed, student, 0.9999);
  double direct_err = 0;
  for (double lambda : {0.1, 0.75, 0.999}) {
    auto t = start, direct = start;
    ema_update(t, student, lambda);
    zip_tensors(direct, student, [&](auto& x, const auto& y) { x = (lambda * x + (1 - lambda) * y).eval(); });
    direct_err = std::max(direct_err, max_abs_diff(t, direct));
  }
  const bool identities = copy == student && fixed == student;
  v.pass = decay_err < kEmaDecayTolerance && identities && direct_err < kEmaDirectTolerance;
  v.detail << "lambda^10 decay error " << decay_err << ", copy/fixed-point exact " << (identities ? "yes" : "no")
           << ", affine form error " << direct_err;
  report(4, "EMA contract", v);
}

void gmm_criterion() {
  Verdict v;
  Rng rng(505);
  double worst_drop = 0;
  int fits = 0;
  for (int t = 0; t < 200; ++t) {
    const int n = 2 + static_cast<int>(uniform_index(rng, 400));
    std::vector<double> losses(static_cast<std::size_t>(n));
    for (auto& l : losses) {
      switch (t % 5) {
        case 0: l = std::exp(standard_normal(rng)); break;
        case 1: l = uniform01(rng) * 10; break;
        case 2: l = uniform01(rng) < 0.2 ? 0.0 : std::exp(-1 + 0.05 * standard_normal(rng)); break;
        case 3: l = std::exp(uniform01(rng) < 0.6 ? -4 + standard_normal(rng) : 0.5 * standard_normal(rng)); break;
        default: l = std::round(uniform01(rng) * 3) + 1; break;  // few distinct values
      }
    }
    const auto m = fit_noise_gmm(losses);
    for (std::size_t i = 1; i < m.log_likelihood.size(); ++i)
      worst_drop = std::max(worst_drop, m.log_likelihood[i - 1] - m.log_likelihood[i]);
    ++fits;
  }
  struct Case {
    double mu1, mu2, pi, sigma;
  };
  double mean_err = 0, weight_err = 0;
  for (const Case c : {Case{-3.0, 0.0, 0.5, 0.2}, Case{-2.0, 1.0, 0.7, 0.3}, Case{-4.5, -1.5, 0.3, 0.4}}) {
    std::vector<double> losses;
    for (int i = 0; i < 3000; ++i) {
      const bool clean = uniform01(rng) < c.pi;
      losses.push_back(std::exp((clean ? c.mu1 : c.mu2) + c.sigma * standard_normal(rng)));
    }
    const auto m = fit_noise_gmm(losses);
    mean_err = std::max({mean_err, std::abs(m.mu1 - c.mu1), std::abs(m.mu2 - c.mu2)});
    weight_err = std::max(weight_err, std::abs(m.pi - c.pi));
  }
  v.pass = worst_drop <= kLikelihoodSlack && mean_err < kGmmMeanTolerance && weight_err < kGmmWeightTolerance;
  v.detail << fits << " fits, largest log-likelihood drop " << worst_drop << "; recovery mean error " << mean_err
           << ", weight error " << weight_err;
  report(5, "GMM monotone EM and recovery", v);
}

// One warm-up per seed, shared by the variants trained from it.
struct SeedRuns {
  MetricSet warm;
  std::map<std::string, MetricSet> final_metrics;
  std::map<std::string, RunResult> results;
  double full_seconds = 0;
};

RunConfig variant(RunConfig cfg, const std::string& name) {
  if (name == "no_ema") cfg.use_ema = false;
  if (name == "no_queue") cfg.use_queue = false;
  if (name == "no_gmm") cfg.use_gmm = false;
  if (name == "queue_1") cfg.queue_length = 1;
  if (name == "naive") {
    cfg.clustering = ClusteringMode::Naive;
    cfg.use_ema = cfg.use_queue = cfg.use_gmm = false;
  }
  return cfg;
}

double mean_of(const std::vector<SeedRuns>& runs, const std::string& name) {
  double s = 0;
  for (const auto& r : runs) s += r.final_metrics.at(name).accuracy;
  return s / static_cast<double>(runs.size());
}

struct TrainingRuns {
  RunConfig base;
  Corpus corpus;
  std::vector<SeedRuns> seeds;
  RunResult naive;
  double naive_seconds = 0;
  int naive_min_clusters = 0;
  std::string log_a, log_b, ckpt_a, ckpt_b;
};

std::string log_text(const WarmState& w, const RunResult& r) {
  std::string out;
  for (const auto& rec : w.log) out += to_jsonl(rec) + "\n" + metrics_csv_row(rec) + "\n";
  for (const auto& rec : r.log) out += to_jsonl(rec) + "\n" + metrics_csv_row(rec) + "\n" + noise_csv_row(rec) + "\n";
  return out;
}

TrainingRuns train_all() {
  TrainingRuns t;
  t.base = RunConfig{};
  t.corpus = corpus_for(t.base);
  const std::vector<std::string> names{"full", "no_ema", "no_queue", "no_gmm", "queue_1"};
  for (std::uint64_t seed : kTrainingSeeds) {
    RunConfig cfg = t.base;
    cfg.seed = seed;
    SeedRuns s;
    const auto t0 = Clock::now();
    const WarmState warm = warmup(cfg, t.corpus);
    s.warm = evaluate(warm.student, t.corpus, head_options(cfg));
    for (const auto& name : names) {
      const RunConfig vc = variant(cfg, name);
      RunResult r = ssrl_run(vc, t.corpus, warm);
      if (name == "full") {
        s.full_seconds = seconds_since(t0);
        if (seed == kTrainingSeeds[0]) {
          t.log_a = log_text(warm, r);
          t.ckpt_a = encode_checkpoint(r.student) + encode_checkpoint(r.teacher);
        }
      }
      s.final_metrics[name] = evaluate(r.teacher, t.corpus, head_options(vc));
      std::fprintf(stderr, "  seed %llu %-8s accuracy %.2f  clusters %d\n", static_cast<unsigned long long>(seed), name.c_str(),
                  s.final_metrics[name].accuracy, active_cluster_count(r.labels));
      s.results.emplace(name, std::move(r));
    }
    t.seeds.push_back(std::move(s));
  }

  const RunConfig naive = variant(t.base, "naive");
  const auto t0 = Clock::now();
  const WarmState warm = warmup(naive, t.corpus);
  t.naive = ssrl_run(naive, t.corpus, warm);
  t.naive_seconds = seconds_since(t0);
  t.naive_min_clusters = naive.k_init;
  for (const auto& rec : t.naive.log) t.naive_min_clusters = std::min(t.naive_min_clusters, rec.pseudo.active_clusters);

  // independent second run of the first seed
  RunConfig again = t.base;
  again.seed = kTrainingSeeds[0];
  const Corpus corpus = corpus_for(again);
  const WarmState w2 = warmup(again, corpus);
  const RunResult r2 = ssrl_run(again, corpus, w2);
  t.log_b = log_text(w2, r2);
  t.ckpt_b = encode_checkpoint(r2.student) + encode_checkpoint(r2.teacher);
  return t;
}

void collapse_criterion(const TrainingRuns& t) {
  Verdict v;
  const int k = t.base.k_init;
  const int naive_final = active_cluster_count(t.naive.labels);
  const double low = kFullClusterLow * k, high = kFullClusterHigh * t.base.corpus.num_speakers;
  v.pass = naive_final < kNaiveClusterFraction * k && t.naive_seconds < kTrainingSeconds;
  v.detail << "naive final " << naive_final << " (min " << t.naive_min_clusters << ") of " << k << " clusters in "
           << t.naive_seconds << " s; full:";
  for (const auto& s : t.seeds) {
    const int c = active_cluster_count(s.results.at("full").labels);
    v.pass = v.pass && c >= low && c <= high && s.full_seconds < kTrainingSeconds;
    v.detail << " " << c << " (" << s.full_seconds << " s)";
  }
  v.detail << " in [" << low << ", " << high << "]";
  report(6, "naive collapse vs full cluster retention", v);
}

void improvement_criterion(const TrainingRuns& t) {
  Verdict v;
  double acc_gain = 0, warm_nmi = 0, final_nmi = 0, warm_purity = 0, final_purity = 0, warm_acc = 0;
  for (const auto& s : t.seeds) {
    const auto& f = s.final_metrics.at("full");
    warm_acc += s.warm.accuracy;
    acc_gain += f.accuracy - s.warm.accuracy;
    warm_nmi += s.warm.nmi;
    final_nmi += f.nmi;
    warm_purity += s.warm.purity;
    final_purity += f.purity;
  }
  const double n = static_cast<double>(t.seeds.size());
  v.pass = acc_gain / n >= kImprovementPoints && final_nmi >= warm_nmi && final_purity >= warm_purity;
  v.detail << "accuracy " << warm_acc / n << " -> " << mean_of(t.seeds, "full") << " (+" << acc_gain / n
           << "), nmi " << warm_nmi / n << " -> " << final_nmi / n << ", purity " << warm_purity / n << " -> "
           << final_purity / n;
  report(7, "improvement over the warm-up model", v);
}

void convergence_criterion(const TrainingRuns& t) {
  Verdict v;
  v.detail << "last " << kStableWindow << " epochs:";
  for (const auto& s : t.seeds) {
    const auto& log = s.results.at("full").log;
    int lo = 1 << 30, hi = 0;
    for (std::size_t i = log.size() - std::min<std::size_t>(log.size(), kStableWindow); i < log.size(); ++i) {
      lo = std::min(lo, log[i].pseudo.active_clusters);
      hi = std::max(hi, log[i].pseudo.active_clusters);
    }
    const double variation = hi > 0 ? static_cast<double>(hi - lo) / hi : 0.0;
    v.pass = v.pass && log.size() >= kStableWindow && variation <= kClusterVariation;
    v.detail << " [" << lo << ", " << hi << "]";
  }
  report(8, "cluster count convergence", v);
}

void ablation_criterion(const TrainingRuns& t) {
  Verdict v;
  const double full = mean_of(t.seeds, "full");
  v.detail << "mean accuracy full " << full;
  for (const char* name : {"no_ema", "no_queue", "no_gmm"}) {
    const double m = mean_of(t.seeds, name);
    v.pass = v.pass && m <= full;
    v.detail << ", " << name << " " << m;
  }
  const double q1 = mean_of(t.seeds, "queue_1");
  v.pass = v.pass && full >= q1;
  v.detail << ", queue length " << t.base.queue_length << " " << full << " vs 1 " << q1;
  report(9, "ablation directions", v);
}

// std::vector<bool> has no contiguous storage to view.
struct Flags {
  std::unique_ptr<bool[]> data;
  std::size_t n;
  explicit Flags(std::size_t size) : data(new bool[size]()), n(size) {}
  std::span<const bool> span() const { return {data.get(), n}; }
};

void metric_criterion() {
  Verdict v;
  const std::vector<double> fixture{0.9, 0.4, 0.6, 0.1};
  Flags ft(4);
  ft.data[0] = ft.data[1] = true;
  const double fixed_eer = eer(fixture, ft.span());
  double eer_err = std::abs(fixed_eer - 25.0);
  int dcf_mismatch = 0;
  Rng rng(1010);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 2 + uniform_index(rng, 60);
    std::vector<double> s(n);
    Flags f(n);
    for (std::size_t i = 0; i < n; ++i) {
      f.data[i] = i == 0 || (i != 1 && uniform01(rng) < 0.3);
      const double raw = (f.data[i] ? 1.0 : 0.0) + standard_normal(rng);
      s[i] = t % 2 ? std::round(raw * 3) / 3 : raw;  // odd fixtures carry ties
    }
    eer_err = std::max(eer_err, std::abs(eer(s, f.span()) - oracle::hull_eer(s, f.span())));
    if (min_dcf(s, f.span()) != oracle::brute_min_dcf(s, f.span(), 1.0, 1.0, 0.05)) ++dcf_mismatch;
  }
  const DcfParams d;
  const bool params = d.c_miss == 1.0 && d.c_fa == 1.0 && d.p_target == 0.05;
  v.pass = eer_err <= kEerTolerance && dcf_mismatch == 0 && params;
  v.detail << "four-trial EER " << fixed_eer << "%, worst EER error " << eer_err << ", minDCF mismatches "
           << dcf_mismatch << ", cost params (1, 1, 0.05) " << (params ? "yes" : "no");
  report(10, "EER and minDCF vs exhaustive thresholds", v);
}

void reproducibility_criterion(const TrainingRuns& t) {
  Verdict v;
  v.pass = !t.ckpt_a.empty() && t.ckpt_a == t.ckpt_b && t.log_a == t.log_b;
  v.detail << "checkpoints " << t.ckpt_a.size() << " bytes " << (t.ckpt_a == t.ckpt_b ? "identical" : "differ")
           << ", logs " << t.log_a.size() << " bytes " << (t.log_a == t.log_b ? "identical" : "differ");
  report(11, "byte-identical reruns", v);
}

}  // namespace

int main() {
  try {
    sinkhorn_criterion();
    hungarian_criterion();
    gradient_criterion();
    ema_criterion();
    gmm_criterion();
    const TrainingRuns runs = train_all();
    collapse_criterion(runs);
    improvement_criterion(runs);
    convergence_criterion(runs);
    ablation_criterion(runs);
    metric_criterion();
    reproducibility_criterion(runs);
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
