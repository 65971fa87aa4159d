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

// End-to-end training: k-means initial labels, warm-up on frozen labels,
// then the teacher/student loop with online relabeling, label queues and
// loss-based sample weighting.

#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "reflect/config.hpp"
#include "reflect/encoder.hpp"
#include "reflect/labeling.hpp"
#include "reflect/synth.hpp"

namespace reflect {

struct MetricSet {
  double nmi = 0;
  double accuracy = 0;  // percent
  double purity = 0;    // percent
  int active_clusters = 0;
  double eer = 0;  // percent
  double min_dcf = 0;
};

struct EpochRecord {
  int epoch = 0;  // 1-based, warm-up epochs first
  std::string phase;  // "warmup" or "ssrl"
  double mean_loss = 0;
  MetricSet pseudo;  // current pseudo labels vs truth, EER from teacher embeddings
  double mean_p_clean = 1;
  double ema_lambda = 0;  // last momentum used in the epoch
  NoiseModel noise;       // fitted after the epoch (ssrl only)
};

std::string to_jsonl(const EpochRecord& r);
/// epoch,nmi,accuracy_pct,purity_pct,active_clusters,eer_pct,min_dcf
std::string metrics_csv_row(const EpochRecord& r);
/// epoch,pi,mu1,sigma1,mu2,sigma2,mean_p_clean
std::string noise_csv_row(const EpochRecord& r);

/// Per-epoch callback; returning normally continues training.
using EpochObserver = std::function<void(const EpochRecord&)>;

struct WarmState {
  ModelParams<double> student;
  ModelParams<double> teacher;
  std::vector<int> initial_labels;
  std::vector<EpochRecord> log;
};

struct RunResult {
  ModelParams<double> student;
  ModelParams<double> teacher;
  std::vector<int> labels;  // final corrected pseudo labels
  std::vector<double> p_clean;
  std::vector<EpochRecord> log;  // SSRL epochs only
};

/// Optional hooks used by tests and the CLI.
struct RunHooks {
  EpochObserver on_epoch;
  /// Called after every optimizer step + EMA update with (student, teacher, lambda).
  std::function<void(const ModelParams<double>&, const ModelParams<double>&, double)> on_step;
  /// Called after each completed epoch with the models; used for checkpoints.
  std::function<void(int epoch, const ModelParams<double>&, const ModelParams<double>&)> on_checkpoint;
};

/// Loads the corpus named by the config, or generates it.
Corpus corpus_for(const RunConfig& cfg);

/// Initial labels from k-means on raw training features, student trained on
/// them for warmup_epochs, teacher copied from the student.
WarmState warmup(const RunConfig& cfg, const Corpus& corpus, const RunHooks& hooks = {});

/// The relabeling loop for ssrl_epochs starting from `warm`.
RunResult ssrl_run(const RunConfig& cfg, const Corpus& corpus, const WarmState& warm,
                   const RunHooks& hooks = {});

/// Labels are the model's argmax on clean training views; EER/minDCF use
/// cosine scores of the model's embeddings over the corpus trials.
MetricSet evaluate(const ModelParams<double>& model, const Corpus& corpus, const HeadOptions& head = {});

/// Metrics for a given label vector plus EER/minDCF from `model`.
MetricSet evaluate_labels(std::span<const int> labels, const ModelParams<double>& model, const Corpus& corpus);

HeadOptions head_options(const RunConfig& cfg);

struct AblationAxis {
  std::string key;
  std::vector<std::string> values;
};

/// Parses `name=v1,v2,...`.
AblationAxis parse_axis(const std::string& spec);

struct AblationRow {
  std::string label;  // "key=value;key=value"
  RunConfig config;
  MetricSet final_metrics;  // evaluate() of the final teacher
  MetricSet warm_metrics;   // evaluate() of the warm-up model
  int converged_k = 0;      // active pseudo-label clusters at the end
};

/// Cartesian product of the axes applied over `base`; every row shares the
/// base seed. Warm-up results are reused across rows that share them.
std::vector<AblationRow> ablation_matrix(const RunConfig& base, const std::vector<AblationAxis>& axes);

/// config,eer_pct,nmi,accuracy_pct,purity_pct,converged_k
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace reflect
