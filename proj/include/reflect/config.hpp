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

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "reflect/encoder.hpp"
#include "reflect/synth.hpp"

namespace reflect {

enum class ClusteringMode { Argmax, Sinkhorn, Naive };

/// Everything a training run depends on. Config files are `key = value`
/// lines ('#' starts a comment); keys are the field names below.
struct RunConfig {
  // Corpus: generated from `corpus` unless corpus_path names a gen-data dir.
  std::string corpus_path;
  CorpusSpec corpus;

  // Model.
  std::vector<int> hidden_dims{64, 64};
  int embedding_dim = 32;
  int k_init = 80;
  bool predictor_centroid_init = true;
  int kmeans_iters = 100;

  // Schedule.
  int warmup_epochs = 20;
  int ssrl_epochs = 60;
  int batch_size = 100;
  double lr_warmup = 1e-2;
  double lr_ssrl = 1e-2;
  double lr_min = 1e-5;
  double ema_start = 0.99;
  double ema_end = 0.995;

  // Student loss.
  LossKind loss = LossKind::CrossEntropy;
  double aam_margin = 0.2;
  double aam_scale = 32.0;
  int aam_margin_start_epoch = 1;  // first SSRL epoch using the margin
  double dropout = 0.1;

  // Student view.
  double aug_strength = 1.0;
  double mask_fraction = 0.3;
  double aug_probability = 2.0 / 3.0;

  // Online clustering.
  ClusteringMode clustering = ClusteringMode::Argmax;
  int sinkhorn_batches = 4;
  double sinkhorn_lambda = 25.0;
  double sinkhorn_tol = 1e-6;
  int sinkhorn_max_iters = 300;
  int queue_length = 5;

  // Ablation toggles.
  bool use_ema = true;
  bool use_queue = true;
  bool use_gmm = true;

  std::uint64_t seed = 0;
  int checkpoint_every = 10;

  void validate() const;
  /// Effective queue capacity (1 when the queue is disabled).
  int effective_queue_length() const { return use_queue ? queue_length : 1; }
};

/// Applies one `key = value` setting; unknown keys throw ConfigError.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

RunConfig parse_config(std::istream& is);
RunConfig load_config(const std::filesystem::path& path);

/// Every key with its current value, in parse_config syntax.
std::string format_config(const RunConfig& cfg);

/// Corpus spec files use the corpus keys of RunConfig without the prefix
/// (num_speakers, utts_per_speaker, heldout_per_speaker, input_dim,
/// sigma_within, sigma_between, seed).
CorpusSpec load_corpus_spec(const std::filesystem::path& path);

std::string to_string(ClusteringMode m);
std::string to_string(LossKind k);

}  // namespace reflect
