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

// Seeded synthetic "speaker" corpus: Gaussian clouds around speaker means on
// a sphere, plus held-out utterances for verification trials.

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "reflect/common.hpp"
#include "reflect/metrics.hpp"

namespace reflect {

struct CorpusSpec {
  int num_speakers = 50;
  int utts_per_speaker = 40;
  int heldout_per_speaker = 4;  // verification-only utterances
  int input_dim = 32;
  double sigma_within = 1.0;
  double sigma_between = 5.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SampleRecord {
  int index = 0;
  VectorXd features;
  int speaker = 0;  // evaluation only
};

/// Training utterances occupy indices [0, num_train); held-out utterances
/// follow. Truth labels live here and are read only by evaluation code.
struct Corpus {
  CorpusSpec spec;
  MatrixXd features;          // input_dim x total, one utterance per column
  std::vector<int> speakers;  // per utterance
  int num_train = 0;
  std::vector<Trial> trials;  // over held-out utterances

  int size() const { return static_cast<int>(speakers.size()); }
  SampleRecord record(int index) const;
  std::vector<int> train_truth() const {
    return {speakers.begin(), speakers.begin() + num_train};
  }
};

Corpus generate_corpus(const CorpusSpec& spec);

struct ViewOptions {
  double aug_strength = 1.0;     // noise scale in units of sigma_within
  double mask_fraction = 0.2;    // per-coordinate masking probability
  double aug_probability = 2.0 / 3.0;
  double sigma_within = 1.0;
};

/// Clean stored features.
VectorXd teacher_view(const SampleRecord& record);

/// With probability aug_probability: features + N(0, (aug_strength *
/// sigma_within)^2 I), then each coordinate zeroed with probability
/// mask_fraction. Otherwise the clean features.
VectorXd student_view(const SampleRecord& record, const ViewOptions& opt, Rng& rng);

/// Same as student_view on a raw feature column, writing into `out`.
void augment_into(Eigen::Ref<VectorXd> out, const ViewOptions& opt, Rng& rng);

// corpus.csv: "# S=.. n=.. D_in=.. seed=.. heldout=.. sigma_w=.. sigma_b=.."
// then "index,speaker_id,f1,...,fD" rows; trials.csv: "idx_a,idx_b,is_target".
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);

}  // namespace reflect
