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

#include "reflect/synth.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace reflect {

void CorpusSpec::validate() const {
  if (num_speakers < 2) throw ConfigError("corpus: need at least 2 speakers");
  if (utts_per_speaker < 2) throw ConfigError("corpus: need at least 2 utterances per speaker");
  if (heldout_per_speaker < 0) throw ConfigError("corpus: negative held-out count");
  if (input_dim < 1) throw ConfigError("corpus: input_dim must be positive");
  if (!(sigma_within > 0.0)) throw ConfigError("corpus: sigma_within must be positive");
  if (!(sigma_between > sigma_within)) throw ConfigError("corpus: sigma_between must exceed sigma_within");
}

SampleRecord Corpus::record(int index) const {
  if (index < 0 || index >= size()) throw ConfigError("corpus: sample index out of range");
  return {index, features.col(index), speakers[static_cast<std::size_t>(index)]};
}

Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  const int s_count = spec.num_speakers, n = spec.utts_per_speaker, h = spec.heldout_per_speaker;
  const int d = spec.input_dim;
  Corpus c;
  c.spec = spec;
  c.num_train = s_count * n;
  c.features.resize(d, static_cast<Eigen::Index>(s_count) * (n + h));
  c.speakers.resize(static_cast<std::size_t>(s_count) * (n + h));

  for (int s = 0; s < s_count; ++s) {
    Rng rng(stream_seed(spec.seed, 0x5eed, static_cast<std::uint64_t>(s)));
    VectorXd mean(d);
    for (int j = 0; j < d; ++j) mean(j) = standard_normal(rng);
    mean *= spec.sigma_between / mean.norm();
    auto draw = [&](int col) {
      for (int j = 0; j < d; ++j) c.features(j, col) = mean(j) + spec.sigma_within * standard_normal(rng);
      c.speakers[static_cast<std::size_t>(col)] = s;
    };
    for (int u = 0; u < n; ++u) draw(s * n + u);
    for (int u = 0; u < h; ++u) draw(c.num_train + s * h + u);
  }

  // Every same-speaker held-out pair, and as many distinct cross-speaker pairs.
  for (int s = 0; s < s_count; ++s)
    for (int a = 0; a < h; ++a)
      for (int b = a + 1; b < h; ++b)
        c.trials.push_back({c.num_train + s * h + a, c.num_train + s * h + b, true});
  const std::size_t targets = c.trials.size();
  const long heldout_total = static_cast<long>(s_count) * h;
  const long max_nontargets = heldout_total * (heldout_total - h) / 2;
  Rng rng(stream_seed(spec.seed, 0x7a1a));
  std::set<std::pair<int, int>> seen;
  while (c.trials.size() < 2 * targets && static_cast<long>(seen.size()) < max_nontargets) {
    int a = c.num_train + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(heldout_total)));
    int b = c.num_train + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(heldout_total)));
    if (c.speakers[a] == c.speakers[b]) continue;
    if (a > b) std::swap(a, b);
    if (!seen.insert({a, b}).second) continue;
    c.trials.push_back({a, b, false});
  }
  return c;
}

VectorXd teacher_view(const SampleRecord& record) { return record.features; }

void augment_into(Eigen::Ref<VectorXd> out, const ViewOptions& opt, Rng& rng) {
  if (opt.aug_strength < 0.0 || opt.mask_fraction < 0.0 || opt.mask_fraction > 1.0)
    throw ConfigError("student view: invalid augmentation parameters");
  if (uniform01(rng) >= opt.aug_probability) return;
  const double noise = opt.aug_strength * opt.sigma_within;
  for (Eigen::Index j = 0; j < out.size(); ++j) {
    if (noise > 0.0) out(j) += noise * standard_normal(rng);
    if (opt.mask_fraction > 0.0 && uniform01(rng) < opt.mask_fraction) out(j) = 0.0;
  }
}

VectorXd student_view(const SampleRecord& record, const ViewOptions& opt, Rng& rng) {
  VectorXd x = record.features;
  augment_into(x, opt, rng);
  return x;
}

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(item);
  return out;
}

template <typename T>
T parse_number(const std::string& s, const char* what) {
  T v{};
  const char* b = s.data();
  const char* e = s.data() + s.size();
  while (b < e && *b == ' ') ++b;
  const auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || ptr != e) throw ConfigError(std::string("corpus: bad ") + what + " '" + s + "'");
  return v;
}

}  // namespace

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "corpus.csv");
  if (!os) throw ConfigError("cannot write " + (dir / "corpus.csv").string());
  const auto& s = corpus.spec;
  os << "# S=" << s.num_speakers << " n=" << s.utts_per_speaker << " D_in=" << s.input_dim
     << " seed=" << s.seed << " heldout=" << s.heldout_per_speaker << " sigma_w=" << std::setprecision(17)
     << s.sigma_within << " sigma_b=" << s.sigma_between << "\n";
  for (int i = 0; i < corpus.size(); ++i) {
    os << i << ',' << corpus.speakers[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < corpus.features.rows(); ++j) os << ',' << corpus.features(j, i);
    os << '\n';
  }
  std::ofstream ts(dir / "trials.csv");
  if (!ts) throw ConfigError("cannot write " + (dir / "trials.csv").string());
  for (const auto& t : corpus.trials) ts << t.a << ',' << t.b << ',' << (t.target ? 1 : 0) << '\n';
}

Corpus read_corpus(const std::filesystem::path& dir) {
  std::ifstream is(dir / "corpus.csv");
  if (!is) throw ConfigError("cannot open " + (dir / "corpus.csv").string());
  std::string line;
  if (!std::getline(is, line) || line.rfind("# ", 0) != 0) throw ConfigError("corpus: missing header line");
  Corpus c;
  bool have[4] = {false, false, false, false};
  for (const auto& kv : split(line.substr(2), ' ')) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
    if (key == "S") c.spec.num_speakers = parse_number<int>(val, "S"), have[0] = true;
    else if (key == "n") c.spec.utts_per_speaker = parse_number<int>(val, "n"), have[1] = true;
    else if (key == "D_in") c.spec.input_dim = parse_number<int>(val, "D_in"), have[2] = true;
    else if (key == "seed") c.spec.seed = parse_number<std::uint64_t>(val, "seed"), have[3] = true;
    else if (key == "heldout") c.spec.heldout_per_speaker = parse_number<int>(val, "heldout");
    else if (key == "sigma_w") c.spec.sigma_within = parse_number<double>(val, "sigma_w");
    else if (key == "sigma_b") c.spec.sigma_between = parse_number<double>(val, "sigma_b");
  }
  if (!(have[0] && have[1] && have[2] && have[3])) throw ConfigError("corpus: header lacks S, n, D_in or seed");
  c.num_train = c.spec.num_speakers * c.spec.utts_per_speaker;

  std::vector<std::vector<double>> cols;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (static_cast<int>(f.size()) != 2 + c.spec.input_dim) throw ConfigError("corpus: wrong field count");
    if (parse_number<int>(f[0], "index") != static_cast<int>(cols.size()))
      throw ConfigError("corpus: indices must be consecutive from 0");
    c.speakers.push_back(parse_number<int>(f[1], "speaker_id"));
    std::vector<double> col(static_cast<std::size_t>(c.spec.input_dim));
    for (int j = 0; j < c.spec.input_dim; ++j) col[j] = parse_number<double>(f[2 + j], "feature");
    cols.push_back(std::move(col));
  }
  if (static_cast<int>(cols.size()) < c.num_train) throw ConfigError("corpus: fewer rows than S*n");
  c.features.resize(c.spec.input_dim, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i)
    for (int j = 0; j < c.spec.input_dim; ++j) c.features(j, static_cast<Eigen::Index>(i)) = cols[i][j];

  std::ifstream ts(dir / "trials.csv");
  if (ts) {
    while (std::getline(ts, line)) {
      if (line.empty()) continue;
      const auto f = split(line, ',');
      if (f.size() != 3) throw ConfigError("trials: expected idx_a,idx_b,is_target");
      Trial t{parse_number<int>(f[0], "idx_a"), parse_number<int>(f[1], "idx_b"), parse_number<int>(f[2], "is_target") != 0};
      if (t.a < 0 || t.b < 0 || t.a >= c.size() || t.b >= c.size()) throw ConfigError("trials: index out of range");
      c.trials.push_back(t);
    }
  }
  return c;
}

}  // namespace reflect
