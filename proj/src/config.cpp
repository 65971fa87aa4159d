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

#include "reflect/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace reflect {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_num(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError("not a number" + (key.empty() ? std::string() : " for " + key));
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("expected true or false" + (key.empty() ? std::string() : " for " + key));
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  if (v.empty() || v == "none") return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_num<int>(key, trim(item)));
  return out;
}

// Shortest text that parses back to the same double.
std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field num_field(T RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& v) { c.*member = parse_num<T>("", v); },
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return fmt(c.*member);
            else return std::to_string(c.*member);
          }};
}

template <typename T>
Field corpus_field(T CorpusSpec::*member) {
  return {[member](RunConfig& c, const std::string& v) { c.corpus.*member = parse_num<T>("", v); },
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return fmt(c.corpus.*member);
            else return std::to_string(c.corpus.*member);
          }};
}

Field bool_field(bool RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& v) { c.*member = parse_bool("", v); },
          [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    t["corpus_path"] = {[](RunConfig& c, const std::string& v) { c.corpus_path = v; },
                        [](const RunConfig& c) { return c.corpus_path; }};
    t["num_speakers"] = corpus_field(&CorpusSpec::num_speakers);
    t["utts_per_speaker"] = corpus_field(&CorpusSpec::utts_per_speaker);
    t["heldout_per_speaker"] = corpus_field(&CorpusSpec::heldout_per_speaker);
    t["input_dim"] = corpus_field(&CorpusSpec::input_dim);
    t["sigma_within"] = corpus_field(&CorpusSpec::sigma_within);
    t["sigma_between"] = corpus_field(&CorpusSpec::sigma_between);
    t["corpus_seed"] = corpus_field(&CorpusSpec::seed);

    t["hidden_dims"] = {[](RunConfig& c, const std::string& v) { c.hidden_dims = parse_int_list("hidden_dims", v); },
                        [](const RunConfig& c) {
                          std::string s;
                          for (std::size_t i = 0; i < c.hidden_dims.size(); ++i)
                            s += (i ? "," : "") + std::to_string(c.hidden_dims[i]);
                          return s.empty() ? std::string("none") : s;
                        }};
    t["embedding_dim"] = num_field(&RunConfig::embedding_dim);
    t["k_init"] = num_field(&RunConfig::k_init);
    t["predictor_init"] = {[](RunConfig& c, const std::string& v) {
                             if (v == "centroid") c.predictor_centroid_init = true;
                             else if (v == "random") c.predictor_centroid_init = false;
                             else throw ConfigError("config: predictor_init must be centroid or random");
                           },
                           [](const RunConfig& c) {
                             return std::string(c.predictor_centroid_init ? "centroid" : "random");
                           }};
    t["kmeans_iters"] = num_field(&RunConfig::kmeans_iters);

    t["warmup_epochs"] = num_field(&RunConfig::warmup_epochs);
    t["ssrl_epochs"] = num_field(&RunConfig::ssrl_epochs);
    t["batch_size"] = num_field(&RunConfig::batch_size);
    t["lr_warmup"] = num_field(&RunConfig::lr_warmup);
    t["lr_ssrl"] = num_field(&RunConfig::lr_ssrl);
    t["lr_min"] = num_field(&RunConfig::lr_min);
    t["ema_start"] = num_field(&RunConfig::ema_start);
    t["ema_end"] = num_field(&RunConfig::ema_end);

    t["loss"] = {[](RunConfig& c, const std::string& v) {
                   if (v == "ce") c.loss = LossKind::CrossEntropy;
                   else if (v == "aam") c.loss = LossKind::AdditiveAngularMargin;
                   else throw ConfigError("config: loss must be ce or aam");
                 },
                 [](const RunConfig& c) { return to_string(c.loss); }};
    t["aam_margin"] = num_field(&RunConfig::aam_margin);
    t["aam_scale"] = num_field(&RunConfig::aam_scale);
    t["aam_margin_start_epoch"] = num_field(&RunConfig::aam_margin_start_epoch);
    t["dropout"] = num_field(&RunConfig::dropout);

    t["aug_strength"] = num_field(&RunConfig::aug_strength);
    t["mask_fraction"] = num_field(&RunConfig::mask_fraction);
    t["aug_probability"] = num_field(&RunConfig::aug_probability);

    t["clustering"] = {[](RunConfig& c, const std::string& v) {
                         if (v == "argmax") c.clustering = ClusteringMode::Argmax;
                         else if (v == "sinkhorn") c.clustering = ClusteringMode::Sinkhorn;
                         else if (v == "naive") c.clustering = ClusteringMode::Naive;
                         else throw ConfigError("config: clustering must be argmax, sinkhorn or naive");
                       },
                       [](const RunConfig& c) { return to_string(c.clustering); }};
    t["sinkhorn_batches"] = num_field(&RunConfig::sinkhorn_batches);
    t["sinkhorn_lambda"] = num_field(&RunConfig::sinkhorn_lambda);
    t["sinkhorn_tol"] = num_field(&RunConfig::sinkhorn_tol);
    t["sinkhorn_max_iters"] = num_field(&RunConfig::sinkhorn_max_iters);
    t["queue_length"] = num_field(&RunConfig::queue_length);

    t["use_ema"] = bool_field(&RunConfig::use_ema);
    t["use_queue"] = bool_field(&RunConfig::use_queue);
    t["use_gmm"] = bool_field(&RunConfig::use_gmm);

    t["seed"] = num_field(&RunConfig::seed);
    t["checkpoint_every"] = num_field(&RunConfig::checkpoint_every);
    return t;
  }();
  return table;
}

}  // namespace

std::string to_string(ClusteringMode m) {
  switch (m) {
    case ClusteringMode::Argmax: return "argmax";
    case ClusteringMode::Sinkhorn: return "sinkhorn";
    case ClusteringMode::Naive: return "naive";
  }
  return "?";
}

std::string to_string(LossKind k) { return k == LossKind::CrossEntropy ? "ce" : "aam"; }

void RunConfig::validate() const {
  corpus.validate();
  if (warmup_epochs < 0 || ssrl_epochs < 0) throw ConfigError("config: epoch counts must be >= 0");
  if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
  if (k_init < 2) throw ConfigError("config: k_init must be >= 2");
  if (embedding_dim < 1) throw ConfigError("config: embedding_dim must be >= 1");
  for (int h : hidden_dims)
    if (h < 1) throw ConfigError("config: hidden layer widths must be >= 1");
  if (kmeans_iters < 1) throw ConfigError("config: kmeans_iters must be >= 1");
  if (queue_length < 1) throw ConfigError("config: queue_length must be >= 1");
  if (!(lr_warmup >= 0 && lr_ssrl >= 0 && lr_min >= 0)) throw ConfigError("config: learning rates must be >= 0");
  if (!(ema_start >= 0 && ema_start < 1 && ema_end >= 0 && ema_end < 1))
    throw ConfigError("config: EMA momentum must lie in [0, 1)");
  if (!(dropout >= 0 && dropout < 1)) throw ConfigError("config: dropout must lie in [0, 1)");
  if (!(aug_strength >= 0)) throw ConfigError("config: aug_strength must be >= 0");
  if (!(mask_fraction >= 0 && mask_fraction <= 1)) throw ConfigError("config: mask_fraction must lie in [0, 1]");
  if (!(aug_probability >= 0 && aug_probability <= 1)) throw ConfigError("config: aug_probability must lie in [0, 1]");
  if (loss == LossKind::AdditiveAngularMargin &&
      !(aam_margin >= 0 && aam_margin < 1.5707963267948966 && aam_scale > 0))
    throw ConfigError("config: AAM needs margin in [0, pi/2) and positive scale");
  if (clustering == ClusteringMode::Sinkhorn) {
    if (sinkhorn_batches < 1) throw ConfigError("config: sinkhorn_batches must be >= 1");
    if (static_cast<long>(sinkhorn_batches) * batch_size <= k_init)
      throw ConfigError("config: sinkhorn_batches * batch_size must exceed k_init");
    if (!(sinkhorn_lambda > 0 && sinkhorn_tol > 0 && sinkhorn_max_iters >= 1))
      throw ConfigError("config: invalid sinkhorn parameters");
  }
  if (checkpoint_every < 0) throw ConfigError("config: checkpoint_every must be >= 0");
  if (corpus_path.empty() && corpus.num_speakers * corpus.utts_per_speaker < k_init)
    throw ConfigError("config: corpus has fewer training samples than k_init");
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError("config: unknown key '" + key + "'");
  try {
    it->second.set(cfg, value);
  } catch (const ConfigError& e) {
    throw ConfigError("config: bad value for " + key + " ('" + value + "'): " + e.what());
  }
}

RunConfig parse_config(std::istream& is) {
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    apply_setting(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  return parse_config(is);
}

std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, f] : fields()) out += key + " = " + f.get(cfg) + "\n";
  return out;
}

CorpusSpec load_corpus_spec(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open corpus spec " + path.string());
  RunConfig tmp;
  std::string line;
  while (std::getline(is, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("corpus spec: expected key = value");
    std::string key = trim(line.substr(0, eq));
    if (key == "seed") key = "corpus_seed";
    static const char* allowed[] = {"num_speakers", "utts_per_speaker", "heldout_per_speaker", "input_dim",
                                    "sigma_within", "sigma_between", "corpus_seed"};
    if (std::find(std::begin(allowed), std::end(allowed), key) == std::end(allowed))
      throw ConfigError("corpus spec: unknown key '" + key + "'");
    apply_setting(tmp, key, trim(line.substr(eq + 1)));
  }
  tmp.corpus.validate();
  return tmp.corpus;
}

}  // namespace reflect
