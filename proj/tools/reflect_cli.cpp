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

// reflect: command line front end.
//   gen-data --spec <file> --out <dir>
//   train    --config <file> --out <dir>
//   eval     --checkpoint <file> --corpus <dir> [--loss ce|aam]
//   ablate   --config <file> --axis name=v1,v2 [--axis ...] [--out <file>]
//   plot     --log <file> [--out <prefix>]
// Exit codes: 0 ok, 2 configuration error, 3 numerical abort.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "reflect/checkpoint.hpp"
#include "reflect/clustering.hpp"
#include "reflect/config.hpp"
#include "reflect/pipeline.hpp"

namespace fs = std::filesystem;
using namespace reflect;

namespace {

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  return os;
}

void print_metrics(std::ostream& os, const std::string& tag, const MetricSet& m) {
  nlohmann::json j = {{"model", tag},          {"nmi", m.nmi},
                      {"accuracy_pct", m.accuracy}, {"purity_pct", m.purity},
                      {"active_clusters", m.active_clusters}};
  j["eer_pct"] = std::isfinite(m.eer) ? nlohmann::json(m.eer) : nlohmann::json(nullptr);
  j["min_dcf"] = std::isfinite(m.min_dcf) ? nlohmann::json(m.min_dcf) : nlohmann::json(nullptr);
  os << j.dump() << "\n";
}

int cmd_gen_data(const fs::path& spec_path, const fs::path& out) {
  const CorpusSpec spec = load_corpus_spec(spec_path);
  const Corpus corpus = generate_corpus(spec);
  write_corpus(corpus, out);
  std::cout << "wrote " << corpus.size() << " utterances and " << corpus.trials.size() << " trials to "
            << out.string() << "\n";
  return 0;
}

int cmd_train(const fs::path& config_path, const fs::path& out) {
  const RunConfig cfg = load_config(config_path);
  fs::create_directories(out / "checkpoints");
  open_out(out / "config.txt") << format_config(cfg);

  const Corpus corpus = corpus_for(cfg);
  auto log = open_out(out / "log.jsonl");
  auto metrics = open_out(out / "metrics.csv");
  auto noise = open_out(out / "noise.csv");
  metrics << "epoch,nmi,accuracy_pct,purity_pct,active_clusters,eer_pct,min_dcf\n";
  noise << "epoch,pi,mu1,sigma1,mu2,sigma2,mean_p_clean\n";

  fs::path last_checkpoint;
  RunHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r) {
    log << to_jsonl(r) << std::endl;
    metrics << metrics_csv_row(r) << std::endl;
    if (r.phase == "ssrl") noise << noise_csv_row(r) << std::endl;
    std::cerr << r.phase << " epoch " << r.epoch << " loss " << r.mean_loss << " clusters "
              << r.pseudo.active_clusters << " acc " << r.pseudo.accuracy << "\n";
  };
  hooks.on_checkpoint = [&](int epoch, const ModelParams<double>& student, const ModelParams<double>& teacher) {
    if (cfg.checkpoint_every <= 0 || epoch % cfg.checkpoint_every != 0) return;
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%04d", epoch);
    save_checkpoint(student, out / "checkpoints" / (std::string(name) + "_student.ckpt"));
    last_checkpoint = out / "checkpoints" / (std::string(name) + "_teacher.ckpt");
    save_checkpoint(teacher, last_checkpoint);
  };

  try {
    const WarmState warm = warmup(cfg, corpus, hooks);
    save_checkpoint(warm.student, out / "warmup.ckpt");
    last_checkpoint = out / "warmup.ckpt";
    const RunResult res = ssrl_run(cfg, corpus, warm, hooks);
    save_checkpoint(res.student, out / "student.ckpt");
    save_checkpoint(res.teacher, out / "teacher.ckpt");

    std::vector<int> indices(res.labels.size());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = static_cast<int>(i);
    auto assignments = open_out(out / "assignments.csv");
    write_assignments(assignments, indices, res.labels);

    const HeadOptions head = head_options(cfg);
    print_metrics(std::cout, "warmup", evaluate(warm.student, corpus, head));
    print_metrics(std::cout, "teacher", evaluate(res.teacher, corpus, head));
  } catch (const NumericalError&) {
    if (!last_checkpoint.empty()) std::cerr << "last checkpoint: " << last_checkpoint.string() << "\n";
    throw;
  }
  return 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& corpus_dir, const std::string& loss) {
  HeadOptions head;
  if (loss == "aam") head.kind = LossKind::AdditiveAngularMargin;
  else if (loss != "ce") throw ConfigError("--loss must be ce or aam");
  const ModelParams<double> model = load_checkpoint(checkpoint);
  const Corpus corpus = read_corpus(corpus_dir);
  if (model.input_dim() != corpus.features.rows())
    throw ConfigError("checkpoint input dimension differs from corpus");
  print_metrics(std::cout, checkpoint.filename().string(), evaluate(model, corpus, head));
  return 0;
}

int cmd_ablate(const fs::path& config_path, const std::vector<std::string>& axis_specs, const std::string& out) {
  const RunConfig base = load_config(config_path);
  std::vector<AblationAxis> axes;
  for (const auto& s : axis_specs) axes.push_back(parse_axis(s));
  const std::string csv = ablation_csv(ablation_matrix(base, axes));
  if (out.empty()) {
    std::cout << csv;
  } else {
    open_out(out) << csv;
  }
  return 0;
}

// Columns pulled from log.jsonl into the curves CSV and the SVG panels.
const std::vector<std::string> kCurveColumns{"active_clusters", "nmi", "accuracy_pct", "purity_pct", "eer_pct"};

std::string svg_curves(const std::vector<int>& epochs, const std::vector<std::vector<double>>& series) {
  const int panel_w = 320, panel_h = 200, pad = 40;
  const int width = static_cast<int>(series.size()) * (panel_w + pad) + pad;
  const int height = panel_h + 2 * pad;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  const double e0 = epochs.front(), e1 = std::max<double>(epochs.back(), e0 + 1);
  for (std::size_t c = 0; c < series.size(); ++c) {
    const int x0 = pad + static_cast<int>(c) * (panel_w + pad), y0 = pad;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (double v : series[c])
      if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (hi - lo < 1e-12) hi = lo + 1;
    os << "<rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << panel_w << "\" height=\"" << panel_h
       << "\" fill=\"none\" stroke=\"#888\"/>\n";
    os << "<text x=\"" << x0 << "\" y=\"" << y0 - 8 << "\">" << kCurveColumns[c] << " [" << lo << ", " << hi
       << "]</text>\n<polyline fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < epochs.size(); ++i) {
      if (!std::isfinite(series[c][i])) continue;
      const double x = x0 + (epochs[i] - e0) / (e1 - e0) * panel_w;
      const double y = y0 + panel_h - (series[c][i] - lo) / (hi - lo) * panel_h;
      os << x << "," << y << " ";
    }
    os << "\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

int cmd_plot(const fs::path& log_path, std::string prefix) {
  std::ifstream is(log_path);
  if (!is) throw ConfigError("cannot read " + log_path.string());
  std::vector<int> epochs;
  std::vector<std::vector<double>> series(kCurveColumns.size());
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("epoch")) throw ConfigError("malformed log line: " + line);
    epochs.push_back(j["epoch"].get<int>());
    for (std::size_t c = 0; c < kCurveColumns.size(); ++c) {
      const auto& v = j.value(kCurveColumns[c], nlohmann::json(nullptr));
      series[c].push_back(v.is_number() ? v.get<double>() : std::numeric_limits<double>::quiet_NaN());
    }
  }
  if (epochs.empty()) throw ConfigError("log has no records");
  if (prefix.empty()) prefix = (log_path.parent_path() / "curves").string();

  auto csv = open_out(prefix + ".csv");
  csv << "epoch";
  for (const auto& c : kCurveColumns) csv << "," << c;
  csv << "\n";
  csv.precision(10);
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    csv << epochs[i];
    for (const auto& s : series) csv << "," << s[i];
    csv << "\n";
  }
  open_out(prefix + ".svg") << svg_curves(epochs, series);
  std::cout << "wrote " << prefix << ".csv and " << prefix << ".svg\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Teacher/student pseudo-label training on synthetic speaker embeddings"};
  app.require_subcommand(1);

  std::string spec, out, config, checkpoint, corpus, loss = "ce", log_path;
  std::vector<std::string> axes;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus");
  gen->add_option("--spec", spec, "Corpus spec file")->required();
  gen->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Warm-up plus relabeling run");
  train->add_option("--config", config, "Run config file")->required();
  train->add_option("--out", out, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Metrics for a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--corpus", corpus, "Corpus directory")->required();
  eval->add_option("--loss", loss, "Head used for argmax labels (ce|aam)");

  auto* ablate = app.add_subcommand("ablate", "Run a configuration grid");
  ablate->add_option("--config", config, "Base run config file")->required();
  ablate->add_option("--axis", axes, "name=v1,v2,... (repeatable)")->required();
  ablate->add_option("--out", out, "CSV output file (default stdout)");

  auto* plot = app.add_subcommand("plot", "Curves from a training log");
  plot->add_option("--log", log_path, "log.jsonl from train")->required();
  plot->add_option("--out", out, "Output prefix (default <log dir>/curves)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen_data(spec, out);
    if (*train) return cmd_train(config, out);
    if (*eval) return cmd_eval(checkpoint, corpus, loss);
    if (*ablate) return cmd_ablate(config, axes, out);
    if (*plot) return cmd_plot(log_path, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
