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

#include "reflect/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace reflect {
namespace {

constexpr const char* kMagic = "reflect-checkpoint";

void put_f32(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t pos) : bytes_(bytes), pos_(pos) {}
  double next() {
    if (pos_ + 4 > bytes_.size()) throw ConfigError("checkpoint: truncated payload");
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return static_cast<double>(std::bit_cast<float>(bits));
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_;
};

std::pair<long, long> parse_shape(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw ConfigError("checkpoint: bad shape '" + s + "'");
  try {
    return {std::stol(s.substr(0, x)), std::stol(s.substr(x + 1))};
  } catch (const std::exception&) {
    throw ConfigError("checkpoint: bad shape '" + s + "'");
  }
}

}  // namespace

std::string checkpoint_header(const ModelParams<double>& p) {
  std::ostringstream os;
  os << kMagic << " encoder=";
  for (std::size_t i = 0; i < p.encoder.size(); ++i) {
    if (i) os << ',';
    os << p.encoder[i].weight.cols() << 'x' << p.encoder[i].weight.rows();
  }
  os << " predictor=" << p.predictor_weight.rows() << 'x' << p.predictor_weight.cols();
  return os.str();
}

std::string encode_checkpoint(const ModelParams<double>& p) {
  std::string out = checkpoint_header(p) + "\n";
  out.reserve(out.size() + 4 * p.num_parameters());
  for (const auto& l : p.encoder) {
    // column-major out x in == row-major in x out
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) put_f32(out, l.weight.data()[i]);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) put_f32(out, l.bias(i));
  }
  for (Eigen::Index r = 0; r < p.predictor_weight.rows(); ++r)
    for (Eigen::Index c = 0; c < p.predictor_weight.cols(); ++c) put_f32(out, p.predictor_weight(r, c));
  for (Eigen::Index i = 0; i < p.predictor_bias.size(); ++i) put_f32(out, p.predictor_bias(i));
  return out;
}

ModelParams<double> decode_checkpoint(const std::string& bytes) {
  const auto eol = bytes.find('\n');
  if (eol == std::string::npos) throw ConfigError("checkpoint: missing header line");
  std::istringstream header(bytes.substr(0, eol));
  std::string magic, enc, pred;
  header >> magic >> enc >> pred;
  if (magic != kMagic || enc.rfind("encoder=", 0) != 0 || pred.rfind("predictor=", 0) != 0)
    throw ConfigError("checkpoint: unrecognized header");

  ModelParams<double> p;
  std::stringstream shapes(enc.substr(8));
  std::string item;
  while (std::getline(shapes, item, ',')) {
    const auto [in, out] = parse_shape(item);
    if (in < 1 || out < 1) throw ConfigError("checkpoint: non-positive layer shape");
    if (!p.encoder.empty() && p.encoder.back().weight.rows() != in)
      throw ConfigError("checkpoint: inconsistent layer chain");
    p.encoder.push_back({MatrixXd(out, in), VectorXd(out)});
  }
  if (p.encoder.empty()) throw ConfigError("checkpoint: no encoder layers");
  const auto [k, d] = parse_shape(pred.substr(10));
  if (d != p.embedding_dim() || k < 1) throw ConfigError("checkpoint: predictor shape mismatch");
  p.predictor_weight.resize(k, d);
  p.predictor_bias.resize(k);

  Reader rd(bytes, eol + 1);
  for (auto& l : p.encoder) {
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = rd.next();
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = rd.next();
  }
  for (Eigen::Index r = 0; r < k; ++r)
    for (Eigen::Index c = 0; c < d; ++c) p.predictor_weight(r, c) = rd.next();
  for (Eigen::Index i = 0; i < k; ++i) p.predictor_bias(i) = rd.next();
  if (!rd.done()) throw ConfigError("checkpoint: trailing bytes after payload");
  if (!p.all_finite()) throw NumericalError("checkpoint: non-finite parameter");
  return p;
}

void save_checkpoint(const ModelParams<double>& p, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write checkpoint " + path.string());
  const std::string bytes = encode_checkpoint(p);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ModelParams<double> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace reflect
