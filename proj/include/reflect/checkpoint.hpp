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

#include <filesystem>
#include <string>

#include "reflect/encoder.hpp"

namespace reflect {

// Checkpoint layout:
//   reflect-checkpoint encoder=<in>x<out>,<in>x<out>,... predictor=<K>x<D>\n
// followed by little-endian float32 values, per encoder layer the weight as an
// in x out row-major block then the bias, then the K x D predictor weight
// (row-major) and the K predictor bias values.

std::string checkpoint_header(const ModelParams<double>& p);

std::string encode_checkpoint(const ModelParams<double>& p);
ModelParams<double> decode_checkpoint(const std::string& bytes);

void save_checkpoint(const ModelParams<double>& p, const std::filesystem::path& path);
ModelParams<double> load_checkpoint(const std::filesystem::path& path);

}  // namespace reflect
