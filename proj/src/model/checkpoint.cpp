// Copyright (c) 2026 The depthlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ============================================================================
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "depthlab/model.hpp"

namespace depthlab {

namespace {

constexpr char kMagic[8] = {'D', 'L', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_string(std::string& out, const std::string& s) {
  put_u64(out, s.size());
  out += s;
}

class Reader {
 public:
  Reader(const std::string& data, const std::string& path) : data_(data), path_(path) {}

  std::uint64_t u(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string str() {
    const std::uint64_t n = u(8);
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > data_.size() - pos_) throw IntegrityError(path_ + ": truncated checkpoint");
  }
  const std::string& data_;
  const std::string& path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  check_shapes(model.config, model.params);
  std::string out(kMagic, sizeof(kMagic));
  put_u32(out, kVersion);
  put_string(out, model_config_to_text(model.config));
  std::uint64_t count = 0;
  for_each_param(model.params, [&](const std::string&, const Tensor&) { ++count; });
  put_u64(out, count);
  for_each_param(model.params, [&](const std::string& name, const Tensor& t) {
    put_string(out, name);
    put_u32(out, 2);
    put_u64(out, static_cast<std::uint64_t>(t.rows()));
    put_u64(out, static_cast<std::uint64_t>(t.cols()));
    for (Index i = 0; i < t.size(); ++i) put_u64(out, std::bit_cast<std::uint64_t>(t.data()[i]));
  });
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  const std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(data, path);
  if (r.raw(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) throw IntegrityError(path + ": not a checkpoint");
  if (r.u(4) != kVersion) throw IntegrityError(path + ": unsupported checkpoint version");
  Model m;
  m.config = model_config_from_text(r.str());
  m.params = zero_params<double>(m.config);
  std::map<std::string, Tensor> stored;
  const std::uint64_t count = r.u(8);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint64_t rank = r.u(4);
    if (rank != 2) throw IntegrityError(path + ": tensor " + name + " has rank " + std::to_string(rank));
    const auto rows = static_cast<Index>(r.u(8));
    const auto cols = static_cast<Index>(r.u(8));
    if (rows < 0 || cols < 0 || (rows > 0 && cols > static_cast<Index>(data.size()) / 8 / rows)) {
      throw IntegrityError(path + ": tensor " + name + " has implausible shape");
    }
    Tensor t(rows, cols);
    for (Index k = 0; k < t.size(); ++k) t.data()[k] = std::bit_cast<double>(r.u(8));
    if (!stored.emplace(std::move(name), std::move(t)).second) throw IntegrityError(path + ": duplicate tensor");
  }
  if (!r.done()) throw IntegrityError(path + ": trailing bytes");
  for_each_param(m.params, [&](const std::string& name, Tensor& t) {
    auto it = stored.find(name);
    if (it == stored.end()) throw ConfigError(name, "missing from checkpoint " + path);
    if (it->second.rows() != t.rows() || it->second.cols() != t.cols()) {
      throw ConfigError(name, "shape " + shape_string(it->second) + " but config implies " + shape_string(t));
    }
    t = std::move(it->second);
    stored.erase(it);
  });
  if (!stored.empty()) throw ConfigError(stored.begin()->first, "not part of the configured model");
  return m;
}

}  // namespace depthlab
