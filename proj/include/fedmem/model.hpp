// Copyright 2026 The FedMem Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <bit>
#include <cstring>
#include <fstream>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "fedmem/common.hpp"
#include "fedmem/rng.hpp"

namespace fedmem {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using VectorMap = Eigen::Map<Eigen::VectorXd>;
using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;

// Vectorized Eigen reductions split work according to the buffer's address
// modulo the SIMD width; a fixed 64-byte alignment keeps results independent
// of where the allocator puts the parameters.
template <typename T>
struct CacheAlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  CacheAlignedAllocator() = default;
  template <typename U>
  CacheAlignedAllocator(const CacheAlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlignment));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const CacheAlignedAllocator<U>&) const {
    return true;
  }
};

using ParamVector = std::vector<double, CacheAlignedAllocator<double>>;

// Dimensions of the tied-embedding CIFG-LSTM. When the embedding and hidden
// sizes differ, a d x h projection maps the hidden state into embedding space
// before the tied output layer.
struct ModelShape {
  int vocab_size = 1000;
  int embed_dim = 96;
  int hidden_dim = 96;

  bool has_projection() const { return embed_dim != hidden_dim; }

  std::size_t ParameterCount() const {
    const std::size_t v = vocab_size, d = embed_dim, h = hidden_dim;
    std::size_t n = v * d            // embedding (shared with output)
                    + 3 * h * d      // input-to-gates
                    + 3 * h * h      // hidden-to-gates
                    + 3 * h          // gate biases
                    + v;             // output bias
    if (has_projection()) n += d * h;
    return n;
  }

  void Validate() const {
    if (vocab_size < 1 || embed_dim < 1 || hidden_dim < 1)
      throw ConfigError("model dimensions must be positive");
  }

  bool operator==(const ModelShape&) const = default;
};

// All weights in one contiguous buffer. Layout, in order:
//   embedding      V x d   row t is the input vector and output weights of token t
//   input_weights  3h x d  gate rows ordered [forget; candidate; output]
//   recurrent      3h x h
//   gate_bias      3h
//   projection     d x h   (only when d != h)
//   output_bias    V
// A gradient is a ModelParams of the same shape.
class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(const ModelShape& shape)
      : shape_(shape), values_(shape.ParameterCount(), 0.0) {
    shape.Validate();
  }

  static ModelParams Zeros(const ModelShape& shape) { return ModelParams(shape); }

  // Uniform(-scale, scale) weights, zero biases except the forget gate.
  static ModelParams Random(const ModelShape& shape, Rng& rng, double scale = 0.1,
                            double forget_bias = 1.0) {
    ModelParams p(shape);
    for (double& x : p.values_) x = (2.0 * rng.Uniform01() - 1.0) * scale;
    p.gate_bias().setZero();
    p.gate_bias().head(shape.hidden_dim).setConstant(forget_bias);
    p.output_bias().setZero();
    return p;
  }

  const ModelShape& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  ParamVector& raw() { return values_; }
  const ParamVector& raw() const { return values_; }

  VectorMap flat() { return VectorMap(values_.data(), Eigen::Index(values_.size())); }
  ConstVectorMap flat() const {
    return ConstVectorMap(values_.data(), Eigen::Index(values_.size()));
  }

  MatrixMap embedding() { return Mat(kEmbedding, shape_.vocab_size, shape_.embed_dim); }
  ConstMatrixMap embedding() const {
    return CMat(kEmbedding, shape_.vocab_size, shape_.embed_dim);
  }
  MatrixMap input_weights() { return Mat(kInput, 3 * shape_.hidden_dim, shape_.embed_dim); }
  ConstMatrixMap input_weights() const {
    return CMat(kInput, 3 * shape_.hidden_dim, shape_.embed_dim);
  }
  MatrixMap recurrent_weights() {
    return Mat(kRecurrent, 3 * shape_.hidden_dim, shape_.hidden_dim);
  }
  ConstMatrixMap recurrent_weights() const {
    return CMat(kRecurrent, 3 * shape_.hidden_dim, shape_.hidden_dim);
  }
  VectorMap gate_bias() { return Vec(kGateBias, 3 * shape_.hidden_dim); }
  ConstVectorMap gate_bias() const { return CVec(kGateBias, 3 * shape_.hidden_dim); }
  MatrixMap projection() { return Mat(kProjection, shape_.embed_dim, shape_.hidden_dim); }
  ConstMatrixMap projection() const {
    return CMat(kProjection, shape_.embed_dim, shape_.hidden_dim);
  }
  VectorMap output_bias() { return Vec(kOutputBias, shape_.vocab_size); }
  ConstVectorMap output_bias() const { return CVec(kOutputBias, shape_.vocab_size); }

  double Norm() const { return flat().norm(); }

  bool AllFinite() const {
    for (double x : values_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  ModelParams& operator+=(const ModelParams& o) {
    CheckSameShape(o);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += o.values_[i];
    return *this;
  }
  ModelParams& operator-=(const ModelParams& o) {
    CheckSameShape(o);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= o.values_[i];
    return *this;
  }
  ModelParams& operator*=(double s) {
    for (double& x : values_) x *= s;
    return *this;
  }
  friend ModelParams operator-(ModelParams a, const ModelParams& b) { return a -= b; }
  friend ModelParams operator+(ModelParams a, const ModelParams& b) { return a += b; }

  bool operator==(const ModelParams& o) const {
    return shape_ == o.shape_ &&
           (values_.empty() ||
            std::memcmp(values_.data(), o.values_.data(), values_.size() * sizeof(double)) == 0);
  }

  void CheckSameShape(const ModelParams& o) const {
    if (!(shape_ == o.shape_)) throw InvariantError("parameter shape mismatch");
  }

 private:
  enum Block { kEmbedding, kInput, kRecurrent, kGateBias, kProjection, kOutputBias };

  std::size_t Offset(Block block) const {
    const std::size_t v = shape_.vocab_size, d = shape_.embed_dim, h = shape_.hidden_dim;
    std::size_t off = 0;
    if (block == kEmbedding) return off;
    off += v * d;
    if (block == kInput) return off;
    off += 3 * h * d;
    if (block == kRecurrent) return off;
    off += 3 * h * h;
    if (block == kGateBias) return off;
    off += 3 * h;
    if (block == kProjection) return off;
    if (shape_.has_projection()) off += d * h;
    return off;
  }

  MatrixMap Mat(Block b, int rows, int cols) {
    return MatrixMap(values_.data() + Offset(b), rows, cols);
  }
  ConstMatrixMap CMat(Block b, int rows, int cols) const {
    return ConstMatrixMap(values_.data() + Offset(b), rows, cols);
  }
  VectorMap Vec(Block b, int n) { return VectorMap(values_.data() + Offset(b), n); }
  ConstVectorMap CVec(Block b, int n) const {
    return ConstVectorMap(values_.data() + Offset(b), n);
  }

  ModelShape shape_;
  ParamVector values_;
};

// Checkpoint layout (little-endian):
//   char[8]  "FEDMEMCK"
//   uint32   format version (1)
//   int32    V, d, h
//   uint64   parameter count
//   float64  parameters, in ModelParams layout order
inline constexpr char kCheckpointMagic[8] = {'F', 'E', 'D', 'M', 'E', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void SaveCheckpoint(const ModelParams& params, const std::string& path) {
  static_assert(std::endian::native == std::endian::little, "checkpoint io assumes little-endian");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint32_t version = kCheckpointVersion;
  const std::int32_t dims[3] = {params.shape().vocab_size, params.shape().embed_dim,
                                params.shape().hidden_dim};
  const std::uint64_t count = params.size();
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  out.write(reinterpret_cast<const char*>(&count), sizeof(count));
  out.write(reinterpret_cast<const char*>(params.raw().data()),
            static_cast<std::streamsize>(count * sizeof(double)));
  if (!out) throw IoError("short write on checkpoint " + path);
}

inline ModelParams LoadCheckpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path);
  char magic[8];
  std::uint32_t version = 0;
  std::int32_t dims[3];
  std::uint64_t count = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  in.read(reinterpret_cast<char*>(&count), sizeof(count));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw InputError("not a checkpoint file: " + path);
  if (version != kCheckpointVersion) throw InputError("unsupported checkpoint version");
  ModelParams params(ModelShape{dims[0], dims[1], dims[2]});
  if (count != params.size()) throw InputError("checkpoint parameter count mismatch");
  in.read(reinterpret_cast<char*>(params.raw().data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw InputError("truncated checkpoint " + path);
  return params;
}

}  // namespace fedmem
