#pragma once

#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "posegen/common.hpp"

namespace posegen {

// Dense row-major tensor. Images are {C,H,W} single or {N,C,H,W} batched,
// latent codes {N,D}, scalars {1}.
template <typename T>
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> s) : shape(std::move(s)), data(numel(shape), T(0)) {}
  Tensor(std::vector<std::int64_t> s, T fill) : shape(std::move(s)), data(numel(shape), fill) {}
  Tensor(std::vector<std::int64_t> s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    check_arg(static_cast<std::int64_t>(data.size()) == numel(shape), "tensor data does not match shape");
  }

  static std::int64_t numel(const std::vector<std::int64_t>& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }

  static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  T& at2(std::int64_t i, std::int64_t j) { return data[i * shape[1] + j]; }
  const T& at2(std::int64_t i, std::int64_t j) const { return data[i * shape[1] + j]; }

  T& at3(std::int64_t c, std::int64_t h, std::int64_t w) { return data[(c * shape[1] + h) * shape[2] + w]; }
  const T& at3(std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data[(c * shape[1] + h) * shape[2] + w];
  }

  T& at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  const T& at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
  }
};

// Stacks single images {C,H,W} into a batch {N,C,H,W}.
template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& items) {
  check_arg(!items.empty(), "stack: empty list");
  const auto& s0 = items.front().shape;
  std::vector<std::int64_t> shape{static_cast<std::int64_t>(items.size())};
  shape.insert(shape.end(), s0.begin(), s0.end());
  Tensor<T> out(shape);
  std::int64_t stride = items.front().size();
  for (std::size_t n = 0; n < items.size(); ++n) {
    check_arg(items[n].shape == s0, "stack: shape mismatch");
    std::copy(items[n].data.begin(), items[n].data.end(), out.data.begin() + static_cast<std::int64_t>(n) * stride);
  }
  return out;
}

// Extracts item n from a batched tensor.
template <typename T>
Tensor<T> unstack(const Tensor<T>& batch, std::int64_t n) {
  check_arg(batch.rank() >= 2, "unstack: rank too small");
  std::vector<std::int64_t> shape(batch.shape.begin() + 1, batch.shape.end());
  Tensor<T> out(shape);
  std::int64_t stride = out.size();
  std::copy(batch.data.begin() + n * stride, batch.data.begin() + (n + 1) * stride, out.data.begin());
  return out;
}

}  // namespace posegen
