#pragma once

#include <Eigen/Dense>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "metaseg/common.hpp"

namespace metaseg {

/// Dense row-major tensor. Rank 0 (shape {}) is a scalar with one element.
/// Flat layout for [N,C,H,W] is ((n*C+c)*H+h)*W+w.
template <class S>
struct Tensor {
  using Array = Eigen::Array<S, Eigen::Dynamic, 1>;

  std::vector<int> shape;
  Array data;

  Tensor() : data(1) { data[0] = S(0); }

  explicit Tensor(std::vector<int> sh) : shape(std::move(sh)) {
    data = Array::Zero(numel_of(shape));
  }
  Tensor(std::vector<int> sh, Array d) : shape(std::move(sh)), data(std::move(d)) {
    require<SizeError>(data.size() == numel_of(shape), "tensor data/shape mismatch");
  }

  static Eigen::Index numel_of(const std::vector<int>& sh) {
    Eigen::Index n = 1;
    for (int d : sh) {
      require<SizeError>(d > 0, "tensor dims must be positive");
      n *= d;
    }
    return n;
  }

  static Tensor scalar(S v) {
    Tensor t;
    t.data[0] = v;
    return t;
  }
  static Tensor zeros(std::vector<int> sh) { return Tensor(std::move(sh)); }
  static Tensor full(std::vector<int> sh, S v) {
    Tensor t(std::move(sh));
    t.data.setConstant(v);
    return t;
  }
  static Tensor from(std::vector<int> sh, std::initializer_list<S> vals) {
    Tensor t(std::move(sh));
    require<SizeError>(static_cast<Eigen::Index>(vals.size()) == t.numel(),
                       "initializer size mismatch");
    Eigen::Index i = 0;
    for (S v : vals) t.data[i++] = v;
    return t;
  }

  Eigen::Index numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  bool is_scalar() const { return shape.empty(); }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

  S& operator[](Eigen::Index i) { return data[i]; }
  S operator[](Eigen::Index i) const { return data[i]; }

  /// 4-d accessor for [N,C,H,W] tensors.
  S& at4(int n, int c, int h, int w) {
    return data[((static_cast<Eigen::Index>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  S at4(int n, int c, int h, int w) const {
    return data[((static_cast<Eigen::Index>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  /// 3-d accessor for [C,H,W] tensors.
  S& at3(int c, int h, int w) {
    return data[(static_cast<Eigen::Index>(c) * shape[1] + h) * shape[2] + w];
  }
  S at3(int c, int h, int w) const {
    return data[(static_cast<Eigen::Index>(c) * shape[1] + h) * shape[2] + w];
  }
  S& at2(int h, int w) { return data[static_cast<Eigen::Index>(h) * shape[1] + w]; }
  S at2(int h, int w) const { return data[static_cast<Eigen::Index>(h) * shape[1] + w]; }

  bool all_finite() const { return data.allFinite(); }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.data = data.template cast<T>();
    return out;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

template <class S>
Tensor<S> random_normal(std::vector<int> sh, Rng& rng, double sigma = 1.0) {
  Tensor<S> t(std::move(sh));
  for (Eigen::Index i = 0; i < t.numel(); ++i) t.data[i] = static_cast<S>(rng.normal(0.0, sigma));
  return t;
}

template <class S>
Tensor<S> random_uniform(std::vector<int> sh, Rng& rng, double lo, double hi) {
  Tensor<S> t(std::move(sh));
  for (Eigen::Index i = 0; i < t.numel(); ++i) t.data[i] = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

}  // namespace metaseg
