#pragma once

#include <cassert>
#include <cstddef>
#include <initializer_list>
#include <map>
#include <string>
#include <vector>

namespace mafenn {

// Dense row-major tensor of doubles.  Shapes are small (rank <= 3 in
// practice: [batch, time, channels] for convolution inputs, [batch, dim]
// for everything else), so a std::vector shape is fine.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), 0.0);
  }
  Tensor(std::vector<int> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    assert(data.size() == numel_of(shape));
  }

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
  }

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  double* ptr() { return data.data(); }
  const double* ptr() const { return data.data(); }

  double& operator()(int i) { return data[static_cast<std::size_t>(i)]; }
  double operator()(int i) const { return data[static_cast<std::size_t>(i)]; }
  double& operator()(int i, int j) {
    return data[static_cast<std::size_t>(i) * shape[1] + j];
  }
  double operator()(int i, int j) const {
    return data[static_cast<std::size_t>(i) * shape[1] + j];
  }
  double& operator()(int i, int j, int k) {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  double operator()(int i, int j, int k) const {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }

  void fill(double v) { data.assign(data.size(), v); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

// Named parameter collection with stable (insertion) order.  The order
// defines the layout used by flatten/unflatten, which the optimizer, the
// checkpoint format, and the finite-difference gradient checks all share.
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Tensor> values;

  Tensor& add(const std::string& name, Tensor t) {
    names.push_back(name);
    values.push_back(std::move(t));
    return values.back();
  }

  std::size_t size() const { return values.size(); }

  Tensor* find(const std::string& name) {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return &values[i];
    return nullptr;
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& t : values) n += t.numel();
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(numel());
    for (const auto& t : values)
      out.insert(out.end(), t.data.begin(), t.data.end());
    return out;
  }

  void unflatten(const std::vector<double>& flat) {
    assert(flat.size() == numel());
    std::size_t off = 0;
    for (auto& t : values) {
      std::copy(flat.begin() + off, flat.begin() + off + t.numel(),
                t.data.begin());
      off += t.numel();
    }
  }
};

}  // namespace mafenn
