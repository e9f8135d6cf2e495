#pragma once

#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace isoray {

class Tape;

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

// Dense row-major array of 64-bit floats. A Tensor optionally refers to a
// node on a Tape; without one it is a constant and takes no part in any
// gradient computation.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  Tape* tape = nullptr;
  int node = -1;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> v)
      : shape(std::move(s)), values(std::move(v)) {
    if (shape_numel(shape) != values.size())
      throw std::invalid_argument("Tensor: shape " + shape_str(shape) +
                                  " does not match " +
                                  std::to_string(values.size()) + " values");
  }

  std::size_t size() const { return values.size(); }
  bool on_tape() const { return tape != nullptr && node >= 0; }
  bool is_scalar() const { return values.size() == 1; }

  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double operator()(std::size_t r, std::size_t c) const {
    return values[r * cols() + c];
  }
  double& operator()(std::size_t r, std::size_t c) {
    return values[r * cols() + c];
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor zeros(std::vector<std::size_t> s) {
    std::vector<double> v(shape_numel(s), 0.0);
    return Tensor(std::move(s), std::move(v));
  }
  static Tensor full(std::vector<std::size_t> s, double x) {
    std::vector<double> v(shape_numel(s), x);
    return Tensor(std::move(s), std::move(v));
  }
};

}  // namespace isoray
