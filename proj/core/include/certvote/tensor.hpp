#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace certvote {

// Row-major dense tensor of 64-bit reals. data.size() always equals the
// product of shape.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> shape_in, std::vector<double> data_in);

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor vector1d(std::vector<double> values);

  std::size_t size() const { return data.size(); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  std::string shape_string() const;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

// Throws NumericError if any entry is NaN or infinite.
void assert_finite(const Tensor& t, const char* context);

double l2_norm(const Tensor& t);
double l2_distance(const Tensor& a, const Tensor& b);

// Elementwise a - b; shapes must match.
Tensor subtract(const Tensor& a, const Tensor& b);
// Elementwise clamp into [0, 1].
Tensor clip01(Tensor t);
// Same data, new shape; sizes must agree.
Tensor reshape(Tensor t, std::vector<std::size_t> shape);

}  // namespace certvote
