#include "certvote/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "certvote/errors.hpp"

namespace certvote {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

Tensor::Tensor(std::vector<std::size_t> shape_in, std::vector<double> data_in)
    : shape(std::move(shape_in)), data(std::move(data_in)) {
  if (shape.empty()) throw ShapeError("tensor: shape must not be empty");
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor: zero dimension in shape");
  }
  if (data.size() != shape_product(shape)) {
    throw ShapeError("tensor: data length does not match shape product");
  }
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  const std::size_t n = shape_product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::vector1d(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

void assert_finite(const Tensor& t, const char* context) {
  for (double v : t.data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(context) + ": non-finite tensor entry");
    }
  }
}

double l2_norm(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.data) acc += v * v;
  return std::sqrt(acc);
}

double l2_distance(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("l2_distance: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

Tensor subtract(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("subtract: shape mismatch");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

Tensor clip01(Tensor t) {
  for (double& v : t.data) v = std::clamp(v, 0.0, 1.0);
  return t;
}

Tensor reshape(Tensor t, std::vector<std::size_t> shape) {
  if (shape_product(shape) != t.size()) {
    throw ShapeError("reshape: size mismatch");
  }
  t.shape = std::move(shape);
  return t;
}

}  // namespace certvote
