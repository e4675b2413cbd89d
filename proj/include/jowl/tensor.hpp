#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace jowl {

// Dense row-major tensor of 64-bit floats. Rank 1 or 2 in practice; a
// scalar is shape {1}.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d);

  static Tensor zeros(std::vector<std::size_t> s);
  static Tensor full(std::vector<std::size_t> s, double v);
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vec(std::vector<double> v);
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> d);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  // 2D accessors; a rank-1 tensor is treated as a single row.
  std::size_t rows() const { return rank() >= 2 ? shape[0] : 1; }
  std::size_t cols() const { return rank() >= 2 ? shape[1] : shape[0]; }
  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
  std::string shape_str() const;
};

double dot(const std::vector<double>& a, const std::vector<double>& b);

// Cosine similarity of two flat vectors; defined as 0 when either norm is 0.
double cosine_similarity(const std::vector<double>& a,
                         const std::vector<double>& b);

}  // namespace jowl
