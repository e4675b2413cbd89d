#include "jowl/tensor.hpp"

#include <stdexcept>

namespace jowl {

namespace {
std::size_t shape_product(const std::vector<std::size_t>& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}
}  // namespace

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (shape.empty()) throw std::invalid_argument("tensor: empty shape");
  for (std::size_t e : shape)
    if (e == 0) throw std::invalid_argument("tensor: zero extent");
  if (data.size() != shape_product(shape))
    throw std::invalid_argument("tensor: data length does not match shape " +
                                shape_str());
}

Tensor Tensor::zeros(std::vector<std::size_t> s) {
  std::size_t n = shape_product(s);
  return Tensor(std::move(s), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<std::size_t> s, double v) {
  std::size_t n = shape_product(s);
  return Tensor(std::move(s), std::vector<double>(n, v));
}

Tensor Tensor::vec(std::vector<double> v) {
  std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

Tensor Tensor::matrix(std::size_t r, std::size_t c, std::vector<double> d) {
  return Tensor({r, c}, std::move(d));
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double cosine_similarity(const std::vector<double>& a,
                         const std::vector<double>& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("cosine: length mismatch");
  double na = std::sqrt(dot(a, a));
  double nb = std::sqrt(dot(b, b));
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

}  // namespace jowl
