#include "r2p/embedding.hpp"

#include <cmath>
#include <string>

#include "r2p/errors.hpp"

namespace r2p {

double l2_norm(std::span<const double> v) noexcept {
  double sum_sq = 0.0;
  for (const double x : v) sum_sq += x * x;
  return std::sqrt(sum_sq);
}

double Embedding::norm() const noexcept { return l2_norm(values_); }

Embedding Embedding::normalized(std::vector<double> values) {
  if (values.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "embedding must have at least one component");
  }
  const double n = l2_norm(values);
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw Error(ErrorCode::kInvalidArgument, "cannot normalize a zero or non-finite vector");
  }
  for (auto& x : values) x /= n;
  return Embedding(std::move(values));
}

Embedding Embedding::from_unit(std::vector<double> values) {
  const double n = l2_norm(values);
  if (values.empty() || !(std::abs(n - 1.0) <= kUnitNormTolerance)) {
    throw Error(ErrorCode::kCorruptRecord,
                "embedding norm " + std::to_string(n) + " is not 1 within tolerance");
  }
  return Embedding(std::move(values));
}

}  // namespace r2p
