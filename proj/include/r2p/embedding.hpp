#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace r2p {

inline constexpr double kUnitNormTolerance = 1e-6;

// Unit-norm real vector in the shared image/text latent space.
class Embedding {
 public:
  Embedding() = default;

  // Scales `values` to unit L2 norm. Throws kInvalidArgument on empty or zero vectors.
  static Embedding normalized(std::vector<double> values);

  // Adopts `values` as-is; throws kCorruptRecord unless the norm is 1 within tolerance.
  static Embedding from_unit(std::vector<double> values);

  std::size_t dim() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }
  std::span<const double> values() const noexcept { return values_; }
  double norm() const noexcept;

  friend bool operator==(const Embedding&, const Embedding&) = default;

 private:
  explicit Embedding(std::vector<double> values) : values_(std::move(values)) {}

  std::vector<double> values_;
};

double l2_norm(std::span<const double> v) noexcept;

}  // namespace r2p
