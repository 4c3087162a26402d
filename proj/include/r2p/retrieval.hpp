#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "r2p/concept_db.hpp"
#include "r2p/embedding.hpp"

namespace r2p {

inline constexpr std::size_t kDefaultTopK = 3;

struct RetrievalMode {
  enum class Kind { kFused, kImageOnly, kTextOnly, kTwoStep };

  Kind kind = Kind::kFused;
  std::size_t rerank_pool = 0;  // kTwoStep only; must be >= k

  static RetrievalMode fused() { return {Kind::kFused, 0}; }
  static RetrievalMode image_only() { return {Kind::kImageOnly, 0}; }
  static RetrievalMode text_only() { return {Kind::kTextOnly, 0}; }
  static RetrievalMode two_step(std::size_t pool) { return {Kind::kTwoStep, pool}; }

  friend bool operator==(const RetrievalMode&, const RetrievalMode&) = default;
};

// "fused", "image_only", "text_only", "two_step:<pool>" (pool defaults to 10).
std::string to_string(const RetrievalMode& mode);
RetrievalMode parse_retrieval_mode(std::string_view text);

struct Candidate {
  std::string concept_id;
  double s_vv = 0.0;
  double s_vt = 0.0;
  double fused = 0.0;

  friend bool operator==(const Candidate&, const Candidate&) = default;
};

struct CandidateSet {
  std::vector<Candidate> entries;  // best first
  std::size_t k = kDefaultTopK;
  RetrievalMode mode;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
  // Zero-based rank, or size() when absent.
  std::size_t rank_of(std::string_view concept_id) const;
};

// Cosine similarity in double precision, clamped to [-1, 1]. Throws kDimensionMismatch.
double cosine(const Embedding& a, const Embedding& b);
double cosine(std::span<const double> a, std::span<const double> b);

constexpr double fuse(double s_vv, double s_vt) { return (s_vv + s_vt) / 2.0; }

// Exact scan over `snapshot`. Ties break by ascending concept_id.
// Throws kEmptyDatabase, kInvalidArgument (k == 0, pool < k), kDimensionMismatch.
CandidateSet retrieve(const Embedding& query, const DbSnapshot& snapshot, std::size_t k = kDefaultTopK,
                      RetrievalMode mode = RetrievalMode::fused());

bool hit_at_k(const CandidateSet& candidates, std::string_view true_concept_id);

// Fraction of (candidates, target) pairs with a hit; 0 for an empty list.
double hit_rate(std::span<const std::pair<CandidateSet, std::string>> results);

}  // namespace r2p
