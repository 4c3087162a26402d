#include "r2p/retrieval.hpp"

#include <algorithm>
#include <charconv>

#include "r2p/errors.hpp"

namespace r2p {
namespace {

double primary_score(const Candidate& c, RetrievalMode::Kind kind) {
  switch (kind) {
    case RetrievalMode::Kind::kImageOnly:
    case RetrievalMode::Kind::kTwoStep:
      return c.s_vv;
    case RetrievalMode::Kind::kTextOnly:
      return c.s_vt;
    case RetrievalMode::Kind::kFused:
      break;
  }
  return c.fused;
}

template <typename Score>
void rank_prefix(std::vector<Candidate>& entries, std::size_t n, Score score) {
  auto better = [&](const Candidate& a, const Candidate& b) {
    const double sa = score(a);
    const double sb = score(b);
    if (sa != sb) return sa > sb;
    return a.concept_id < b.concept_id;
  };
  n = std::min(n, entries.size());
  std::partial_sort(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(n), entries.end(), better);
  entries.resize(n);
}

}  // namespace

std::string to_string(const RetrievalMode& mode) {
  switch (mode.kind) {
    case RetrievalMode::Kind::kFused:
      return "fused";
    case RetrievalMode::Kind::kImageOnly:
      return "image_only";
    case RetrievalMode::Kind::kTextOnly:
      return "text_only";
    case RetrievalMode::Kind::kTwoStep:
      return "two_step:" + std::to_string(mode.rerank_pool);
  }
  return "fused";
}

RetrievalMode parse_retrieval_mode(std::string_view text) {
  if (text == "fused") return RetrievalMode::fused();
  if (text == "image_only") return RetrievalMode::image_only();
  if (text == "text_only") return RetrievalMode::text_only();
  if (text == "two_step") return RetrievalMode::two_step(10);
  if (text.starts_with("two_step:")) {
    const auto digits = text.substr(9);
    std::size_t pool = 0;
    const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), pool);
    if (ec == std::errc() && ptr == digits.data() + digits.size() && pool > 0) {
      return RetrievalMode::two_step(pool);
    }
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown retrieval mode '" + std::string(text) + "'");
}

std::size_t CandidateSet::rank_of(std::string_view concept_id) const {
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].concept_id == concept_id) return i;
  }
  return entries.size();
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::kDimensionMismatch,
                "cosine of vectors with dims " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return std::clamp(dot, -1.0, 1.0);
}

double cosine(const Embedding& a, const Embedding& b) { return cosine(a.values(), b.values()); }

CandidateSet retrieve(const Embedding& query, const DbSnapshot& snapshot, std::size_t k, RetrievalMode mode) {
  if (snapshot.empty()) throw Error(ErrorCode::kEmptyDatabase, "cannot retrieve from an empty database");
  if (k == 0) throw Error(ErrorCode::kInvalidArgument, "k must be at least 1");
  if (mode.kind == RetrievalMode::Kind::kTwoStep && mode.rerank_pool < k) {
    throw Error(ErrorCode::kInvalidArgument, "two_step rerank pool must be >= k");
  }

  CandidateSet out;
  out.k = k;
  out.mode = mode;
  out.entries.reserve(snapshot.size());
  for (const auto& rec : snapshot) {
    Candidate c;
    c.concept_id = rec.concept_id;
    c.s_vv = cosine(query, rec.visual_embedding);
    c.s_vt = cosine(query, rec.textual_embedding);
    c.fused = fuse(c.s_vv, c.s_vt);
    out.entries.push_back(std::move(c));
  }

  if (mode.kind == RetrievalMode::Kind::kTwoStep) {
    rank_prefix(out.entries, mode.rerank_pool, [](const Candidate& c) { return c.s_vv; });
    rank_prefix(out.entries, k, [](const Candidate& c) { return c.s_vt; });
  } else {
    rank_prefix(out.entries, k, [&](const Candidate& c) { return primary_score(c, mode.kind); });
  }
  return out;
}

bool hit_at_k(const CandidateSet& candidates, std::string_view true_concept_id) {
  return candidates.rank_of(true_concept_id) < candidates.size();
}

double hit_rate(std::span<const std::pair<CandidateSet, std::string>> results) {
  if (results.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& [set, target] : results) hits += hit_at_k(set, target) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

}  // namespace r2p
