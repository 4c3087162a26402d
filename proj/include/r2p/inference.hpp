#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "r2p/concept_db.hpp"
#include "r2p/encoder.hpp"
#include "r2p/protocol.hpp"
#include "r2p/retrieval.hpp"
#include "r2p/vlm.hpp"

namespace r2p {

enum class VerificationStrategy { kAttribute, kAbstention, kLogitsBased, kPairwiseAlways, kNone };
enum class RecognitionMode { kPipelineMatch, kDirectPairwise };

std::string_view to_string(VerificationStrategy s);
VerificationStrategy parse_verification_strategy(std::string_view text);
std::string_view to_string(RecognitionMode m);
RecognitionMode parse_recognition_mode(std::string_view text);

struct PipelineConfig {
  std::size_t k = kDefaultTopK;
  RetrievalMode retrieval_mode = RetrievalMode::fused();
  bool enable_cot = true;
  bool enable_fingerprints = true;
  bool enable_pairwise = true;
  VerificationStrategy verification = VerificationStrategy::kAttribute;
  double pairwise_threshold = 0.5;
  RecognitionMode recognition_mode = RecognitionMode::kPipelineMatch;
  // logits_based: pairwise runs when log p(IDK) >= log p(chosen) - logits_margin.
  double logits_margin = 0.0;
  // Text sent to the encoder for each shared attribute; "{attribute}" is replaced.
  std::string attribute_template = "{attribute}";
  bool logit_ratio_literal = false;
  // Forwarded with every chat request; not part of the config echo.
  std::optional<std::uint64_t> seed;

  // Throws kInvalidArgument when the toggles contradict each other.
  void validate() const;
};

nlohmann::json to_json(const PipelineConfig& config);

// Non-fatal concerns about running `config` with `encoder`, e.g. text scores
// from an encoder whose spaces are not aligned.
std::vector<std::string> config_warnings(const PipelineConfig& config, const EncoderBackend& encoder);

using ReferenceLoader = std::function<ImagePayload(const ConceptRecord&)>;

struct Gateways {
  VlmBackend* vlm = nullptr;
  EncoderBackend* encoder = nullptr;
  ReferenceLoader reference_loader;
};

struct CotSelection {
  std::optional<CotVerdict> verdict;
  // Shared attributes per candidate, in retrieval rank order.
  std::vector<std::pair<std::string, std::vector<std::string>>> shared_attributes;
  std::string c_tilde;
  bool fallback = false;   // reply unparseable; c_tilde is the rank-1 candidate
  bool abstained = false;  // "I am not sure"
  bool chose_idk = false;  // picked the "I don't know" option
  std::optional<double> chosen_logprob;
  std::optional<double> idk_logprob;
  std::size_t vlm_calls = 0;
};

CotSelection cot_select(const ImagePayload& query_image, const CandidateSet& candidates, const DbSnapshot& db,
                        VlmBackend& vlm, const CotPromptOptions& options = {},
                        std::optional<std::uint64_t> seed = std::nullopt);

struct AttributeVerification {
  std::map<std::string, double> scores;  // -inf for candidates without shared attributes
  std::optional<std::string> c_tilde_a;  // none when every list is empty
};

// Mean cosine between the query embedding and each shared attribute's text
// embedding. Ties go to the earlier candidate.
AttributeVerification attribute_verify(
    const Embedding& query_embedding,
    std::span<const std::pair<std::string, std::vector<std::string>>> shared_attributes, EncoderBackend& encoder,
    std::string_view attribute_template = "{attribute}");

struct PairwiseOutcome {
  std::vector<std::pair<std::string, double>> probs;  // rank order
  std::string c_tilde;
  std::vector<std::string> unparseable;
  bool all_no = false;
  std::size_t vlm_calls = 0;
};

// One yes/no comparison per candidate against its reference image, issued
// concurrently. c_tilde maximizes p; ties go to the better retrieval rank.
PairwiseOutcome pairwise_refine(const ImagePayload& query_image, std::span<const std::string> candidate_ids,
                                const DbSnapshot& db, const Gateways& gateways, const PipelineConfig& config);

struct InferenceTrace {
  CandidateSet candidate_set;
  std::optional<CotVerdict> cot_verdict;
  bool cot_fallback = false;
  std::string c_tilde;
  std::optional<std::map<std::string, double>> attribute_scores;
  std::optional<std::string> c_tilde_a;
  std::optional<bool> verification_passed;
  std::optional<std::map<std::string, double>> pairwise_probs;
  std::vector<std::string> pairwise_unparseable;
  bool pairwise_all_no = false;
  std::string final_concept;
  std::size_t vlm_calls = 0;

  bool pairwise_ran() const { return pairwise_probs.has_value(); }
};

nlohmann::json to_json(const InferenceTrace& trace);

// Retrieval, CoT selection, verification and (when gated in) pairwise refinement.
// Throws kEmptyDatabase and gateway errors that no fallback absorbs.
InferenceTrace infer_concept(const ImagePayload& query_image, const DbSnapshot& db, const Gateways& gateways,
                             const PipelineConfig& config);

struct QueryTask {
  enum class Kind { kRecognition, kCaption, kVqa };

  Kind kind = Kind::kRecognition;
  std::string target_name;           // recognition
  std::string question;              // vqa
  std::vector<std::string> choices;  // vqa

  static QueryTask recognition(std::string target) { return {Kind::kRecognition, std::move(target), {}, {}}; }
  static QueryTask caption() { return {Kind::kCaption, {}, {}, {}}; }
  static QueryTask vqa(std::string question, std::vector<std::string> choices) {
    return {Kind::kVqa, {}, std::move(question), std::move(choices)};
  }
};

struct PersonalizedAnswer {
  std::string concept_id;
  std::string concept_name;
  std::string text;
  InferenceTrace trace;
  std::optional<bool> answered_yes;  // recognition
  std::optional<double> p_yes;       // recognition with direct_pairwise
  std::optional<std::string> choice; // vqa: the chosen letter, when one can be read off the reply
};

nlohmann::json to_json(const PersonalizedAnswer& answer);

// Leading choice letter of a closed-set reply ("B", "B.", "(B) red lid"), if any.
std::optional<std::string> extract_choice_letter(std::string_view reply, std::size_t n_choices);

// Throws kUnknownTargetConcept for a recognition target that is not enrolled.
PersonalizedAnswer answer_query(const ImagePayload& query_image, const QueryTask& task, const DbSnapshot& db,
                                const Gateways& gateways, const PipelineConfig& config);

}  // namespace r2p
