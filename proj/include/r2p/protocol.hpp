#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "r2p/concept_db.hpp"
#include "r2p/vlm.hpp"

namespace r2p {

// Prompt assets compiled in from prompts/*.txt.
std::string_view prompt_asset(std::string_view name);

// Replaces ⟨key⟩ placeholders in one pass; inserted values are never re-scanned.
// Throws std::logic_error for a placeholder without a value.
std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& values);

// ---------------------------------------------------------------------------
// Rendering

std::string render_enrollment_prompt(std::string_view category, std::string_view name);

enum class CotVariant {
  kStandard,
  kAbstention,  // adds an "I am not sure" answer
  kIdkOption,   // adds an extra "I don't know" lettered option
};

struct CotPromptOptions {
  CotVariant variant = CotVariant::kStandard;
  bool include_attributes = true;  // render fingerprint attributes in each Info block
};

struct CotPrompt {
  std::string text;
  std::vector<std::pair<std::string, std::string>> letter_map;  // letter -> concept_id, rank order
  std::optional<std::string> idk_letter;                        // kIdkOption only

  std::vector<std::string> option_letters() const;
  std::optional<std::string> concept_for(std::string_view letter) const;
};

inline constexpr std::string_view kAbstainAnswer = "I am not sure";

// Candidates in retrieval rank order; 1..26 of them (25 with kIdkOption).
CotPrompt render_cot_prompt(std::span<const ConceptRecord* const> candidates,
                            const CotPromptOptions& options = {});

std::string render_pairwise_prompt(const ConceptRecord& candidate, bool include_attributes = true);

std::string render_caption_prompt(const ConceptRecord& concept_record);
std::string render_vqa_prompt(const ConceptRecord& concept_record, std::string_view question,
                              std::span<const std::string> choices);

// Appended to the prompt when a reply has to be requested again.
inline constexpr std::string_view kReaskReminder =
    "\n\nYour previous reply could not be parsed. Output only the JSON.";

// ---------------------------------------------------------------------------
// Parsing

struct EnrollmentReply {
  std::string general;
  std::string category;
  std::vector<std::string> distinct_features;
};

struct CotVerdict {
  std::vector<std::pair<std::string, std::vector<std::string>>> matched_attributes;  // letter order
  std::string reasoning;
  std::string answer;      // one of the presented letters; empty when abstained
  bool abstained = false;  // model answered "I am not sure"

  const std::vector<std::string>* attributes_for(std::string_view letter) const;
};

struct PairwiseReply {
  std::string reasoning;
  YesNo answer = YesNo::kNo;
};

inline constexpr std::size_t kMaxAttributeLength = 200;

// Rung 1 of the recovery ladder: the first balanced {...} block of `raw`
// (fences and surrounding prose dropped), parsed leniently. Throws ParseError.
nlohmann::json extract_json_object(std::string_view raw);

// "None", "none", "N/A", "" and friends.
bool is_none_marker(std::string_view s);

// String form is split on commas outside brackets; list form is taken element-wise.
// Both are trimmed and stripped of none markers.
std::vector<std::string> parse_attribute_list(const nlohmann::json& value);

EnrollmentReply parse_enrollment(std::string_view raw);

struct CotParseOptions {
  std::vector<std::string> option_letters;  // letters that carry attribute lists
  std::optional<std::string> idk_letter;    // extra answerable letter without attributes
  bool allow_abstain = false;
};

CotVerdict parse_cot(std::string_view raw, const CotParseOptions& options);
CotVerdict parse_cot(std::string_view raw, std::span<const std::string> expected_letters);

PairwiseReply parse_pairwise(std::string_view raw);

}  // namespace r2p
