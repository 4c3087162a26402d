#include "r2p/protocol.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "r2p/errors.hpp"

namespace r2p {

using nlohmann::json;

namespace {

constexpr std::string_view kOpen = "\xE2\x9F\xA8";   // ⟨
constexpr std::string_view kClose = "\xE2\x9F\xA9";  // ⟩

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string join(std::span<const std::string> items, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

std::string letter(std::size_t i) { return std::string(1, static_cast<char>('A' + i)); }

std::string count_words(std::size_t n) {
  static constexpr std::array<std::string_view, 27> kWords = {
      "zero",      "one",       "two",      "three",      "four",      "five",     "six",
      "seven",     "eight",     "nine",     "ten",        "eleven",    "twelve",   "thirteen",
      "fourteen",  "fifteen",   "sixteen",  "seventeen",  "eighteen",  "nineteen", "twenty",
      "twenty-one", "twenty-two", "twenty-three", "twenty-four", "twenty-five", "twenty-six"};
  return n < kWords.size() ? std::string(kWords[n]) : std::to_string(n);
}

// "{general: ..., category: ..., distinct features: [a, b]}" with `sep` between fields.
std::string info_block(const ConceptRecord& r, bool include_attributes, std::string_view sep) {
  std::string out = "{general: " + r.description + "," + std::string(sep) + "category: " + r.category;
  if (include_attributes) {
    out += "," + std::string(sep) + "distinct features: [" + join(r.attributes, ", ") + "]";
  }
  out += "}";
  return out;
}

std::string strip_trailing_period(std::string s) {
  s = trim(s);
  while (!s.empty() && s.back() == '.') s.pop_back();
  return s;
}

// Lowercase, '_'/'-' as spaces, runs of spaces collapsed.
std::string normalize_key(std::string_view key) {
  std::string out;
  for (const unsigned char c : key) {
    const char ch = (c == '_' || c == '-') ? ' ' : static_cast<char>(std::tolower(c));
    if (ch == ' ' && (out.empty() || out.back() == ' ')) continue;
    out.push_back(ch);
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

std::string utf8_truncate(std::string s, std::size_t max_bytes) {
  if (s.size() <= max_bytes) return s;
  std::size_t cut = max_bytes;
  while (cut > 0 && (static_cast<unsigned char>(s[cut]) & 0xC0) == 0x80) --cut;
  s.resize(cut);
  return s;
}

// Lenient reader for the JSON-like text models produce: bare or single-quoted
// keys and strings, unquoted values, Python literals, raw newlines in strings
// and trailing commas. Returns nullopt when the text still cannot be read.
class LenientReader {
 public:
  explicit LenientReader(std::string_view s) : s_(s) {}

  std::optional<json> read() {
    skip_ws();
    auto v = value("}");
    skip_ws();
    if (!v || i_ != s_.size()) return std::nullopt;
    return v;
  }

 private:
  static bool is_key_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == ' ';
  }

  void skip_ws() {
    while (i_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[i_]))) ++i_;
  }

  // True when a bare or quoted key followed by ':' starts at `at`.
  bool key_follows(std::size_t at) const {
    while (at < s_.size() && std::isspace(static_cast<unsigned char>(s_[at]))) ++at;
    if (at >= s_.size()) return false;
    if (s_[at] == '"' || s_[at] == '\'') {
      const auto close = s_.find(s_[at], at + 1);
      if (close == std::string_view::npos) return false;
      at = close + 1;
    } else {
      const auto start = at;
      while (at < s_.size() && is_key_char(s_[at]) && at - start < 48) ++at;
      if (at == start) return false;
    }
    while (at < s_.size() && (s_[at] == ' ' || s_[at] == '\t')) ++at;
    return at < s_.size() && s_[at] == ':';
  }

  std::optional<json> value(std::string_view closers) {
    if (i_ >= s_.size()) return std::nullopt;
    const char c = s_[i_];
    if (c == '{') return object();
    if (c == '[') return array();
    if (c == '"' || c == '\'') return quoted(closers);
    return bare(closers);
  }

  std::optional<json> object() {
    ++i_;
    json out = json::object();
    while (true) {
      skip_ws();
      if (i_ >= s_.size()) return std::nullopt;
      if (s_[i_] == '}') {
        ++i_;
        return out;
      }
      std::string key;
      if (s_[i_] == '"' || s_[i_] == '\'') {
        const auto k = quoted(":");
        if (!k) return std::nullopt;
        key = k->get<std::string>();
      } else {
        const auto colon = s_.find(':', i_);
        if (colon == std::string_view::npos) return std::nullopt;
        key = trim(s_.substr(i_, colon - i_));
        if (key.empty() || !std::all_of(key.begin(), key.end(), is_key_char)) return std::nullopt;
        i_ = colon;
      }
      skip_ws();
      if (i_ >= s_.size() || s_[i_] != ':') return std::nullopt;
      ++i_;
      skip_ws();
      auto v = value(",}");
      if (!v) return std::nullopt;
      out[key] = std::move(*v);
      skip_ws();
      if (i_ < s_.size() && s_[i_] == ',') ++i_;
      else if (i_ >= s_.size() || s_[i_] != '}') return std::nullopt;
    }
  }

  std::optional<json> array() {
    ++i_;
    json out = json::array();
    while (true) {
      skip_ws();
      if (i_ >= s_.size()) return std::nullopt;
      if (s_[i_] == ']') {
        ++i_;
        return out;
      }
      auto v = value(",]");
      if (!v) return std::nullopt;
      out.push_back(std::move(*v));
      skip_ws();
      if (i_ < s_.size() && s_[i_] == ',') ++i_;
      else if (i_ >= s_.size() || s_[i_] != ']') return std::nullopt;
    }
  }

  // A quote closes the string only when followed by a structural character,
  // so apostrophes inside single-quoted text survive.
  std::optional<json> quoted(std::string_view closers) {
    const char q = s_[i_++];
    std::string out;
    for (; i_ < s_.size(); ++i_) {
      const char c = s_[i_];
      if (c == '\\' && i_ + 1 < s_.size()) {
        const char n = s_[++i_];
        switch (n) {
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          case 'r': out += '\r'; break;
          default: out += n; break;
        }
        continue;
      }
      if (c == q) {
        auto at = i_ + 1;
        while (at < s_.size() && std::isspace(static_cast<unsigned char>(s_[at]))) ++at;
        if (at >= s_.size() || closers.find(s_[at]) != std::string_view::npos || s_[at] == ':' ||
            (q == '"')) {
          ++i_;
          return json(out);
        }
      }
      out += c;
    }
    return std::nullopt;
  }

  // Unquoted scalar: runs to the closer, or to a comma that starts the next
  // key (objects) or element (arrays). Brackets inside are kept balanced.
  std::optional<json> bare(std::string_view closers) {
    const bool in_object = closers.find('}') != std::string_view::npos;
    const char closer = in_object ? '}' : ']';
    const auto start = i_;
    int depth = 0;
    for (; i_ < s_.size(); ++i_) {
      const char c = s_[i_];
      if (c == '(' || c == '[' || c == '{') ++depth;
      else if ((c == ')' || c == ']' || c == '}') && depth > 0) --depth;
      else if (depth == 0 && c == closer) break;
      else if (depth == 0 && c == ',') {
        if (!in_object) break;
        auto at = i_ + 1;
        while (at < s_.size() && std::isspace(static_cast<unsigned char>(s_[at]))) ++at;
        if (at >= s_.size() || s_[at] == '}' || key_follows(at)) break;
      } else if (depth == 0 && c == '\n' && in_object && key_follows(i_ + 1)) {
        break;
      }
    }
    const auto text = trim(s_.substr(start, i_ - start));
    if (text.empty()) return std::nullopt;
    if (text == "None" || text == "null") return json(nullptr);
    if (text == "True" || text == "true") return json(true);
    if (text == "False" || text == "false") return json(false);
    auto number = json::parse(text, nullptr, false);
    if (!number.is_discarded() && number.is_number()) return std::optional<json>(std::in_place, std::move(number));
    return json(text);
  }

  std::string_view s_;
  std::size_t i_ = 0;
};

const json* find_key(const json& obj, std::string_view wanted) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (normalize_key(it.key()) == wanted) return &it.value();
  }
  return nullptr;
}

std::string string_field(const json* v) {
  if (!v || v->is_null()) return {};
  if (v->is_string()) return trim(v->get<std::string>());
  return v->dump();
}

// Splits on commas that are not nested inside (), [] or {}.
std::vector<std::string> split_outside_brackets(std::string_view s) {
  std::vector<std::string> parts;
  int depth = 0;
  std::size_t start = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if (c == '(' || c == '[' || c == '{') ++depth;
    else if ((c == ')' || c == ']' || c == '}') && depth > 0) --depth;
    else if (c == ',' && depth == 0) {
      parts.emplace_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  parts.emplace_back(s.substr(start));
  return parts;
}

std::string strip_quotes(std::string s) {
  s = trim(s);
  while (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) {
    s = trim(std::string_view(s).substr(1, s.size() - 2));
  }
  return s;
}

ParseError schema_error(std::string_view raw, const std::string& what) {
  return ParseError(ParseStage::kSchema, std::string(raw), what);
}

}  // namespace

std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& values) {
  std::string out;
  out.reserve(tmpl.size() + 256);
  std::size_t pos = 0;
  while (true) {
    const auto open = tmpl.find(kOpen, pos);
    if (open == std::string_view::npos) break;
    const auto close = tmpl.find(kClose, open + kOpen.size());
    if (close == std::string_view::npos) break;
    const auto key = std::string(tmpl.substr(open + kOpen.size(), close - open - kOpen.size()));
    const auto it = values.find(key);
    if (it == values.end()) throw std::logic_error("template placeholder without value: " + key);
    out.append(tmpl.substr(pos, open - pos));
    out.append(it->second);
    pos = close + kClose.size();
  }
  out.append(tmpl.substr(pos));
  return out;
}

std::string render_enrollment_prompt(std::string_view category, std::string_view name) {
  if (trim(category).empty() || trim(name).empty()) {
    throw Error(ErrorCode::kInvalidArgument, "enrollment prompt needs a category and a name");
  }
  return render_template(prompt_asset("enrollment"),
                         {{"category", std::string(category)}, {"name", std::string(name)}});
}

std::vector<std::string> CotPrompt::option_letters() const {
  std::vector<std::string> out;
  for (const auto& [l, id] : letter_map) out.push_back(l);
  return out;
}

std::optional<std::string> CotPrompt::concept_for(std::string_view l) const {
  for (const auto& [key, id] : letter_map) {
    if (key == l) return id;
  }
  return std::nullopt;
}

CotPrompt render_cot_prompt(std::span<const ConceptRecord* const> candidates,
                            const CotPromptOptions& options) {
  const bool idk = options.variant == CotVariant::kIdkOption;
  const std::size_t limit = idk ? 25 : 26;
  if (candidates.empty() || candidates.size() > limit) {
    throw Error(ErrorCode::kInvalidArgument, "CoT prompt needs 1.." + std::to_string(limit) +
                                                 " candidates, got " + std::to_string(candidates.size()));
  }

  CotPrompt prompt;
  std::vector<std::string> blocks;
  std::vector<std::string> fields;
  std::vector<std::string> answer_letters;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& r = *candidates[i];
    const auto l = letter(i);
    prompt.letter_map.emplace_back(l, r.concept_id);
    blocks.push_back(l + ". Name: " + r.name + ",\n\nInfo: " + info_block(r, options.include_attributes, " "));
    fields.push_back("  \"" + l + "\": \"[Matching attributes for option " + l + "]\",");
    answer_letters.push_back(l);
  }
  if (idk) {
    prompt.idk_letter = letter(candidates.size());
    blocks.push_back(*prompt.idk_letter + ". I don't know");
    answer_letters.push_back(*prompt.idk_letter);
  }

  const auto n = candidates.size();
  std::string answer_set = join(answer_letters, ", ");
  std::string uncertainty;
  if (options.variant == CotVariant::kAbstention) {
    uncertainty = "\nIf you are not sure, answer \"" + std::string(kAbstainAnswer) + "\".";
    answer_set += ", or " + std::string(kAbstainAnswer);
  }

  prompt.text = render_template(
      prompt_asset("cot"),
      {{"descriptions", count_words(n) + (n == 1 ? " provided description" : " provided descriptions")},
       {"options", join(blocks, "\n\n")},
       {"letters", join(answer_letters, ", ")},
       {"uncertainty", uncertainty},
       {"attribute_fields", join(fields, "\n")},
       {"answer_set", answer_set}});
  return prompt;
}

std::string render_pairwise_prompt(const ConceptRecord& candidate, bool include_attributes) {
  if (trim(candidate.name).empty() || trim(candidate.description).empty()) {
    throw Error(ErrorCode::kInvalidArgument, "pairwise prompt needs a name and a description");
  }
  if (include_attributes && candidate.attributes.empty()) {
    spdlog::warn("concept '{}' has no fingerprint attributes; rendering an empty list", candidate.name);
  }
  return render_template(prompt_asset("pairwise"),
                         {{"name", candidate.name},
                          {"info", info_block(candidate, include_attributes, "\n")}});
}

std::string render_caption_prompt(const ConceptRecord& concept_record) {
  return render_template(prompt_asset("caption"),
                         {{"name", concept_record.name},
                          {"description", strip_trailing_period(concept_record.description)}});
}

std::string render_vqa_prompt(const ConceptRecord& concept_record, std::string_view question,
                              std::span<const std::string> choices) {
  if (choices.empty() || choices.size() > 26) {
    throw Error(ErrorCode::kInvalidArgument, "VQA prompt needs 1..26 choices");
  }
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < choices.size(); ++i) lines.push_back(letter(i) + ". " + trim(choices[i]));
  const auto choice_lines = join(lines, "\n");
  return render_template(prompt_asset("vqa"), {{"name", concept_record.name},
                                               {"description", strip_trailing_period(concept_record.description)},
                                               {"question", trim(question)},
                                               {"choices", choice_lines}});
}

// ---------------------------------------------------------------------------

json extract_json_object(std::string_view raw) {
  const auto open = raw.find('{');
  if (open == std::string_view::npos) {
    throw ParseError(ParseStage::kNoJsonObject, std::string(raw), "reply contains no JSON object");
  }
  int depth = 0;
  bool in_str = false;
  std::size_t close = std::string_view::npos;
  for (std::size_t i = open; i < raw.size(); ++i) {
    const char c = raw[i];
    if (in_str) {
      if (c == '\\') ++i;
      else if (c == '"') in_str = false;
      continue;
    }
    if (c == '"') in_str = true;
    else if (c == '{') ++depth;
    else if (c == '}' && --depth == 0) {
      close = i;
      break;
    }
  }
  if (close == std::string_view::npos) {
    throw ParseError(ParseStage::kNoJsonObject, std::string(raw), "JSON object is not closed");
  }
  const auto block = raw.substr(open, close - open + 1);
  auto parsed = json::parse(block, nullptr, false);
  if (parsed.is_discarded()) {
    auto lenient = LenientReader(block).read();
    if (lenient) parsed = std::move(*lenient);
  }
  if (parsed.is_discarded() || !parsed.is_object()) {
    throw ParseError(ParseStage::kInvalidJson, std::string(raw), "reply JSON does not parse");
  }
  return parsed;
}

bool is_none_marker(std::string_view s) {
  auto t = normalize_key(strip_quotes(std::string(s)));
  while (!t.empty() && (t.back() == '.' || t.back() == '!')) t.pop_back();
  return t.empty() || t == "none" || t == "n/a" || t == "na" || t == "null" || t == "[]";
}

std::vector<std::string> parse_attribute_list(const json& value) {
  std::vector<std::string> raw_items;
  if (value.is_array()) {
    for (const auto& item : value) {
      raw_items.push_back(item.is_string() ? item.get<std::string>() : item.dump());
    }
  } else if (value.is_string()) {
    auto s = trim(value.get<std::string>());
    if (s.size() >= 2 && s.front() == '[' && s.back() == ']') s = s.substr(1, s.size() - 2);
    if (!is_none_marker(s)) raw_items = split_outside_brackets(s);
  } else if (!value.is_null()) {
    raw_items.push_back(value.dump());
  }

  std::vector<std::string> out;
  for (auto& item : raw_items) {
    auto t = strip_quotes(item);
    if (!is_none_marker(t)) out.push_back(std::move(t));
  }
  return out;
}

EnrollmentReply parse_enrollment(std::string_view raw) {
  const auto obj = extract_json_object(raw);
  static const std::set<std::string> kKeys = {"general", "category", "distinct features"};
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!kKeys.contains(normalize_key(it.key()))) {
      throw schema_error(raw, "unexpected key '" + it.key() + "' in enrollment reply");
    }
  }
  const auto* general = find_key(obj, "general");
  const auto* category = find_key(obj, "category");
  const auto* features = find_key(obj, "distinct features");
  if (!general || !category || !features) {
    throw schema_error(raw, "enrollment reply needs general, category and distinct features");
  }

  EnrollmentReply reply;
  reply.general = string_field(general);
  reply.category = string_field(category);
  if (reply.general.empty()) throw schema_error(raw, "enrollment reply has an empty description");

  std::set<std::string> seen;
  for (auto& f : parse_attribute_list(*features)) {
    if (f.size() > kMaxAttributeLength) {
      spdlog::warn("truncating fingerprint attribute longer than {} bytes", kMaxAttributeLength);
      f = trim(utf8_truncate(std::move(f), kMaxAttributeLength));
    }
    if (seen.insert(fold_case(f)).second) reply.distinct_features.push_back(std::move(f));
  }
  if (reply.distinct_features.empty()) throw schema_error(raw, "enrollment reply lists no distinct features");
  return reply;
}

const std::vector<std::string>* CotVerdict::attributes_for(std::string_view l) const {
  for (const auto& [key, attrs] : matched_attributes) {
    if (key == l) return &attrs;
  }
  return nullptr;
}

CotVerdict parse_cot(std::string_view raw, const CotParseOptions& options) {
  const auto obj = extract_json_object(raw);

  CotVerdict verdict;
  for (const auto& l : options.option_letters) {
    const auto folded = fold_case(l);
    const json* v = find_key(obj, folded);
    if (!v) v = find_key(obj, "option " + folded);
    verdict.matched_attributes.emplace_back(l, v ? parse_attribute_list(*v) : std::vector<std::string>{});
  }
  verdict.reasoning = string_field(find_key(obj, "reasoning"));

  const auto answer = strip_quotes(string_field(find_key(obj, "answer")));
  if (answer.empty()) throw schema_error(raw, "CoT reply has no Answer");
  if (options.allow_abstain && normalize_key(answer).find("not sure") != std::string::npos) {
    verdict.abstained = true;
    return verdict;
  }

  // Accept "A", "a", "A.", "(A)", "Option A", "A. name".
  std::string token = normalize_key(answer);
  if (token.starts_with("option ")) token = token.substr(7);
  std::size_t b = 0;
  while (b < token.size() && !std::isalnum(static_cast<unsigned char>(token[b]))) ++b;
  std::size_t e = b;
  while (e < token.size() && std::isalnum(static_cast<unsigned char>(token[e]))) ++e;
  auto picked = token.substr(b, e - b);
  std::transform(picked.begin(), picked.end(), picked.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });

  const bool is_option = std::find(options.option_letters.begin(), options.option_letters.end(), picked) !=
                         options.option_letters.end();
  const bool is_idk = options.idk_letter && picked == *options.idk_letter;
  if (!is_option && !is_idk) {
    throw schema_error(raw, "CoT answer '" + answer + "' is not one of the presented options");
  }
  verdict.answer = picked;
  return verdict;
}

CotVerdict parse_cot(std::string_view raw, std::span<const std::string> expected_letters) {
  CotParseOptions options;
  options.option_letters.assign(expected_letters.begin(), expected_letters.end());
  return parse_cot(raw, options);
}

PairwiseReply parse_pairwise(std::string_view raw) {
  const auto obj = extract_json_object(raw);
  PairwiseReply reply;
  reply.reasoning = string_field(find_key(obj, "reasoning"));
  auto answer = normalize_token(string_field(find_key(obj, "answer")));
  answer = answer.substr(0, answer.find_first_not_of("abcdefghijklmnopqrstuvwxyz"));
  if (answer == "yes") {
    reply.answer = YesNo::kYes;
  } else if (answer == "no") {
    reply.answer = YesNo::kNo;
  } else {
    throw schema_error(raw, "pairwise answer is neither yes nor no");
  }
  return reply;
}

}  // namespace r2p
