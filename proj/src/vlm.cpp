#include "r2p/vlm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "http_client.hpp"
#include "r2p/concept_db.hpp"
#include "r2p/errors.hpp"
#include "r2p/protocol.hpp"

namespace r2p {

using nlohmann::json;

namespace {

std::ptrdiff_t clamp_in_flight(std::size_t n) {
  return static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(n, 1, 1024));
}

double log_sum_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

}  // namespace

void ChatRequest::validate() const {
  if (prompt_text.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw Error(ErrorCode::kInvalidArgument, "chat prompt is empty");
  }
  if (images.size() > 2) throw Error(ErrorCode::kInvalidArgument, "at most two images per request");
  for (const auto& img : images) validate_image(img);
  if (max_tokens < 1) throw Error(ErrorCode::kInvalidArgument, "max_tokens must be positive");
  if (!(temperature >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "temperature must be >= 0");
}

void VlmBackendConfig::validate() const {
  if (kind == Kind::kRemote && base_url.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "remote VLM requires base_url");
  }
  if (max_retries < 0) throw Error(ErrorCode::kInvalidArgument, "max_retries must be >= 0");
  if (top_logprobs < 0 || top_logprobs > 20) {
    throw Error(ErrorCode::kInvalidArgument, "top_logprobs must be within 0..20");
  }
}

VlmBackend::VlmBackend(std::size_t max_in_flight) : in_flight_(clamp_in_flight(max_in_flight)) {}

ChatResponse VlmBackend::chat(const ChatRequest& request) {
  request.validate();
  in_flight_.acquire();
  struct Release {
    std::counting_semaphore<1024>& s;
    ~Release() { s.release(); }
  } release{in_flight_};
  auto response = do_chat(request);
  if (response.text.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw Error(ErrorCode::kMalformedResponse, "model returned an empty reply");
  }
  return response;
}

std::optional<std::size_t> find_answer_value_offset(std::string_view text, std::string_view key) {
  const auto lower = fold_case(text);
  const auto lkey = fold_case(key);
  std::optional<std::size_t> found;
  for (auto at = lower.find(lkey); at != std::string::npos; at = lower.find(lkey, at + 1)) {
    if (at > 0 && is_word_char(lower[at - 1])) continue;
    std::size_t i = at + lkey.size();
    if (i < lower.size() && is_word_char(lower[i])) continue;
    if (i < lower.size() && (lower[i] == '"' || lower[i] == '\'')) ++i;
    while (i < lower.size() && std::isspace(static_cast<unsigned char>(lower[i]))) ++i;
    if (i >= lower.size() || lower[i] != ':') continue;
    ++i;
    while (i < lower.size() && (std::isspace(static_cast<unsigned char>(lower[i])) || lower[i] == '"' ||
                                lower[i] == '\'')) {
      ++i;
    }
    if (i < lower.size()) found = i;
  }
  return found;
}

std::optional<std::map<std::string, double>> answer_token_logprobs(const ChatResponse& response,
                                                                   std::string_view key) {
  if (response.tokens.empty()) return std::nullopt;
  std::string joined;
  for (const auto& t : response.tokens) joined += t.token;
  const auto offset = find_answer_value_offset(joined, key);
  if (!offset) return std::nullopt;

  std::size_t begin = 0;
  for (const auto& t : response.tokens) {
    const auto end = begin + t.token.size();
    if (*offset < end) {
      std::map<std::string, double> out;
      for (const auto& [tok, lp] : t.top) out.emplace(tok, lp);
      out.emplace(t.token, t.logprob);
      return out;
    }
    begin = end;
  }
  return std::nullopt;
}

std::string normalize_token(std::string_view token) {
  std::size_t b = 0;
  while (b < token.size() && !is_word_char(token[b])) ++b;
  std::size_t e = token.size();
  while (e > b && !is_word_char(token[e - 1])) --e;
  return fold_case(token.substr(b, e - b));
}

double yes_probability(double yes_logprob, double no_logprob) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  if (yes_logprob == kNegInf && no_logprob == kNegInf) return 0.5;
  return 1.0 / (1.0 + std::exp(no_logprob - yes_logprob));
}

double yes_probability_literal(double yes_value, double no_value) {
  const double denom = yes_value + no_value;
  if (denom == 0.0 || !std::isfinite(denom)) return 0.5;
  return std::clamp(yes_value / denom, 0.0, 1.0);
}

YesNoResult yes_no_probability(VlmBackend& vlm, ChatRequest request, bool literal_ratio) {
  request.want_logprobs = true;
  const auto response = vlm.chat(request);

  YesNoResult result;
  result.raw_text = response.text;

  if (auto alternatives = answer_token_logprobs(response)) {
    constexpr double kNegInf = -std::numeric_limits<double>::infinity();
    double yes = kNegInf;
    double no = kNegInf;
    for (const auto& [tok, lp] : *alternatives) {
      const auto norm = normalize_token(tok);
      if (norm == "yes") yes = log_sum_exp(yes, lp);
      else if (norm == "no") no = log_sum_exp(no, lp);
    }
    if (yes != kNegInf || no != kNegInf) {
      result.from_logits = true;
      result.p = (literal_ratio && yes != kNegInf && no != kNegInf) ? yes_probability_literal(yes, no)
                                                                    : yes_probability(yes, no);
      result.answer = result.p >= 0.5 ? YesNo::kYes : YesNo::kNo;
      return result;
    }
  }

  try {
    const auto reply = parse_pairwise(response.text);
    result.answer = reply.answer;
  } catch (const ParseError&) {
    // Bare "yes" / "no" replies without the JSON wrapper.
    const auto norm = normalize_token(response.text);
    if (norm == "yes") result.answer = YesNo::kYes;
    else if (norm == "no") result.answer = YesNo::kNo;
    else throw Error(ErrorCode::kAnswerUnparseable, "no yes/no answer in reply: " + response.text.substr(0, 120));
  }
  result.p = result.answer == YesNo::kYes ? 0.99 : 0.01;
  return result;
}

// ---------------------------------------------------------------------------
// Mock

ScriptedTurn scripted_turn_from_json(const json& j) {
  ScriptedTurn turn;
  try {
    if (j.contains("matcher")) {
      const auto& m = j.at("matcher");
      if (m.contains("images")) turn.matcher.images = m.at("images").get<std::vector<std::string>>();
      for (const auto* key : {"prompt_contains", "prompt_excludes"}) {
        if (!m.contains(key)) continue;
        auto& dest = std::string_view(key) == "prompt_contains" ? turn.matcher.prompt_contains
                                                                : turn.matcher.prompt_excludes;
        const auto& v = m.at(key);
        if (v.is_string()) dest.push_back(v.get<std::string>());
        else dest = v.get<std::vector<std::string>>();
      }
    }
    turn.response_text = j.at("response_text").get<std::string>();
    if (j.contains("yes_logit")) turn.yes_logit = j.at("yes_logit").get<double>();
    if (j.contains("no_logit")) turn.no_logit = j.at("no_logit").get<double>();
    if (j.contains("answer_logprobs")) {
      turn.answer_logprobs = j.at("answer_logprobs").get<std::map<std::string, double>>();
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, std::string("bad scripted turn: ") + e.what());
  }
  return turn;
}

std::vector<ScriptedTurn> load_script(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open VLM script " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, "VLM script " + path + " is not JSON: " + e.what());
  }
  if (!j.is_array()) throw Error(ErrorCode::kInvalidArgument, "VLM script must be a JSON array");
  std::vector<ScriptedTurn> script;
  for (const auto& t : j) script.push_back(scripted_turn_from_json(t));
  return script;
}

MockVlm::MockVlm(std::vector<ScriptedTurn> script, std::size_t max_in_flight)
    : VlmBackend(max_in_flight), script_(std::move(script)) {}

std::size_t MockVlm::call_count() const {
  std::lock_guard lock(mutex_);
  return calls_.size();
}

std::vector<MockVlm::Call> MockVlm::calls() const {
  std::lock_guard lock(mutex_);
  return calls_;
}

ChatResponse MockVlm::do_chat(const ChatRequest& request) {
  std::vector<std::string> labels;
  for (const auto& img : request.images) labels.push_back(image_identity(img.bytes));

  std::vector<std::size_t> matches;
  for (std::size_t i = 0; i < script_.size(); ++i) {
    const auto& m = script_[i].matcher;
    if (m.images && *m.images != labels) continue;
    const bool contains = std::all_of(m.prompt_contains.begin(), m.prompt_contains.end(), [&](const auto& s) {
      return request.prompt_text.find(s) != std::string::npos;
    });
    const bool excluded = std::any_of(m.prompt_excludes.begin(), m.prompt_excludes.end(), [&](const auto& s) {
      return request.prompt_text.find(s) != std::string::npos;
    });
    if (contains && !excluded) matches.push_back(i);
  }

  if (matches.size() != 1) {
    std::string image_list;
    for (const auto& l : labels) image_list += (image_list.empty() ? "" : ", ") + l;
    const auto prefix = request.prompt_text.substr(0, 80);
    throw Error(ErrorCode::kScriptMiss,
                (matches.empty() ? "no scripted turn matches" : "several scripted turns match") +
                    std::string(" request [images: ") + image_list + "] prompt prefix: \"" + prefix + "\"");
  }

  const auto& turn = script_[matches.front()];
  {
    std::lock_guard lock(mutex_);
    calls_.push_back(Call{labels, request.prompt_text, matches.front()});
  }

  ChatResponse response;
  response.text = turn.response_text;

  std::map<std::string, double> alternatives = turn.answer_logprobs;
  if (turn.yes_logit) alternatives.emplace("yes", *turn.yes_logit);
  if (turn.no_logit) alternatives.emplace("no", *turn.no_logit);
  if (!request.want_logprobs || alternatives.empty()) return response;

  // Three synthetic tokens: text before the answer value, the value's first word, the rest.
  const auto& text = response.text;
  const auto at = find_answer_value_offset(text).value_or(0);
  auto end = at;
  while (end < text.size() && is_word_char(text[end])) ++end;
  if (end == at) end = std::min(text.size(), at + 1);

  TokenLogprob answer_token;
  answer_token.token = text.substr(at, end - at);
  const auto own = alternatives.find(normalize_token(answer_token.token));
  answer_token.logprob = own != alternatives.end()
                             ? own->second
                             : std::max_element(alternatives.begin(), alternatives.end(),
                                                [](const auto& a, const auto& b) { return a.second < b.second; })
                                   ->second;
  for (const auto& [tok, lp] : alternatives) answer_token.top.emplace_back(tok, lp);

  if (at > 0) response.tokens.push_back(TokenLogprob{text.substr(0, at), 0.0, {}});
  response.tokens.push_back(std::move(answer_token));
  if (end < text.size()) response.tokens.push_back(TokenLogprob{text.substr(end), 0.0, {}});
  return response;
}

// ---------------------------------------------------------------------------
// Remote

struct RemoteVlm::Impl {
  VlmBackendConfig config;
  detail::JsonHttpClient http;
};

RemoteVlm::RemoteVlm(VlmBackendConfig config)
    : VlmBackend(config.max_in_flight),
      impl_(std::make_unique<Impl>(Impl{
          config, detail::JsonHttpClient(config.base_url, config.api_key_env,
                                         detail::RetryPolicy{.max_retries = config.max_retries,
                                                             .initial_backoff = config.initial_backoff,
                                                             .timeout = config.timeout})})) {
  impl_->config.validate();
}

RemoteVlm::~RemoteVlm() = default;

json RemoteVlm::build_body(const ChatRequest& request) const {
  json content = json::array();
  content.push_back({{"type", "text"}, {"text", request.prompt_text}});
  for (const auto& img : request.images) {
    content.push_back({{"type", "image_url"},
                       {"image_url", {{"url", "data:" + img.media_type + ";base64," + base64_encode(img.bytes)}}}});
  }
  json body = {{"model", impl_->config.model_id},
               {"messages", json::array({{{"role", "user"}, {"content", content}}})},
               {"temperature", request.temperature},
               {"max_tokens", request.max_tokens}};
  if (request.want_logprobs) {
    body["logprobs"] = true;
    body["top_logprobs"] = impl_->config.top_logprobs;
  }
  if (request.seed) body["seed"] = *request.seed;
  return body;
}

ChatResponse RemoteVlm::do_chat(const ChatRequest& request) {
  const auto res = impl_->http.post("/chat/completions", build_body(request));
  ChatResponse response;
  try {
    const auto& choice = res.at("choices").at(0);
    const auto& content = choice.at("message").at("content");
    if (!content.is_string()) throw Error(ErrorCode::kMalformedResponse, "reply content is not a string");
    response.text = content.get<std::string>();
    if (choice.contains("finish_reason") && choice.at("finish_reason") == "length") {
      throw Error(ErrorCode::kResponseTruncated,
                  "reply hit max_tokens=" + std::to_string(request.max_tokens) + ": " +
                      response.text.substr(0, 120));
    }
    if (request.want_logprobs && choice.contains("logprobs") && choice.at("logprobs").is_object() &&
        choice.at("logprobs").contains("content") && choice.at("logprobs").at("content").is_array()) {
      for (const auto& t : choice.at("logprobs").at("content")) {
        TokenLogprob tok;
        tok.token = t.at("token").get<std::string>();
        tok.logprob = t.at("logprob").get<double>();
        if (t.contains("top_logprobs") && t.at("top_logprobs").is_array()) {
          for (const auto& alt : t.at("top_logprobs")) {
            tok.top.emplace_back(alt.at("token").get<std::string>(), alt.at("logprob").get<double>());
          }
        }
        response.tokens.push_back(std::move(tok));
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformedResponse, std::string("bad chat completion: ") + e.what());
  }
  return response;
}

std::unique_ptr<VlmBackend> make_vlm(const VlmBackendConfig& config) {
  config.validate();
  if (config.kind == VlmBackendConfig::Kind::kRemote) return std::make_unique<RemoteVlm>(config);
  return std::make_unique<MockVlm>(load_script(config.script_path), config.max_in_flight);
}

}  // namespace r2p
