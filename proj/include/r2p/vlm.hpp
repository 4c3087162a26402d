#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "r2p/image.hpp"

namespace r2p {

struct ChatRequest {
  std::vector<ImagePayload> images;  // at most two, rendered in order
  std::string prompt_text;
  bool want_logprobs = false;
  int max_tokens = 512;
  double temperature = 0.0;
  std::optional<std::uint64_t> seed;

  // Throws kInvalidArgument.
  void validate() const;
};

struct TokenLogprob {
  std::string token;
  double logprob = 0.0;
  std::vector<std::pair<std::string, double>> top;  // alternatives at this position
};

struct ChatResponse {
  std::string text;
  std::vector<TokenLogprob> tokens;  // empty when logprobs were not requested or unsupported
};

struct VlmBackendConfig {
  enum class Kind { kRemote, kMock };

  Kind kind = Kind::kMock;
  std::string base_url;
  std::string api_key_env;
  std::string model_id = "mock-vlm";
  std::chrono::milliseconds timeout{120000};
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{500};
  std::size_t max_in_flight = 2;
  int top_logprobs = 20;
  // Compute the yes/no score as the raw ratio of the two values instead of the two-way softmax.
  bool logit_ratio_literal = false;
  std::string script_path;  // mock only

  void validate() const;
};

// Multimodal chat model. Implementations are shareable across threads.
class VlmBackend {
 public:
  explicit VlmBackend(std::size_t max_in_flight);
  virtual ~VlmBackend() = default;

  // Throws kBackendUnavailable, kResponseTruncated, kMalformedResponse, kScriptMiss.
  ChatResponse chat(const ChatRequest& request);

 protected:
  virtual ChatResponse do_chat(const ChatRequest& request) = 0;

 private:
  std::counting_semaphore<1024> in_flight_;
};

// Offset of the first character of the value that follows the last `Answer`
// key in `text` (quotes and whitespace skipped), if any.
std::optional<std::size_t> find_answer_value_offset(std::string_view text,
                                                    std::string_view key = "Answer");

// Log-probabilities of the alternatives at the answer token position. Scans the
// generated tokens for the value following the `key` field.
std::optional<std::map<std::string, double>> answer_token_logprobs(const ChatResponse& response,
                                                                   std::string_view key = "Answer");

// Lowercased token with leading whitespace, quotes and punctuation removed.
std::string normalize_token(std::string_view token);

enum class YesNo { kYes, kNo };

struct YesNoResult {
  YesNo answer = YesNo::kNo;
  double p = 0.0;           // confidence that the answer is yes
  bool from_logits = false; // false when the text fallback was used
  std::string raw_text;
};

// Two-way softmax over the yes/no log-probabilities: 1 / (1 + exp(no - yes)).
double yes_probability(double yes_logprob, double no_logprob);

// Raw ratio yes / (yes + no), clamped to [0, 1]; 0.5 when the denominator is 0.
double yes_probability_literal(double yes_value, double no_value);

// Sends `request` with logprobs enabled and scores the yes/no answer token.
// Falls back to the parsed `Answer` field (p = 0.99 / 0.01) when no yes/no
// alternatives are available. Throws kAnswerUnparseable.
YesNoResult yes_no_probability(VlmBackend& vlm, ChatRequest request, bool literal_ratio = false);

// Mock VLM driven by scripted turns. Each request must match exactly one turn.
struct ScriptedTurn {
  struct Matcher {
    std::optional<std::vector<std::string>> images;  // exact image identities, in order
    std::vector<std::string> prompt_contains;        // all must occur in the prompt
    std::vector<std::string> prompt_excludes;        // none may occur
  };

  Matcher matcher;
  std::string response_text;
  std::optional<double> yes_logit;
  std::optional<double> no_logit;
  std::map<std::string, double> answer_logprobs;  // extra alternatives at the answer token
};

ScriptedTurn scripted_turn_from_json(const nlohmann::json& j);
std::vector<ScriptedTurn> load_script(const std::string& path);

class MockVlm final : public VlmBackend {
 public:
  explicit MockVlm(std::vector<ScriptedTurn> script, std::size_t max_in_flight = 2);

  struct Call {
    std::vector<std::string> images;
    std::string prompt_text;
    std::size_t turn = 0;
  };

  std::size_t call_count() const;
  std::vector<Call> calls() const;

 protected:
  ChatResponse do_chat(const ChatRequest& request) override;

 private:
  std::vector<ScriptedTurn> script_;
  mutable std::mutex mutex_;
  std::vector<Call> calls_;
};

// OpenAI-compatible chat completions client.
class RemoteVlm final : public VlmBackend {
 public:
  explicit RemoteVlm(VlmBackendConfig config);
  ~RemoteVlm() override;

  // Request body for `request`; exposed for wire-format tests.
  nlohmann::json build_body(const ChatRequest& request) const;

 protected:
  ChatResponse do_chat(const ChatRequest& request) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::unique_ptr<VlmBackend> make_vlm(const VlmBackendConfig& config);

}  // namespace r2p
