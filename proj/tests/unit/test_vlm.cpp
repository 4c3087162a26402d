#include <cmath>
#include <limits>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "fake_server.hpp"
#include "r2p/errors.hpp"
#include "r2p/vlm.hpp"
#include "test_support.hpp"

using namespace r2p;
using namespace r2p::testing;
using nlohmann::json;

namespace {

ChatRequest request(std::string prompt, std::vector<ImagePayload> images = {}) {
  ChatRequest r;
  r.prompt_text = std::move(prompt);
  r.images = std::move(images);
  return r;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no r2p::Error thrown";
  return ErrorCode::kInvalidArgument;
}

VlmBackendConfig remote_config(const std::string& url) {
  VlmBackendConfig c;
  c.kind = VlmBackendConfig::Kind::kRemote;
  c.base_url = url;
  c.model_id = "vlm-test";
  c.initial_backoff = std::chrono::milliseconds(1);
  c.timeout = std::chrono::milliseconds(2000);
  return c;
}

json completion(const std::string& content, const std::string& finish = "stop", json logprobs = nullptr) {
  json choice = {{"index", 0}, {"message", {{"role", "assistant"}, {"content", content}}}, {"finish_reason", finish}};
  if (!logprobs.is_null()) choice["logprobs"] = {{"content", logprobs}};
  return {{"choices", json::array({choice})}};
}

}  // namespace

TEST(ChatRequest, Validation) {
  EXPECT_NO_THROW(request("hi").validate());
  EXPECT_THROW(request("  \n").validate(), Error);
  auto three = request("hi", {labeled_image("a"), labeled_image("b"), labeled_image("c")});
  EXPECT_THROW(three.validate(), Error);
  auto r = request("hi");
  r.max_tokens = 0;
  EXPECT_THROW(r.validate(), Error);
  r = request("hi");
  r.temperature = -0.1;
  EXPECT_THROW(r.validate(), Error);
}

TEST(VlmConfig, Validation) {
  VlmBackendConfig c;
  c.kind = VlmBackendConfig::Kind::kRemote;
  EXPECT_THROW(c.validate(), Error);
  c.base_url = "http://x";
  c.top_logprobs = 21;
  EXPECT_THROW(c.validate(), Error);
  c.top_logprobs = 5;
  EXPECT_NO_THROW(c.validate());
}

TEST(MockVlm, MatchesOnImagesAndPrompt) {
  MockVlm vlm({turn(std::vector<std::string>{"q", "r1"}, {"Can you see"}, "one"),
               turn(std::vector<std::string>{"q", "r2"}, {"Can you see"}, "two"),
               turn(std::nullopt, {"Describe"}, "three", {"never"})});
  EXPECT_EQ(vlm.chat(request("Can you see it?", {labeled_image("q"), labeled_image("r2")})).text, "two");
  EXPECT_EQ(vlm.chat(request("Describe this", {labeled_image("z")})).text, "three");
  EXPECT_EQ(vlm.call_count(), 2u);
  EXPECT_EQ(vlm.calls()[0].turn, 1u);
  EXPECT_EQ(vlm.calls()[0].images, (std::vector<std::string>{"q", "r2"}));
}

TEST(MockVlm, MissAndAmbiguityAreScriptMiss) {
  MockVlm vlm({turn(std::nullopt, {"x"}, "a"), turn(std::nullopt, {"x", "y"}, "b")});
  EXPECT_EQ(code_of([&] { vlm.chat(request("nothing here")); }), ErrorCode::kScriptMiss);
  EXPECT_EQ(code_of([&] { vlm.chat(request("x and y")); }), ErrorCode::kScriptMiss);
  try {
    vlm.chat(request("unmatched prompt", {labeled_image("lbl")}));
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("lbl"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("unmatched prompt"), std::string::npos);
  }
}

TEST(MockVlm, EmptyReplyIsMalformed) {
  MockVlm vlm({turn(std::nullopt, {"x"}, "  ")});
  EXPECT_EQ(code_of([&] { vlm.chat(request("x")); }), ErrorCode::kMalformedResponse);
}

TEST(MockVlm, SynthesizesAnswerTokenLogprobs) {
  auto t = turn(std::nullopt, {"x"}, R"({"Reasoning": "r", "Answer": "yes"})");
  t.yes_logit = -0.1;
  t.no_logit = -2.4;
  MockVlm vlm({t});
  auto r = request("x");
  r.want_logprobs = true;
  const auto resp = vlm.chat(r);
  ASSERT_EQ(resp.tokens.size(), 3u);
  EXPECT_EQ(resp.tokens[1].token, "yes");
  EXPECT_DOUBLE_EQ(resp.tokens[1].logprob, -0.1);
  std::string joined;
  for (const auto& tok : resp.tokens) joined += tok.token;
  EXPECT_EQ(joined, resp.text);

  const auto alts = answer_token_logprobs(resp);
  ASSERT_TRUE(alts);
  EXPECT_DOUBLE_EQ(alts->at("no"), -2.4);

  r.want_logprobs = false;
  EXPECT_TRUE(vlm.chat(r).tokens.empty());
}

TEST(AnswerOffset, FindsLastWordBoundedKey) {
  const std::string text = R"({"Answer": "no", "FinalAnswer": "x", "answer" : 'B'})";
  const auto at = find_answer_value_offset(text);
  ASSERT_TRUE(at);
  EXPECT_EQ(text[*at], 'B');
  EXPECT_FALSE(find_answer_value_offset("no key here"));
  EXPECT_FALSE(find_answer_value_offset("Answer without colon"));
}

TEST(AnswerTokens, SpanningTokensResolveToTheValueToken) {
  ChatResponse resp;
  resp.text = R"({"Answer": "Yes"})";
  resp.tokens = {{"{\"Ans", 0, {}}, {"wer\": \"", 0, {}}, {"Yes", -0.2, {{"No", -1.8}, {" yes", -3.0}}}, {"\"}", 0, {}}};
  const auto alts = answer_token_logprobs(resp);
  ASSERT_TRUE(alts);
  EXPECT_EQ(alts->size(), 3u);
  EXPECT_DOUBLE_EQ(alts->at("Yes"), -0.2);
}

TEST(NormalizeToken, StripsDecoration) {
  EXPECT_EQ(normalize_token(" \"Yes"), "yes");
  EXPECT_EQ(normalize_token("NO."), "no");
  EXPECT_EQ(normalize_token("'"), "");
}

TEST(YesProbability, TwoWaySoftmax) {
  EXPECT_DOUBLE_EQ(yes_probability(0.0, 0.0), 0.5);
  EXPECT_NEAR(yes_probability(std::log(0.8), std::log(0.2)), 0.8, 1e-12);
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_DOUBLE_EQ(yes_probability(-inf, -inf), 0.5);
  EXPECT_DOUBLE_EQ(yes_probability(-1.0, -inf), 1.0);
  EXPECT_DOUBLE_EQ(yes_probability(-inf, -1.0), 0.0);
  for (double a = -5; a <= 0; a += 0.5) {
    for (double b = -5; b <= 0; b += 0.5) {
      EXPECT_NEAR(yes_probability(a, b) + yes_probability(b, a), 1.0, 1e-12);
    }
  }
}

TEST(YesProbability, LiteralRatio) {
  EXPECT_DOUBLE_EQ(yes_probability_literal(-1.0, -3.0), 0.25);
  EXPECT_DOUBLE_EQ(yes_probability_literal(0.0, 0.0), 0.5);
  EXPECT_DOUBLE_EQ(yes_probability_literal(2.0, -1.0), 1.0);
}

TEST(YesNo, FromLogitsSumsVariants) {
  auto t = turn(std::nullopt, {"x"}, R"({"Answer": "Yes"})");
  t.answer_logprobs = {{"Yes", std::log(0.3)}, {" yes", std::log(0.3)}, {"No", std::log(0.2)}};
  MockVlm vlm({t});
  const auto r = yes_no_probability(vlm, request("x"));
  EXPECT_TRUE(r.from_logits);
  EXPECT_NEAR(r.p, 0.6 / 0.8, 1e-12);
  EXPECT_EQ(r.answer, YesNo::kYes);
}

TEST(YesNo, LiteralModeUsesRatio) {
  auto t = turn(std::nullopt, {"x"}, R"({"Answer": "no"})");
  t.yes_logit = -3.0;
  t.no_logit = -1.0;
  MockVlm vlm({t});
  EXPECT_DOUBLE_EQ(yes_no_probability(vlm, request("x"), true).p, 0.75);
}

TEST(YesNo, TextFallbackAndUnparseable) {
  MockVlm vlm({turn(std::nullopt, {"json"}, R"({"Reasoning": "same dog", "Answer": "yes"})"),
               turn(std::nullopt, {"bare"}, "No."), turn(std::nullopt, {"junk"}, "Perhaps.")});
  const auto a = yes_no_probability(vlm, request("json"));
  EXPECT_FALSE(a.from_logits);
  EXPECT_DOUBLE_EQ(a.p, 0.99);
  EXPECT_DOUBLE_EQ(yes_no_probability(vlm, request("bare")).p, 0.01);
  EXPECT_EQ(code_of([&] { yes_no_probability(vlm, request("junk")); }), ErrorCode::kAnswerUnparseable);
}

TEST(ScriptJson, RoundTripAndErrors) {
  const auto t = scripted_turn_from_json(json::parse(R"({
    "matcher": {"images": ["q", "r"], "prompt_contains": "Can you", "prompt_excludes": ["zzz"]},
    "response_text": "ok", "yes_logit": -0.5, "answer_logprobs": {"A": -0.1}})"));
  EXPECT_EQ(*t.matcher.images, (std::vector<std::string>{"q", "r"}));
  EXPECT_EQ(t.matcher.prompt_contains, std::vector<std::string>{"Can you"});
  EXPECT_EQ(*t.yes_logit, -0.5);
  EXPECT_FALSE(t.no_logit);
  EXPECT_EQ(t.answer_logprobs.at("A"), -0.1);
  EXPECT_THROW(scripted_turn_from_json(json::parse(R"({"matcher": {}})")), Error);

  TempDir dir;
  write_file(dir / "s.json", R"([{"response_text": "a"}])");
  EXPECT_EQ(load_script((dir / "s.json").string()).size(), 1u);
  write_file(dir / "bad.json", R"({"response_text": "a"})");
  EXPECT_THROW(load_script((dir / "bad.json").string()), Error);
  EXPECT_EQ(code_of([&] { load_script((dir / "missing.json").string()); }), ErrorCode::kIoFailure);
}

TEST(RemoteVlm, RequestBody) {
  RemoteVlm vlm(remote_config("http://127.0.0.1:1/v1"));
  auto r = request("look", {labeled_image("q")});
  auto body = vlm.build_body(r);
  EXPECT_EQ(body["model"], "vlm-test");
  EXPECT_EQ(body["temperature"], 0.0);
  EXPECT_FALSE(body.contains("logprobs"));
  EXPECT_FALSE(body.contains("seed"));
  const auto& content = body["messages"][0]["content"];
  EXPECT_EQ(content[0]["text"], "look");
  EXPECT_EQ(content[1]["image_url"]["url"],
            "data:image/png;base64," + base64_encode(labeled_image("q").bytes));

  r.want_logprobs = true;
  r.seed = 7;
  body = vlm.build_body(r);
  EXPECT_EQ(body["logprobs"], true);
  EXPECT_EQ(body["top_logprobs"], 20);
  EXPECT_EQ(body["seed"], 7);
}

TEST(RemoteVlm, ParsesTextAndLogprobs) {
  const json lp = json::array({
      {{"token", "{\"Answer\": \""}, {"logprob", 0.0}, {"top_logprobs", json::array()}},
      {{"token", "no"}, {"logprob", -0.3}, {"top_logprobs", json::array({{{"token", "yes"}, {"logprob", -1.4}}})}},
      {{"token", "\"}"}, {"logprob", 0.0}},
  });
  FakeServer server([&](const FakeServer::Seen&, int) {
    return FakeServer::Reply{200, completion(R"({"Answer": "no"})", "stop", lp).dump()};
  });
  RemoteVlm vlm(remote_config(server.base_url()));
  const auto r = yes_no_probability(vlm, request("q?"));
  EXPECT_TRUE(r.from_logits);
  EXPECT_NEAR(r.p, 1.0 / (1.0 + std::exp(-0.3 + 1.4)), 1e-12);
  const auto seen = server.requests();
  ASSERT_EQ(seen.size(), 1u);
  EXPECT_EQ(seen[0].path, "/v1/chat/completions");
  EXPECT_EQ(seen[0].body["logprobs"], true);
}

TEST(RemoteVlm, TruncationAndMalformedReplies) {
  FakeServer truncated([](const FakeServer::Seen&, int) {
    return FakeServer::Reply{200, completion("{\"Reasoning\": \"long", "length").dump()};
  });
  RemoteVlm a(remote_config(truncated.base_url()));
  EXPECT_EQ(code_of([&] { a.chat(request("x")); }), ErrorCode::kResponseTruncated);

  FakeServer no_choices([](const FakeServer::Seen&, int) { return FakeServer::Reply{200, R"({"choices": []})"}; });
  RemoteVlm b(remote_config(no_choices.base_url()));
  EXPECT_EQ(code_of([&] { b.chat(request("x")); }), ErrorCode::kMalformedResponse);

  FakeServer null_content([](const FakeServer::Seen&, int) {
    return FakeServer::Reply{200, R"({"choices": [{"message": {"content": null}}]})"};
  });
  RemoteVlm c(remote_config(null_content.base_url()));
  EXPECT_EQ(code_of([&] { c.chat(request("x")); }), ErrorCode::kMalformedResponse);
}

TEST(RemoteVlm, RetriesThenSucceeds) {
  FakeServer server([](const FakeServer::Seen&, int i) {
    if (i < 2) return FakeServer::Reply{502, "{}"};
    return FakeServer::Reply{200, completion("fine").dump()};
  });
  RemoteVlm vlm(remote_config(server.base_url()));
  EXPECT_EQ(vlm.chat(request("x")).text, "fine");
  EXPECT_EQ(server.requests().size(), 3u);
}

TEST(MakeVlm, MockFromScriptFile) {
  TempDir dir;
  write_file(dir / "s.json", R"([{"matcher": {"prompt_contains": "hi"}, "response_text": "hello"}])");
  VlmBackendConfig c;
  c.script_path = (dir / "s.json").string();
  auto vlm = make_vlm(c);
  EXPECT_EQ(vlm->chat(request("hi")).text, "hello");
}
