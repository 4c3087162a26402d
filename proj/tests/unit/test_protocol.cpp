#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "r2p/errors.hpp"
#include "r2p/protocol.hpp"
#include "test_support.hpp"

using namespace r2p;
using namespace r2p::testing;
using nlohmann::json;

namespace {

std::string golden(const std::string& name) {
  auto text = read_file(std::string(R2P_FIXTURE_DIR) + "/golden/" + name);
  if (!text.empty() && text.back() == '\n') text.pop_back();
  return text;
}

ConceptRecord marie() {
  auto r = make_record("c1", "marie-cat", Embedding::normalized({1.0}), Embedding::normalized({1.0}), {"pink bow on head", "grey fur"});
  r.category = "Cat";
  r.description = "A grey cat with a pink bow.";
  return r;
}

ConceptRecord bo() {
  auto r = make_record("c2", "bo", Embedding::normalized({1.0}), Embedding::normalized({1.0}), {"white paw"});
  r.category = "Dog";
  r.description = "A brown dog.";
  return r;
}

std::vector<std::string> letters(std::initializer_list<const char*> ls) { return {ls.begin(), ls.end()}; }

ParseStage stage_of(std::string_view raw, const std::function<void(std::string_view)>& parse) {
  try {
    parse(raw);
  } catch (const ParseError& e) {
    EXPECT_EQ(e.raw(), raw);
    return e.stage();
  }
  ADD_FAILURE() << "parsed: " << raw;
  return ParseStage::kSchema;
}

}  // namespace

TEST(Template, SinglePassSubstitution) {
  EXPECT_EQ(render_template("a ⟨x⟩ b ⟨y⟩", {{"x", "⟨y⟩"}, {"y", "2"}}), "a ⟨y⟩ b 2");
  EXPECT_THROW(render_template("⟨missing⟩", {}), std::logic_error);
  EXPECT_EQ(render_template("no placeholders", {}), "no placeholders");
}

TEST(Golden, Enrollment) { EXPECT_EQ(render_enrollment_prompt("Dog", "bo"), golden("enrollment_bo.txt")); }

TEST(Golden, Pairwise) { EXPECT_EQ(render_pairwise_prompt(marie()), golden("pairwise_marie.txt")); }

TEST(Golden, Cot) {
  const auto a = marie();
  const auto b = bo();
  const std::vector<const ConceptRecord*> cands = {&a, &b};
  const auto p = render_cot_prompt(cands);
  EXPECT_EQ(p.text, golden("cot_two.txt"));
  EXPECT_EQ(p.option_letters(), letters({"A", "B"}));
  EXPECT_EQ(*p.concept_for("B"), "c2");
  EXPECT_FALSE(p.concept_for("C"));
  EXPECT_FALSE(p.idk_letter);
}

TEST(Golden, CaptionAndVqa) {
  EXPECT_EQ(render_caption_prompt(bo()), golden("caption_bo.txt"));
  const std::vector<std::string> choices = {"a sofa", "the grass", "a bed"};
  EXPECT_EQ(render_vqa_prompt(bo(), "What is bo lying on?", choices), golden("vqa_bo.txt"));
  EXPECT_THROW(render_vqa_prompt(bo(), "q", std::vector<std::string>{}), Error);
}

TEST(CotPrompt, VariantsAndLimits) {
  const auto a = marie();
  const auto b = bo();
  const std::vector<const ConceptRecord*> cands = {&a, &b};

  const auto idk = render_cot_prompt(cands, {CotVariant::kIdkOption, true});
  EXPECT_EQ(*idk.idk_letter, "C");
  EXPECT_NE(idk.text.find("C. I don't know"), std::string::npos);
  EXPECT_NE(idk.text.find("<one of A, B, C>"), std::string::npos);

  const auto abstain = render_cot_prompt(cands, {CotVariant::kAbstention, true});
  EXPECT_NE(abstain.text.find("answer \"I am not sure\""), std::string::npos);

  const auto bare = render_cot_prompt(cands, {CotVariant::kStandard, false});
  EXPECT_EQ(bare.text.find("distinct features"), std::string::npos);

  const std::vector<const ConceptRecord*> one = {&a};
  EXPECT_NE(render_cot_prompt(one).text.find("one provided description."), std::string::npos);
  EXPECT_THROW(render_cot_prompt(std::vector<const ConceptRecord*>{}), Error);
  const std::vector<const ConceptRecord*> many(26, &a);
  EXPECT_NO_THROW(render_cot_prompt(many));
  EXPECT_THROW(render_cot_prompt(many, {CotVariant::kIdkOption, true}), Error);
  EXPECT_THROW(render_cot_prompt(std::vector<const ConceptRecord*>(27, &a)), Error);
}

TEST(PairwisePrompt, RequiresNameAndDescription) {
  auto r = bo();
  r.description = " ";
  EXPECT_THROW(render_pairwise_prompt(r), Error);
  EXPECT_EQ(render_pairwise_prompt(bo(), false).find("distinct features"), std::string::npos);
}

TEST(Extract, LadderStages) {
  EXPECT_EQ(extract_json_object("```json\n{\"a\": 1}\n```")["a"], 1);
  EXPECT_EQ(extract_json_object("Sure! {\"a\": \"}\"} trailing {\"b\": 2}")["a"], "}");
  EXPECT_EQ(stage_of("no braces", [](auto s) { extract_json_object(s); }), ParseStage::kNoJsonObject);
  EXPECT_EQ(stage_of("{\"a\": 1", [](auto s) { extract_json_object(s); }), ParseStage::kNoJsonObject);
  EXPECT_EQ(stage_of("{\"a\" 1}", [](auto s) { extract_json_object(s); }), ParseStage::kInvalidJson);
}

TEST(Extract, RepairsCommonDeviations) {
  const auto j = extract_json_object(
      "{\n  general: 'A dog with a \"red\" collar',\n  category: Dog,\n  'distinct features': ['a', 'b',],\n}");
  EXPECT_EQ(j["general"], "A dog with a \"red\" collar");
  EXPECT_EQ(j["category"], "Dog");
  EXPECT_EQ(j["distinct features"].size(), 2u);
  EXPECT_TRUE(extract_json_object("{\"x\": None, \"y\": True}")["x"].is_null());
}

TEST(AttributeList, StringAndListForms) {
  EXPECT_EQ(parse_attribute_list(json("red lid, blue (navy, dark) band")),
            letters({"red lid", "blue (navy, dark) band"}));
  EXPECT_EQ(parse_attribute_list(json("[a, 'b']")), letters({"a", "b"}));
  EXPECT_TRUE(parse_attribute_list(json("None")).empty());
  EXPECT_TRUE(parse_attribute_list(json("N/A.")).empty());
  EXPECT_TRUE(parse_attribute_list(json(nullptr)).empty());
  EXPECT_EQ(parse_attribute_list(json::array({" x ", "none", "y"})), letters({"x", "y"}));
  EXPECT_TRUE(is_none_marker("  "));
  EXPECT_FALSE(is_none_marker("nonexistent"));
}

TEST(Enrollment, ParsesAndCleans) {
  const auto r = parse_enrollment(
      "{general: A brown dog., category: Dog, distinct features: [white paw, White Paw, floppy ears]}");
  EXPECT_EQ(r.general, "A brown dog.");
  EXPECT_EQ(r.category, "Dog");
  EXPECT_EQ(r.distinct_features, letters({"white paw", "floppy ears"}));

  const std::string long_attr(300, 'x');
  const auto t = parse_enrollment("{\"general\": \"g\", \"category\": \"c\", \"distinct_features\": [\"" + long_attr + "\"]}");
  EXPECT_EQ(t.distinct_features[0].size(), kMaxAttributeLength);
}

TEST(Cot, ParsesAnswerForms) {
  const auto ls = letters({"A", "B", "C"});
  for (const auto* answer : {"B", "b", "B.", "(B)", "Option B", "B. bo"}) {
    const auto v = parse_cot(json{{"A", "None"}, {"B", "white paw"}, {"Answer", answer}}.dump(), ls);
    EXPECT_EQ(v.answer, "B") << answer;
    EXPECT_TRUE(v.attributes_for("A")->empty());
    EXPECT_EQ(*v.attributes_for("B"), letters({"white paw"}));
    EXPECT_TRUE(v.attributes_for("C")->empty());
  }
  const auto opt = parse_cot(R"({"Option A": "x", "Answer": "A"})", ls);
  EXPECT_EQ(*opt.attributes_for("A"), letters({"x"}));
}

TEST(Cot, AbstentionAndIdk) {
  CotParseOptions o;
  o.option_letters = letters({"A", "B"});
  o.allow_abstain = true;
  EXPECT_TRUE(parse_cot(R"({"A": "x", "Answer": "I am not sure"})", o).abstained);
  o.allow_abstain = false;
  EXPECT_THROW(parse_cot(R"({"Answer": "I am not sure"})", o), ParseError);
  o.idk_letter = "C";
  EXPECT_EQ(parse_cot(R"({"Answer": "C"})", o).answer, "C");
}

// Twenty replies that deviate from the schema in ways seen in practice.
TEST(MalformedCorpus, EachFailsAtTheExpectedStageOrRecovers) {
  const auto ls = letters({"A", "B"});
  const auto cot = [&](std::string_view s) { parse_cot(s, ls); };
  const auto pw = [](std::string_view s) { parse_pairwise(s); };
  const auto en = [](std::string_view s) { parse_enrollment(s); };

  struct Case {
    std::string raw;
    std::function<void(std::string_view)> parse;
    std::optional<ParseStage> stage;  // nullopt: recovers
  };
  const std::vector<Case> corpus = {
      {"I think it is A.", cot, ParseStage::kNoJsonObject},
      {"", pw, ParseStage::kNoJsonObject},
      {"{\"A\": \"x\", \"Answer\": \"A\"", cot, ParseStage::kNoJsonObject},
      {"{\"A\": \"x\" \"Answer\" \"A\"}", cot, ParseStage::kInvalidJson},
      {"{: :}", pw, ParseStage::kInvalidJson},
      {"{\"A\": \"x\"}", cot, ParseStage::kSchema},
      {"{\"Answer\": \"D\"}", cot, ParseStage::kSchema},
      {"{\"Answer\": \"\"}", cot, ParseStage::kSchema},
      {"{\"Reasoning\": \"r\", \"Answer\": \"maybe\"}", pw, ParseStage::kSchema},
      {"{\"Reasoning\": \"r\"}", pw, ParseStage::kSchema},
      {"{general: g, category: c}", en, ParseStage::kSchema},
      {"{general: g, category: c, distinct features: [], extra: 1}", en, ParseStage::kSchema},
      {"{general: '', category: c, distinct features: [a]}", en, ParseStage::kSchema},
      {"{general: g, category: c, distinct features: [None]}", en, ParseStage::kSchema},
      {"```json\n{\"A\": \"x\", \"B\": \"None\", \"Answer\": \"A\"}\n```", cot, std::nullopt},
      {"Here you go: {'A': 'x', 'B': 'y', 'Answer': 'B',}", cot, std::nullopt},
      {"{\"Reasoning\": \"line one\nline two\", \"Answer\": \"Yes.\"}", pw, std::nullopt},
      {"{Reasoning: same, Answer: no}", pw, std::nullopt},
      {"{\"reasoning\": \"r\", \"ANSWER\": \"yes, clearly\"}", pw, std::nullopt},
      {"{general: g, category: c, distinct_features: 'a, b'}", en, std::nullopt},
  };
  ASSERT_EQ(corpus.size(), 20u);
  for (const auto& c : corpus) {
    if (c.stage) {
      EXPECT_EQ(stage_of(c.raw, c.parse), *c.stage) << c.raw;
    } else {
      EXPECT_NO_THROW(c.parse(c.raw)) << c.raw;
    }
  }
}

TEST(Pairwise, Answers) {
  EXPECT_EQ(parse_pairwise(pairwise_reply(true)).answer, YesNo::kYes);
  EXPECT_EQ(parse_pairwise(pairwise_reply(false)).answer, YesNo::kNo);
  EXPECT_EQ(parse_pairwise(R"({"Answer": "No"})").reasoning, "");
}

TEST(PromptAssets, AllPresent) {
  for (const auto* name : {"enrollment", "cot", "pairwise", "caption", "vqa"}) {
    EXPECT_FALSE(prompt_asset(name).empty()) << name;
  }
}
