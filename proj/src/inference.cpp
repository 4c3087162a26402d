#include "r2p/inference.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <future>
#include <limits>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "r2p/errors.hpp"

namespace r2p {

using nlohmann::json;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

const ConceptRecord& record_for(const DbSnapshot& db, std::string_view concept_id) {
  const auto* rec = db.find_by_id(concept_id);
  if (!rec) throw Error(ErrorCode::kNotFound, "concept '" + std::string(concept_id) + "' is not in the database");
  return *rec;
}

void require_gateways(const Gateways& g) {
  if (!g.vlm || !g.encoder) throw Error(ErrorCode::kInvalidArgument, "pipeline needs both a VLM and an encoder");
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::string apply_attribute_template(std::string_view tmpl, std::string_view attribute) {
  constexpr std::string_view kSlot = "{attribute}";
  std::string out(tmpl);
  if (const auto at = out.find(kSlot); at != std::string::npos) out.replace(at, kSlot.size(), attribute);
  return out;
}

std::optional<double> logprob_of_letter(const std::map<std::string, double>& alternatives, std::string_view letter) {
  std::optional<double> best;
  const auto want = fold_case(letter);
  for (const auto& [tok, lp] : alternatives) {
    if (normalize_token(tok) == want && (!best || lp > *best)) best = lp;
  }
  return best;
}

}  // namespace

std::string_view to_string(VerificationStrategy s) {
  switch (s) {
    case VerificationStrategy::kAttribute: return "attribute";
    case VerificationStrategy::kAbstention: return "abstention";
    case VerificationStrategy::kLogitsBased: return "logits_based";
    case VerificationStrategy::kPairwiseAlways: return "pairwise_always";
    case VerificationStrategy::kNone: return "none";
  }
  return "attribute";
}

VerificationStrategy parse_verification_strategy(std::string_view text) {
  for (auto s : {VerificationStrategy::kAttribute, VerificationStrategy::kAbstention,
                 VerificationStrategy::kLogitsBased, VerificationStrategy::kPairwiseAlways,
                 VerificationStrategy::kNone}) {
    if (to_string(s) == text) return s;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown verification strategy '" + std::string(text) + "'");
}

std::string_view to_string(RecognitionMode m) {
  return m == RecognitionMode::kDirectPairwise ? "direct_pairwise" : "pipeline_match";
}

RecognitionMode parse_recognition_mode(std::string_view text) {
  if (text == "pipeline_match") return RecognitionMode::kPipelineMatch;
  if (text == "direct_pairwise") return RecognitionMode::kDirectPairwise;
  throw Error(ErrorCode::kInvalidArgument, "unknown recognition mode '" + std::string(text) + "'");
}

void PipelineConfig::validate() const {
  if (k == 0) throw Error(ErrorCode::kInvalidArgument, "k must be at least 1");
  if (retrieval_mode.kind == RetrievalMode::Kind::kTwoStep && retrieval_mode.rerank_pool < k) {
    throw Error(ErrorCode::kInvalidArgument, "two_step rerank pool must be >= k");
  }
  if (!(pairwise_threshold >= 0.0 && pairwise_threshold <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "pairwise_threshold must be within [0, 1]");
  }
  if (verification == VerificationStrategy::kPairwiseAlways && !enable_pairwise) {
    throw Error(ErrorCode::kInvalidArgument, "verification=pairwise_always needs pairwise reasoning enabled");
  }
  if (!enable_fingerprints && verification != VerificationStrategy::kNone &&
      verification != VerificationStrategy::kPairwiseAlways) {
    throw Error(ErrorCode::kInvalidArgument,
                "without fingerprint attributes verification must be none or pairwise_always");
  }
  if (recognition_mode == RecognitionMode::kDirectPairwise && !enable_pairwise) {
    throw Error(ErrorCode::kInvalidArgument, "direct_pairwise recognition needs pairwise reasoning enabled");
  }
  if (!std::isfinite(logits_margin) || logits_margin < 0.0) {
    throw Error(ErrorCode::kInvalidArgument, "logits_margin must be a finite non-negative number");
  }
  if (attribute_template.find("{attribute}") == std::string::npos) {
    throw Error(ErrorCode::kInvalidArgument, "attribute_template must contain {attribute}");
  }
}

json to_json(const PipelineConfig& c) {
  return {{"k", c.k},
          {"retrieval_mode", to_string(c.retrieval_mode)},
          {"enable_cot", c.enable_cot},
          {"enable_fingerprints", c.enable_fingerprints},
          {"enable_pairwise", c.enable_pairwise},
          {"verification", to_string(c.verification)},
          {"pairwise_threshold", c.pairwise_threshold},
          {"recognition_mode", to_string(c.recognition_mode)},
          {"logits_margin", c.logits_margin},
          {"attribute_template", c.attribute_template},
          {"logit_ratio_literal", c.logit_ratio_literal}};
}

std::vector<std::string> config_warnings(const PipelineConfig& config, const EncoderBackend& encoder) {
  std::vector<std::string> out;
  const bool uses_text_scores = config.retrieval_mode.kind != RetrievalMode::Kind::kImageOnly;
  if (!encoder.cross_modal()) {
    if (uses_text_scores) {
      out.push_back("encoder '" + encoder.id() + "' is not cross-modal; " + to_string(config.retrieval_mode) +
                    " retrieval compares image and text embeddings from unaligned spaces");
    }
    if (config.enable_cot && config.verification == VerificationStrategy::kAttribute) {
      out.push_back("encoder '" + encoder.id() + "' is not cross-modal; attribute verification scores are unreliable");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

CotSelection cot_select(const ImagePayload& query_image, const CandidateSet& candidates, const DbSnapshot& db,
                        VlmBackend& vlm, const CotPromptOptions& options, std::optional<std::uint64_t> seed) {
  if (candidates.empty()) throw Error(ErrorCode::kInvalidArgument, "CoT selection needs at least one candidate");

  std::vector<const ConceptRecord*> records;
  for (const auto& c : candidates.entries) records.push_back(&record_for(db, c.concept_id));
  const auto prompt = render_cot_prompt(records, options);

  CotParseOptions parse_options;
  parse_options.option_letters = prompt.option_letters();
  parse_options.idk_letter = prompt.idk_letter;
  parse_options.allow_abstain = options.variant == CotVariant::kAbstention;

  ChatRequest request;
  request.images = {query_image};
  request.prompt_text = prompt.text;
  request.want_logprobs = options.variant == CotVariant::kIdkOption;
  request.seed = seed;

  CotSelection sel;
  ChatResponse response;
  for (int attempt = 0; attempt < 2 && !sel.verdict; ++attempt) {
    if (attempt == 1) request.prompt_text += kReaskReminder;
    response = vlm.chat(request);
    ++sel.vlm_calls;
    try {
      sel.verdict = parse_cot(response.text, parse_options);
    } catch (const ParseError& e) {
      spdlog::warn("CoT reply not parseable ({}): {}", parse_stage_name(e.stage()), e.what());
    }
  }

  const auto& rank1 = candidates.entries.front().concept_id;
  for (const auto& [letter, id] : prompt.letter_map) {
    std::vector<std::string> shared;
    if (sel.verdict) {
      if (const auto* attrs = sel.verdict->attributes_for(letter)) shared = *attrs;
    }
    sel.shared_attributes.emplace_back(id, std::move(shared));
  }

  if (!sel.verdict) {
    sel.fallback = true;
    sel.c_tilde = rank1;
    return sel;
  }
  if (sel.verdict->abstained) {
    sel.abstained = true;
    sel.c_tilde = rank1;
    return sel;
  }
  if (prompt.idk_letter && sel.verdict->answer == *prompt.idk_letter) {
    sel.chose_idk = true;
    sel.c_tilde = rank1;
  } else {
    sel.c_tilde = *prompt.concept_for(sel.verdict->answer);
  }

  if (prompt.idk_letter) {
    if (auto alternatives = answer_token_logprobs(response)) {
      sel.chosen_logprob = logprob_of_letter(*alternatives, sel.verdict->answer);
      sel.idk_logprob = logprob_of_letter(*alternatives, *prompt.idk_letter);
    }
  }
  return sel;
}

AttributeVerification attribute_verify(
    const Embedding& query_embedding,
    std::span<const std::pair<std::string, std::vector<std::string>>> shared_attributes, EncoderBackend& encoder,
    std::string_view attribute_template) {
  if (shared_attributes.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "attribute verification needs at least one candidate");
  }
  AttributeVerification out;
  double best = kNegInf;
  for (const auto& [id, attrs] : shared_attributes) {
    if (attrs.empty()) {
      out.scores[id] = kNegInf;
      continue;
    }
    std::vector<std::string> texts;
    texts.reserve(attrs.size());
    for (const auto& a : attrs) texts.push_back(apply_attribute_template(attribute_template, a));
    const auto embeddings = encoder.encode_text_batch(texts);
    double sum = 0.0;
    for (const auto& e : embeddings) sum += cosine(query_embedding, e);
    const double score = sum / static_cast<double>(embeddings.size());
    out.scores[id] = score;
    if (score > best) {
      best = score;
      out.c_tilde_a = id;
    }
  }
  return out;
}

PairwiseOutcome pairwise_refine(const ImagePayload& query_image, std::span<const std::string> candidate_ids,
                                const DbSnapshot& db, const Gateways& gateways, const PipelineConfig& config) {
  require_gateways(gateways);
  if (candidate_ids.empty()) throw Error(ErrorCode::kInvalidArgument, "pairwise reasoning needs a candidate");
  if (!gateways.reference_loader) throw Error(ErrorCode::kInvalidArgument, "pairwise reasoning needs reference images");

  std::vector<std::future<YesNoResult>> pending;
  pending.reserve(candidate_ids.size());
  for (const auto& id : candidate_ids) {
    const auto& rec = record_for(db, id);
    ChatRequest request;
    request.images = {query_image, gateways.reference_loader(rec)};
    request.prompt_text = render_pairwise_prompt(rec, config.enable_fingerprints);
    request.seed = config.seed;
    pending.push_back(std::async(std::launch::async, [&vlm = *gateways.vlm, request = std::move(request),
                                                      literal = config.logit_ratio_literal]() mutable {
      return yes_no_probability(vlm, std::move(request), literal);
    }));
  }

  PairwiseOutcome out;
  out.all_no = true;
  std::exception_ptr first_error;
  for (std::size_t i = 0; i < pending.size(); ++i) {
    double p = 0.0;
    try {
      const auto r = pending[i].get();
      p = r.p;
      if (r.answer == YesNo::kYes) out.all_no = false;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kAnswerUnparseable) {
        if (!first_error) first_error = std::current_exception();
        continue;
      }
      spdlog::warn("pairwise answer for '{}' unparseable: {}", candidate_ids[i], e.what());
      out.unparseable.push_back(candidate_ids[i]);
    } catch (...) {
      if (!first_error) first_error = std::current_exception();
      continue;
    }
    ++out.vlm_calls;
    out.probs.emplace_back(candidate_ids[i], p);
  }
  if (first_error) std::rethrow_exception(first_error);

  // Strict comparison keeps the better-ranked candidate on ties.
  double best = kNegInf;
  for (const auto& [id, p] : out.probs) {
    if (p > best) {
      best = p;
      out.c_tilde = id;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

json to_json(const InferenceTrace& t) {
  json candidates = json::array();
  for (const auto& c : t.candidate_set.entries) {
    candidates.push_back({{"concept_id", c.concept_id}, {"s_vv", c.s_vv}, {"s_vt", c.s_vt}, {"fused", c.fused}});
  }
  json j = {{"candidate_set",
             {{"k", t.candidate_set.k}, {"mode", to_string(t.candidate_set.mode)}, {"entries", candidates}}},
            {"cot_verdict", nullptr},
            {"cot_fallback", t.cot_fallback},
            {"c_tilde", t.c_tilde},
            {"attribute_scores", nullptr},
            {"c_tilde_a", t.c_tilde_a ? json(*t.c_tilde_a) : json(nullptr)},
            {"verification_passed", t.verification_passed ? json(*t.verification_passed) : json(nullptr)},
            {"pairwise_probs", nullptr},
            {"pairwise_unparseable", t.pairwise_unparseable},
            {"pairwise_all_no", t.pairwise_all_no},
            {"final", t.final_concept},
            {"vlm_calls", t.vlm_calls}};
  if (t.cot_verdict) {
    json matched = json::object();
    for (const auto& [letter, attrs] : t.cot_verdict->matched_attributes) matched[letter] = attrs;
    j["cot_verdict"] = {{"matched_attributes", matched},
                        {"reasoning", t.cot_verdict->reasoning},
                        {"answer", t.cot_verdict->answer},
                        {"abstained", t.cot_verdict->abstained}};
  }
  if (t.attribute_scores) {
    json scores = json::object();
    for (const auto& [id, s] : *t.attribute_scores) scores[id] = finite_or_null(s);
    j["attribute_scores"] = scores;
  }
  if (t.pairwise_probs) j["pairwise_probs"] = *t.pairwise_probs;
  return j;
}

InferenceTrace infer_concept(const ImagePayload& query_image, const DbSnapshot& db, const Gateways& gateways,
                             const PipelineConfig& config) {
  config.validate();
  require_gateways(gateways);
  if (db.empty()) throw Error(ErrorCode::kEmptyDatabase, "no concepts are enrolled");

  InferenceTrace trace;
  const auto query_embedding = gateways.encoder->encode_image(query_image);
  trace.candidate_set = retrieve(query_embedding, db, config.k, config.retrieval_mode);
  trace.c_tilde = trace.candidate_set.entries.front().concept_id;

  bool run_pairwise = config.enable_pairwise;
  if (config.enable_cot) {
    CotPromptOptions options;
    options.include_attributes = config.enable_fingerprints;
    if (config.verification == VerificationStrategy::kAbstention) options.variant = CotVariant::kAbstention;
    if (config.verification == VerificationStrategy::kLogitsBased) options.variant = CotVariant::kIdkOption;

    auto sel = cot_select(query_image, trace.candidate_set, db, *gateways.vlm, options, config.seed);
    trace.vlm_calls += sel.vlm_calls;
    trace.cot_verdict = sel.verdict;
    trace.cot_fallback = sel.fallback;
    trace.c_tilde = sel.c_tilde;

    switch (config.verification) {
      case VerificationStrategy::kAttribute: {
        auto v = attribute_verify(query_embedding, sel.shared_attributes, *gateways.encoder,
                                  config.attribute_template);
        trace.attribute_scores = std::move(v.scores);
        trace.c_tilde_a = v.c_tilde_a;
        trace.verification_passed = v.c_tilde_a.has_value() && *v.c_tilde_a == trace.c_tilde;
        break;
      }
      case VerificationStrategy::kAbstention:
        trace.verification_passed = !sel.fallback && !sel.abstained;
        break;
      case VerificationStrategy::kLogitsBased: {
        bool passed = !sel.fallback && !sel.chose_idk;
        if (passed && sel.idk_logprob) {
          const double chosen = sel.chosen_logprob.value_or(kNegInf);
          passed = *sel.idk_logprob < chosen - config.logits_margin;
        }
        trace.verification_passed = passed;
        break;
      }
      case VerificationStrategy::kPairwiseAlways:
      case VerificationStrategy::kNone:
        break;
    }

    if (config.verification == VerificationStrategy::kNone) {
      run_pairwise = false;
    } else if (config.verification != VerificationStrategy::kPairwiseAlways) {
      run_pairwise = run_pairwise && !*trace.verification_passed;
    }
  }

  trace.final_concept = trace.c_tilde;
  if (run_pairwise) {
    std::vector<std::string> ids;
    for (const auto& c : trace.candidate_set.entries) ids.push_back(c.concept_id);
    auto outcome = pairwise_refine(query_image, ids, db, gateways, config);
    trace.vlm_calls += outcome.vlm_calls;
    trace.pairwise_probs.emplace(outcome.probs.begin(), outcome.probs.end());
    trace.pairwise_unparseable = std::move(outcome.unparseable);
    trace.pairwise_all_no = outcome.all_no;
    if (!outcome.c_tilde.empty()) trace.final_concept = outcome.c_tilde;
  }
  return trace;
}

// ---------------------------------------------------------------------------

json to_json(const PersonalizedAnswer& a) {
  json j = {{"concept", a.concept_name}, {"concept_id", a.concept_id}, {"text", a.text}};
  if (a.answered_yes) j["answer"] = *a.answered_yes ? "yes" : "no";
  if (a.p_yes) j["p_yes"] = *a.p_yes;
  if (a.choice) j["choice"] = *a.choice;
  j["trace"] = to_json(a.trace);
  return j;
}

std::optional<std::string> extract_choice_letter(std::string_view reply, std::size_t n_choices) {
  std::size_t i = 0;
  auto skip = [&] {
    while (i < reply.size() && (std::isspace(static_cast<unsigned char>(reply[i])) || reply[i] == '(' ||
                                reply[i] == '"' || reply[i] == '\'' || reply[i] == '*')) {
      ++i;
    }
  };
  skip();
  const auto rest = fold_case(reply.substr(i));
  for (std::string_view prefix : {"answer:", "option "}) {
    if (std::string_view(rest).starts_with(prefix)) {
      i += prefix.size();
      skip();
      break;
    }
  }
  if (i >= reply.size() || !std::isalpha(static_cast<unsigned char>(reply[i]))) return std::nullopt;
  if (i + 1 < reply.size() && std::isalnum(static_cast<unsigned char>(reply[i + 1]))) return std::nullopt;
  const char letter = static_cast<char>(std::toupper(static_cast<unsigned char>(reply[i])));
  if (letter - 'A' >= static_cast<int>(n_choices)) return std::nullopt;
  return std::string(1, letter);
}

PersonalizedAnswer answer_query(const ImagePayload& query_image, const QueryTask& task, const DbSnapshot& db,
                                const Gateways& gateways, const PipelineConfig& config) {
  config.validate();
  require_gateways(gateways);
  if (db.empty()) throw Error(ErrorCode::kEmptyDatabase, "no concepts are enrolled");

  PersonalizedAnswer answer;
  auto resolve = [&](const std::string& id) {
    const auto& rec = record_for(db, id);
    answer.concept_id = rec.concept_id;
    answer.concept_name = rec.name;
    return &rec;
  };

  if (task.kind == QueryTask::Kind::kRecognition) {
    const auto* target = db.find_by_name(task.target_name);
    if (!target) {
      throw Error(ErrorCode::kUnknownTargetConcept, "no concept named '" + task.target_name + "' is enrolled");
    }
    if (config.recognition_mode == RecognitionMode::kDirectPairwise) {
      const auto query_embedding = gateways.encoder->encode_image(query_image);
      Candidate c{target->concept_id, cosine(query_embedding, target->visual_embedding),
                  cosine(query_embedding, target->textual_embedding), 0.0};
      c.fused = fuse(c.s_vv, c.s_vt);
      answer.trace.candidate_set = CandidateSet{{c}, 1, config.retrieval_mode};
      answer.trace.c_tilde = target->concept_id;

      const std::string ids[] = {target->concept_id};
      auto outcome = pairwise_refine(query_image, ids, db, gateways, config);
      answer.trace.vlm_calls = outcome.vlm_calls;
      answer.trace.pairwise_probs.emplace(outcome.probs.begin(), outcome.probs.end());
      answer.trace.pairwise_unparseable = outcome.unparseable;
      answer.trace.pairwise_all_no = outcome.all_no;
      answer.trace.final_concept = target->concept_id;

      const double p = outcome.probs.empty() ? 0.0 : outcome.probs.front().second;
      resolve(target->concept_id);
      answer.p_yes = p;
      answer.answered_yes = p >= config.pairwise_threshold;
    } else {
      answer.trace = infer_concept(query_image, db, gateways, config);
      resolve(answer.trace.final_concept);
      answer.answered_yes = answer.trace.final_concept == target->concept_id;
    }
    answer.text = *answer.answered_yes ? "yes" : "no";
    return answer;
  }

  answer.trace = infer_concept(query_image, db, gateways, config);
  const auto* rec = resolve(answer.trace.final_concept);

  ChatRequest request;
  request.images = {query_image};
  request.prompt_text = task.kind == QueryTask::Kind::kCaption
                            ? render_caption_prompt(*rec)
                            : render_vqa_prompt(*rec, task.question, task.choices);
  request.seed = config.seed;
  const auto response = gateways.vlm->chat(request);
  ++answer.trace.vlm_calls;

  const auto b = response.text.find_first_not_of(" \t\r\n");
  const auto e = response.text.find_last_not_of(" \t\r\n");
  answer.text = response.text.substr(b, e - b + 1);
  if (task.kind == QueryTask::Kind::kVqa) answer.choice = extract_choice_letter(answer.text, task.choices.size());
  return answer;
}

}  // namespace r2p
