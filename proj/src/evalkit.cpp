#include "r2p/evalkit.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <thread>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "r2p/errors.hpp"
#include "r2p/retrieval.hpp"

namespace r2p {

using nlohmann::json;

namespace {

std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

std::string collapse_spaces(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (const char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

// Uniform index in [0, n) from a 64-bit engine, independent of the standard library.
std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  const std::uint64_t bound = n;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x = rng();
  while (x >= limit) x = rng();
  return static_cast<std::size_t>(x % bound);
}

template <typename T>
void seeded_shuffle(std::vector<T>& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

constexpr double kTieEpsilon = 1e-12;

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

// ---------------------------------------------------------------------------
// Metrics

double RecognitionStats::weighted() const {
  if (!pos_acc) throw Error(ErrorCode::kNoPositives, "weighted accuracy needs at least one positive sample");
  if (!neg_acc) throw Error(ErrorCode::kNoNegatives, "weighted accuracy needs at least one negative sample");
  return *wtd;
}

RecognitionStats recognition_metrics(std::span<const std::pair<bool, bool>> results) {
  if (results.empty()) throw Error(ErrorCode::kInvalidArgument, "no recognition results");
  RecognitionStats s;
  for (const auto& [positive, yes] : results) {
    if (positive) {
      (yes ? s.tp : s.fn) += 1;
    } else {
      (yes ? s.fp : s.tn) += 1;
    }
  }
  s.pos_acc = ratio(s.tp, s.tp + s.fn);
  s.neg_acc = ratio(s.tn, s.tn + s.fp);
  if (s.pos_acc && s.neg_acc) s.wtd = (*s.pos_acc + *s.neg_acc) / 2.0;
  return s;
}

std::string normalize_name(std::string_view text) {
  std::string out = fold_case(text);
  std::replace_if(out.begin(), out.end(), [](char c) { return c == '_' || c == '-'; }, ' ');
  return collapse_spaces(out);
}

double hard_recall(std::span<const std::pair<std::string, std::string>> captions) {
  if (captions.empty()) throw Error(ErrorCode::kInvalidArgument, "no captions");
  std::size_t hits = 0;
  for (const auto& [caption, name] : captions) {
    const auto needle = normalize_name(name);
    if (!needle.empty() && normalize_name(caption).find(needle) != std::string::npos) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(captions.size());
}

std::string normalize_answer(std::string_view text) {
  std::string kept;
  for (const char c : fold_case(text)) {
    if (!std::ispunct(static_cast<unsigned char>(c))) kept.push_back(c);
  }
  return collapse_spaces(kept);
}

double vqa_accuracy(std::span<const std::pair<std::string, std::string>> results) {
  if (results.empty()) throw Error(ErrorCode::kInvalidArgument, "no VQA results");
  std::size_t hits = 0;
  for (const auto& [predicted, gold] : results) {
    if (normalize_answer(predicted) == normalize_answer(gold)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

// ---------------------------------------------------------------------------
// Split construction

SplitSpec build_split(const std::map<std::string, std::vector<ImageEmbedding>>& images_per_concept,
                      std::optional<std::size_t> n_query) {
  SplitSpec out;
  for (const auto& [concept_name, images] : images_per_concept) {
    if (images.size() < 2) {
      throw Error(ErrorCode::kTooFewImages, "concept '" + concept_name + "' has " + std::to_string(images.size()) +
                                                " image(s); a split needs at least 2");
    }
    const auto dim = images.front().embedding.dim();
    std::vector<double> mean(dim, 0.0);
    for (const auto& img : images) {
      if (img.embedding.dim() != dim) {
        throw Error(ErrorCode::kDimensionMismatch, "concept '" + concept_name + "' mixes embedding dimensions");
      }
      const auto v = img.embedding.values();
      for (std::size_t i = 0; i < dim; ++i) mean[i] += v[i];
    }
    for (auto& x : mean) x /= static_cast<double>(images.size());
    const double norm = l2_norm(mean);

    std::vector<std::pair<double, const std::string*>> scored;
    for (const auto& img : images) {
      const double s = norm > 0.0 ? cosine(img.embedding.values(), mean) / norm : 0.0;
      scored.emplace_back(std::clamp(s, -1.0, 1.0), &img.image_id);
    }

    // Scores within kTieEpsilon of the group's best count as equal, so ties that
    // are exact in real arithmetic still fall to the lower image id.
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<std::vector<std::string>> groups;
    double group_top = 0.0;
    for (const auto& [score, id] : scored) {
      if (groups.empty() || group_top - score > kTieEpsilon) {
        groups.emplace_back();
        group_top = score;
      }
      groups.back().push_back(*id);
    }
    for (auto& g : groups) std::sort(g.begin(), g.end());

    ConceptSplit split;
    split.reference = groups.front().front();
    for (auto g = groups.rbegin(); g != groups.rend(); ++g) {
      for (const auto& id : *g) {
        if (id != split.reference) split.queries.push_back(id);
      }
    }
    if (n_query && split.queries.size() > *n_query) split.queries.resize(*n_query);
    out.emplace(concept_name, std::move(split));
  }
  return out;
}

json to_json(const SplitSpec& split) {
  json concepts = json::object();
  for (const auto& [name, s] : split) concepts[name] = {{"reference", s.reference}, {"queries", s.queries}};
  return {{"concepts", concepts}};
}

// ---------------------------------------------------------------------------
// Datasets

std::optional<std::string> Dataset::concept_of_query(std::string_view image) const {
  for (const auto& c : concepts) {
    if (std::find(c.query_images.begin(), c.query_images.end(), image) != c.query_images.end()) return c.name;
  }
  return std::nullopt;
}

Dataset dataset_from_json(const json& j, std::filesystem::path base_dir) {
  Dataset d;
  d.base_dir = std::move(base_dir);
  try {
    for (const auto& c : j.at("concepts")) {
      Dataset::Concept concept_entry;
      concept_entry.name = c.at("name").get<std::string>();
      concept_entry.category = c.value("category", "");
      concept_entry.reference_image = c.value("reference_image", "");
      concept_entry.query_images = c.value("query_images", std::vector<std::string>{});
      d.concepts.push_back(std::move(concept_entry));
    }
    const auto tasks = j.value("tasks", json::object());
    for (const auto& r : tasks.value("recognition", json::array())) {
      const auto label = r.at("label").get<std::string>();
      if (label != "pos" && label != "neg") {
        throw Error(ErrorCode::kInvalidArgument, "recognition label must be pos or neg, got '" + label + "'");
      }
      d.recognition.push_back({r.at("query_image").get<std::string>(), r.at("target_name").get<std::string>(),
                               label == "pos"});
    }
    for (const auto& c : tasks.value("caption", json::array())) {
      d.caption.push_back({c.at("query_image").get<std::string>(), c.at("concept").get<std::string>()});
    }
    for (const auto& v : tasks.value("vqa", json::array())) {
      d.vqa.push_back({v.at("query_image").get<std::string>(), v.at("question").get<std::string>(),
                       v.at("choices").get<std::vector<std::string>>(), v.at("gold").get<std::string>()});
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, std::string("malformed dataset manifest: ") + e.what());
  }
  return d;
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open dataset " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, "dataset " + path.string() + " is not JSON: " + e.what());
  }
  return dataset_from_json(j, path.parent_path());
}

std::string_view to_string(EvalTask task) {
  switch (task) {
    case EvalTask::kRecognition: return "recognition";
    case EvalTask::kCaption: return "caption";
    case EvalTask::kVqa: return "vqa";
  }
  return "recognition";
}

EvalTask parse_eval_task(std::string_view text) {
  if (text == "recognition" || text == "recognize") return EvalTask::kRecognition;
  if (text == "caption") return EvalTask::kCaption;
  if (text == "vqa") return EvalTask::kVqa;
  throw Error(ErrorCode::kInvalidArgument, "unknown task '" + std::string(text) + "'");
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) return {};
  // Accumulating deviations from the first value keeps constant series exact.
  const double x0 = values.front();
  double shift = 0.0;
  for (const double x : values) shift += x - x0;
  const double mean = x0 + shift / static_cast<double>(values.size());
  double sq = 0.0;
  for (const double x : values) sq += (x - mean) * (x - mean);
  return {mean, std::sqrt(sq / static_cast<double>(values.size()))};
}

// ---------------------------------------------------------------------------
// Evaluation runs

namespace {

struct QueryOutcome {
  std::size_t index = 0;
  std::optional<PersonalizedAnswer> answer;
  std::string error_code;
  std::string error_message;
};

struct QueryJob {
  std::size_t index = 0;
  std::string query_image;
  QueryTask task;
};

std::vector<QueryJob> jobs_for(const Dataset& d, EvalTask task) {
  std::vector<QueryJob> jobs;
  switch (task) {
    case EvalTask::kRecognition:
      for (std::size_t i = 0; i < d.recognition.size(); ++i) {
        jobs.push_back({i, d.recognition[i].query_image, QueryTask::recognition(d.recognition[i].target_name)});
      }
      break;
    case EvalTask::kCaption:
      for (std::size_t i = 0; i < d.caption.size(); ++i) jobs.push_back({i, d.caption[i].query_image, QueryTask::caption()});
      break;
    case EvalTask::kVqa:
      for (std::size_t i = 0; i < d.vqa.size(); ++i) {
        jobs.push_back({i, d.vqa[i].query_image, QueryTask::vqa(d.vqa[i].question, d.vqa[i].choices)});
      }
      break;
  }
  return jobs;
}

std::optional<std::string> true_concept_of(const Dataset& d, EvalTask task, std::size_t index) {
  std::string image;
  switch (task) {
    case EvalTask::kRecognition:
      image = d.recognition[index].query_image;
      break;
    case EvalTask::kCaption:
      return d.caption[index].concept_name;
    case EvalTask::kVqa:
      image = d.vqa[index].query_image;
      break;
  }
  return d.concept_of_query(image);
}

std::string vqa_gold_letter(const Dataset::VqaItem& item) {
  const auto gold = normalize_answer(item.gold);
  for (std::size_t i = 0; i < item.choices.size(); ++i) {
    if (normalize_answer(item.choices[i]) == gold) return std::string(1, static_cast<char>('A' + i));
  }
  return item.gold;
}

std::vector<QueryOutcome> run_seed(const Dataset& d, const std::vector<QueryJob>& jobs, const DbSnapshot& db,
                                   const Gateways& gateways, const PipelineConfig& config, std::size_t n_threads) {
  std::vector<QueryOutcome> outcomes(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (auto i = next.fetch_add(1); i < jobs.size(); i = next.fetch_add(1)) {
      auto& out = outcomes[i];
      out.index = jobs[i].index;
      try {
        const auto image = load_image(d.base_dir / jobs[i].query_image);
        out.answer = answer_query(image, jobs[i].task, db, gateways, config);
      } catch (const Error& e) {
        out.error_code = std::string(error_code_name(e.code()));
        out.error_message = e.what();
      } catch (const std::exception& e) {
        out.error_code = "INTERNAL";
        out.error_message = e.what();
      }
      if (!out.error_code.empty()) {
        spdlog::warn("query {} ({}) failed: {}", jobs[i].index, jobs[i].query_image, out.error_message);
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  std::sort(outcomes.begin(), outcomes.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
  return outcomes;
}

std::map<std::string, std::optional<double>> seed_metrics(const Dataset& d, EvalTask task, const DbSnapshot& db,
                                                          const std::vector<QueryOutcome>& outcomes,
                                                          bool retrieval_ran) {
  std::map<std::string, std::optional<double>> m;
  std::size_t hits = 0;
  std::size_t hit_total = 0;
  std::vector<std::pair<bool, bool>> recognition;
  std::vector<std::pair<std::string, std::string>> pairs;

  for (const auto& o : outcomes) {
    if (!o.answer) continue;
    const auto& a = *o.answer;
    if (const auto truth = true_concept_of(d, task, o.index); retrieval_ran && truth) {
      if (const auto* rec = db.find_by_name(*truth)) {
        ++hit_total;
        hits += hit_at_k(a.trace.candidate_set, rec->concept_id) ? 1 : 0;
      }
    }
    switch (task) {
      case EvalTask::kRecognition:
        recognition.emplace_back(d.recognition[o.index].positive, a.answered_yes.value_or(false));
        break;
      case EvalTask::kCaption:
        pairs.emplace_back(a.text, d.caption[o.index].concept_name);
        break;
      case EvalTask::kVqa:
        pairs.emplace_back(a.choice.value_or(a.text), vqa_gold_letter(d.vqa[o.index]));
        break;
    }
  }

  switch (task) {
    case EvalTask::kRecognition: {
      std::optional<RecognitionStats> s;
      if (!recognition.empty()) s = recognition_metrics(recognition);
      m["pos_acc"] = s ? s->pos_acc : std::nullopt;
      m["neg_acc"] = s ? s->neg_acc : std::nullopt;
      m["wtd"] = s ? s->wtd : std::nullopt;
      break;
    }
    case EvalTask::kCaption:
      m["hard_recall"] = pairs.empty() ? std::nullopt : std::optional<double>(hard_recall(pairs));
      break;
    case EvalTask::kVqa:
      m["vqa_accuracy"] = pairs.empty() ? std::nullopt : std::optional<double>(vqa_accuracy(pairs));
      break;
  }
  m["hit_at_k"] = ratio(hits, hit_total);
  return m;
}

}  // namespace

json run_eval(const Dataset& dataset, EvalTask task, const DbSnapshot& db, const Gateways& gateways,
              const PipelineConfig& config, const EvalOptions& options) {
  config.validate();
  if (options.seeds.empty()) throw Error(ErrorCode::kInvalidArgument, "at least one seed is required");
  const auto base_jobs = jobs_for(dataset, task);
  if (base_jobs.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "dataset has no " + std::string(to_string(task)) + " items");
  }

  std::ofstream trace_out;
  if (options.trace_path) {
    trace_out.open(*options.trace_path, std::ios::trunc);
    if (!trace_out) throw Error(ErrorCode::kIoFailure, "cannot write trace file " + options.trace_path->string());
  }

  const bool retrieval_ran =
      task != EvalTask::kRecognition || config.recognition_mode == RecognitionMode::kPipelineMatch;
  std::map<std::string, std::vector<std::optional<double>>> series;
  json per_seed = json::array();
  json errors = json::array();
  std::size_t error_count = 0;

  for (const auto seed : options.seeds) {
    auto jobs = base_jobs;
    seeded_shuffle(jobs, seed);
    auto seeded = config;
    seeded.seed = seed;
    const auto outcomes = run_seed(dataset, jobs, db, gateways, seeded, std::max<std::size_t>(1, options.jobs));

    std::size_t seed_errors = 0;
    for (const auto& o : outcomes) {
      json line = {{"seed", seed}, {"task", to_string(task)}, {"query_id", o.index},
                   {"query_image", base_jobs[o.index].query_image}};
      if (o.answer) {
        line["answer"] = to_json(*o.answer);
      } else {
        ++seed_errors;
        line["error"] = {{"code", o.error_code}, {"message", o.error_message}};
        errors.push_back({{"seed", seed}, {"query_id", o.index}, {"code", o.error_code}});
      }
      if (trace_out) trace_out << line.dump() << '\n';
    }
    error_count += seed_errors;

    const auto metrics = seed_metrics(dataset, task, db, outcomes, retrieval_ran);
    json mj = json::object();
    for (const auto& [name, value] : metrics) {
      mj[name] = optional_number(value);
      series[name].push_back(value);
    }
    per_seed.push_back({{"seed", seed}, {"metrics", mj}, {"error_count", seed_errors}});
  }

  json summary = json::object();
  for (const auto& [name, values] : series) {
    const bool defined = std::all_of(values.begin(), values.end(), [](const auto& v) { return v.has_value(); });
    MeanStd ms;
    if (defined) {
      std::vector<double> xs;
      for (const auto& v : values) xs.push_back(*v);
      ms = mean_std(xs);
    }
    summary[name] = {{"mean", optional_number(ms.mean)}, {"std", optional_number(ms.std)}};
  }

  return {{"task", to_string(task)},
          {"query_count", base_jobs.size()},
          {"seeds", options.seeds},
          {"config", to_json(config)},
          {"metrics", summary},
          {"per_seed", per_seed},
          {"error_count", error_count},
          {"errors", errors}};
}

}  // namespace r2p
