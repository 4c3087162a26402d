#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "r2p/concept_db.hpp"
#include "r2p/embedding.hpp"
#include "r2p/inference.hpp"

namespace r2p {

// ---------------------------------------------------------------------------
// Metrics

struct RecognitionStats {
  std::size_t tp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;
  std::size_t fp = 0;
  std::optional<double> pos_acc;  // undefined without positives
  std::optional<double> neg_acc;  // undefined without negatives
  std::optional<double> wtd;      // undefined unless both are defined

  // Throws kNoPositives / kNoNegatives when the weighted accuracy is undefined.
  double weighted() const;
};

// Each result is (is_positive_sample, answered_yes). Throws kInvalidArgument when empty.
RecognitionStats recognition_metrics(std::span<const std::pair<bool, bool>> results);

// Case-folded, with '_' and '-' read as spaces and runs of whitespace collapsed.
std::string normalize_name(std::string_view text);

// Fraction of (caption, true name) pairs whose normalized caption contains the normalized name.
double hard_recall(std::span<const std::pair<std::string, std::string>> captions);

// Trimmed, case-folded, punctuation removed.
std::string normalize_answer(std::string_view text);

// Exact-match fraction of (predicted, gold) pairs after normalize_answer.
double vqa_accuracy(std::span<const std::pair<std::string, std::string>> results);

// ---------------------------------------------------------------------------
// Split construction

struct ImageEmbedding {
  std::string image_id;
  Embedding embedding;
};

struct ConceptSplit {
  std::string reference;
  std::vector<std::string> queries;  // furthest from the anchor first

  friend bool operator==(const ConceptSplit&, const ConceptSplit&) = default;
};

using SplitSpec = std::map<std::string, ConceptSplit>;

// Per concept: the anchor is the renormalized mean embedding, the reference is
// the image closest to it, and the remaining images become queries ordered by
// ascending similarity. Ties go to the lower image id. n_query truncates the
// query list. Throws kTooFewImages.
SplitSpec build_split(const std::map<std::string, std::vector<ImageEmbedding>>& images_per_concept,
                      std::optional<std::size_t> n_query = std::nullopt);

nlohmann::json to_json(const SplitSpec& split);

// ---------------------------------------------------------------------------
// Datasets and evaluation runs

struct Dataset {
  struct Concept {
    std::string name;
    std::string category;
    std::string reference_image;
    std::vector<std::string> query_images;
  };
  struct RecognitionItem {
    std::string query_image;
    std::string target_name;
    bool positive = false;
  };
  struct CaptionItem {
    std::string query_image;
    std::string concept_name;
  };
  struct VqaItem {
    std::string query_image;
    std::string question;
    std::vector<std::string> choices;
    std::string gold;  // a choice letter or the choice text
  };

  std::filesystem::path base_dir;  // image paths are relative to this
  std::vector<Concept> concepts;
  std::vector<RecognitionItem> recognition;
  std::vector<CaptionItem> caption;
  std::vector<VqaItem> vqa;

  // Name of the concept whose query images include `image`, if any.
  std::optional<std::string> concept_of_query(std::string_view image) const;
};

// Throws kIoFailure when unreadable, kInvalidArgument when malformed.
Dataset load_dataset(const std::filesystem::path& path);
Dataset dataset_from_json(const nlohmann::json& j, std::filesystem::path base_dir);

enum class EvalTask { kRecognition, kCaption, kVqa };
std::string_view to_string(EvalTask task);
EvalTask parse_eval_task(std::string_view text);

struct EvalOptions {
  std::vector<std::uint64_t> seeds = {1};
  std::size_t jobs = 1;
  std::optional<std::filesystem::path> trace_path;  // JSONL, one line per query and seed
};

struct MeanStd {
  std::optional<double> mean;
  std::optional<double> std;  // population standard deviation
};

// Population mean and standard deviation; a constant series yields std == 0 exactly.
MeanStd mean_std(std::span<const double> values);

// Runs every item of `task` once per seed and returns the report. Per-query
// failures are counted and recorded rather than aborting the run.
nlohmann::json run_eval(const Dataset& dataset, EvalTask task, const DbSnapshot& db, const Gateways& gateways,
                        const PipelineConfig& config, const EvalOptions& options);

}  // namespace r2p
