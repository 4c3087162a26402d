#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "r2p/embedding.hpp"
#include "r2p/image.hpp"

namespace r2p {

inline constexpr int kSchemaVersion = 1;

struct ReferenceImage {
  std::string path;
  std::string sha256;

  friend bool operator==(const ReferenceImage&, const ReferenceImage&) = default;
};

// One enrolled personal concept.
struct ConceptRecord {
  std::string concept_id;
  std::string name;
  std::string category;
  std::string description;
  std::vector<std::string> attributes;  // fingerprint attributes
  Embedding visual_embedding;
  Embedding textual_embedding;
  ReferenceImage reference_image;
  std::string enrolled_at;  // RFC 3339, UTC

  friend bool operator==(const ConceptRecord&, const ConceptRecord&) = default;
};

struct DatabaseManifest {
  int schema_version = kSchemaVersion;
  std::size_t embedding_dim = 0;  // 0 until the first record is stored
  std::string encoder_id;
  std::size_t record_count = 0;

  friend bool operator==(const DatabaseManifest&, const DatabaseManifest&) = default;
};

void to_json(nlohmann::json& j, const ConceptRecord& r);
// Throws kCorruptRecord when a field is missing, mistyped or violates an invariant.
ConceptRecord record_from_json(const nlohmann::json& j);

// ASCII case fold used for name uniqueness.
std::string fold_case(std::string_view s);

// Immutable, concept_id-ordered view of the database at one point in time.
class DbSnapshot {
 public:
  struct State {
    DatabaseManifest manifest;
    std::vector<ConceptRecord> records;  // sorted by concept_id
  };

  DbSnapshot() : state_(std::make_shared<const State>()) {}
  explicit DbSnapshot(std::shared_ptr<const State> state) : state_(std::move(state)) {}

  const DatabaseManifest& manifest() const { return state_->manifest; }
  const std::vector<ConceptRecord>& records() const { return state_->records; }
  std::size_t size() const { return state_->records.size(); }
  bool empty() const { return state_->records.empty(); }
  auto begin() const { return state_->records.begin(); }
  auto end() const { return state_->records.end(); }

  const ConceptRecord* find_by_id(std::string_view concept_id) const;
  const ConceptRecord* find_by_name(std::string_view name) const;  // case-insensitive

 private:
  std::shared_ptr<const State> state_;
};

// The personal concept database. Many readers, one writer at a time; writes
// publish a fresh state so existing snapshots never change.
class ConceptDatabase {
 public:
  using IdGenerator = std::function<std::string(const ConceptRecord&)>;

  ConceptDatabase();
  ConceptDatabase(ConceptDatabase&& other) noexcept;
  ConceptDatabase& operator=(ConceptDatabase&& other) noexcept;
  ConceptDatabase(const ConceptDatabase&) = delete;
  ConceptDatabase& operator=(const ConceptDatabase&) = delete;

  // Inserts or replaces by concept_id (generated when empty) and returns the stored record.
  ConceptRecord upsert(ConceptRecord record);

  // Returns false when no record has this id.
  bool remove(std::string_view concept_id);

  DbSnapshot snapshot() const;
  DatabaseManifest manifest() const;

  // Adopts `encoder_id` if none is recorded; throws kInvalidArgument on a different one.
  void bind_encoder(const std::string& encoder_id);

  void set_id_generator(IdGenerator generator);

  void save(const std::filesystem::path& dir) const;
  static ConceptDatabase load(const std::filesystem::path& dir);

 private:
  mutable std::shared_mutex mutex_;
  std::shared_ptr<const DbSnapshot::State> state_;
  IdGenerator id_generator_;
};

// Content-addressed handle for `image`: images/<sha256>.<ext>, relative to the database directory.
ReferenceImage reference_image_handle(const ImagePayload& image);

// Copies `image` into `db_dir`/images/<sha256>.<ext> (if absent) and returns its handle,
// with the path relative to `db_dir`.
ReferenceImage store_reference_image(const std::filesystem::path& db_dir, const ImagePayload& image);

// Reads a stored reference image and checks its digest. Throws kIoFailure / kCorruptRecord.
ImagePayload load_reference_image(const std::filesystem::path& db_dir, const ReferenceImage& ref);

// Random 128-bit lowercase hex.
std::string random_concept_id();

}  // namespace r2p
