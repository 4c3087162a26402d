#include "r2p/concept_db.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "r2p/errors.hpp"

namespace r2p {

using nlohmann::json;

namespace {

constexpr const char* kManifestFile = "manifest.json";
constexpr const char* kRecordsFile = "concepts.jsonl";

json embedding_json(const Embedding& e) {
  return json(std::vector<double>(e.values().begin(), e.values().end()));
}

// Invariant check shared by upsert (precondition) and load (corruption).
void check_record(const ConceptRecord& r, ErrorCode code) {
  auto fail = [&](const std::string& what) {
    throw Error(code, "concept '" + r.name + "': " + what);
  };
  if (r.name.empty()) fail("name is empty");
  if (r.attributes.empty()) fail("attribute list is empty");
  for (const auto& a : r.attributes) {
    if (a.empty()) fail("empty attribute string");
  }
  if (r.visual_embedding.empty() || r.textual_embedding.empty()) fail("missing embedding");
  if (r.visual_embedding.dim() != r.textual_embedding.dim()) {
    fail("visual and textual embedding dimensions differ");
  }
  for (const auto* e : {&r.visual_embedding, &r.textual_embedding}) {
    if (std::abs(e->norm() - 1.0) > kUnitNormTolerance) fail("embedding is not unit-norm");
  }
}

void write_file_atomically(const std::filesystem::path& path, const std::string& content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + tmp.string());
    out << content;
    if (!out.flush()) throw Error(ErrorCode::kIoFailure, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::kIoFailure, "cannot rename " + tmp.string() + ": " + ec.message());
}

}  // namespace

std::string fold_case(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  return out;
}

std::string random_concept_id() {
  std::random_device rd;
  std::uniform_int_distribution<std::uint32_t> dist;
  std::ostringstream os;
  os << std::hex;
  for (int i = 0; i < 4; ++i) {
    os.width(8);
    os.fill('0');
    os << dist(rd);
  }
  return os.str();
}

void to_json(json& j, const ConceptRecord& r) {
  j = json{{"concept_id", r.concept_id},
           {"name", r.name},
           {"category", r.category},
           {"description", r.description},
           {"attributes", r.attributes},
           {"visual_embedding", embedding_json(r.visual_embedding)},
           {"textual_embedding", embedding_json(r.textual_embedding)},
           {"reference_image", {{"path", r.reference_image.path}, {"sha256", r.reference_image.sha256}}},
           {"enrolled_at", r.enrolled_at}};
}

ConceptRecord record_from_json(const json& j) {
  ConceptRecord r;
  try {
    r.concept_id = j.at("concept_id").get<std::string>();
    r.name = j.at("name").get<std::string>();
    r.category = j.at("category").get<std::string>();
    r.description = j.at("description").get<std::string>();
    r.attributes = j.at("attributes").get<std::vector<std::string>>();
    r.visual_embedding = Embedding::from_unit(j.at("visual_embedding").get<std::vector<double>>());
    r.textual_embedding = Embedding::from_unit(j.at("textual_embedding").get<std::vector<double>>());
    const auto& ref = j.at("reference_image");
    r.reference_image.path = ref.at("path").get<std::string>();
    r.reference_image.sha256 = ref.at("sha256").get<std::string>();
    r.enrolled_at = j.at("enrolled_at").get<std::string>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kCorruptRecord, std::string("malformed concept record: ") + e.what());
  }
  if (r.concept_id.empty()) throw Error(ErrorCode::kCorruptRecord, "record without concept_id");
  check_record(r, ErrorCode::kCorruptRecord);
  return r;
}

const ConceptRecord* DbSnapshot::find_by_id(std::string_view concept_id) const {
  const auto& recs = state_->records;
  auto it = std::lower_bound(recs.begin(), recs.end(), concept_id,
                             [](const ConceptRecord& r, std::string_view id) { return r.concept_id < id; });
  return (it != recs.end() && it->concept_id == concept_id) ? &*it : nullptr;
}

const ConceptRecord* DbSnapshot::find_by_name(std::string_view name) const {
  const auto folded = fold_case(name);
  for (const auto& r : state_->records) {
    if (fold_case(r.name) == folded) return &r;
  }
  return nullptr;
}

ConceptDatabase::ConceptDatabase()
    : state_(std::make_shared<const DbSnapshot::State>()),
      id_generator_([](const ConceptRecord&) { return random_concept_id(); }) {}

ConceptDatabase::ConceptDatabase(ConceptDatabase&& other) noexcept {
  std::unique_lock lock(other.mutex_);
  state_ = std::move(other.state_);
  id_generator_ = std::move(other.id_generator_);
  other.state_ = std::make_shared<const DbSnapshot::State>();
}

ConceptDatabase& ConceptDatabase::operator=(ConceptDatabase&& other) noexcept {
  if (this != &other) {
    std::scoped_lock lock(mutex_, other.mutex_);
    state_ = std::move(other.state_);
    id_generator_ = std::move(other.id_generator_);
    other.state_ = std::make_shared<const DbSnapshot::State>();
  }
  return *this;
}

ConceptRecord ConceptDatabase::upsert(ConceptRecord record) {
  check_record(record, ErrorCode::kInvalidArgument);

  std::unique_lock lock(mutex_);
  const auto& current = *state_;
  const auto dim = record.visual_embedding.dim();
  if (current.manifest.embedding_dim != 0 && current.manifest.embedding_dim != dim) {
    throw Error(ErrorCode::kDimensionMismatch,
                "embedding dim " + std::to_string(dim) + " does not match database dim " +
                    std::to_string(current.manifest.embedding_dim));
  }
  if (record.concept_id.empty()) record.concept_id = id_generator_(record);

  const auto folded = fold_case(record.name);
  for (const auto& r : current.records) {
    if (r.concept_id != record.concept_id && fold_case(r.name) == folded) {
      throw Error(ErrorCode::kDuplicateName,
                  "name '" + record.name + "' is already used by concept " + r.concept_id);
    }
  }

  auto next = std::make_shared<DbSnapshot::State>(current);
  auto& recs = next->records;
  auto it = std::lower_bound(recs.begin(), recs.end(), record.concept_id,
                             [](const ConceptRecord& r, const std::string& id) { return r.concept_id < id; });
  if (it != recs.end() && it->concept_id == record.concept_id) {
    *it = record;
  } else {
    recs.insert(it, record);
  }
  next->manifest.embedding_dim = dim;
  next->manifest.record_count = recs.size();
  state_ = std::move(next);
  return record;
}

bool ConceptDatabase::remove(std::string_view concept_id) {
  std::unique_lock lock(mutex_);
  auto next = std::make_shared<DbSnapshot::State>(*state_);
  auto& recs = next->records;
  auto it = std::find_if(recs.begin(), recs.end(),
                         [&](const ConceptRecord& r) { return r.concept_id == concept_id; });
  if (it == recs.end()) return false;
  recs.erase(it);
  next->manifest.record_count = recs.size();
  state_ = std::move(next);
  return true;
}

DbSnapshot ConceptDatabase::snapshot() const {
  std::shared_lock lock(mutex_);
  return DbSnapshot(state_);
}

DatabaseManifest ConceptDatabase::manifest() const {
  std::shared_lock lock(mutex_);
  return state_->manifest;
}

void ConceptDatabase::bind_encoder(const std::string& encoder_id) {
  std::unique_lock lock(mutex_);
  const auto& current = state_->manifest.encoder_id;
  if (current == encoder_id) return;
  if (!current.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "database was embedded with encoder '" + current +
                                                 "', not '" + encoder_id + "'");
  }
  auto next = std::make_shared<DbSnapshot::State>(*state_);
  next->manifest.encoder_id = encoder_id;
  state_ = std::move(next);
}

void ConceptDatabase::set_id_generator(IdGenerator generator) {
  std::unique_lock lock(mutex_);
  id_generator_ = std::move(generator);
}

void ConceptDatabase::save(const std::filesystem::path& dir) const {
  const auto snap = snapshot();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIoFailure, "cannot create " + dir.string() + ": " + ec.message());

  std::string lines;
  for (const auto& r : snap) {
    lines += json(r).dump();
    lines += '\n';
  }
  const auto& m = snap.manifest();
  const json manifest = {{"schema_version", m.schema_version},
                         {"embedding_dim", m.embedding_dim},
                         {"encoder_id", m.encoder_id},
                         {"record_count", m.record_count}};
  // Records first so a crash never leaves a manifest pointing at missing rows.
  write_file_atomically(dir / kRecordsFile, lines);
  write_file_atomically(dir / kManifestFile, manifest.dump(2) + "\n");
}

ConceptDatabase ConceptDatabase::load(const std::filesystem::path& dir) {
  std::ifstream manifest_in(dir / kManifestFile);
  if (!manifest_in) throw Error(ErrorCode::kIoFailure, "cannot open " + (dir / kManifestFile).string());

  DatabaseManifest manifest;
  try {
    const auto m = json::parse(manifest_in);
    manifest.schema_version = m.at("schema_version").get<int>();
    if (manifest.schema_version != kSchemaVersion) {
      throw Error(ErrorCode::kSchemaVersionUnsupported,
                  "unsupported schema_version " + std::to_string(manifest.schema_version));
    }
    manifest.embedding_dim = m.at("embedding_dim").get<std::size_t>();
    manifest.encoder_id = m.at("encoder_id").get<std::string>();
    manifest.record_count = m.at("record_count").get<std::size_t>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kCorruptRecord, std::string("malformed manifest: ") + e.what());
  }

  std::vector<ConceptRecord> records;
  std::ifstream records_in(dir / kRecordsFile);
  if (!records_in && manifest.record_count > 0) {
    throw Error(ErrorCode::kIoFailure, "cannot open " + (dir / kRecordsFile).string());
  }
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(records_in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kCorruptRecord,
                  "line " + std::to_string(line_no) + " is not valid JSON: " + e.what());
    }
    auto r = record_from_json(j);
    if (r.visual_embedding.dim() != manifest.embedding_dim) {
      throw Error(ErrorCode::kCorruptRecord,
                  "record '" + r.name + "' has dim " + std::to_string(r.visual_embedding.dim()) +
                      ", manifest declares " + std::to_string(manifest.embedding_dim));
    }
    records.push_back(std::move(r));
  }
  if (records.size() != manifest.record_count) {
    throw Error(ErrorCode::kCorruptRecord, "manifest declares " + std::to_string(manifest.record_count) +
                                               " records, found " + std::to_string(records.size()));
  }

  std::sort(records.begin(), records.end(),
            [](const ConceptRecord& a, const ConceptRecord& b) { return a.concept_id < b.concept_id; });
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (std::size_t k = i + 1; k < records.size(); ++k) {
      if (records[i].concept_id == records[k].concept_id ||
          fold_case(records[i].name) == fold_case(records[k].name)) {
        throw Error(ErrorCode::kCorruptRecord, "duplicate concept '" + records[k].name + "'");
      }
    }
  }

  auto state = std::make_shared<DbSnapshot::State>();
  state->manifest = manifest;
  state->records = std::move(records);
  ConceptDatabase db;
  db.state_ = std::move(state);
  return db;
}

ReferenceImage reference_image_handle(const ImagePayload& image) {
  validate_image(image);
  ReferenceImage ref;
  ref.sha256 = sha256_hex(image.bytes);
  ref.path = "images/" + ref.sha256 + (image.media_type == "image/png" ? ".png" : ".jpg");
  return ref;
}

ReferenceImage store_reference_image(const std::filesystem::path& db_dir, const ImagePayload& image) {
  const auto ref = reference_image_handle(image);
  const auto target = db_dir / ref.path;
  std::error_code ec;
  std::filesystem::create_directories(target.parent_path(), ec);
  if (ec) throw Error(ErrorCode::kIoFailure, "cannot create " + target.parent_path().string() + ": " + ec.message());
  if (!std::filesystem::exists(target)) {
    write_file_atomically(target, std::string(image.bytes.begin(), image.bytes.end()));
  }
  return ref;
}

ImagePayload load_reference_image(const std::filesystem::path& db_dir, const ReferenceImage& ref) {
  const std::filesystem::path stored(ref.path);
  auto image = load_image(stored.is_absolute() ? stored : db_dir / stored);
  if (!ref.sha256.empty() && sha256_hex(image.bytes) != ref.sha256) {
    throw Error(ErrorCode::kCorruptRecord, "reference image " + ref.path + " does not match its digest");
  }
  return image;
}

}  // namespace r2p
