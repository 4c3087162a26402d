#include "r2p/enrollment.hpp"

#include <chrono>
#include <ctime>

#include <spdlog/spdlog.h>

#include "r2p/errors.hpp"
#include "r2p/protocol.hpp"

namespace r2p {
namespace {

bool is_blank(std::string_view s) { return s.find_first_not_of(" \t\r\n") == std::string_view::npos; }

std::string trimmed(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

void check_inputs(const ImagePayload& image, std::string_view name, std::string_view category,
                  const ConceptDatabase& db, const EncoderBackend& encoder) {
  if (is_blank(name)) throw Error(ErrorCode::kInvalidArgument, "concept name is empty");
  if (is_blank(category)) throw Error(ErrorCode::kInvalidArgument, "concept category is empty");
  validate_image(image);
  const auto snap = db.snapshot();
  if (snap.find_by_name(trimmed(name))) {
    throw Error(ErrorCode::kDuplicateName, "a concept named '" + trimmed(name) + "' already exists");
  }
  const auto& bound = snap.manifest().encoder_id;
  if (!bound.empty() && bound != encoder.id()) {
    throw Error(ErrorCode::kInvalidArgument,
                "database was embedded with encoder '" + bound + "', not '" + encoder.id() + "'");
  }
}

ConceptRecord embed_and_store(const ImagePayload& image, std::string_view name, std::string_view category,
                              std::string description, std::vector<std::string> attributes,
                              ConceptDatabase& db, EncoderBackend& encoder, const EnrollmentOptions& options) {
  if (attributes.size() > options.attribute_limit) {
    spdlog::warn("concept '{}' has {} attributes, keeping the first {}", name, attributes.size(),
                 options.attribute_limit);
    attributes.resize(options.attribute_limit);
  }

  const ImagePayload* to_encode = &image;
  ImagePayload cropped;
  if (options.crop) {
    if (!options.cropper) throw Error(ErrorCode::kInvalidArgument, "a crop box was given without a cropper");
    cropped = options.cropper(image, *options.crop);
    to_encode = &cropped;
  }

  ConceptRecord record;
  record.name = trimmed(name);
  record.category = trimmed(category);
  record.description = std::move(description);
  record.attributes = std::move(attributes);
  record.visual_embedding = encoder.encode_image(*to_encode);
  record.textual_embedding = encoder.encode_text(record.description);
  record.reference_image = options.reference.value_or(ReferenceImage{"", sha256_hex(image.bytes)});
  record.enrolled_at = options.clock ? options.clock() : now_rfc3339();

  db.bind_encoder(encoder.id());
  return db.upsert(std::move(record));
}

}  // namespace

std::string now_rfc3339() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

ConceptRecord enroll_concept(const ImagePayload& image, std::string_view name, std::string_view category,
                             ConceptDatabase& db, VlmBackend& vlm, EncoderBackend& encoder,
                             const EnrollmentOptions& options) {
  check_inputs(image, name, category, db, encoder);

  ChatRequest request;
  request.images = {image};
  request.prompt_text = render_enrollment_prompt(trimmed(category), trimmed(name));

  std::optional<EnrollmentReply> reply;
  std::string last_raw;
  for (int attempt = 0; attempt < 2 && !reply; ++attempt) {
    if (attempt == 1) request.prompt_text += kReaskReminder;
    last_raw = vlm.chat(request).text;
    try {
      reply = parse_enrollment(last_raw);
    } catch (const ParseError& e) {
      spdlog::warn("enrollment reply for '{}' not parseable ({}): {}", name, parse_stage_name(e.stage()),
                   e.what());
    }
  }
  if (!reply) {
    throw Error(ErrorCode::kEnrollmentParseFailure,
                "enrollment reply for '" + trimmed(name) + "' could not be parsed: " + last_raw.substr(0, 200));
  }

  if (fold_case(trimmed(reply->category)) != fold_case(trimmed(category))) {
    spdlog::info("model described '{}' as category '{}' (user said '{}')", name, reply->category, category);
  }
  return embed_and_store(image, name, category, std::move(reply->general), std::move(reply->distinct_features), db,
                         encoder, options);
}

ConceptRecord enroll_with_privileged_attributes(const ImagePayload& image, std::string_view name,
                                                std::string_view category, std::vector<std::string> attributes,
                                                std::string_view description, ConceptDatabase& db,
                                                EncoderBackend& encoder, const EnrollmentOptions& options) {
  std::vector<std::string> cleaned;
  for (const auto& a : attributes) {
    if (!is_blank(a)) cleaned.push_back(trimmed(a));
  }
  if (cleaned.empty()) throw Error(ErrorCode::kInvalidArgument, "privileged enrollment needs at least one attribute");
  if (is_blank(description)) throw Error(ErrorCode::kInvalidArgument, "privileged enrollment needs a description");
  check_inputs(image, name, category, db, encoder);
  return embed_and_store(image, name, category, trimmed(description), std::move(cleaned), db, encoder, options);
}

}  // namespace r2p
