#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "r2p/concept_db.hpp"
#include "r2p/encoder.hpp"
#include "r2p/image.hpp"
#include "r2p/vlm.hpp"

namespace r2p {

inline constexpr std::size_t kAttributeSoftLimit = 12;

using ImageCropper = std::function<ImagePayload(const ImagePayload&, const BoundingBox&)>;
using Clock = std::function<std::string()>;

// Current UTC time as RFC 3339 with second precision.
std::string now_rfc3339();

struct EnrollmentOptions {
  // Applied to the image before encoding only; the model always sees the full image.
  std::optional<BoundingBox> crop;
  ImageCropper cropper;
  Clock clock;                                   // defaults to now_rfc3339
  std::optional<ReferenceImage> reference;       // defaults to {"", sha256 of the image}
  std::size_t attribute_limit = kAttributeSoftLimit;
};

// Extracts the description and fingerprint attributes with the VLM, embeds the
// image and the description, and stores the record. Nothing is stored on failure.
// Throws kDuplicateName, kInvalidArgument, kEnrollmentParseFailure and gateway errors.
ConceptRecord enroll_concept(const ImagePayload& image, std::string_view name, std::string_view category,
                             ConceptDatabase& db, VlmBackend& vlm, EncoderBackend& encoder,
                             const EnrollmentOptions& options = {});

// Stores a record with caller-supplied attributes and description; no VLM call.
ConceptRecord enroll_with_privileged_attributes(const ImagePayload& image, std::string_view name,
                                                std::string_view category, std::vector<std::string> attributes,
                                                std::string_view description, ConceptDatabase& db,
                                                EncoderBackend& encoder, const EnrollmentOptions& options = {});

}  // namespace r2p
