#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace r2p {

enum class ErrorCode {
  kInvalidArgument,
  kDimensionMismatch,
  kDuplicateName,
  kNotFound,
  kIoFailure,
  kSchemaVersionUnsupported,
  kCorruptRecord,
  kBackendUnavailable,
  kMalformedResponse,
  kResponseTruncated,
  kScriptMiss,
  kAnswerUnparseable,
  kParseFailure,
  kEnrollmentParseFailure,
  kEmptyDatabase,
  kUnknownTargetConcept,
  kNoPositives,
  kNoNegatives,
  kTooFewImages,
};

// Stable upper-snake identifier, used in CLI error output.
std::string_view error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// How far the JSON recovery ladder got before giving up.
enum class ParseStage {
  kNoJsonObject,  // no balanced {...} block in the text
  kInvalidJson,   // a block was found but did not parse even after repair
  kSchema,        // parsed, but keys or values violate the reply schema
};

std::string_view parse_stage_name(ParseStage stage);

class ParseError : public Error {
 public:
  ParseError(ParseStage stage, std::string raw, const std::string& message)
      : Error(ErrorCode::kParseFailure, message), stage_(stage), raw_(std::move(raw)) {}

  ParseStage stage() const noexcept { return stage_; }
  const std::string& raw() const noexcept { return raw_; }

 private:
  ParseStage stage_;
  std::string raw_;
};

}  // namespace r2p
