#include "r2p/errors.hpp"

namespace r2p {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "INVALID_ARGUMENT";
    case ErrorCode::kDimensionMismatch: return "DIMENSION_MISMATCH";
    case ErrorCode::kDuplicateName: return "DUPLICATE_NAME";
    case ErrorCode::kNotFound: return "NOT_FOUND";
    case ErrorCode::kIoFailure: return "IO_FAILURE";
    case ErrorCode::kSchemaVersionUnsupported: return "SCHEMA_VERSION_UNSUPPORTED";
    case ErrorCode::kCorruptRecord: return "CORRUPT_RECORD";
    case ErrorCode::kBackendUnavailable: return "BACKEND_UNAVAILABLE";
    case ErrorCode::kMalformedResponse: return "MALFORMED_RESPONSE";
    case ErrorCode::kResponseTruncated: return "RESPONSE_TRUNCATED";
    case ErrorCode::kScriptMiss: return "SCRIPT_MISS";
    case ErrorCode::kAnswerUnparseable: return "ANSWER_UNPARSEABLE";
    case ErrorCode::kParseFailure: return "PARSE_FAILURE";
    case ErrorCode::kEnrollmentParseFailure: return "ENROLLMENT_PARSE_FAILURE";
    case ErrorCode::kEmptyDatabase: return "EMPTY_DATABASE";
    case ErrorCode::kUnknownTargetConcept: return "UNKNOWN_TARGET_CONCEPT";
    case ErrorCode::kNoPositives: return "NO_POSITIVES";
    case ErrorCode::kNoNegatives: return "NO_NEGATIVES";
    case ErrorCode::kTooFewImages: return "TOO_FEW_IMAGES";
  }
  return "UNKNOWN";
}

std::string_view parse_stage_name(ParseStage stage) {
  switch (stage) {
    case ParseStage::kNoJsonObject: return "no_json_object";
    case ParseStage::kInvalidJson: return "invalid_json";
    case ParseStage::kSchema: return "schema";
  }
  return "unknown";
}

}  // namespace r2p
