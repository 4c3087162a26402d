#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace r2p {

// Raw encoded image bytes plus their media type ("image/png" or "image/jpeg").
struct ImagePayload {
  std::vector<std::uint8_t> bytes;
  std::string media_type;
};

// Detects png/jpeg from magic bytes; nullopt for anything else.
std::optional<std::string> sniff_media_type(std::span<const std::uint8_t> bytes);

// Reads a file and sniffs its media type. Throws kIoFailure / kInvalidArgument.
ImagePayload load_image(const std::filesystem::path& path);

// Throws kInvalidArgument unless bytes are non-empty and media_type is png/jpeg.
void validate_image(const ImagePayload& image);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

std::string base64_encode(std::span<const std::uint8_t> bytes);

// Test images carry a label in a PNG tEXt chunk (keyword "r2p-label") or a
// JPEG COM segment ("r2p-label:<label>"). The mock gateways key on it.
inline constexpr std::string_view kImageLabelKeyword = "r2p-label";

std::optional<std::string> read_image_label(std::span<const std::uint8_t> bytes);

// A valid 1x1 PNG whose tEXt chunk carries `label`.
std::vector<std::uint8_t> make_labeled_png(std::string_view label);

// Label if present, otherwise "sha256:<digest>" of the bytes.
std::string image_identity(std::span<const std::uint8_t> bytes);

struct BoundingBox {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;
};

}  // namespace r2p
