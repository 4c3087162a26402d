#include "r2p/image.hpp"

#include <openssl/evp.h>
#include <openssl/sha.h>
#include <zlib.h>

#include <algorithm>
#include <array>
#include <fstream>
#include <iterator>

#include "r2p/errors.hpp"

namespace r2p {
namespace {

constexpr std::array<std::uint8_t, 8> kPngMagic = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

void append_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void append_chunk(std::vector<std::uint8_t>& out, std::string_view type,
                  std::span<const std::uint8_t> data) {
  append_be32(out, static_cast<std::uint32_t>(data.size()));
  const auto type_begin = out.size();
  out.insert(out.end(), type.begin(), type.end());
  out.insert(out.end(), data.begin(), data.end());
  const auto crc = crc32(0L, out.data() + type_begin, static_cast<uInt>(out.size() - type_begin));
  append_be32(out, static_cast<std::uint32_t>(crc));
}

std::optional<std::string> png_label(std::span<const std::uint8_t> b) {
  std::size_t pos = kPngMagic.size();
  while (pos + 8 <= b.size()) {
    const auto len = read_be32(b, pos);
    const std::string_view type(reinterpret_cast<const char*>(b.data() + pos + 4), 4);
    const auto data_at = pos + 8;
    if (data_at + len > b.size()) break;
    if (type == "tEXt") {
      const std::string_view text(reinterpret_cast<const char*>(b.data() + data_at), len);
      const auto nul = text.find('\0');
      if (nul != std::string_view::npos && text.substr(0, nul) == kImageLabelKeyword) {
        return std::string(text.substr(nul + 1));
      }
    }
    if (type == "IEND") break;
    pos = data_at + len + 4;
  }
  return std::nullopt;
}

std::optional<std::string> jpeg_label(std::span<const std::uint8_t> b) {
  std::size_t pos = 2;
  const std::string prefix = std::string(kImageLabelKeyword) + ":";
  while (pos + 4 <= b.size() && b[pos] == 0xFF) {
    const auto marker = b[pos + 1];
    if (marker == 0xDA || marker == 0xD9) break;  // start of scan / end of image
    const std::size_t len = (std::size_t{b[pos + 2]} << 8) | b[pos + 3];
    if (len < 2 || pos + 2 + len > b.size()) break;
    if (marker == 0xFE) {
      const std::string_view text(reinterpret_cast<const char*>(b.data() + pos + 4), len - 2);
      if (text.starts_with(prefix)) return std::string(text.substr(prefix.size()));
    }
    pos += 2 + len;
  }
  return std::nullopt;
}

}  // namespace

std::optional<std::string> sniff_media_type(std::span<const std::uint8_t> bytes) {
  if (bytes.size() >= kPngMagic.size() &&
      std::equal(kPngMagic.begin(), kPngMagic.end(), bytes.begin())) {
    return "image/png";
  }
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) {
    return "image/jpeg";
  }
  return std::nullopt;
}

ImagePayload load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open image " + path.string());
  ImagePayload image;
  image.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  auto media = sniff_media_type(image.bytes);
  if (!media) {
    throw Error(ErrorCode::kInvalidArgument, "unsupported image format: " + path.string());
  }
  image.media_type = *media;
  return image;
}

void validate_image(const ImagePayload& image) {
  if (image.bytes.empty()) throw Error(ErrorCode::kInvalidArgument, "image bytes are empty");
  if (image.media_type != "image/png" && image.media_type != "image/jpeg") {
    throw Error(ErrorCode::kInvalidArgument, "unsupported media type '" + image.media_type + "'");
  }
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  std::array<unsigned char, SHA256_DIGEST_LENGTH> digest{};
  SHA256(bytes.data(), bytes.size(), digest.data());
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(digest.size() * 2);
  for (const auto c : digest) {
    out.push_back(kHex[c >> 4]);
    out.push_back(kHex[c & 0xF]);
  }
  return out;
}

std::string sha256_hex(std::string_view text) {
  return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::optional<std::string> read_image_label(std::span<const std::uint8_t> bytes) {
  const auto media = sniff_media_type(bytes);
  if (!media) return std::nullopt;
  return *media == "image/png" ? png_label(bytes) : jpeg_label(bytes);
}

std::vector<std::uint8_t> make_labeled_png(std::string_view label) {
  std::vector<std::uint8_t> out(kPngMagic.begin(), kPngMagic.end());

  // 1x1, 8-bit grayscale
  const std::array<std::uint8_t, 13> ihdr = {0, 0, 0, 1, 0, 0, 0, 1, 8, 0, 0, 0, 0};
  append_chunk(out, "IHDR", ihdr);

  std::vector<std::uint8_t> text(kImageLabelKeyword.begin(), kImageLabelKeyword.end());
  text.push_back(0);
  text.insert(text.end(), label.begin(), label.end());
  append_chunk(out, "tEXt", text);

  const std::array<std::uint8_t, 2> scanline = {0, 0x80};  // filter byte + one gray pixel
  uLongf zlen = compressBound(scanline.size());
  std::vector<std::uint8_t> idat(zlen);
  compress(idat.data(), &zlen, scanline.data(), scanline.size());
  idat.resize(zlen);
  append_chunk(out, "IDAT", idat);

  append_chunk(out, "IEND", {});
  return out;
}

std::string image_identity(std::span<const std::uint8_t> bytes) {
  if (auto label = read_image_label(bytes)) return *label;
  return "sha256:" + sha256_hex(bytes);
}

}  // namespace r2p
