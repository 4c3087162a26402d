#include "r2p/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "http_client.hpp"
#include "lru_cache.hpp"
#include "r2p/errors.hpp"

namespace r2p {
namespace {

bool is_blank(std::string_view s) {
  return s.find_first_not_of(" \t\r\n") == std::string_view::npos;
}

std::ptrdiff_t clamp_in_flight(std::size_t n) {
  return static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(n, 1, 1024));
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Uniform in [0,1) from the top 53 bits; fixed so vectors match across standard libraries.
double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace

void EncoderBackendConfig::validate() const {
  if (embedding_dim < 1) throw Error(ErrorCode::kInvalidArgument, "embedding_dim must be >= 1");
  if (kind == Kind::kRemote && base_url.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "remote encoder requires base_url");
  }
  if (max_retries < 0) throw Error(ErrorCode::kInvalidArgument, "max_retries must be >= 0");
}

EncoderBackend::EncoderBackend(EncoderBackendConfig config)
    : config_(std::move(config)),
      cache_(std::make_unique<detail::LruCache<Embedding>>(config_.cache_capacity)),
      in_flight_(clamp_in_flight(config_.max_in_flight)) {
  config_.validate();
}

EncoderBackend::~EncoderBackend() = default;

Embedding EncoderBackend::encode_image(const ImagePayload& image) {
  validate_image(image);
  const Input in{.text = {}, .image = &image};
  return encode(std::span(&in, 1)).front();
}

Embedding EncoderBackend::encode_text(std::string_view text) {
  if (is_blank(text)) throw Error(ErrorCode::kInvalidArgument, "text to encode is empty");
  const Input in{.text = text};
  return encode(std::span(&in, 1)).front();
}

std::vector<Embedding> EncoderBackend::encode_text_batch(std::span<const std::string> texts) {
  std::vector<Input> inputs;
  inputs.reserve(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (is_blank(texts[i])) {
      throw Error(ErrorCode::kInvalidArgument,
                  "text at index " + std::to_string(i) + " of the batch is empty");
    }
    inputs.push_back(Input{.text = texts[i]});
  }
  return encode(inputs);
}

std::vector<Embedding> EncoderBackend::encode(std::span<const Input> inputs) {
  std::vector<Embedding> out(inputs.size());
  std::vector<std::string> keys(inputs.size());
  std::vector<Input> misses;
  std::vector<std::size_t> miss_at;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& in = inputs[i];
    keys[i] = in.image ? "i:" + sha256_hex(in.image->bytes) : "t:" + sha256_hex(in.text);
    if (auto hit = cache_->get(keys[i])) {
      out[i] = std::move(*hit);
    } else {
      misses.push_back(in);
      miss_at.push_back(i);
    }
  }
  if (misses.empty()) return out;

  std::vector<std::vector<double>> raw;
  {
    in_flight_.acquire();
    struct Release {
      std::counting_semaphore<1024>& s;
      ~Release() { s.release(); }
    } release{in_flight_};
    raw = embed(misses);
  }
  if (raw.size() != misses.size()) {
    throw Error(ErrorCode::kMalformedResponse, "encoder returned " + std::to_string(raw.size()) +
                                                   " vectors for " + std::to_string(misses.size()) +
                                                   " inputs");
  }
  for (std::size_t m = 0; m < raw.size(); ++m) {
    if (raw[m].size() != config_.embedding_dim) {
      throw Error(ErrorCode::kDimensionMismatch,
                  "encoder returned dim " + std::to_string(raw[m].size()) + ", configured " +
                      std::to_string(config_.embedding_dim));
    }
    Embedding e;
    try {
      e = Embedding::normalized(std::move(raw[m]));
    } catch (const Error&) {
      throw Error(ErrorCode::kMalformedResponse, "encoder returned a zero or non-finite vector");
    }
    cache_->put(keys[miss_at[m]], e);
    out[miss_at[m]] = std::move(e);
  }
  return out;
}

MockEncoder::MockEncoder(EncoderBackendConfig config,
                         std::map<std::string, std::vector<double>> fixtures)
    : EncoderBackend(std::move(config)) {
  if (!this->config().fixture_path.empty()) {
    for (auto& [label, vec] : load_encoder_fixtures(this->config().fixture_path)) {
      fixtures.try_emplace(label, std::move(vec));
    }
  }
  for (auto& [label, vec] : fixtures) {
    if (vec.size() != dim()) {
      throw Error(ErrorCode::kDimensionMismatch, "fixture '" + label + "' has dim " +
                                                     std::to_string(vec.size()) + ", encoder dim " +
                                                     std::to_string(dim()));
    }
    fixtures_.emplace(label, std::move(vec));
  }
}

std::string MockEncoder::id() const {
  return "mock:" + config().model_id + ":" + std::to_string(dim()) + ":seed" +
         std::to_string(config().seed);
}

std::vector<double> MockEncoder::vector_for_label(std::string_view label) const {
  if (auto it = fixtures_.find(label); it != fixtures_.end()) return it->second;

  std::mt19937_64 rng(fnv1a(label) ^ (config().seed * 0x9E3779B97F4A7C15ULL));
  std::vector<double> v(dim());
  // Box-Muller, two normals per pair of uniforms.
  for (std::size_t i = 0; i < v.size(); i += 2) {
    const double u1 = 1.0 - unit_uniform(rng);  // (0, 1]
    const double u2 = unit_uniform(rng);
    const double r = std::sqrt(-2.0 * std::log(u1));
    v[i] = r * std::cos(2.0 * std::numbers::pi * u2);
    if (i + 1 < v.size()) v[i + 1] = r * std::sin(2.0 * std::numbers::pi * u2);
  }
  return v;
}

std::vector<std::vector<double>> MockEncoder::embed(std::span<const Input> inputs) {
  std::vector<std::vector<double>> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) {
    out.push_back(vector_for_label(in.image ? image_identity(in.image->bytes) : std::string(in.text)));
  }
  return out;
}

struct RemoteEncoder::Impl {
  detail::JsonHttpClient http;
};

RemoteEncoder::RemoteEncoder(EncoderBackendConfig config)
    : EncoderBackend(std::move(config)),
      impl_(std::make_unique<Impl>(Impl{detail::JsonHttpClient(
          this->config().base_url, this->config().api_key_env,
          detail::RetryPolicy{.max_retries = this->config().max_retries,
                              .initial_backoff = this->config().initial_backoff,
                              .timeout = this->config().timeout})})) {}

RemoteEncoder::~RemoteEncoder() = default;

std::string RemoteEncoder::id() const { return "remote:" + config().model_id; }

std::vector<std::vector<double>> RemoteEncoder::embed(std::span<const Input> inputs) {
  nlohmann::json input = nlohmann::json::array();
  for (const auto& in : inputs) {
    if (in.image) {
      input.push_back({{"image", base64_encode(in.image->bytes)}, {"media_type", in.image->media_type}});
    } else {
      input.push_back(std::string(in.text));
    }
  }
  const auto res = impl_->http.post("/embeddings", {{"model", config().model_id}, {"input", input}});

  std::vector<std::vector<double>> out;
  try {
    const auto& data = res.at("data");
    if (!data.is_array() || data.size() != inputs.size()) {
      throw Error(ErrorCode::kMalformedResponse,
                  "embedding response has " + std::to_string(data.size()) + " items for " +
                      std::to_string(inputs.size()) + " inputs");
    }
    out.resize(inputs.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto slot = data[i].contains("index") ? data[i].at("index").get<std::size_t>() : i;
      if (slot >= out.size() || !out[slot].empty()) {
        throw Error(ErrorCode::kMalformedResponse, "embedding response has a bad index");
      }
      out[slot] = data[i].at("embedding").get<std::vector<double>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kMalformedResponse, std::string("bad embedding response: ") + e.what());
  }
  return out;
}

std::unique_ptr<EncoderBackend> make_encoder(const EncoderBackendConfig& config) {
  if (config.kind == EncoderBackendConfig::Kind::kRemote) return std::make_unique<RemoteEncoder>(config);
  return std::make_unique<MockEncoder>(config);
}

std::map<std::string, std::vector<double>> load_encoder_fixtures(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open encoder fixture " + path);
  try {
    return nlohmann::json::parse(in).get<std::map<std::string, std::vector<double>>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, "bad encoder fixture " + path + ": " + e.what());
  }
}

}  // namespace r2p
