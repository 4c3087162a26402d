#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <semaphore>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "r2p/embedding.hpp"
#include "r2p/image.hpp"

namespace r2p {

namespace detail {
template <typename V>
class LruCache;
}

struct EncoderBackendConfig {
  enum class Kind { kRemote, kMock };

  Kind kind = Kind::kMock;
  std::string base_url;     // required for kRemote
  std::string api_key_env;  // name of the env var holding the bearer token
  std::string model_id = "mock-clip";
  std::size_t embedding_dim = 64;
  std::chrono::milliseconds timeout{30000};
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{200};
  std::size_t max_in_flight = 4;
  std::size_t cache_capacity = 4096;
  // Whether image and text embeddings share one aligned space (CLIP-style).
  bool cross_modal = true;
  // Mock only.
  std::uint64_t seed = 0;
  std::string fixture_path;  // JSON object: label -> array of numbers

  // Throws kInvalidArgument when the invariants do not hold.
  void validate() const;
};

// Aligned image/text encoder pair. Outputs are unit-norm and of the configured dim.
// Thread-safe; concurrent backend calls are capped at max_in_flight.
class EncoderBackend {
 public:
  explicit EncoderBackend(EncoderBackendConfig config);
  virtual ~EncoderBackend();

  Embedding encode_image(const ImagePayload& image);
  Embedding encode_text(std::string_view text);
  // Throws naming the first offending index when an entry is blank.
  std::vector<Embedding> encode_text_batch(std::span<const std::string> texts);

  // Tag recorded in the database manifest.
  virtual std::string id() const = 0;
  std::size_t dim() const { return config_.embedding_dim; }
  bool cross_modal() const { return config_.cross_modal; }
  const EncoderBackendConfig& config() const { return config_; }

 protected:
  struct Input {
    std::string_view text;                // when image == nullptr
    const ImagePayload* image = nullptr;
  };

  // Raw vectors for each input, in order. Normalization and checks happen in the caller.
  virtual std::vector<std::vector<double>> embed(std::span<const Input> inputs) = 0;

 private:
  std::vector<Embedding> encode(std::span<const Input> inputs);

  EncoderBackendConfig config_;
  std::unique_ptr<detail::LruCache<Embedding>> cache_;
  std::counting_semaphore<1024> in_flight_;
};

// Deterministic offline encoder. A label is taken from the input (text: the
// text itself; image: its embedded r2p-label, else its digest) and mapped to a
// fixture vector when one is pinned, else to a seeded Gaussian direction.
class MockEncoder final : public EncoderBackend {
 public:
  explicit MockEncoder(EncoderBackendConfig config,
                       std::map<std::string, std::vector<double>> fixtures = {});

  std::string id() const override;

  // Vector for a label before normalization; exposed for tests.
  std::vector<double> vector_for_label(std::string_view label) const;

 protected:
  std::vector<std::vector<double>> embed(std::span<const Input> inputs) override;

 private:
  std::map<std::string, std::vector<double>, std::less<>> fixtures_;
};

// Client for an HTTP embedding service:
//   POST {base_url}/embeddings {"model", "input": [text | {"image", "media_type"}]}
//   -> {"data": [{"embedding": [...]}]}
class RemoteEncoder final : public EncoderBackend {
 public:
  explicit RemoteEncoder(EncoderBackendConfig config);
  ~RemoteEncoder() override;

  std::string id() const override;

 protected:
  std::vector<std::vector<double>> embed(std::span<const Input> inputs) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::unique_ptr<EncoderBackend> make_encoder(const EncoderBackendConfig& config);

// Reads a mock fixture file. Throws kIoFailure / kInvalidArgument.
std::map<std::string, std::vector<double>> load_encoder_fixtures(const std::string& path);

}  // namespace r2p
