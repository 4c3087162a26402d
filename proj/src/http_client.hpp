#pragma once

#include <chrono>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

namespace r2p::detail {

struct HttpEndpoint {
  std::string scheme_host_port;  // e.g. "http://127.0.0.1:8080"
  std::string path_prefix;       // e.g. "/v1", never with a trailing slash
};

// Splits a base URL into the origin and path prefix. Throws kInvalidArgument.
HttpEndpoint parse_base_url(const std::string& base_url);

struct RetryPolicy {
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{200};
  std::chrono::milliseconds timeout{60000};
};

// POSTs JSON bodies with bearer auth, retrying transport failures, 429 and 5xx
// with jittered exponential backoff.
class JsonHttpClient {
 public:
  JsonHttpClient(const std::string& base_url, const std::string& api_key_env, RetryPolicy policy);
  ~JsonHttpClient();
  JsonHttpClient(JsonHttpClient&&) noexcept;
  JsonHttpClient& operator=(JsonHttpClient&&) noexcept;

  // Throws kBackendUnavailable when retries are exhausted or the server rejects
  // the request, kMalformedResponse when the body is not JSON.
  nlohmann::json post(const std::string& path, const nlohmann::json& body) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace r2p::detail
