#include "http_client.hpp"

#include <cstdlib>
#include <random>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "r2p/errors.hpp"

namespace r2p::detail {

HttpEndpoint parse_base_url(const std::string& base_url) {
  const auto scheme_end = base_url.find("://");
  if (scheme_end == std::string::npos) {
    throw Error(ErrorCode::kInvalidArgument, "base URL '" + base_url + "' has no scheme");
  }
  const auto scheme = base_url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") {
    throw Error(ErrorCode::kInvalidArgument, "unsupported URL scheme '" + scheme + "'");
  }
  const auto path_begin = base_url.find('/', scheme_end + 3);
  HttpEndpoint ep;
  ep.scheme_host_port = base_url.substr(0, path_begin);
  if (path_begin != std::string::npos) {
    ep.path_prefix = base_url.substr(path_begin);
    while (!ep.path_prefix.empty() && ep.path_prefix.back() == '/') ep.path_prefix.pop_back();
  }
  if (ep.scheme_host_port.size() <= scheme_end + 3) {
    throw Error(ErrorCode::kInvalidArgument, "base URL '" + base_url + "' has no host");
  }
  return ep;
}

struct JsonHttpClient::Impl {
  HttpEndpoint endpoint;
  std::string bearer;
  RetryPolicy policy;
};

JsonHttpClient::JsonHttpClient(const std::string& base_url, const std::string& api_key_env,
                               RetryPolicy policy)
    : impl_(std::make_unique<Impl>()) {
  impl_->endpoint = parse_base_url(base_url);
  impl_->policy = policy;
  if (!api_key_env.empty()) {
    if (const char* key = std::getenv(api_key_env.c_str())) {
      impl_->bearer = key;
    } else {
      spdlog::warn("API key variable {} is not set; sending requests without authorization",
                   api_key_env);
    }
  }
}

JsonHttpClient::~JsonHttpClient() = default;
JsonHttpClient::JsonHttpClient(JsonHttpClient&&) noexcept = default;
JsonHttpClient& JsonHttpClient::operator=(JsonHttpClient&&) noexcept = default;

nlohmann::json JsonHttpClient::post(const std::string& path, const nlohmann::json& body) const {
  const auto& p = impl_->policy;
  const auto full_path = impl_->endpoint.path_prefix + path;
  const auto payload = body.dump();

  thread_local std::mt19937_64 jitter_rng{std::random_device{}()};
  std::string last_error;
  for (int attempt = 0; attempt <= p.max_retries; ++attempt) {
    if (attempt > 0) {
      std::uniform_real_distribution<double> jitter(0.5, 1.5);
      const auto delay = p.initial_backoff * (1LL << std::min(attempt - 1, 16)) * jitter(jitter_rng);
      std::this_thread::sleep_for(std::chrono::duration_cast<std::chrono::milliseconds>(delay));
    }

    // One client per call: httplib clients are not meant to be shared across threads.
    httplib::Client client(impl_->endpoint.scheme_host_port);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(p.timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(p.timeout - secs);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());
    client.set_write_timeout(secs.count(), usecs.count());
    httplib::Headers headers;
    if (!impl_->bearer.empty()) headers.emplace("Authorization", "Bearer " + impl_->bearer);

    auto res = client.Post(full_path, headers, payload, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      spdlog::debug("POST {} attempt {} failed: {}", full_path, attempt + 1, last_error);
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      spdlog::debug("POST {} attempt {} failed: {}", full_path, attempt + 1, last_error);
      continue;
    }
    if (res->status < 200 || res->status >= 300) {
      throw Error(ErrorCode::kBackendUnavailable,
                  "POST " + full_path + " rejected with HTTP " + std::to_string(res->status) + ": " +
                      res->body.substr(0, 200));
    }
    try {
      return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kMalformedResponse,
                  "POST " + full_path + " returned non-JSON body: " + e.what());
    }
  }
  throw Error(ErrorCode::kBackendUnavailable, "POST " + full_path + " failed after " +
                                                   std::to_string(p.max_retries + 1) +
                                                   " attempts: " + last_error);
}

}  // namespace r2p::detail
