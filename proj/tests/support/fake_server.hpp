#pragma once

#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

namespace r2p::testing {

// Local HTTP server for wire-format tests. Every POST is recorded and handed
// to the handler, which returns (status, body).
class FakeServer {
 public:
  struct Reply {
    int status = 200;
    std::string body;
  };
  struct Seen {
    std::string path;
    std::string authorization;
    nlohmann::json body;
  };
  using Handler = std::function<Reply(const Seen&, int call_index)>;

  explicit FakeServer(Handler handler);
  ~FakeServer();

  std::string base_url(const std::string& prefix = "/v1") const;
  std::vector<Seen> requests() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace r2p::testing
