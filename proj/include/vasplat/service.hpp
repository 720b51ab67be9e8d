#pragma once

// Read-only render service over a checkpoint.
//
//   GET  /v1/render?frame=&v=&a=&yaw=&pitch=&w=&h=   -> image/png, X-VA-Clamped: 0|1
//   GET  /v1/meta                                    -> {frame_count, condition_dims, va_points, ...}
//   WS   /v1/stream   text RenderRequest JSON in, binary PNG out (errors as text JSON)
//   POST /v1/reload   reloads the checkpoint and swaps the snapshot
//
// Requests render against an immutable snapshot; a reload builds a new one
// and swaps the pointer, so in-flight renders finish on the old model.

#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vasplat/cli.hpp"

namespace vasplat {

struct ServiceResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
  std::vector<std::pair<std::string, std::string>> headers;
};

class RenderService {
 public:
  /// With `load_now` false the service answers 503 until reload() completes.
  explicit RenderService(std::filesystem::path checkpoint, bool load_now = true);

  void reload();
  std::shared_ptr<const Checkpoint> snapshot() const;

  /// Dispatches GET/POST by target ("/v1/render?frame=0&v=0.5").
  ServiceResponse handle(std::string_view method, std::string_view target);
  /// One WS /v1/stream message.
  ServiceResponse handle_stream(std::string_view message) const;

 private:
  ServiceResponse render(const RenderRequest& request) const;
  ServiceResponse meta() const;

  std::filesystem::path path_;
  mutable std::mutex mutex_;
  std::shared_ptr<const Checkpoint> snapshot_;
  std::mutex reload_mutex_;
};

/// "key=value&..." into a render request. Values must be numbers.
RenderRequest parse_render_query(std::string_view query);
/// Status code for an error raised while handling a request.
int status_for(const std::exception& e);

/// "host:port" from VASPLAT_BIND, else 127.0.0.1:8080.
std::pair<std::string, unsigned short> default_bind();

/// HTTP + WebSocket front end. Socket IO runs on one thread; renders run on
/// a pool of `threads` workers, which caps concurrent renders.
class HttpServer {
 public:
  HttpServer(RenderService& service, const std::string& address, unsigned short port, int threads);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Bound port (useful with port 0).
  unsigned short port() const { return port_; }
  void start();
  void stop();
  /// Blocks until stop() is called from another thread or a signal handler.
  void wait();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  unsigned short port_ = 0;
};

}  // namespace vasplat
