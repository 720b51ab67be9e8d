#include "vasplat/service.hpp"

#include <cstdlib>
#include <iostream>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "vasplat/error.hpp"
#include "vasplat/losses.hpp"

namespace vasplat {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;

namespace {

ServiceResponse json_response(int status, const nlohmann::json& body) {
  ServiceResponse r;
  r.status = status;
  r.body = body.dump();
  return r;
}

ServiceResponse error_response(const std::exception& e) {
  return json_response(status_for(e), error_json(e));
}

}  // namespace

int status_for(const std::exception& e) {
  const auto* err = dynamic_cast<const Error*>(&e);
  if (!err) return 500;
  switch (err->code()) {
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kMalformedHeader:
    case ErrorCode::kUsage:
      return 400;
    case ErrorCode::kNotFound:
      return 404;
    default:
      return 500;
  }
}

RenderRequest parse_render_query(std::string_view query) {
  nlohmann::json j = nlohmann::json::object();
  while (!query.empty()) {
    const std::size_t amp = query.find('&');
    const std::string_view pair = query.substr(0, amp);
    query = amp == std::string_view::npos ? std::string_view{} : query.substr(amp + 1);
    if (pair.empty()) continue;
    const std::size_t eq = pair.find('=');
    const std::string key(pair.substr(0, eq));
    const std::string value(eq == std::string_view::npos ? "" : pair.substr(eq + 1));
    if (j.contains(key)) fail(ErrorCode::kInvalidArgument, "duplicate query key '" + key + "'");
    char* end = nullptr;
    const double x = std::strtod(value.c_str(), &end);
    if (value.empty() || end != value.c_str() + value.size()) {
      fail(ErrorCode::kInvalidArgument, "query value for '" + key + "' is not a number");
    }
    j[key] = x;
  }
  return RenderRequest::from_json(j);
}

std::pair<std::string, unsigned short> default_bind() {
  std::string bind = "127.0.0.1:8080";
  if (const char* env = std::getenv("VASPLAT_BIND"); env && *env) bind = env;
  const std::size_t colon = bind.rfind(':');
  if (colon == std::string::npos) fail(ErrorCode::kUsage, "bind address must be host:port");
  const int port = std::atoi(bind.c_str() + colon + 1);
  if (port < 0 || port > 65535) fail(ErrorCode::kUsage, "bad port in bind address " + bind);
  return {bind.substr(0, colon), static_cast<unsigned short>(port)};
}

// ---- RenderService -----------------------------------------------------------------

RenderService::RenderService(std::filesystem::path checkpoint, bool load_now)
    : path_(std::move(checkpoint)) {
  if (load_now) reload();
}

void RenderService::reload() {
  std::lock_guard<std::mutex> serial(reload_mutex_);
  auto fresh = std::make_shared<const Checkpoint>(load_checkpoint(path_));
  std::lock_guard<std::mutex> lock(mutex_);
  snapshot_ = std::move(fresh);
}

std::shared_ptr<const Checkpoint> RenderService::snapshot() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return snapshot_;
}

ServiceResponse RenderService::handle(std::string_view method, std::string_view target) {
  const std::size_t q = target.find('?');
  const std::string_view path = target.substr(0, q);
  const std::string_view query = q == std::string_view::npos ? "" : target.substr(q + 1);
  try {
    if (path == "/v1/reload") {
      if (method != "POST") return json_response(405, {{"error", "method_not_allowed"}});
      reload();
      return json_response(200, {{"reloaded", path_.string()}});
    }
    if (path != "/v1/render" && path != "/v1/meta" && path != "/v1/stream") {
      return json_response(404, {{"error", "not_found"}, {"message", std::string(path)}});
    }
    if (method != "GET") return json_response(405, {{"error", "method_not_allowed"}});
    if (path == "/v1/stream") {
      return json_response(400, {{"error", "usage"}, {"message", "websocket upgrade required"}});
    }
    if (path == "/v1/meta") return meta();
    return render(parse_render_query(query));
  } catch (const std::exception& e) {
    return error_response(e);
  }
}

ServiceResponse RenderService::handle_stream(std::string_view message) const {
  try {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(message);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kInvalidArgument, std::string("request is not JSON: ") + e.what());
    }
    return render(RenderRequest::from_json(j));
  } catch (const std::exception& e) {
    return error_response(e);
  }
}

ServiceResponse RenderService::render(const RenderRequest& request) const {
  const auto snap = snapshot();
  if (!snap) return json_response(503, {{"error", "unavailable"}, {"message", "checkpoint loading"}});
  const RenderedFrame frame = render_request(snap->model, request);
  const std::vector<unsigned char> png = encode_png(frame.image, PngEncoding::kGamma22);
  ServiceResponse r;
  r.content_type = "image/png";
  r.body.assign(png.begin(), png.end());
  r.headers.emplace_back("X-VA-Clamped", frame.clamped ? "1" : "0");
  return r;
}

ServiceResponse RenderService::meta() const {
  const auto snap = snapshot();
  if (!snap) return json_response(503, {{"error", "unavailable"}, {"message", "checkpoint loading"}});
  const Model& m = snap->model;
  nlohmann::json points = nlohmann::json::array();
  for (const VALabel& p : va_label_table()) {
    points.push_back({{"v", p.point[0]}, {"a", p.point[1]}, {"label", p.label}});
  }
  const Camera& cam = m.conditions.empty() ? Camera{} : m.conditions.front().camera;
  return json_response(200, {{"frame_count", m.conditions.size()},
                             {"condition_dims", {{"a", m.audio_dim}, {"u", m.au_dim}, {"e", 2}}},
                             {"va_points", points},
                             {"width", cam.width},
                             {"height", cam.height},
                             {"gaussian_count", {{"mouth", m.mouth.size()}, {"face", m.face.size()}}}});
}

// ---- Network front end ---------------------------------------------------------------

struct HttpServer::Impl {
  RenderService& service;
  net::io_context ioc{1};
  net::thread_pool pool;
  tcp::acceptor acceptor;
  net::signal_set signals;
  std::thread io_thread;
  std::once_flag joined;

  Impl(RenderService& s, int threads)
      : service(s), pool(static_cast<std::size_t>(std::max(1, threads))), acceptor(ioc),
        signals(ioc) {}

  void accept();
  void shutdown() {
    std::call_once(joined, [this] {
      ioc.stop();
      if (io_thread.joinable()) io_thread.join();
      pool.join();
    });
  }
};

namespace {

class WsSession : public std::enable_shared_from_this<WsSession> {
 public:
  WsSession(tcp::socket&& socket, RenderService& service, net::thread_pool& pool)
      : ws_(std::move(socket)), service_(service), pool_(pool) {}

  void run(http::request<http::string_body> request) {
    request_ = std::move(request);
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(request_, [self = shared_from_this()](beast::error_code ec) {
      if (!ec) self->read();
    });
  }

 private:
  void read() {
    buffer_.consume(buffer_.size());
    ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return;
      std::string message = beast::buffers_to_string(self->buffer_.data());
      net::post(self->pool_, [self, message = std::move(message)] {
        ServiceResponse r = self->service_.handle_stream(message);
        net::post(self->ws_.get_executor(), [self, r = std::move(r)]() mutable { self->write(std::move(r)); });
      });
    });
  }

  void write(ServiceResponse r) {
    ws_.binary(r.content_type == "image/png");
    out_ = std::move(r.body);
    ws_.async_write(net::buffer(out_), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (!ec) self->read();
    });
  }

  websocket::stream<beast::tcp_stream> ws_;
  RenderService& service_;
  net::thread_pool& pool_;
  http::request<http::string_body> request_;
  beast::flat_buffer buffer_;
  std::string out_;
};

class HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(tcp::socket&& socket, RenderService& service, net::thread_pool& pool)
      : stream_(std::move(socket)), service_(service), pool_(pool) {}

  void run() { read(); }

 private:
  void read() {
    request_ = {};
    stream_.expires_after(std::chrono::seconds(60));
    http::async_read(stream_, buffer_, request_,
                     [self = shared_from_this()](beast::error_code ec, std::size_t) {
                       self->on_read(ec);
                     });
  }

  void on_read(beast::error_code ec) {
    if (ec == http::error::end_of_stream) {
      stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
      return;
    }
    if (ec) return;
    const std::string target(request_.target());
    if (websocket::is_upgrade(request_) && target.substr(0, target.find('?')) == "/v1/stream") {
      stream_.expires_never();
      std::make_shared<WsSession>(stream_.release_socket(), service_, pool_)->run(std::move(request_));
      return;
    }
    const std::string method(request_.method_string());
    net::post(pool_, [self = shared_from_this(), method, target] {
      ServiceResponse r = self->service_.handle(method, target);
      net::post(self->stream_.get_executor(), [self, r = std::move(r)]() mutable { self->write(std::move(r)); });
    });
  }

  void write(ServiceResponse r) {
    auto res = std::make_shared<http::response<http::string_body>>(
        static_cast<http::status>(r.status), request_.version());
    res->set(http::field::server, "vasplat");
    res->set(http::field::content_type, r.content_type);
    for (const auto& [k, v] : r.headers) res->set(k, v);
    res->keep_alive(request_.keep_alive());
    res->body() = std::move(r.body);
    res->prepare_payload();
    http::async_write(stream_, *res, [self = shared_from_this(), res](beast::error_code ec, std::size_t) {
      if (ec) return;
      if (!res->keep_alive()) {
        self->stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
        return;
      }
      self->read();
    });
  }

  beast::tcp_stream stream_;
  RenderService& service_;
  net::thread_pool& pool_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> request_;
};

}  // namespace

void HttpServer::Impl::accept() {
  acceptor.async_accept(net::make_strand(ioc), [this](beast::error_code ec, tcp::socket socket) {
    if (ec == net::error::operation_aborted) return;
    if (!ec) std::make_shared<HttpSession>(std::move(socket), service, pool)->run();
    accept();
  });
}

HttpServer::HttpServer(RenderService& service, const std::string& address, unsigned short port,
                       int threads)
    : impl_(std::make_unique<Impl>(service, threads)) {
  beast::error_code ec;
  const auto ip = net::ip::make_address(address, ec);
  if (ec) fail(ErrorCode::kUsage, "bad bind address '" + address + "'");
  const tcp::endpoint endpoint(ip, port);
  auto& a = impl_->acceptor;
  a.open(endpoint.protocol(), ec);
  if (!ec) a.set_option(net::socket_base::reuse_address(true), ec);
  if (!ec) a.bind(endpoint, ec);
  if (!ec) a.listen(net::socket_base::max_listen_connections, ec);
  if (ec) fail(ErrorCode::kIo, "cannot listen on " + address + ":" + std::to_string(port) + ": " + ec.message());
  port_ = a.local_endpoint().port();
}

HttpServer::~HttpServer() { stop(); }

void HttpServer::start() {
  impl_->accept();
  impl_->io_thread = std::thread([this] { impl_->ioc.run(); });
}

void HttpServer::stop() { impl_->shutdown(); }

void HttpServer::wait() {
  net::post(impl_->ioc, [this] {
    impl_->signals.add(SIGINT);
    impl_->signals.add(SIGTERM);
    impl_->signals.async_wait([this](beast::error_code, int) { impl_->ioc.stop(); });
  });
  if (impl_->io_thread.joinable()) impl_->io_thread.join();
  impl_->shutdown();
}

}  // namespace vasplat
