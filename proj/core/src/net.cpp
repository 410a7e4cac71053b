#include "mqkit/net.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <unistd.h>

#include <openssl/err.h>
#include <openssl/ssl.h>
#include <openssl/x509v3.h>

#include <atomic>
#include <chrono>
#include <cerrno>
#include <cstring>
#include <mutex>

namespace mqkit {

namespace {

using Clock = std::chrono::steady_clock;

void ignore_sigpipe() {
  static std::once_flag once;
  std::call_once(once, [] { ::signal(SIGPIPE, SIG_IGN); });
}

void set_nonblocking(int fd) {
  int flags = ::fcntl(fd, F_GETFL, 0);
  if (flags < 0 || ::fcntl(fd, F_SETFL, flags | O_NONBLOCK) < 0) {
    throw Error(ErrorKind::IoError,
                std::string("fcntl(O_NONBLOCK): ") + std::strerror(errno));
  }
}

int poll_one(int fd, short events, int timeout_ms) {
  struct pollfd pfd{};
  pfd.fd = fd;
  pfd.events = events;
  for (;;) {
    int rc = ::poll(&pfd, 1, timeout_ms);
    if (rc < 0 && errno == EINTR) continue;
    return rc;
  }
}

int remaining_ms(Clock::time_point deadline) {
  auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
                  deadline - Clock::now())
                  .count();
  return left < 0 ? 0 : static_cast<int>(left);
}

std::string ssl_error_string(std::string_view prefix) {
  std::string out(prefix);
  unsigned long code;
  while ((code = ERR_get_error()) != 0) {
    const char* reason = ERR_reason_error_string(code);
    out += ": ";
    out += reason ? reason : "unknown error";
  }
  return out;
}

int tcp_connect_fd(const std::string& host, std::uint16_t port,
                   int timeout_ms) {
  ignore_sigpipe();
  struct addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  struct addrinfo* result = nullptr;
  std::string service = std::to_string(port);
  int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &result);
  if (rc != 0) {
    throw Error(ErrorKind::ConnectionRefused,
                "cannot resolve '" + host + "': " + gai_strerror(rc));
  }
  std::string last_error = "no addresses";
  auto deadline = Clock::now() + std::chrono::milliseconds(timeout_ms);
  for (struct addrinfo* ai = result; ai != nullptr; ai = ai->ai_next) {
    int fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) {
      last_error = std::strerror(errno);
      continue;
    }
    set_nonblocking(fd);
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) {
      ::freeaddrinfo(result);
      return fd;
    }
    if (errno == EINPROGRESS &&
        poll_one(fd, POLLOUT, remaining_ms(deadline)) > 0) {
      int err = 0;
      socklen_t len = sizeof(err);
      ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
      if (err == 0) {
        ::freeaddrinfo(result);
        return fd;
      }
      last_error = std::strerror(err);
    } else {
      last_error = errno == EINPROGRESS ? "connect timed out"
                                        : std::strerror(errno);
    }
    ::close(fd);
  }
  ::freeaddrinfo(result);
  throw Error(ErrorKind::ConnectionRefused,
              host + ":" + service + ": " + last_error);
}

class TcpStream final : public ByteStream {
 public:
  explicit TcpStream(int fd) : fd_(fd) {}

  ~TcpStream() override {
    if (fd_ >= 0) ::close(fd_);
  }

  ReadResult read_some(char* buf, size_t len) override {
    ssize_t n = ::recv(fd_, buf, len, 0);
    if (n > 0) return {ReadResult::Status::Data, static_cast<size_t>(n)};
    if (n == 0) return {ReadResult::Status::Eof, 0};
    if (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR) {
      return {ReadResult::Status::WouldBlock, 0};
    }
    if (errno == ECONNRESET) return {ReadResult::Status::Eof, 0};
    throw Error(ErrorKind::IoError,
                std::string("recv: ") + std::strerror(errno));
  }

  void write_all(std::string_view data) override {
    std::lock_guard<std::mutex> lock(write_mutex_);
    size_t off = 0;
    while (off < data.size()) {
      ssize_t n =
          ::send(fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
      if (n > 0) {
        off += static_cast<size_t>(n);
        continue;
      }
      if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) {
        poll_one(fd_, POLLOUT, 1000);
        continue;
      }
      if (n < 0 && errno == EINTR) continue;
      throw Error(ErrorKind::IoError,
                  std::string("send: ") + std::strerror(errno));
    }
  }

  bool poll_readable(int timeout_ms) override {
    return poll_one(fd_, POLLIN, timeout_ms) != 0;
  }

  void shutdown() override {
    bool expected = false;
    if (shut_.compare_exchange_strong(expected, true)) {
      ::shutdown(fd_, SHUT_RDWR);
    }
  }

  int release_fd() {
    int fd = fd_;
    fd_ = -1;
    return fd;
  }

 private:
  int fd_;
  std::mutex write_mutex_;  // serializes concurrent writers
  std::atomic<bool> shut_{false};
};

// All SSL_* calls on one connection go through ssl_mutex_: the io thread
// reads while caller threads write, and an SSL object is not thread-safe.
// The mutex is held only across individual nonblocking SSL calls; polling
// happens outside it.
class TlsStream final : public ByteStream {
 public:
  TlsStream(int fd, SSL* ssl) : fd_(fd), ssl_(ssl) {}

  ~TlsStream() override {
    SSL_free(ssl_);
    ::close(fd_);
  }

  ReadResult read_some(char* buf, size_t len) override {
    std::lock_guard<std::mutex> lock(ssl_mutex_);
    size_t n = 0;
    int rc = SSL_read_ex(ssl_, buf, len, &n);
    if (rc > 0) return {ReadResult::Status::Data, n};
    switch (SSL_get_error(ssl_, rc)) {
      case SSL_ERROR_WANT_READ:
      case SSL_ERROR_WANT_WRITE:
        return {ReadResult::Status::WouldBlock, 0};
      case SSL_ERROR_ZERO_RETURN:
        return {ReadResult::Status::Eof, 0};
      case SSL_ERROR_SYSCALL:
        // Peer vanished without close_notify; treat it as EOF so teardown
        // stays quiet.
        if (errno == 0 || errno == ECONNRESET || errno == EPIPE) {
          return {ReadResult::Status::Eof, 0};
        }
        throw Error(ErrorKind::IoError,
                    std::string("TLS read: ") + std::strerror(errno));
      default:
        ERR_clear_error();
        return {ReadResult::Status::Eof, 0};
    }
  }

  void write_all(std::string_view data) override {
    std::lock_guard<std::mutex> write_lock(write_mutex_);
    size_t off = 0;
    while (off < data.size()) {
      int err;
      {
        std::lock_guard<std::mutex> lock(ssl_mutex_);
        size_t n = 0;
        int rc = SSL_write_ex(ssl_, data.data() + off, data.size() - off, &n);
        if (rc > 0) {
          off += n;
          continue;
        }
        err = SSL_get_error(ssl_, rc);
      }
      if (err == SSL_ERROR_WANT_READ) {
        poll_one(fd_, POLLIN, 1000);
      } else if (err == SSL_ERROR_WANT_WRITE) {
        poll_one(fd_, POLLOUT, 1000);
      } else {
        ERR_clear_error();
        throw Error(ErrorKind::IoError, "TLS write failed");
      }
      if (shut_.load()) {
        throw Error(ErrorKind::IoError, "stream shut down during TLS write");
      }
    }
  }

  bool poll_readable(int timeout_ms) override {
    {
      std::lock_guard<std::mutex> lock(ssl_mutex_);
      if (SSL_pending(ssl_) > 0) return true;
    }
    return poll_one(fd_, POLLIN, timeout_ms) != 0;
  }

  void shutdown() override {
    bool expected = false;
    if (shut_.compare_exchange_strong(expected, true)) {
      ::shutdown(fd_, SHUT_RDWR);
    }
  }

  void set_peer_common_name(std::optional<std::string> cn) {
    peer_cn_ = std::move(cn);
  }
  const std::optional<std::string>& peer_cn() const { return peer_cn_; }

 private:
  int fd_;
  SSL* ssl_;
  std::mutex ssl_mutex_;
  std::mutex write_mutex_;  // keeps concurrent write_all calls whole-message
  std::atomic<bool> shut_{false};
  std::optional<std::string> peer_cn_;
};

struct SslCtxDeleter {
  void operator()(SSL_CTX* ctx) const { SSL_CTX_free(ctx); }
};
using SslCtxPtr = std::unique_ptr<SSL_CTX, SslCtxDeleter>;

void handshake_loop(SSL* ssl, int fd, int timeout_ms, const char* side) {
  auto deadline = Clock::now() + std::chrono::milliseconds(timeout_ms);
  for (;;) {
    int rc = SSL_do_handshake(ssl);
    if (rc == 1) return;
    int err = SSL_get_error(ssl, rc);
    short want;
    if (err == SSL_ERROR_WANT_READ) {
      want = POLLIN;
    } else if (err == SSL_ERROR_WANT_WRITE) {
      want = POLLOUT;
    } else {
      long verify = SSL_get_verify_result(ssl);
      std::string detail = ssl_error_string(side);
      if (verify != X509_V_OK) {
        detail += ": ";
        detail += X509_verify_cert_error_string(verify);
      }
      throw Error(ErrorKind::TlsHandshakeFailed, detail);
    }
    int left = remaining_ms(deadline);
    if (left == 0 || poll_one(fd, want, left) <= 0) {
      throw Error(ErrorKind::TlsHandshakeFailed,
                  std::string(side) + ": handshake timed out");
    }
  }
}

std::optional<std::string> extract_peer_cn(SSL* ssl) {
  X509* cert = SSL_get0_peer_certificate(ssl);
  if (cert == nullptr) return std::nullopt;
  char buf[256];
  int n = X509_NAME_get_text_by_NID(X509_get_subject_name(cert),
                                    NID_commonName, buf, sizeof(buf));
  if (n <= 0) return std::nullopt;
  return std::string(buf, static_cast<size_t>(n));
}

}  // namespace

std::unique_ptr<ByteStream> tcp_connect(const std::string& host,
                                        std::uint16_t port, int timeout_ms) {
  return std::make_unique<TcpStream>(tcp_connect_fd(host, port, timeout_ms));
}

std::unique_ptr<ByteStream> tls_connect(const std::string& host,
                                        std::uint16_t port,
                                        const TlsClientOptions& options,
                                        int timeout_ms) {
  int fd = tcp_connect_fd(host, port, timeout_ms);
  SslCtxPtr ctx(SSL_CTX_new(TLS_client_method()));
  SSL* ssl = nullptr;
  try {
    if (!ctx) throw Error(ErrorKind::TlsHandshakeFailed, "SSL_CTX_new failed");
    SSL_CTX_set_min_proto_version(ctx.get(), TLS1_2_VERSION);
    SSL_CTX_set_verify(ctx.get(), SSL_VERIFY_PEER, nullptr);
    if (!options.ca_path.empty()) {
      if (SSL_CTX_load_verify_locations(ctx.get(), options.ca_path.c_str(),
                                        nullptr) != 1) {
        throw Error(ErrorKind::TlsHandshakeFailed,
                    ssl_error_string("cannot load CA '" + options.ca_path +
                                     "'"));
      }
    } else if (SSL_CTX_set_default_verify_paths(ctx.get()) != 1) {
      throw Error(ErrorKind::TlsHandshakeFailed,
                  ssl_error_string("cannot load default trust store"));
    }
    if (!options.client_cert_path.empty()) {
      if (SSL_CTX_use_certificate_chain_file(
              ctx.get(), options.client_cert_path.c_str()) != 1 ||
          SSL_CTX_use_PrivateKey_file(ctx.get(),
                                      options.client_key_path.c_str(),
                                      SSL_FILETYPE_PEM) != 1) {
        throw Error(ErrorKind::TlsHandshakeFailed,
                    ssl_error_string("cannot load client identity"));
      }
    }

    ssl = SSL_new(ctx.get());
    if (ssl == nullptr) {
      throw Error(ErrorKind::TlsHandshakeFailed, "SSL_new failed");
    }
    const std::string& name =
        options.hostname.empty() ? host : options.hostname;
    // SNI only makes sense for DNS names.
    struct in_addr v4 {};
    struct in6_addr v6 {};
    const bool is_ip = inet_pton(AF_INET, name.c_str(), &v4) == 1 ||
                       inet_pton(AF_INET6, name.c_str(), &v6) == 1;
    if (!is_ip) SSL_set_tlsext_host_name(ssl, name.c_str());
    if (options.verify_hostname) {
      // Literal addresses are checked against IP SANs, names against DNS
      // SANs; SSL_set1_host only handles the latter.
      const int ok =
          is_ip ? X509_VERIFY_PARAM_set1_ip_asc(SSL_get0_param(ssl),
                                                name.c_str())
                : SSL_set1_host(ssl, name.c_str());
      if (ok != 1) {
        throw Error(ErrorKind::TlsHandshakeFailed,
                    "cannot set verification hostname");
      }
    }
    SSL_set_fd(ssl, fd);
    SSL_set_connect_state(ssl);
    handshake_loop(ssl, fd, timeout_ms, "TLS client handshake");
  } catch (...) {
    if (ssl != nullptr) SSL_free(ssl);
    ::close(fd);
    throw;
  }
  auto stream = std::make_unique<TlsStream>(fd, ssl);
  stream->set_peer_common_name(extract_peer_cn(ssl));
  return stream;
}

TcpListener::TcpListener(const std::string& bind_host, std::uint16_t port) {
  ignore_sigpipe();
  struct addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE;
  struct addrinfo* result = nullptr;
  std::string service = std::to_string(port);
  int rc = ::getaddrinfo(bind_host.empty() ? nullptr : bind_host.c_str(),
                         service.c_str(), &hints, &result);
  if (rc != 0) {
    throw Error(ErrorKind::IoError,
                "cannot resolve bind address '" + bind_host +
                    "': " + gai_strerror(rc));
  }
  std::string last_error = "no addresses";
  for (struct addrinfo* ai = result; ai != nullptr; ai = ai->ai_next) {
    int fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) {
      last_error = std::strerror(errno);
      continue;
    }
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    if (::bind(fd, ai->ai_addr, ai->ai_addrlen) == 0 &&
        ::listen(fd, 64) == 0) {
      set_nonblocking(fd);
      struct sockaddr_storage addr{};
      socklen_t len = sizeof(addr);
      ::getsockname(fd, reinterpret_cast<struct sockaddr*>(&addr), &len);
      if (addr.ss_family == AF_INET) {
        port_ = ntohs(reinterpret_cast<struct sockaddr_in*>(&addr)->sin_port);
      } else {
        port_ = ntohs(reinterpret_cast<struct sockaddr_in6*>(&addr)->sin6_port);
      }
      fd_ = fd;
      break;
    }
    last_error = std::strerror(errno);
    ::close(fd);
  }
  ::freeaddrinfo(result);
  if (fd_ < 0) {
    throw Error(ErrorKind::IoError, "cannot listen on " + bind_host + ":" +
                                        service + ": " + last_error);
  }
}

TcpListener::~TcpListener() {
  if (fd_ >= 0) ::close(fd_);
}

std::unique_ptr<ByteStream> TcpListener::accept(int timeout_ms) {
  if (poll_one(fd_, POLLIN, timeout_ms) <= 0) return nullptr;
  int fd = ::accept(fd_, nullptr, nullptr);
  if (fd < 0) return nullptr;
  set_nonblocking(fd);
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return std::make_unique<TcpStream>(fd);
}

void TcpListener::shutdown() { ::shutdown(fd_, SHUT_RDWR); }

TlsServer::TlsServer(const TlsServerOptions& options) {
  SslCtxPtr ctx(SSL_CTX_new(TLS_server_method()));
  if (!ctx) throw Error(ErrorKind::TlsHandshakeFailed, "SSL_CTX_new failed");
  SSL_CTX_set_min_proto_version(ctx.get(), TLS1_2_VERSION);
  if (SSL_CTX_use_certificate_chain_file(ctx.get(),
                                         options.cert_path.c_str()) != 1 ||
      SSL_CTX_use_PrivateKey_file(ctx.get(), options.key_path.c_str(),
                                  SSL_FILETYPE_PEM) != 1 ||
      SSL_CTX_check_private_key(ctx.get()) != 1) {
    throw Error(ErrorKind::TlsHandshakeFailed,
                ssl_error_string("cannot load server identity"));
  }
  if (!options.client_ca_path.empty()) {
    if (SSL_CTX_load_verify_locations(ctx.get(),
                                      options.client_ca_path.c_str(),
                                      nullptr) != 1) {
      throw Error(ErrorKind::TlsHandshakeFailed,
                  ssl_error_string("cannot load client CA"));
    }
    SSL_CTX_set_verify(ctx.get(),
                       SSL_VERIFY_PEER | SSL_VERIFY_FAIL_IF_NO_PEER_CERT,
                       nullptr);
  }
  ctx_ = ctx.release();
}

TlsServer::~TlsServer() { SSL_CTX_free(static_cast<SSL_CTX*>(ctx_)); }

std::unique_ptr<ByteStream> TlsServer::wrap(std::unique_ptr<ByteStream> tcp,
                                            int timeout_ms) {
  auto* raw = dynamic_cast<TcpStream*>(tcp.get());
  if (raw == nullptr) {
    throw Error(ErrorKind::TlsHandshakeFailed,
                "TlsServer::wrap needs a plain TCP stream");
  }
  int fd = raw->release_fd();
  SSL* ssl = SSL_new(static_cast<SSL_CTX*>(ctx_));
  if (ssl == nullptr) {
    ::close(fd);
    throw Error(ErrorKind::TlsHandshakeFailed, "SSL_new failed");
  }
  try {
    SSL_set_fd(ssl, fd);
    SSL_set_accept_state(ssl);
    handshake_loop(ssl, fd, timeout_ms, "TLS server handshake");
  } catch (...) {
    SSL_free(ssl);
    ::close(fd);
    throw;
  }
  auto stream = std::make_unique<TlsStream>(fd, ssl);
  stream->set_peer_common_name(extract_peer_cn(ssl));
  return stream;
}

std::optional<std::string> peer_common_name(const ByteStream& stream) {
  const auto* tls = dynamic_cast<const TlsStream*>(&stream);
  if (tls == nullptr) return std::nullopt;
  return tls->peer_cn();
}

}  // namespace mqkit
