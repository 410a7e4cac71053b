#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include "mqkit/error.hpp"

namespace mqkit {

/// Result of a nonblocking read.
struct ReadResult {
  enum class Status { Data, WouldBlock, Eof };
  Status status = Status::WouldBlock;
  size_t bytes = 0;
};

/// A connected, bidirectional byte stream over a nonblocking socket.
///
/// Threading contract: one thread (the io thread) calls read_some and
/// poll_readable; any thread may call write_all and shutdown concurrently.
/// close/destruction must happen after the io thread has stopped touching the
/// stream; shutdown() is the cross-thread wakeup that makes the io thread's
/// poll return.
class ByteStream {
 public:
  virtual ~ByteStream() = default;

  virtual ReadResult read_some(char* buf, size_t len) = 0;

  /// Writes the whole buffer, polling for writability as needed.
  /// Throws IoError when the peer is gone.
  virtual void write_all(std::string_view data) = 0;

  /// True when a read_some is worth attempting (socket readable, buffered
  /// plaintext pending, or the stream is dead). timeout_ms < 0 waits forever.
  virtual bool poll_readable(int timeout_ms) = 0;

  /// Half-closes both directions. Safe from any thread, idempotent; wakes a
  /// blocked poll_readable.
  virtual void shutdown() = 0;
};

std::unique_ptr<ByteStream> tcp_connect(const std::string& host,
                                        std::uint16_t port,
                                        int timeout_ms = 10000);

struct TlsClientOptions {
  std::string ca_path;            // empty: system default trust store
  bool verify_hostname = true;
  std::string hostname;           // SNI + verification name; empty: use host
  std::string client_cert_path;   // optional mutual-TLS identity
  std::string client_key_path;
};

std::unique_ptr<ByteStream> tls_connect(const std::string& host,
                                        std::uint16_t port,
                                        const TlsClientOptions& options,
                                        int timeout_ms = 10000);

/// Accepting side of a TCP socket. accept() may be called from one thread
/// while another calls shutdown() to stop it.
class TcpListener {
 public:
  /// Binds and listens; port 0 picks an ephemeral port.
  TcpListener(const std::string& bind_host, std::uint16_t port);
  ~TcpListener();

  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const noexcept { return port_; }

  /// Returns nullptr on timeout or once shut down.
  std::unique_ptr<ByteStream> accept(int timeout_ms);

  void shutdown();

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

struct TlsServerOptions {
  std::string cert_path;
  std::string key_path;
  // When set, peers must present a certificate signed by this CA.
  std::string client_ca_path;
};

/// Server-side TLS context; wraps accepted TCP streams with a handshake.
class TlsServer {
 public:
  explicit TlsServer(const TlsServerOptions& options);
  ~TlsServer();

  TlsServer(const TlsServer&) = delete;
  TlsServer& operator=(const TlsServer&) = delete;

  /// Performs the server handshake. Throws TlsHandshakeFailed.
  std::unique_ptr<ByteStream> wrap(std::unique_ptr<ByteStream> tcp,
                                   int timeout_ms = 10000);

 private:
  void* ctx_ = nullptr;  // SSL_CTX
};

/// Subject common name of the peer certificate, when one was presented and
/// verified. Returns nullopt for plain TCP streams.
std::optional<std::string> peer_common_name(const ByteStream& stream);

}  // namespace mqkit
