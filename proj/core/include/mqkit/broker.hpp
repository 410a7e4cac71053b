#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mqkit/net.hpp"

namespace mqkit {

struct BrokerOptions {
  std::string host = "127.0.0.1";
  std::uint16_t port = 61613;  // 0: ephemeral
  bool enable_tls = false;
  std::uint16_t tls_port = 61614;  // 0: ephemeral
  std::map<std::string, std::string> users;  // login -> password
  std::vector<std::string> cert_users;       // allowed client-cert CNs
  TlsServerOptions tls;
  size_t queue_depth_limit = 100000;
  std::int64_t heartbeat_can_send_ms = 10000;   // sx
  std::int64_t heartbeat_want_recv_ms = 10000;  // sy
  /// Receives one JSON object per session event (no trailing newline).
  /// Default: a line on stderr.
  std::function<void(std::string_view)> log_sink;

  /// Strict parse of a "Broker" config section. User-table values may be
  /// literals or "env:NAME" references resolved here.
  static BrokerOptions from_json(const nlohmann::json& section);
};

/// Lifetime counters plus an instantaneous census. "published" and "pending"
/// cover ordinary queues only; dead-lettered messages are tracked by
/// dead_lettered/dlq_depth from the moment they move.
struct BrokerStats {
  std::uint64_t published = 0;
  std::uint64_t delivered_acked = 0;
  std::uint64_t dead_lettered = 0;
  std::uint64_t depth_dropped = 0;
  std::uint64_t topic_published = 0;
  std::uint64_t topic_deliveries = 0;
  std::uint64_t topic_dropped = 0;
  std::uint64_t pending = 0;
  std::uint64_t dlq_depth = 0;
  std::uint64_t unacked = 0;
  std::uint64_t open_sessions = 0;
  std::uint64_t connected_sessions = 0;
};

/// In-memory STOMP 1.2 broker: queues are competing-consumer FIFOs with a
/// strict round-robin cursor (prefetch window 1 per client-individual
/// subscription), topics fan out with no retention. Not a durable broker; a
/// deterministic test instrument.
class Broker {
 public:
  explicit Broker(BrokerOptions options);
  ~Broker();

  Broker(const Broker&) = delete;
  Broker& operator=(const Broker&) = delete;

  /// Binds listeners (ports are final once this returns) and starts serving.
  void start();

  /// Tears every session down and joins all threads. Idempotent.
  void stop();

  std::uint16_t port() const;
  std::uint16_t tls_port() const;

  /// Test hook: negotiated heartbeats are declared but never emitted while
  /// set, starving peers that expect them.
  void suppress_heartbeats(bool on);

  BrokerStats stats() const;
  std::uint64_t queue_depth(const std::string& queue_name) const;

 private:
  class Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace mqkit
