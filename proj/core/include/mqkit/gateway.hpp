#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "mqkit/mq_api.hpp"

namespace mqkit {

/// Lowercase hex SHA-256 of `data`.
std::string sha256_hex(std::string_view data);

/// One authorized bearer token, stored salted-and-hashed only.
struct GatewayTokenEntry {
  std::string salt_hex;  // random salt, hex
  std::string hash_hex;  // sha256(salt-bytes || token), hex
  std::string principal;
};

/// Hash a presented token against an entry's salt.
std::string hash_token(std::string_view token, std::string_view salt_hex);

/// Mint a table entry for a fresh token (random 16-byte salt).
GatewayTokenEntry make_token_entry(std::string_view token,
                                   std::string_view principal);

struct GatewayConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks an ephemeral port
  std::string target;  // pseudo-URL the records are forwarded to
  std::string spool_dir;
  std::vector<GatewayTokenEntry> tokens;

  /// Reads the "Gateway" config section: Host, Port, Target, SpoolDir,
  /// Tokens [{Salt, Hash, Principal}]. Throws SchemaError on violations.
  static GatewayConfig from_json(const nlohmann::json& section);
};

/// HTTP front door of the pilot-log pipeline: authenticates bearer tokens,
/// validates records, stamps received-at-ms and principal, and forwards
/// through one spool-backed producer.
///
///   POST /v1/logs   single record or array of at most kMaxBatch
///                   -> 202 {"accepted": n, "spooled": m}
///                   -> 401 / 400 / 413 / 507 on the respective failures
///   GET  /v1/health -> 200 {"broker_connected": bool, "spool_depth": k}
class Gateway {
 public:
  static constexpr std::size_t kMaxBatch = 1000;

  /// The client must outlive the gateway.
  Gateway(MqClient& client, GatewayConfig config);
  ~Gateway();

  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  /// Creates the spool and producer, binds, and serves on a background
  /// thread. Throws IoError when the address cannot be bound.
  void start();
  void stop();

  int port() const { return bound_port_; }

  struct Stats {
    std::uint64_t accepted = 0;
    std::uint64_t spooled = 0;
    std::uint64_t rejected_auth = 0;
    std::uint64_t rejected_schema = 0;
  };
  Stats stats() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int bound_port_ = 0;
};

}  // namespace mqkit
