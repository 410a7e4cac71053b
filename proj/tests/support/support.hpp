#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mqkit/broker.hpp"
#include "mqkit/config.hpp"
#include "mqkit/connector.hpp"

namespace mqtest {

/// Polls `done` every 10 ms until it returns true or the timeout expires.
bool wait_until(const std::function<bool()>& done, int timeout_ms);

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "mqkit");
  ~TempDir();
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Exports the well-known test password so PasswordRef "env:..." resolves.
void ensure_test_password();
inline constexpr const char* kTestUser = "alice";
inline constexpr const char* kTestPassword = "swordfish";
inline constexpr const char* kTestPasswordEnv = "MQKIT_TEST_PASSWORD";

/// An embedded broker on an ephemeral port with its structured log captured
/// for inspection.
class BrokerHarness {
 public:
  explicit BrokerHarness(mqkit::BrokerOptions options = default_options());
  ~BrokerHarness();

  static mqkit::BrokerOptions default_options();

  mqkit::Broker& broker() { return *broker_; }
  std::uint16_t port() const { return broker_->port(); }
  std::uint16_t tls_port() const { return broker_->tls_port(); }

  /// Stops and destroys the broker process-alike, keeping the log. port()
  /// is invalid afterwards until restart() brings a new one up on the SAME
  /// port (so reconnecting clients find it).
  void kill();
  void restart();

  std::vector<nlohmann::json> events() const;
  std::size_t count_events(const std::string& type) const;

 private:
  mutable std::mutex mutex_;
  std::vector<nlohmann::json> events_;
  mqkit::BrokerOptions options_;
  std::unique_ptr<mqkit::Broker> broker_;
  std::uint16_t fixed_port_ = 0;
};

/// Config-tree builders for a single service "mb" on 127.0.0.1:<port>.
struct TreeSpec {
  std::string service_id = "mb";
  std::vector<std::string> queues = {"Q1"};
  std::vector<std::string> topics = {"T1"};
  int heartbeat_out_ms = 10000;
  int heartbeat_in_ms = 10000;
  int backoff_initial_ms = 50;
  int backoff_max_ms = 200;
  bool jitter = false;
  bool use_tls = false;
  std::string tls_ca_path;
  std::string protocol = "stomp";
};

nlohmann::json tree_json(std::uint16_t port, const TreeSpec& spec = {});
mqkit::ConfigTree make_tree(std::uint16_t port, const TreeSpec& spec = {});

/// Pre-generated PKI for TLS tests: one trusted CA (server + client certs)
/// and one rogue CA with a client cert the broker must reject.
struct TestCerts {
  std::filesystem::path dir;
  std::filesystem::path ca_cert;
  std::filesystem::path server_cert;
  std::filesystem::path server_key;
  std::filesystem::path client_cert;  // CN pilot-client, signed by ca_cert
  std::filesystem::path client_key;
  std::filesystem::path rogue_ca_cert;
  std::filesystem::path rogue_client_cert;  // CN rogue-client
  std::filesystem::path rogue_client_key;
};

const TestCerts& test_certs();
inline constexpr const char* kClientCertCn = "pilot-client";

/// In-memory connector ("loopback" protocol) for registry, supervisor and
/// manager tests that need controllable connections without sockets.
struct LoopbackHub {
  struct Sent {
    std::string path;
    mqkit::MessageEnvelope env;
  };

  std::mutex mutex;
  int fail_next_connects = 0;     // consume one per attempted connect
  bool refuse_connects = false;   // refuse every connect while set
  std::vector<Sent> sent;
  std::uint64_t connects = 0;     // successful session constructions
  std::uint64_t live_sessions = 0;

  /// Drops every live session: each emits Disconnected(peer-close) once.
  void kill_all();

  /// Pushes a message to every subscription on `path` across live sessions.
  void deliver(const std::string& path, const mqkit::MessageEnvelope& env);

  std::vector<std::string> subscribed_paths();

  struct SessionSlot;
  std::vector<std::shared_ptr<SessionSlot>> slots_;
};

/// Hub keyed by the service's Host field; created on first use.
LoopbackHub& loopback_hub(const std::string& host);
void reset_loopback_hubs();

/// Registers the "loopback" protocol with the global registry (idempotent).
void register_loopback_protocol();

}  // namespace mqtest
