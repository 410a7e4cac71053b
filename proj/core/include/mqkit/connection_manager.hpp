#pragma once

#include <cstddef>
#include <cstdint>
#include <condition_variable>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "mqkit/config.hpp"
#include "mqkit/connector.hpp"

namespace mqkit {

enum class Role { Producer, Consumer };

std::string_view to_string(Role role) noexcept;

enum class ReleaseResult { StillShared, Closed };

/// One row of active_connections(): a service with at least one user or a
/// connection still being opened/drained.
struct ConnectionInfo {
  std::string service_id;
  std::size_t user_count = 0;
  bool connected = false;
};

/// Events from managed sessions, tagged with the owning service.
using ServiceEventHandler =
    std::function<void(const std::string& service_id, const ConnectorEvent&)>;

/// Shares one supervised connection per service among any number of
/// producers and consumers.
///
/// Concurrency model: a per-service state machine (Opening/Live/Draining)
/// lives under one manager-wide mutex. Connection establishment and teardown
/// happen outside the lock; waiters on the condition variable re-check the
/// map, so an acquire racing a last-user release either reuses the still-open
/// connection or opens a fresh one. It never receives a closed session.
class ConnectionManager {
 public:
  explicit ConnectionManager(ServiceEventHandler handler = nullptr);
  ~ConnectionManager();

  ConnectionManager(const ConnectionManager&) = delete;
  ConnectionManager& operator=(const ConnectionManager&) = delete;

  struct Acquired {
    std::shared_ptr<Session> session;
    std::string token;
    ResolvedDestination resolved;
  };

  /// Resolves `query` against `tree` and returns the shared session for the
  /// target service, opening it (through the supervised reconnect loop) if
  /// no user holds it yet. The token must be passed to release() exactly
  /// once; it reads "<service_id>/<Kind>/<name>/<role><counter>".
  Acquired acquire(const ConfigTree& tree, const std::string& query, Role role);

  /// Drops one user. Closes the physical connection when the last user of a
  /// service releases. Throws UnknownToken if the token was never issued or
  /// was already released.
  ReleaseResult release(const std::string& token);

  /// Snapshot of per-service usage. Services mid-open report connected=false.
  std::vector<ConnectionInfo> active_connections() const;

  /// Disconnects every live connection regardless of user count and voids
  /// all outstanding tokens. Returns how many connections were closed.
  /// Idempotent; the manager stays usable afterwards.
  std::size_t stop_all();

 private:
  struct Record;

  std::shared_ptr<Session> open_session(const MQServiceConfig& service);
  std::string issue_token(const ResolvedDestination& resolved, Role role);

  ServiceEventHandler handler_;

  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::map<std::string, std::shared_ptr<Record>> records_;
  std::map<std::string, std::string> token_service_;
  std::uint64_t token_seq_ = 0;
};

}  // namespace mqkit
