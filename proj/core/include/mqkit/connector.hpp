#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>

#include "mqkit/config.hpp"
#include "mqkit/message.hpp"

namespace mqkit {

/// Connection parameters a protocol handler needs, lifted out of a service
/// config section.
struct ConnectorParams {
  std::string host;
  std::uint16_t port = 0;
  AuthConfig auth;
  std::string virtual_host;  // empty: use host
  std::int64_t heartbeat_out_ms = 10000;  // cx: what we can send
  std::int64_t heartbeat_in_ms = 10000;   // cy: what we want to receive
  ReconnectPolicy reconnect;
  bool use_tls = false;
  std::string tls_ca_path;
  bool tls_verify_hostname = true;

  static ConnectorParams from_service(const MQServiceConfig& service);
};

enum class AckMode { Auto, ClientIndividual };

struct SubscriptionSpec {
  std::string wire_path;  // must start with /queue/ or /topic/
  AckMode ack_mode = AckMode::ClientIndividual;
  /// Invoked serially, in arrival order, on the session's reader context.
  /// Under ClientIndividual the connector ACKs after a normal return and
  /// NACKs when the handler throws.
  std::function<void(const MessageEnvelope&)> handler;
};

enum class DisconnectReason { PeerClose, HeartbeatTimeout, ProtocolError, Requested };

std::string_view to_string(DisconnectReason reason) noexcept;

struct ConnectorEvent {
  enum class Type {
    Connected,
    Disconnected,
    MessageArrived,
    ReceiptConfirmed,
    ProtocolError,
  };
  Type type = Type::Connected;
  DisconnectReason reason = DisconnectReason::Requested;  // Disconnected only
  std::string subscription_id{};                          // MessageArrived
  std::optional<MessageEnvelope> envelope{};              // MessageArrived
  std::string receipt_id{};                               // ReceiptConfirmed
  std::string description{};                               // ProtocolError
};

/// Runs on the session's reader context (or the connecting thread for the
/// initial Connected). Must not call back into the session's disconnect.
using EventHandler = std::function<void(const ConnectorEvent&)>;

inline constexpr int kConnectTimeoutMs = 10000;
inline constexpr int kReceiptTimeoutMs = 5000;
inline constexpr int kDisconnectReceiptTimeoutMs = 2000;

/// A live protocol session. Factories return connected sessions; connection
/// errors surface from the factory call.
///
/// Handles may be shared across threads: put/put_async are internally
/// serialized, subscribe/unsubscribe/disconnect are safe from any thread.
/// Handlers and the event handler run serially on the reader context and must
/// not invoke disconnect (documented deadlock hazard); signal a supervisor
/// instead.
class Session {
 public:
  virtual ~Session() = default;

  virtual bool connected() const = 0;

  /// Fire-and-forget when confirm is false (returns once the bytes are
  /// written). With confirm, attaches a receipt and returns only after the
  /// broker confirms. Throws NotConnected and SendFailed (receipt timeout
  /// after 5 s, or write failure).
  virtual void put(const std::string& wire_path, const MessageEnvelope& env,
                   bool confirm) = 0;

  /// Receipt-confirmed send without blocking: returns a ticket for
  /// await_receipt. Used by bulk replay paths to pipeline sends.
  virtual std::uint64_t put_async(const std::string& wire_path,
                                  const MessageEnvelope& env) = 0;

  /// True when the broker confirmed the ticket's receipt; false on timeout
  /// or a dead session.
  virtual bool await_receipt(std::uint64_t ticket, int timeout_ms) = 0;

  /// Returns the fresh subscription id.
  virtual std::string subscribe(const SubscriptionSpec& spec) = 0;

  virtual void unsubscribe(const std::string& id) = 0;

  /// Graceful, idempotent: DISCONNECT with receipt, wait at most 2 s, close.
  /// Exactly one Disconnected event is emitted per session lifetime no
  /// matter how it ends.
  virtual void disconnect() = 0;
};

using SessionFactory = std::function<std::unique_ptr<Session>(
    const ConnectorParams&, EventHandler)>;

/// Maps protocol names to session factories; "stomp" is built in, tests add
/// a loopback implementation to prove callers are protocol-agnostic.
class ConnectorRegistry {
 public:
  static ConnectorRegistry& global();

  void register_protocol(const std::string& name, SessionFactory factory);

  /// nullptr when the name is unknown. The pointer stays valid until the
  /// protocol is re-registered.
  const SessionFactory* find(const std::string& name) const;

  /// Throws UnknownProtocol.
  std::unique_ptr<Session> create(const MQServiceConfig& service,
                                  EventHandler handler) const;

 private:
  ConnectorRegistry();

  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<SessionFactory>> factories_;
};

/// The built-in STOMP 1.2 protocol handler. Test hook: when
/// suppress_client_heartbeats is set, the session negotiates heartbeats but
/// never emits them (forces server-side timeout paths).
std::unique_ptr<Session> make_stomp_session(const ConnectorParams& params,
                                            EventHandler handler,
                                            bool suppress_client_heartbeats = false);

}  // namespace mqkit
