#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mqkit/error.hpp"

namespace mqkit {

enum class DestinationKind { Queue, Topic };

std::string_view to_string(DestinationKind kind) noexcept;

/// A parsed "service::Kind::Name" pseudo-URL.
struct DestinationSpec {
  std::string service_id;
  DestinationKind kind = DestinationKind::Queue;
  std::string name;

  /// Canonical "a::Kind::c" form; parse_pseudo_url(format()) round-trips.
  std::string format() const;

  bool operator==(const DestinationSpec&) const = default;
};

/// Splits on "::" into exactly <service, kind, name>. Kind is case-sensitive.
DestinationSpec parse_pseudo_url(std::string_view s);

enum class AuthMode { UserPass, TlsClientCert };

struct AuthConfig {
  AuthMode mode = AuthMode::UserPass;
  // UserPass. password_ref names an env variable ("env:NAME" or bare name)
  // or a secrets-file key ("file:<path>#<key>"); never an inline secret.
  std::string user;
  std::string password_ref;
  // TlsClientCert (PEM paths).
  std::string cert_path;
  std::string key_path;
  std::string ca_path;
};

/// Dereferences password_ref. Throws MissingSecret when the env variable is
/// unset or the secrets file lacks the key.
std::string resolve_password(const AuthConfig& auth);

struct ReconnectPolicy {
  std::int64_t initial_backoff_ms = 500;
  std::int64_t max_backoff_ms = 30000;
  double multiplier = 2.0;
  bool jitter = true;  // full jitter +-50%; off for deterministic tests
};

struct DestinationParams {
  std::string path;  // optional wire-path override
};

struct MQServiceConfig {
  std::string service_id;
  std::string protocol = "stomp";  // connector handler name
  std::string host;
  std::uint16_t port = 61613;
  AuthConfig auth;
  std::int64_t heartbeat_out_ms = 10000;  // what we can send (cx)
  std::int64_t heartbeat_in_ms = 10000;   // what we want to receive (cy)
  ReconnectPolicy reconnect;
  // TLS without a client certificate (UserPass over TLS). Implied on when
  // auth.mode is TlsClientCert.
  bool use_tls = false;
  std::string tls_ca_path;
  bool tls_verify_hostname = true;
  std::map<std::string, DestinationParams> queues;
  std::map<std::string, DestinationParams> topics;
};

/// Immutable after load; safe to share across threads. Reload builds a new
/// tree, in-flight resolutions keep the old one.
struct ConfigTree {
  std::map<std::string, MQServiceConfig> services;
  // Raw optional sections for the embedded broker and the log gateway;
  // null when the document has none. Parsed lazily by their owners.
  nlohmann::json broker_section;
  nlohmann::json gateway_section;
};

struct ResolvedDestination {
  MQServiceConfig service;
  DestinationSpec spec;
  std::string wire_path;  // "/queue/<name>" or "/topic/<name>" unless overridden
};

struct Violation {
  std::string path;     // config location, e.g. "Resources.MQServices.x.Auth"
  std::string message;

  bool operator==(const Violation&) const = default;
};

/// Parses the JSON config document. Unknown keys are rejected (SchemaError),
/// missing optional keys get defaults: port 61613, heartbeats 10000/10000 ms,
/// backoff 500/30000 ms x2.0.
ConfigTree load_config(std::string_view bytes);
ConfigTree load_config_file(const std::filesystem::path& path);

/// Collects every invariant violation; empty result means valid. Never stops
/// at the first problem. check_protocols additionally requires each service's
/// protocol to name a registered connector.
std::vector<Violation> validate(const ConfigTree& tree, bool check_protocols = true);

/// Resolves a full "svc::Kind::Name" pseudo-url, or the shorthands
/// "Kind::Name" / "Name" when exactly one declared destination matches.
ResolvedDestination resolve(const ConfigTree& tree, const std::string& query);

}  // namespace mqkit
