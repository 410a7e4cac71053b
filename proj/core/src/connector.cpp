#include "mqkit/connector.hpp"

namespace mqkit {

ConnectorParams ConnectorParams::from_service(const MQServiceConfig& service) {
  ConnectorParams params;
  params.host = service.host;
  params.port = service.port;
  params.auth = service.auth;
  params.heartbeat_out_ms = service.heartbeat_out_ms;
  params.heartbeat_in_ms = service.heartbeat_in_ms;
  params.reconnect = service.reconnect;
  params.use_tls = service.use_tls || service.auth.mode == AuthMode::TlsClientCert;
  params.tls_ca_path = service.tls_ca_path;
  params.tls_verify_hostname = service.tls_verify_hostname;
  return params;
}

std::string_view to_string(DisconnectReason reason) noexcept {
  switch (reason) {
    case DisconnectReason::PeerClose: return "peer-close";
    case DisconnectReason::HeartbeatTimeout: return "heartbeat-timeout";
    case DisconnectReason::ProtocolError: return "protocol-error";
    case DisconnectReason::Requested: return "requested";
  }
  return "unknown";
}

ConnectorRegistry& ConnectorRegistry::global() {
  static ConnectorRegistry registry;
  return registry;
}

ConnectorRegistry::ConnectorRegistry() {
  factories_["stomp"] = std::make_shared<SessionFactory>(
      [](const ConnectorParams& params, EventHandler handler) {
        return make_stomp_session(params, std::move(handler));
      });
}

void ConnectorRegistry::register_protocol(const std::string& name,
                                          SessionFactory factory) {
  std::lock_guard<std::mutex> lock(mutex_);
  factories_[name] = std::make_shared<SessionFactory>(std::move(factory));
}

const SessionFactory* ConnectorRegistry::find(const std::string& name) const {
  std::lock_guard<std::mutex> lock(mutex_);
  auto it = factories_.find(name);
  return it == factories_.end() ? nullptr : it->second.get();
}

std::unique_ptr<Session> ConnectorRegistry::create(
    const MQServiceConfig& service, EventHandler handler) const {
  std::shared_ptr<SessionFactory> factory;
  {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = factories_.find(service.protocol);
    if (it == factories_.end()) {
      throw Error(ErrorKind::UnknownProtocol,
                  "no connector registered for protocol '" + service.protocol +
                      "'");
    }
    factory = it->second;
  }
  return (*factory)(ConnectorParams::from_service(service),
                    std::move(handler));
}

}  // namespace mqkit
