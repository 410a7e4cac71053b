#include "mqkit/config.hpp"

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "mqkit/connector.hpp"

namespace mqkit {

using nlohmann::json;

std::string_view to_string(DestinationKind kind) noexcept {
  return kind == DestinationKind::Queue ? "Queue" : "Topic";
}

std::string DestinationSpec::format() const {
  std::string out = service_id;
  out += "::";
  out += to_string(kind);
  out += "::";
  out += name;
  return out;
}

namespace {

std::vector<std::string> split_sections(std::string_view s) {
  std::vector<std::string> parts;
  size_t pos = 0;
  while (true) {
    size_t sep = s.find("::", pos);
    if (sep == std::string_view::npos) {
      parts.emplace_back(s.substr(pos));
      return parts;
    }
    parts.emplace_back(s.substr(pos, sep - pos));
    pos = sep + 2;
  }
}

DestinationKind parse_kind(std::string_view token, std::string_view whole) {
  if (token == "Queue") return DestinationKind::Queue;
  if (token == "Topic") return DestinationKind::Topic;
  throw Error(ErrorKind::InvalidKind,
              "\"" + std::string(token) + "\" in \"" + std::string(whole) +
                  "\" is neither \"Queue\" nor \"Topic\"");
}

}  // namespace

DestinationSpec parse_pseudo_url(std::string_view s) {
  auto parts = split_sections(s);
  if (parts.size() != 3) {
    throw Error(ErrorKind::MalformedPseudoUrl,
                "\"" + std::string(s) + "\" has " + std::to_string(parts.size()) +
                    " section(s), expected service::Kind::Name");
  }
  for (const auto& p : parts) {
    if (p.empty()) {
      throw Error(ErrorKind::MalformedPseudoUrl,
                  "empty section in \"" + std::string(s) + "\"");
    }
  }
  DestinationSpec spec;
  spec.service_id = parts[0];
  spec.kind = parse_kind(parts[1], s);
  spec.name = parts[2];
  return spec;
}

// ---------------------------------------------------------------------------
// load_config
// ---------------------------------------------------------------------------

namespace {

[[noreturn]] void schema_error(const std::string& path, const std::string& what) {
  throw Error(ErrorKind::SchemaError, path + ": " + what);
}

void reject_unknown_keys(const json& obj, const std::string& path,
                         std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) {
      if (it.key() == k) { known = true; break; }
    }
    if (!known) schema_error(path + "." + it.key(), "unknown key");
  }
}

const json* get_field(const json& obj, const char* key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

std::string get_string(const json& obj, const char* key, const std::string& path,
                       const std::string& fallback) {
  const json* v = get_field(obj, key);
  if (!v) return fallback;
  if (!v->is_string()) schema_error(path + "." + key, "expected a string");
  return v->get<std::string>();
}

std::int64_t get_int(const json& obj, const char* key, const std::string& path,
                     std::int64_t fallback) {
  const json* v = get_field(obj, key);
  if (!v) return fallback;
  if (!v->is_number_integer()) schema_error(path + "." + key, "expected an integer");
  return v->get<std::int64_t>();
}

double get_number(const json& obj, const char* key, const std::string& path,
                  double fallback) {
  const json* v = get_field(obj, key);
  if (!v) return fallback;
  if (!v->is_number()) schema_error(path + "." + key, "expected a number");
  return v->get<double>();
}

bool get_bool(const json& obj, const char* key, const std::string& path, bool fallback) {
  const json* v = get_field(obj, key);
  if (!v) return fallback;
  if (!v->is_boolean()) schema_error(path + "." + key, "expected a boolean");
  return v->get<bool>();
}

AuthConfig parse_auth(const json& node, const std::string& path) {
  if (!node.is_object()) schema_error(path, "expected an object");
  AuthConfig auth;
  std::string mode = get_string(node, "Mode", path, "UserPass");
  if (mode == "UserPass") {
    auth.mode = AuthMode::UserPass;
    reject_unknown_keys(node, path, {"Mode", "User", "PasswordRef"});
    auth.user = get_string(node, "User", path, "");
    auth.password_ref = get_string(node, "PasswordRef", path, "");
  } else if (mode == "TlsClientCert") {
    auth.mode = AuthMode::TlsClientCert;
    reject_unknown_keys(node, path, {"Mode", "CertPath", "KeyPath", "CaPath"});
    auth.cert_path = get_string(node, "CertPath", path, "");
    auth.key_path = get_string(node, "KeyPath", path, "");
    auth.ca_path = get_string(node, "CaPath", path, "");
  } else {
    schema_error(path + ".Mode", "must be \"UserPass\" or \"TlsClientCert\"");
  }
  return auth;
}

std::map<std::string, DestinationParams> parse_destinations(const json& node,
                                                            const std::string& path) {
  if (!node.is_object()) schema_error(path, "expected an object");
  std::map<std::string, DestinationParams> out;
  for (auto it = node.begin(); it != node.end(); ++it) {
    const std::string dpath = path + "." + it.key();
    if (!it->is_object()) schema_error(dpath, "expected an object");
    reject_unknown_keys(*it, dpath, {"Path"});
    DestinationParams params;
    params.path = get_string(*it, "Path", dpath, "");
    out.emplace(it.key(), std::move(params));
  }
  return out;
}

MQServiceConfig parse_service(const std::string& id, const json& node,
                              const std::string& path) {
  if (!node.is_object()) schema_error(path, "expected an object");
  reject_unknown_keys(node, path,
                      {"MQType", "Host", "Port", "Auth", "HeartbeatOutMs", "HeartbeatInMs",
                       "Reconnect", "Queues", "Topics", "UseTls", "Tls"});
  MQServiceConfig cfg;
  cfg.service_id = id;
  cfg.protocol = get_string(node, "MQType", path, "stomp");
  cfg.host = get_string(node, "Host", path, id);
  std::int64_t port = get_int(node, "Port", path, 61613);
  if (port < 1 || port > 65535) schema_error(path + ".Port", "port out of range");
  cfg.port = static_cast<std::uint16_t>(port);
  if (const json* a = get_field(node, "Auth")) cfg.auth = parse_auth(*a, path + ".Auth");
  cfg.heartbeat_out_ms = get_int(node, "HeartbeatOutMs", path, 10000);
  cfg.heartbeat_in_ms = get_int(node, "HeartbeatInMs", path, 10000);
  if (cfg.heartbeat_out_ms < 0) schema_error(path + ".HeartbeatOutMs", "must be >= 0");
  if (cfg.heartbeat_in_ms < 0) schema_error(path + ".HeartbeatInMs", "must be >= 0");
  if (const json* r = get_field(node, "Reconnect")) {
    const std::string rpath = path + ".Reconnect";
    if (!r->is_object()) schema_error(rpath, "expected an object");
    reject_unknown_keys(*r, rpath, {"InitialBackoffMs", "MaxBackoffMs", "Multiplier", "Jitter"});
    cfg.reconnect.initial_backoff_ms = get_int(*r, "InitialBackoffMs", rpath, 500);
    cfg.reconnect.max_backoff_ms = get_int(*r, "MaxBackoffMs", rpath, 30000);
    cfg.reconnect.multiplier = get_number(*r, "Multiplier", rpath, 2.0);
    cfg.reconnect.jitter = get_bool(*r, "Jitter", rpath, true);
  }
  cfg.use_tls = get_bool(node, "UseTls", path, cfg.auth.mode == AuthMode::TlsClientCert);
  if (const json* t = get_field(node, "Tls")) {
    const std::string tpath = path + ".Tls";
    if (!t->is_object()) schema_error(tpath, "expected an object");
    reject_unknown_keys(*t, tpath, {"CaPath", "VerifyHostname"});
    cfg.tls_ca_path = get_string(*t, "CaPath", tpath, "");
    cfg.tls_verify_hostname = get_bool(*t, "VerifyHostname", tpath, true);
  }
  if (const json* q = get_field(node, "Queues"))
    cfg.queues = parse_destinations(*q, path + ".Queues");
  if (const json* t = get_field(node, "Topics"))
    cfg.topics = parse_destinations(*t, path + ".Topics");
  return cfg;
}

}  // namespace

ConfigTree load_config(std::string_view bytes) {
  json doc;
  try {
    doc = json::parse(bytes);
  } catch (const json::parse_error& e) {
    // nlohmann reports a byte offset; turn it into line/column.
    size_t line = 1, col = 1;
    size_t limit = e.byte < bytes.size() ? e.byte : bytes.size();
    for (size_t i = 0; i + 1 <= limit && i < bytes.size(); ++i) {
      if (bytes[i] == '\n') { ++line; col = 1; } else { ++col; }
    }
    std::ostringstream msg;
    msg << "invalid JSON at line " << line << ", column " << col << " (" << e.what() << ")";
    throw Error(ErrorKind::ParseError, msg.str());
  }
  if (!doc.is_object()) schema_error("(document)", "expected a JSON object");
  reject_unknown_keys(doc, "(document)", {"Resources", "Broker", "Gateway"});

  ConfigTree tree;
  if (const json* broker = get_field(doc, "Broker")) tree.broker_section = *broker;
  if (const json* gateway = get_field(doc, "Gateway")) tree.gateway_section = *gateway;
  const json* resources = get_field(doc, "Resources");
  if (!resources) return tree;
  if (!resources->is_object()) schema_error("Resources", "expected an object");
  reject_unknown_keys(*resources, "Resources", {"MQServices"});
  const json* services = get_field(*resources, "MQServices");
  if (!services) return tree;
  if (!services->is_object()) schema_error("Resources.MQServices", "expected an object");
  for (auto it = services->begin(); it != services->end(); ++it) {
    const std::string path = "Resources.MQServices." + it.key();
    tree.services.emplace(it.key(), parse_service(it.key(), *it, path));
  }
  return tree;
}

ConfigTree load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return load_config(buf.str());
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

namespace {

bool file_exists(const std::string& p) {
  std::error_code ec;
  return !p.empty() && std::filesystem::exists(p, ec);
}

void validate_auth(const MQServiceConfig& svc, const std::string& path,
                   std::vector<Violation>& out) {
  const AuthConfig& auth = svc.auth;
  if (auth.mode == AuthMode::UserPass) {
    if (auth.user.empty())
      out.push_back({path + ".Auth.User", "UserPass auth requires a non-empty user"});
    if (auth.password_ref.empty())
      out.push_back({path + ".Auth.PasswordRef", "UserPass auth requires a password reference"});
    if (!auth.cert_path.empty() || !auth.key_path.empty() || !auth.ca_path.empty())
      out.push_back({path + ".Auth", "exactly one auth mode's field group may be populated"});
    if (auth.password_ref.rfind("file:", 0) == 0) {
      std::string rest = auth.password_ref.substr(5);
      std::string file = rest.substr(0, rest.find('#'));
      if (!file_exists(file))
        out.push_back({path + ".Auth.PasswordRef", "secrets file does not exist: " + file});
    }
  } else {
    if (!auth.user.empty() || !auth.password_ref.empty())
      out.push_back({path + ".Auth", "exactly one auth mode's field group may be populated"});
    if (auth.cert_path.empty())
      out.push_back({path + ".Auth.CertPath", "TlsClientCert auth requires a certificate path"});
    else if (!file_exists(auth.cert_path))
      out.push_back({path + ".Auth.CertPath", "file does not exist: " + auth.cert_path});
    if (auth.key_path.empty())
      out.push_back({path + ".Auth.KeyPath", "TlsClientCert auth requires a key path"});
    else if (!file_exists(auth.key_path))
      out.push_back({path + ".Auth.KeyPath", "file does not exist: " + auth.key_path});
    if (!auth.ca_path.empty() && !file_exists(auth.ca_path))
      out.push_back({path + ".Auth.CaPath", "file does not exist: " + auth.ca_path});
  }
}

void validate_names(const std::map<std::string, DestinationParams>& dests,
                    const std::string& path, std::vector<Violation>& out) {
  for (const auto& [name, params] : dests) {
    (void)params;
    if (name.empty())
      out.push_back({path, "destination name must be non-empty"});
    else if (name.find("::") != std::string::npos)
      out.push_back({path + "." + name, "destination name must not contain \"::\""});
  }
}

}  // namespace

std::vector<Violation> validate(const ConfigTree& tree, bool check_protocols) {
  std::vector<Violation> out;
  for (const auto& [id, svc] : tree.services) {
    const std::string path = "Resources.MQServices." + id;
    if (id != svc.service_id)
      out.push_back({path, "section key does not match service_id \"" + svc.service_id + "\""});
    if (id.empty())
      out.push_back({path, "service_id must be non-empty"});
    else if (id.find("::") != std::string::npos)
      out.push_back({path, "service_id must not contain \"::\""});
    if (svc.host.empty()) out.push_back({path + ".Host", "host must be non-empty"});
    if (svc.protocol.empty()) {
      out.push_back({path + ".MQType", "protocol must be non-empty"});
    } else if (check_protocols && !ConnectorRegistry::global().find(svc.protocol)) {
      out.push_back({path + ".MQType",
                     "\"" + svc.protocol + "\" does not name a registered connector"});
    }
    validate_auth(svc, path, out);
    if (svc.heartbeat_out_ms < 0 || svc.heartbeat_in_ms < 0)
      out.push_back({path, "heartbeat intervals must be >= 0"});
    const ReconnectPolicy& r = svc.reconnect;
    if (r.initial_backoff_ms < 1)
      out.push_back({path + ".Reconnect.InitialBackoffMs", "must be >= 1"});
    if (r.max_backoff_ms < r.initial_backoff_ms)
      out.push_back({path + ".Reconnect.MaxBackoffMs", "must be >= InitialBackoffMs"});
    if (r.multiplier < 1.0)
      out.push_back({path + ".Reconnect.Multiplier", "must be >= 1.0"});
    validate_names(svc.queues, path + ".Queues", out);
    validate_names(svc.topics, path + ".Topics", out);
    for (const auto& [name, params] : svc.queues) {
      (void)params;
      if (svc.topics.count(name))
        out.push_back({path, "\"" + name + "\" is declared as both a queue and a topic"});
    }
    if (svc.use_tls && !svc.tls_ca_path.empty() && !file_exists(svc.tls_ca_path))
      out.push_back({path + ".Tls.CaPath", "file does not exist: " + svc.tls_ca_path});
  }
  return out;
}

// ---------------------------------------------------------------------------
// resolve
// ---------------------------------------------------------------------------

namespace {

std::string wire_path_for(const MQServiceConfig& svc, const DestinationSpec& spec) {
  const auto& table = spec.kind == DestinationKind::Queue ? svc.queues : svc.topics;
  auto it = table.find(spec.name);
  if (it != table.end() && !it->second.path.empty()) return it->second.path;
  return std::string(spec.kind == DestinationKind::Queue ? "/queue/" : "/topic/") + spec.name;
}

bool declares(const MQServiceConfig& svc, DestinationKind kind, const std::string& name) {
  const auto& table = kind == DestinationKind::Queue ? svc.queues : svc.topics;
  return table.count(name) != 0;
}

ResolvedDestination resolve_full(const ConfigTree& tree, const DestinationSpec& spec) {
  auto it = tree.services.find(spec.service_id);
  if (it == tree.services.end()) {
    throw Error(ErrorKind::UnknownService,
                "no MQ service section named \"" + spec.service_id + "\"");
  }
  const MQServiceConfig& svc = it->second;
  if (!declares(svc, spec.kind, spec.name)) {
    throw Error(ErrorKind::UndeclaredDestination,
                "\"" + spec.format() + "\" is not declared under service \"" +
                    spec.service_id + "\"");
  }
  return {svc, spec, wire_path_for(svc, spec)};
}

ResolvedDestination resolve_shorthand(const ConfigTree& tree, const std::string& query,
                                      bool kind_fixed, DestinationKind kind,
                                      const std::string& name) {
  std::vector<DestinationSpec> matches;
  for (const auto& [id, svc] : tree.services) {
    for (DestinationKind k : {DestinationKind::Queue, DestinationKind::Topic}) {
      if (kind_fixed && k != kind) continue;
      if (declares(svc, k, name)) matches.push_back({id, k, name});
    }
  }
  if (matches.empty()) {
    throw Error(ErrorKind::UndeclaredDestination,
                "\"" + query + "\" does not match any declared destination");
  }
  if (matches.size() > 1) {
    std::string list;
    for (const auto& m : matches) {
      if (!list.empty()) list += ", ";
      list += m.format();
    }
    throw Error(ErrorKind::AmbiguousShorthand,
                "\"" + query + "\" matches " + std::to_string(matches.size()) +
                    " destinations: " + list);
  }
  return resolve_full(tree, matches.front());
}

}  // namespace

ResolvedDestination resolve(const ConfigTree& tree, const std::string& query) {
  auto parts = split_sections(query);
  for (const auto& p : parts) {
    if (p.empty())
      throw Error(ErrorKind::MalformedPseudoUrl, "empty section in \"" + query + "\"");
  }
  switch (parts.size()) {
    case 3:
      return resolve_full(tree, parse_pseudo_url(query));
    case 2:
      return resolve_shorthand(tree, query, true, parse_kind(parts[0], query), parts[1]);
    case 1:
      return resolve_shorthand(tree, query, false, DestinationKind::Queue, parts[0]);
    default:
      throw Error(ErrorKind::MalformedPseudoUrl,
                  "\"" + query + "\" has " + std::to_string(parts.size()) +
                      " sections, expected at most 3");
  }
}

// ---------------------------------------------------------------------------
// secrets
// ---------------------------------------------------------------------------

std::string resolve_password(const AuthConfig& auth) {
  const std::string& ref = auth.password_ref;
  if (ref.empty()) throw Error(ErrorKind::MissingSecret, "empty password reference");
  if (ref.rfind("file:", 0) == 0) {
    std::string rest = ref.substr(5);
    size_t hash = rest.find('#');
    if (hash == std::string::npos) {
      throw Error(ErrorKind::MissingSecret,
                  "secrets-file reference must look like file:<path>#<key>: " + ref);
    }
    std::string file = rest.substr(0, hash);
    std::string key = rest.substr(hash + 1);
    std::ifstream in(file, std::ios::binary);
    if (!in) throw Error(ErrorKind::MissingSecret, "cannot open secrets file " + file);
    json doc;
    try {
      doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw Error(ErrorKind::MissingSecret,
                  "secrets file " + file + " is not valid JSON: " + e.what());
    }
    if (!doc.is_object() || !doc.contains(key) || !doc[key].is_string()) {
      throw Error(ErrorKind::MissingSecret,
                  "secrets file " + file + " has no string entry \"" + key + "\"");
    }
    return doc[key].get<std::string>();
  }
  std::string var = ref.rfind("env:", 0) == 0 ? ref.substr(4) : ref;
  const char* value = std::getenv(var.c_str());
  if (!value) {
    throw Error(ErrorKind::MissingSecret, "environment variable " + var + " is not set");
  }
  return value;
}

}  // namespace mqkit
