#include "mqkit/gateway.hpp"

#include <openssl/crypto.h>
#include <openssl/evp.h>
#include <openssl/rand.h>

#include <optional>
#include <utility>

#include <httplib.h>

#include "mqkit/error.hpp"
#include "mqkit/pilot_log.hpp"

namespace mqkit {

namespace {

std::string to_hex(const unsigned char* data, std::size_t len) {
  static const char digits[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (std::size_t i = 0; i < len; ++i) {
    out.push_back(digits[data[i] >> 4]);
    out.push_back(digits[data[i] & 0xF]);
  }
  return out;
}

int hex_nibble(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

std::string from_hex(std::string_view hex) {
  if (hex.size() % 2 != 0) {
    throw Error(ErrorKind::SchemaError, "odd-length hex string");
  }
  std::string out;
  out.reserve(hex.size() / 2);
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    const int hi = hex_nibble(hex[i]);
    const int lo = hex_nibble(hex[i + 1]);
    if (hi < 0 || lo < 0) {
      throw Error(ErrorKind::SchemaError, "invalid hex string");
    }
    out.push_back(static_cast<char>((hi << 4) | lo));
  }
  return out;
}

std::string lower(std::string s) {
  for (char& c : s) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return s;
}

nlohmann::json error_body(const std::string& message) {
  return nlohmann::json{{"error", message}};
}

void reply(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

}  // namespace

std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr);
  return to_hex(md, len);
}

std::string hash_token(std::string_view token, std::string_view salt_hex) {
  std::string material = from_hex(salt_hex);
  material.append(token);
  return sha256_hex(material);
}

GatewayTokenEntry make_token_entry(std::string_view token,
                                   std::string_view principal) {
  unsigned char salt[16];
  if (RAND_bytes(salt, sizeof(salt)) != 1) {
    throw Error(ErrorKind::IoError, "cannot generate token salt");
  }
  GatewayTokenEntry entry;
  entry.salt_hex = to_hex(salt, sizeof(salt));
  entry.hash_hex = hash_token(token, entry.salt_hex);
  entry.principal = std::string(principal);
  return entry;
}

GatewayConfig GatewayConfig::from_json(const nlohmann::json& section) {
  if (!section.is_object()) {
    throw Error(ErrorKind::SchemaError, "Gateway section must be an object");
  }
  GatewayConfig config;
  for (const auto& [key, value] : section.items()) {
    if (key == "Host") {
      if (!value.is_string()) throw Error(ErrorKind::SchemaError, "Gateway.Host");
      config.host = value.get<std::string>();
    } else if (key == "Port") {
      if (!value.is_number_integer()) throw Error(ErrorKind::SchemaError, "Gateway.Port");
      config.port = value.get<int>();
    } else if (key == "Target") {
      if (!value.is_string()) throw Error(ErrorKind::SchemaError, "Gateway.Target");
      config.target = value.get<std::string>();
    } else if (key == "SpoolDir") {
      if (!value.is_string()) throw Error(ErrorKind::SchemaError, "Gateway.SpoolDir");
      config.spool_dir = value.get<std::string>();
    } else if (key == "Tokens") {
      if (!value.is_array()) throw Error(ErrorKind::SchemaError, "Gateway.Tokens");
      for (const auto& item : value) {
        if (!item.is_object() || !item.contains("Salt") || !item.contains("Hash") ||
            !item.contains("Principal") || !item["Salt"].is_string() ||
            !item["Hash"].is_string() || !item["Principal"].is_string()) {
          throw Error(ErrorKind::SchemaError,
                      "Gateway.Tokens entries need Salt, Hash and Principal strings");
        }
        GatewayTokenEntry entry;
        entry.salt_hex = lower(item["Salt"].get<std::string>());
        entry.hash_hex = lower(item["Hash"].get<std::string>());
        entry.principal = item["Principal"].get<std::string>();
        from_hex(entry.salt_hex);  // validate
        from_hex(entry.hash_hex);
        config.tokens.push_back(std::move(entry));
      }
    } else {
      throw Error(ErrorKind::SchemaError, "unknown Gateway key: " + key);
    }
  }
  if (config.target.empty()) throw Error(ErrorKind::SchemaError, "Gateway.Target missing");
  if (config.spool_dir.empty()) throw Error(ErrorKind::SchemaError, "Gateway.SpoolDir missing");
  return config;
}

struct Gateway::Impl {
  MqClient& client;
  GatewayConfig config;
  std::shared_ptr<Spool> spool;
  std::unique_ptr<Producer> producer;
  httplib::Server server;
  std::thread thread;

  std::atomic<std::uint64_t> accepted{0};
  std::atomic<std::uint64_t> spooled{0};
  std::atomic<std::uint64_t> rejected_auth{0};
  std::atomic<std::uint64_t> rejected_schema{0};

  Impl(MqClient& c, GatewayConfig cfg) : client(c), config(std::move(cfg)) {}

  std::optional<std::string> authenticate(const httplib::Request& req) const {
    const std::string auth = req.get_header_value("Authorization");
    if (auth.rfind("Bearer ", 0) != 0) return std::nullopt;
    const std::string token = auth.substr(7);
    for (const auto& entry : config.tokens) {
      const std::string presented = hash_token(token, entry.salt_hex);
      if (presented.size() == entry.hash_hex.size() &&
          CRYPTO_memcmp(presented.data(), entry.hash_hex.data(),
                        presented.size()) == 0) {
        return entry.principal;
      }
    }
    return std::nullopt;
  }

  void handle_logs(const httplib::Request& req, httplib::Response& res) {
    auto principal = authenticate(req);
    if (!principal) {
      rejected_auth.fetch_add(1);
      reply(res, 401, error_body("unauthorized"));
      return;
    }

    auto doc = nlohmann::json::parse(req.body, nullptr, false);
    if (doc.is_discarded()) {
      rejected_schema.fetch_add(1);
      reply(res, 400, error_body("invalid JSON"));
      return;
    }
    nlohmann::json batch;
    if (doc.is_array()) {
      batch = std::move(doc);
    } else if (doc.is_object()) {
      batch = nlohmann::json::array({std::move(doc)});
    } else {
      rejected_schema.fetch_add(1);
      reply(res, 400, error_body("body must be a record or an array of records"));
      return;
    }
    if (batch.size() > kMaxBatch) {
      reply(res, 413,
            nlohmann::json{{"error", "batch too large"}, {"limit", kMaxBatch}});
      return;
    }

    // Validate everything before forwarding anything: a bad record rejects
    // the whole batch so the shipper can fix and resend it atomically.
    std::vector<PilotLogRecord> records;
    records.reserve(batch.size());
    for (const auto& item : batch) {
      try {
        records.push_back(PilotLogRecord::from_json(item));
      } catch (const Error& e) {
        rejected_schema.fetch_add(1);
        reply(res, 400,
              nlohmann::json{{"error", "schema violation"},
                             {"field", e.message()}});
        return;
      }
    }

    std::uint64_t n = 0;
    std::uint64_t m = 0;
    for (const auto& rec : records) {
      nlohmann::json payload = rec.to_json();
      payload["received-at-ms"] = system_clock_ms();
      payload["principal"] = *principal;
      PutOutcome outcome;
      try {
        outcome = producer->put(payload);
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::DiskFull) {
          reply(res, 507,
                nlohmann::json{{"error", "spool disk full"},
                               {"accepted", n},
                               {"spooled", m}});
        } else {
          reply(res, 500, error_body(e.what()));
        }
        accepted.fetch_add(n);
        spooled.fetch_add(m);
        return;
      }
      if (outcome == PutOutcome::SendFailed) {
        // Only possible without a spool; defensive.
        reply(res, 503, error_body("delivery failed"));
        accepted.fetch_add(n);
        spooled.fetch_add(m);
        return;
      }
      ++n;
      if (outcome == PutOutcome::Spooled) ++m;
    }
    accepted.fetch_add(n);
    spooled.fetch_add(m);
    reply(res, 202, nlohmann::json{{"accepted", n}, {"spooled", m}});
  }

  void handle_health(const httplib::Request&, httplib::Response& res) {
    reply(res, 200,
          nlohmann::json{{"broker_connected", producer->connected()},
                         {"spool_depth", spool->depth()}});
  }
};

Gateway::Gateway(MqClient& client, GatewayConfig config)
    : impl_(std::make_unique<Impl>(client, std::move(config))) {}

Gateway::~Gateway() { stop(); }

void Gateway::start() {
  Impl& impl = *impl_;
  if (impl.thread.joinable()) return;

  impl.spool = std::make_shared<Spool>(impl.config.spool_dir);
  ProducerOptions options;
  options.confirm = true;
  options.spool = impl.spool;
  impl.producer = impl.client.create_producer(impl.config.target, options);

  impl.server.Post("/v1/logs", [&impl](const httplib::Request& req,
                                       httplib::Response& res) {
    impl.handle_logs(req, res);
  });
  impl.server.Get("/v1/health", [&impl](const httplib::Request& req,
                                        httplib::Response& res) {
    impl.handle_health(req, res);
  });

  if (impl.config.port == 0) {
    bound_port_ = impl.server.bind_to_any_port(impl.config.host);
    if (bound_port_ <= 0) {
      throw Error(ErrorKind::IoError, "gateway cannot bind " + impl.config.host);
    }
  } else {
    if (!impl.server.bind_to_port(impl.config.host, impl.config.port)) {
      throw Error(ErrorKind::IoError,
                  "gateway cannot bind " + impl.config.host + ":" +
                      std::to_string(impl.config.port));
    }
    bound_port_ = impl.config.port;
  }
  impl.thread = std::thread([&impl] { impl.server.listen_after_bind(); });
  impl.server.wait_until_ready();
}

void Gateway::stop() {
  Impl& impl = *impl_;
  if (!impl.thread.joinable()) return;
  impl.server.stop();
  impl.thread.join();
  if (impl.producer) {
    impl.producer->close();
    impl.producer.reset();
  }
  impl.spool.reset();
}

Gateway::Stats Gateway::stats() const {
  const Impl& impl = *impl_;
  Stats s;
  s.accepted = impl.accepted.load();
  s.spooled = impl.spooled.load();
  s.rejected_auth = impl.rejected_auth.load();
  s.rejected_schema = impl.rejected_schema.load();
  return s;
}

}  // namespace mqkit
