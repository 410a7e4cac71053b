#include "support.hpp"

#include <openssl/evp.h>
#include <openssl/pem.h>
#include <openssl/x509v3.h>
#include <stdlib.h>
#include <unistd.h>

#include <atomic>
#include <cstdio>
#include <thread>

#include "mqkit/error.hpp"

namespace mqtest {

bool wait_until(const std::function<bool()>& done, int timeout_ms) {
  const auto deadline =
      std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
  while (std::chrono::steady_clock::now() < deadline) {
    if (done()) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  return done();
}

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = std::filesystem::temp_directory_path() /
          ("mqkit-test-" + tag + "-" + std::to_string(::getpid()) + "-" +
           std::to_string(counter.fetch_add(1)));
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

void ensure_test_password() {
  static bool once = [] {
    ::setenv(kTestPasswordEnv, kTestPassword, 0);
    return true;
  }();
  (void)once;
}

// ------------------------------------------------------------ BrokerHarness

mqkit::BrokerOptions BrokerHarness::default_options() {
  mqkit::BrokerOptions options;
  options.host = "127.0.0.1";
  options.port = 0;
  options.users = {{kTestUser, kTestPassword}};
  return options;
}

BrokerHarness::BrokerHarness(mqkit::BrokerOptions options)
    : options_(std::move(options)) {
  ensure_test_password();
  options_.log_sink = [this](std::string_view line) {
    auto doc = nlohmann::json::parse(line, nullptr, false);
    if (doc.is_discarded()) return;
    std::lock_guard<std::mutex> lock(mutex_);
    events_.push_back(std::move(doc));
  };
  broker_ = std::make_unique<mqkit::Broker>(options_);
  broker_->start();
  // Pin the ephemeral ports so restart() comes back at the same address.
  options_.port = broker_->port();
  if (options_.enable_tls) options_.tls_port = broker_->tls_port();
  fixed_port_ = options_.port;
}

BrokerHarness::~BrokerHarness() {
  if (broker_) broker_->stop();
}

void BrokerHarness::kill() {
  if (!broker_) return;
  broker_->stop();
  broker_.reset();
}

void BrokerHarness::restart() {
  if (broker_) return;
  broker_ = std::make_unique<mqkit::Broker>(options_);
  broker_->start();
}

std::vector<nlohmann::json> BrokerHarness::events() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return events_;
}

std::size_t BrokerHarness::count_events(const std::string& type) const {
  std::lock_guard<std::mutex> lock(mutex_);
  std::size_t n = 0;
  for (const auto& event : events_) {
    if (event.value("event", "") == type) ++n;
  }
  return n;
}

// ------------------------------------------------------------ config trees

nlohmann::json tree_json(std::uint16_t port, const TreeSpec& spec) {
  nlohmann::json queues = nlohmann::json::object();
  for (const auto& q : spec.queues) queues[q] = nlohmann::json::object();
  nlohmann::json topics = nlohmann::json::object();
  for (const auto& t : spec.topics) topics[t] = nlohmann::json::object();

  nlohmann::json service{
      {"MQType", spec.protocol},
      {"Host", "127.0.0.1"},
      {"Port", port},
      {"Auth",
       {{"Mode", "UserPass"},
        {"User", kTestUser},
        {"PasswordRef", std::string("env:") + kTestPasswordEnv}}},
      {"HeartbeatOutMs", spec.heartbeat_out_ms},
      {"HeartbeatInMs", spec.heartbeat_in_ms},
      {"Reconnect",
       {{"InitialBackoffMs", spec.backoff_initial_ms},
        {"MaxBackoffMs", spec.backoff_max_ms},
        {"Multiplier", 2.0},
        {"Jitter", spec.jitter}}},
  };
  if (!spec.queues.empty()) service["Queues"] = queues;
  if (!spec.topics.empty()) service["Topics"] = topics;
  if (spec.use_tls) {
    service["UseTls"] = true;
    service["Tls"] = {{"CaPath", spec.tls_ca_path}, {"VerifyHostname", true}};
  }
  return nlohmann::json{
      {"Resources", {{"MQServices", {{spec.service_id, service}}}}}};
}

mqkit::ConfigTree make_tree(std::uint16_t port, const TreeSpec& spec) {
  ensure_test_password();
  return mqkit::load_config(tree_json(port, spec).dump());
}

// ------------------------------------------------------------ test certs

namespace {

struct EvpKey {
  EVP_PKEY* key = nullptr;
  ~EvpKey() { EVP_PKEY_free(key); }
};

struct X509Cert {
  X509* cert = nullptr;
  ~X509Cert() { X509_free(cert); }
};

void add_ext(X509* issuer, X509* subject, int nid, const char* value) {
  X509V3_CTX ctx;
  X509V3_set_ctx_nodb(&ctx);
  X509V3_set_ctx(&ctx, issuer, subject, nullptr, nullptr, 0);
  X509_EXTENSION* ext = X509V3_EXT_conf_nid(nullptr, &ctx, nid, value);
  if (ext == nullptr) {
    throw mqkit::Error(mqkit::ErrorKind::IoError, "cannot build X509 extension");
  }
  X509_add_ext(subject, ext, -1);
  X509_EXTENSION_free(ext);
}

EVP_PKEY* make_key() {
  EVP_PKEY* key = EVP_EC_gen("P-256");
  if (key == nullptr) {
    throw mqkit::Error(mqkit::ErrorKind::IoError, "cannot generate EC key");
  }
  return key;
}

X509* make_cert(const char* cn, EVP_PKEY* key, X509* issuer_cert,
                EVP_PKEY* issuer_key, bool is_ca, const char* san) {
  static long serial = 1;
  X509* x = X509_new();
  X509_set_version(x, 2);
  ASN1_INTEGER_set(X509_get_serialNumber(x), serial++);
  X509_gmtime_adj(X509_getm_notBefore(x), -3600);
  X509_gmtime_adj(X509_getm_notAfter(x), 3600L * 24 * 365);
  X509_NAME* name = X509_get_subject_name(x);
  X509_NAME_add_entry_by_txt(name, "CN", MBSTRING_ASC,
                             reinterpret_cast<const unsigned char*>(cn), -1,
                             -1, 0);
  X509_set_issuer_name(
      x, issuer_cert ? X509_get_subject_name(issuer_cert) : name);
  X509_set_pubkey(x, key);
  add_ext(issuer_cert ? issuer_cert : x, x, NID_basic_constraints,
          is_ca ? "critical,CA:TRUE" : "CA:FALSE");
  if (san != nullptr) add_ext(issuer_cert ? issuer_cert : x, x,
                              NID_subject_alt_name, san);
  if (X509_sign(x, issuer_key ? issuer_key : key, EVP_sha256()) == 0) {
    X509_free(x);
    throw mqkit::Error(mqkit::ErrorKind::IoError, "cannot sign test cert");
  }
  return x;
}

void write_cert(const std::filesystem::path& path, X509* cert) {
  FILE* f = ::fopen(path.c_str(), "w");
  PEM_write_X509(f, cert);
  ::fclose(f);
}

void write_key(const std::filesystem::path& path, EVP_PKEY* key) {
  FILE* f = ::fopen(path.c_str(), "w");
  PEM_write_PrivateKey(f, key, nullptr, nullptr, 0, nullptr, nullptr);
  ::fclose(f);
}

}  // namespace

const TestCerts& test_certs() {
  static TestCerts certs = [] {
    TestCerts out;
    out.dir = std::filesystem::temp_directory_path() /
              ("mqkit-test-certs-" + std::to_string(::getpid()));
    std::filesystem::create_directories(out.dir);

    EvpKey ca_key{make_key()};
    X509Cert ca{make_cert("mqkit test CA", ca_key.key, nullptr, nullptr, true,
                          nullptr)};
    EvpKey server_key{make_key()};
    X509Cert server{make_cert("localhost", server_key.key, ca.cert, ca_key.key,
                              false, "IP:127.0.0.1,DNS:localhost")};
    EvpKey client_key{make_key()};
    X509Cert client{make_cert(kClientCertCn, client_key.key, ca.cert,
                              ca_key.key, false, nullptr)};

    EvpKey rogue_ca_key{make_key()};
    X509Cert rogue_ca{make_cert("rogue CA", rogue_ca_key.key, nullptr, nullptr,
                                true, nullptr)};
    EvpKey rogue_client_key{make_key()};
    X509Cert rogue_client{make_cert("rogue-client", rogue_client_key.key,
                                    rogue_ca.cert, rogue_ca_key.key, false,
                                    nullptr)};

    out.ca_cert = out.dir / "ca.pem";
    out.server_cert = out.dir / "server.pem";
    out.server_key = out.dir / "server.key";
    out.client_cert = out.dir / "client.pem";
    out.client_key = out.dir / "client.key";
    out.rogue_ca_cert = out.dir / "rogue-ca.pem";
    out.rogue_client_cert = out.dir / "rogue-client.pem";
    out.rogue_client_key = out.dir / "rogue-client.key";
    write_cert(out.ca_cert, ca.cert);
    write_cert(out.server_cert, server.cert);
    write_key(out.server_key, server_key.key);
    write_cert(out.client_cert, client.cert);
    write_key(out.client_key, client_key.key);
    write_cert(out.rogue_ca_cert, rogue_ca.cert);
    write_cert(out.rogue_client_cert, rogue_client.cert);
    write_key(out.rogue_client_key, rogue_client_key.key);
    return out;
  }();
  return certs;
}

// ------------------------------------------------------------ loopback

struct LoopbackHub::SessionSlot {
  std::mutex mutex;
  mqkit::EventHandler handler;
  bool alive = true;
  std::atomic<bool> terminal_emitted{false};
  std::map<std::string, mqkit::SubscriptionSpec> subs;
  std::uint64_t sub_seq = 0;
  std::uint64_t ticket_seq = 0;

  void emit(const mqkit::ConnectorEvent& event) {
    if (handler) handler(event);
  }

  void emit_disconnected(mqkit::DisconnectReason reason) {
    bool expected = false;
    if (!terminal_emitted.compare_exchange_strong(expected, true)) return;
    mqkit::ConnectorEvent event;
    event.type = mqkit::ConnectorEvent::Type::Disconnected;
    event.reason = reason;
    emit(event);
  }
};

namespace {

class LoopbackSession final : public mqkit::Session {
 public:
  LoopbackSession(LoopbackHub& hub, std::shared_ptr<LoopbackHub::SessionSlot> slot)
      : hub_(hub), slot_(std::move(slot)) {}

  ~LoopbackSession() override { disconnect(); }

  bool connected() const override {
    std::lock_guard<std::mutex> lock(slot_->mutex);
    return slot_->alive;
  }

  void put(const std::string& wire_path, const mqkit::MessageEnvelope& env,
           bool) override {
    {
      std::lock_guard<std::mutex> lock(slot_->mutex);
      if (!slot_->alive) {
        throw mqkit::Error(mqkit::ErrorKind::NotConnected, "loopback down");
      }
    }
    {
      std::lock_guard<std::mutex> lock(hub_.mutex);
      hub_.sent.push_back({wire_path, env});
    }
    hub_.deliver(wire_path, env);
  }

  std::uint64_t put_async(const std::string& wire_path,
                          const mqkit::MessageEnvelope& env) override {
    put(wire_path, env, false);
    std::lock_guard<std::mutex> lock(slot_->mutex);
    return ++slot_->ticket_seq;
  }

  bool await_receipt(std::uint64_t, int) override {
    std::lock_guard<std::mutex> lock(slot_->mutex);
    return slot_->alive;
  }

  std::string subscribe(const mqkit::SubscriptionSpec& spec) override {
    std::lock_guard<std::mutex> lock(slot_->mutex);
    if (!slot_->alive) {
      throw mqkit::Error(mqkit::ErrorKind::NotConnected, "loopback down");
    }
    std::string id = "lb-" + std::to_string(++slot_->sub_seq);
    slot_->subs.emplace(id, spec);
    return id;
  }

  void unsubscribe(const std::string& id) override {
    std::lock_guard<std::mutex> lock(slot_->mutex);
    if (slot_->subs.erase(id) == 0) {
      throw mqkit::Error(mqkit::ErrorKind::UnknownToken,
                         "unknown loopback subscription " + id);
    }
  }

  void disconnect() override {
    {
      std::lock_guard<std::mutex> lock(slot_->mutex);
      if (slot_->alive) {
        slot_->alive = false;
        std::lock_guard<std::mutex> hub_lock(hub_.mutex);
        if (hub_.live_sessions > 0) --hub_.live_sessions;
      }
    }
    slot_->emit_disconnected(mqkit::DisconnectReason::Requested);
  }

 private:
  LoopbackHub& hub_;
  std::shared_ptr<LoopbackHub::SessionSlot> slot_;
};

std::mutex g_hubs_mutex;
std::map<std::string, std::unique_ptr<LoopbackHub>> g_hubs;

}  // namespace

void LoopbackHub::kill_all() {
  std::vector<std::shared_ptr<SessionSlot>> doomed;
  {
    std::lock_guard<std::mutex> lock(mutex);
    doomed.swap(slots_);
  }
  for (auto& slot : doomed) {
    bool was_alive = false;
    {
      std::lock_guard<std::mutex> lock(slot->mutex);
      was_alive = slot->alive;
      slot->alive = false;
    }
    if (was_alive) {
      {
        std::lock_guard<std::mutex> lock(mutex);
        if (live_sessions > 0) --live_sessions;
      }
      slot->emit_disconnected(mqkit::DisconnectReason::PeerClose);
    }
  }
}

void LoopbackHub::deliver(const std::string& path,
                          const mqkit::MessageEnvelope& env) {
  std::vector<std::shared_ptr<SessionSlot>> slots;
  {
    std::lock_guard<std::mutex> lock(mutex);
    slots = slots_;
  }
  for (auto& slot : slots) {
    std::vector<std::pair<std::string, mqkit::SubscriptionSpec>> matches;
    {
      std::lock_guard<std::mutex> lock(slot->mutex);
      if (!slot->alive) continue;
      for (const auto& [id, spec] : slot->subs) {
        if (spec.wire_path == path) matches.emplace_back(id, spec);
      }
    }
    for (auto& [id, spec] : matches) {
      mqkit::ConnectorEvent event;
      event.type = mqkit::ConnectorEvent::Type::MessageArrived;
      event.subscription_id = id;
      event.envelope = env;
      slot->emit(event);
      if (spec.handler) {
        try {
          spec.handler(env);
        } catch (...) {
          // loopback has no redelivery; swallow like an acked NACK
        }
      }
    }
  }
}

std::vector<std::string> LoopbackHub::subscribed_paths() {
  std::vector<std::string> out;
  std::lock_guard<std::mutex> lock(mutex);
  for (const auto& slot : slots_) {
    std::lock_guard<std::mutex> slot_lock(slot->mutex);
    if (!slot->alive) continue;
    for (const auto& [id, spec] : slot->subs) out.push_back(spec.wire_path);
  }
  return out;
}

LoopbackHub& loopback_hub(const std::string& host) {
  std::lock_guard<std::mutex> lock(g_hubs_mutex);
  auto& slot = g_hubs[host];
  if (!slot) slot = std::make_unique<LoopbackHub>();
  return *slot;
}

void reset_loopback_hubs() {
  std::lock_guard<std::mutex> lock(g_hubs_mutex);
  g_hubs.clear();
}

void register_loopback_protocol() {
  static bool once = [] {
    mqkit::ConnectorRegistry::global().register_protocol(
        "loopback",
        [](const mqkit::ConnectorParams& params, mqkit::EventHandler handler)
            -> std::unique_ptr<mqkit::Session> {
          auto& hub = loopback_hub(params.host);
          {
            std::lock_guard<std::mutex> lock(hub.mutex);
            if (hub.refuse_connects || hub.fail_next_connects > 0) {
              if (hub.fail_next_connects > 0) --hub.fail_next_connects;
              throw mqkit::Error(mqkit::ErrorKind::ConnectionRefused,
                                 "loopback connect refused");
            }
          }
          auto slot = std::make_shared<LoopbackHub::SessionSlot>();
          slot->handler = handler;
          auto session = std::make_unique<LoopbackSession>(hub, slot);
          {
            std::lock_guard<std::mutex> lock(hub.mutex);
            hub.slots_.push_back(slot);
            ++hub.connects;
            ++hub.live_sessions;
          }
          mqkit::ConnectorEvent event;
          event.type = mqkit::ConnectorEvent::Type::Connected;
          slot->emit(event);
          return session;
        });
    return true;
  }();
  (void)once;
}

}  // namespace mqtest
