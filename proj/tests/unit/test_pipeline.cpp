#include <doctest.h>

#include <cctype>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>
#include <mqkit/error.hpp>
#include <mqkit/gateway.hpp>
#include <mqkit/pilot_log.hpp>
#include <mqkit/shipper.hpp>
#include <mqkit/sink.hpp>

#include "support.hpp"

using namespace mqkit;
using nlohmann::json;

namespace {

ConfigTree loopback_tree(const std::string& tag) {
  mqtest::register_loopback_protocol();
  json sections = {{tag,
                    {{"MQType", "loopback"},
                     {"Host", tag},
                     {"Queues", {{"Q1", json::object()}, {"Q2", json::object()}}},
                     {"Reconnect",
                      {{"InitialBackoffMs", 20},
                       {"MaxBackoffMs", 60},
                       {"Multiplier", 2.0},
                       {"Jitter", false}}}}}};
  return load_config(json{{"Resources", {{"MQServices", sections}}}}.dump());
}

std::vector<mqtest::LoopbackHub::Sent> hub_sent(const std::string& host) {
  auto& hub = mqtest::loopback_hub(host);
  std::lock_guard<std::mutex> lock(hub.mutex);
  return hub.sent;
}

std::optional<ErrorKind> kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected mqkit::Error");
  return std::nullopt;
}

MessageEnvelope envelope_for(const json& payload) {
  return make_envelope(payload, "test-origin", "/queue/Q1");
}

}  // namespace

// ------------------------------------------------------------- pilot_log

TEST_CASE("pilot_log: severity names round-trip and reject unknowns") {
  const Severity all[] = {Severity::Debug, Severity::Info, Severity::Warning,
                          Severity::Error};
  for (Severity s : all) {
    auto back = parse_severity(to_string(s));
    REQUIRE(back.has_value());
    CHECK(*back == s);
  }
  CHECK(to_string(Severity::Warning) == "WARNING");
  CHECK_FALSE(parse_severity("info").has_value());  // case-sensitive
  CHECK_FALSE(parse_severity("WARN").has_value());
  CHECK_FALSE(parse_severity("").has_value());
}

TEST_CASE("pilot_log: uuid validation and generation") {
  CHECK(is_uuid("123e4567-e89b-12d3-a456-426614174000"));
  CHECK(is_uuid("123E4567-E89B-12D3-A456-426614174000"));
  CHECK_FALSE(is_uuid(""));
  CHECK_FALSE(is_uuid("123e4567-e89b-12d3-a456-42661417400"));    // short
  CHECK_FALSE(is_uuid("123e4567-e89b-12d3-a456-4266141740000"));  // long
  CHECK_FALSE(is_uuid("123e4567xe89b-12d3-a456-426614174000"));   // dash
  CHECK_FALSE(is_uuid("123e4567-e89b-12d3-a456-42661417400g"));   // hex

  std::string seen_first;
  for (int i = 0; i < 100; ++i) {
    std::string u = random_uuid();
    REQUIRE(is_uuid(u));
    CHECK(u[14] == '4');  // version nibble
    CHECK((u[19] == '8' || u[19] == '9' || u[19] == 'a' || u[19] == 'b'));
    if (i == 0) {
      seen_first = u;
    } else {
      CHECK(u != seen_first);
    }
  }
}

TEST_CASE("pilot_log: iso8601 formatting") {
  CHECK(iso8601_utc_ms(0) == "1970-01-01T00:00:00.000Z");
  CHECK(iso8601_utc_ms(1234) == "1970-01-01T00:00:01.234Z");
  CHECK(iso8601_utc_ms(1700000000000) == "2023-11-14T22:13:20.000Z");
}

TEST_CASE("pilot_log: record json round-trip") {
  PilotLogRecord rec;
  rec.pilot_uuid = "123e4567-e89b-12d3-a456-426614174000";
  rec.timestamp = "2026-08-15T10:00:00.000Z";
  rec.phase = "install";
  rec.severity = Severity::Error;
  rec.message = "disk failed";
  rec.source = "ce.example.org";

  json doc = rec.to_json();
  CHECK(doc["severity"] == "ERROR");
  PilotLogRecord back = PilotLogRecord::from_json(doc);
  CHECK(back.pilot_uuid == rec.pilot_uuid);
  CHECK(back.timestamp == rec.timestamp);
  CHECK(back.phase == rec.phase);
  CHECK(back.severity == rec.severity);
  CHECK(back.message == rec.message);
  CHECK(back.source == rec.source);

  // Minimal record: phase and source are omitted from the wire form and
  // severity defaults to INFO on the way back in.
  PilotLogRecord minimal;
  minimal.pilot_uuid = rec.pilot_uuid;
  minimal.timestamp = rec.timestamp;
  minimal.message = "hello";
  json mdoc = minimal.to_json();
  CHECK_FALSE(mdoc.contains("phase"));
  CHECK_FALSE(mdoc.contains("source"));
  mdoc.erase("severity");
  PilotLogRecord mback = PilotLogRecord::from_json(mdoc);
  CHECK(mback.severity == Severity::Info);
  CHECK(mback.phase.empty());
  CHECK(mback.source.empty());

  // Unknown extra fields ride along without complaint.
  json extra = rec.to_json();
  extra["received-at-ms"] = 12345;
  CHECK(PilotLogRecord::from_json(extra).message == "disk failed");
}

TEST_CASE("pilot_log: from_json names the offending field") {
  const std::string uuid = "123e4567-e89b-12d3-a456-426614174000";
  json good{{"pilot_uuid", uuid},
            {"timestamp", "2026-08-15T10:00:00.000Z"},
            {"message", "ok"}};
  CHECK(PilotLogRecord::from_json(good).message == "ok");

  auto field_of = [](const json& doc) -> std::string {
    try {
      PilotLogRecord::from_json(doc);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::SchemaError);
      return e.message();
    }
    FAIL("expected SchemaError");
    return {};
  };

  json bad = good;
  bad.erase("pilot_uuid");
  CHECK(field_of(bad) == "pilot_uuid");
  bad = good;
  bad["pilot_uuid"] = "not-a-uuid";
  CHECK(field_of(bad) == "pilot_uuid");
  bad = good;
  bad.erase("timestamp");
  CHECK(field_of(bad) == "timestamp");
  bad = good;
  bad.erase("message");
  CHECK(field_of(bad) == "message");
  bad = good;
  bad["message"] = "";
  CHECK(field_of(bad) == "message");
  bad = good;
  bad["severity"] = "LOUD";
  CHECK(field_of(bad) == "severity");
  bad = good;
  bad["severity"] = 3;
  CHECK(field_of(bad) == "severity");
  bad = good;
  bad["source"] = 42;
  CHECK(field_of(bad) == "source");
  CHECK(kind_of([&] { PilotLogRecord::from_json(json::array()); }) ==
        ErrorKind::SchemaError);
}

TEST_CASE("pilot_log: line grammar falls back to plain messages") {
  ParsedLogLine p = parse_log_line("install|ERROR|disk failed");
  CHECK(p.phase == "install");
  CHECK(p.severity == Severity::Error);
  CHECK(p.message == "disk failed");

  p = parse_log_line("run|INFO|a|b|c");
  CHECK(p.phase == "run");
  CHECK(p.message == "a|b|c");  // only the first two pipes delimit

  p = parse_log_line("no pipes at all");
  CHECK(p.phase.empty());
  CHECK(p.severity == Severity::Info);
  CHECK(p.message == "no pipes at all");

  p = parse_log_line("weird|NOTASEVERITY|rest");
  CHECK(p.phase.empty());
  CHECK(p.message == "weird|NOTASEVERITY|rest");

  p = parse_log_line("|DEBUG|empty phase");
  CHECK(p.phase.empty());
  CHECK(p.severity == Severity::Debug);
  CHECK(p.message == "empty phase");
}

// --------------------------------------------------------- token hashing

TEST_CASE("gateway: sha256 and salted token hashing") {
  CHECK(sha256_hex("abc") ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");

  // hash = sha256(salt-bytes || token), salt given as hex
  std::string salt_bytes("\x00\xff", 2);
  CHECK(hash_token("tok", "00ff") == sha256_hex(salt_bytes + "tok"));
  CHECK(hash_token("", "") == sha256_hex(""));

  GatewayTokenEntry a = make_token_entry("secret", "alice");
  GatewayTokenEntry b = make_token_entry("secret", "alice");
  CHECK(a.salt_hex.size() == 32);  // 16 random bytes
  CHECK(a.hash_hex.size() == 64);
  CHECK(a.principal == "alice");
  CHECK(a.salt_hex != b.salt_hex);  // fresh salt per entry
  CHECK(a.hash_hex != b.hash_hex);
  CHECK(hash_token("secret", a.salt_hex) == a.hash_hex);
  CHECK(hash_token("wrong", a.salt_hex) != a.hash_hex);
  // The plaintext token never appears in the stored entry.
  CHECK(a.hash_hex.find("secret") == std::string::npos);
}

TEST_CASE("gateway: config section parsing") {
  GatewayTokenEntry entry = make_token_entry("tok-1", "pilot");
  json section{{"Host", "0.0.0.0"},
               {"Port", 9090},
               {"Target", "mb::Queue::Q1"},
               {"SpoolDir", "/tmp/spool"},
               {"Tokens", json::array({{{"Salt", entry.salt_hex},
                                        {"Hash", entry.hash_hex},
                                        {"Principal", "pilot"}}})}};
  GatewayConfig config = GatewayConfig::from_json(section);
  CHECK(config.host == "0.0.0.0");
  CHECK(config.port == 9090);
  CHECK(config.target == "mb::Queue::Q1");
  CHECK(config.spool_dir == "/tmp/spool");
  REQUIRE(config.tokens.size() == 1);
  CHECK(config.tokens[0].principal == "pilot");

  // Uppercase hex normalizes; the lookup hash must still match.
  json upper = section;
  std::string uh = entry.hash_hex;
  for (char& c : uh) c = static_cast<char>(std::toupper(c));
  upper["Tokens"][0]["Hash"] = uh;
  CHECK(GatewayConfig::from_json(upper).tokens[0].hash_hex == entry.hash_hex);

  auto schema_err = [&](json bad) {
    CHECK(kind_of([&] { GatewayConfig::from_json(bad); }) ==
          ErrorKind::SchemaError);
  };
  json bad = section;
  bad.erase("Target");
  schema_err(bad);
  bad = section;
  bad.erase("SpoolDir");
  schema_err(bad);
  bad = section;
  bad["Bogus"] = 1;
  schema_err(bad);
  bad = section;
  bad["Port"] = "nope";
  schema_err(bad);
  bad = section;
  bad["Tokens"][0].erase("Hash");
  schema_err(bad);
  bad = section;
  bad["Tokens"][0]["Salt"] = "abc";  // odd-length hex
  schema_err(bad);
}

// ------------------------------------------------------------ gateway http

TEST_CASE("gateway: authenticates, validates and forwards over http") {
  auto tree = loopback_tree("gw-http");
  MqClient client(tree);
  mqtest::TempDir spool_dir("gw-http-spool");

  GatewayConfig config;
  config.port = 0;
  config.target = "Queue::Q1";
  config.spool_dir = spool_dir.path().string();
  config.tokens.push_back(make_token_entry("good-token", "pilot-42"));

  Gateway gateway(client, std::move(config));
  gateway.start();
  REQUIRE(gateway.port() > 0);
  httplib::Client http("127.0.0.1", gateway.port());

  const json good{{"pilot_uuid", "123e4567-e89b-12d3-a456-426614174000"},
                  {"timestamp", "2026-08-15T10:00:00.000Z"},
                  {"message", "hello"}};
  const httplib::Headers auth{{"Authorization", "Bearer good-token"}};

  SUBCASE("health endpoint") {
    auto res = http.Get("/v1/health");
    REQUIRE(res);
    CHECK(res->status == 200);
    json body = json::parse(res->body);
    CHECK(body["broker_connected"] == true);
    CHECK(body["spool_depth"] == 0);
  }

  SUBCASE("401 without a valid bearer token") {
    auto no_auth = http.Post("/v1/logs", good.dump(), "application/json");
    REQUIRE(no_auth);
    CHECK(no_auth->status == 401);

    httplib::Headers wrong{{"Authorization", "Bearer bad-token"}};
    auto bad = http.Post("/v1/logs", wrong, good.dump(), "application/json");
    REQUIRE(bad);
    CHECK(bad->status == 401);
    CHECK(json::parse(bad->body)["error"] == "unauthorized");

    httplib::Headers scheme{{"Authorization", "Token good-token"}};
    auto tok = http.Post("/v1/logs", scheme, good.dump(), "application/json");
    REQUIRE(tok);
    CHECK(tok->status == 401);

    CHECK(gateway.stats().rejected_auth == 3);
    CHECK(hub_sent("gw-http").empty());  // nothing leaked past auth
  }

  SUBCASE("400 on malformed bodies, atomically for batches") {
    auto bad_json = http.Post("/v1/logs", auth, "{oops", "application/json");
    REQUIRE(bad_json);
    CHECK(bad_json->status == 400);

    json missing = good;
    missing.erase("message");
    auto schema = http.Post("/v1/logs", auth, missing.dump(), "application/json");
    REQUIRE(schema);
    CHECK(schema->status == 400);
    json body = json::parse(schema->body);
    CHECK(body["error"] == "schema violation");
    CHECK(body["field"] == "message");

    // One bad record poisons the whole batch; the good one must not leak.
    json mixed = json::array({good, missing});
    auto partial = http.Post("/v1/logs", auth, mixed.dump(), "application/json");
    REQUIRE(partial);
    CHECK(partial->status == 400);

    auto scalar = http.Post("/v1/logs", auth, "42", "application/json");
    REQUIRE(scalar);
    CHECK(scalar->status == 400);

    CHECK(gateway.stats().rejected_schema == 4);
    CHECK(gateway.stats().accepted == 0);
    CHECK(hub_sent("gw-http").empty());
  }

  SUBCASE("413 above the batch cap") {
    json huge = json::array();
    for (std::size_t i = 0; i < Gateway::kMaxBatch + 1; ++i) {
      huge.push_back(json::object());
    }
    auto res = http.Post("/v1/logs", auth, huge.dump(), "application/json");
    REQUIRE(res);
    CHECK(res->status == 413);
    CHECK(json::parse(res->body)["limit"] == Gateway::kMaxBatch);
    CHECK(hub_sent("gw-http").empty());
  }

  SUBCASE("202 stamps principal and received-at-ms") {
    auto single = http.Post("/v1/logs", auth, good.dump(), "application/json");
    REQUIRE(single);
    CHECK(single->status == 202);
    json body = json::parse(single->body);
    CHECK(body["accepted"] == 1);
    CHECK(body["spooled"] == 0);

    json batch = json::array({good, good, good});
    auto multi = http.Post("/v1/logs", auth, batch.dump(), "application/json");
    REQUIRE(multi);
    CHECK(multi->status == 202);
    CHECK(json::parse(multi->body)["accepted"] == 3);

    CHECK(mqtest::wait_until([&] { return hub_sent("gw-http").size() == 4; },
                             5000));
    auto sent = hub_sent("gw-http");
    const std::int64_t now = system_clock_ms();
    for (const auto& record : sent) {
      CHECK(record.path == "/queue/Q1");
      CHECK(record.env.payload["pilot_uuid"] == good["pilot_uuid"]);
      CHECK(record.env.payload["principal"] == "pilot-42");
      std::int64_t stamp = record.env.payload["received-at-ms"].get<std::int64_t>();
      CHECK(stamp > now - 60000);
      CHECK(stamp <= now + 1000);
    }
    CHECK(gateway.stats().accepted == 4);
    CHECK(gateway.stats().spooled == 0);
  }

  gateway.stop();
  gateway.stop();  // idempotent
}

TEST_CASE("gateway: spools while the broker is down and drains after") {
  auto tree = loopback_tree("gw-spool");
  MqClient client(tree);
  mqtest::TempDir spool_dir("gw-spool-dir");

  GatewayConfig config;
  config.port = 0;
  config.target = "Queue::Q1";
  config.spool_dir = spool_dir.path().string();
  config.tokens.push_back(make_token_entry("tok", "p"));
  Gateway gateway(client, std::move(config));
  gateway.start();

  httplib::Client http("127.0.0.1", gateway.port());
  const httplib::Headers auth{{"Authorization", "Bearer tok"}};
  const json rec{{"pilot_uuid", "123e4567-e89b-12d3-a456-426614174000"},
                 {"timestamp", "2026-08-15T10:00:00.000Z"},
                 {"message", "while down"}};

  {
    auto& hub = mqtest::loopback_hub("gw-spool");
    {
      std::lock_guard<std::mutex> lock(hub.mutex);
      hub.refuse_connects = true;
    }
    hub.kill_all();
  }
  CHECK(mqtest::wait_until(
      [&] {
        auto res = http.Get("/v1/health");
        return res && json::parse(res->body)["broker_connected"] == false;
      },
      5000));

  auto res = http.Post("/v1/logs", auth, rec.dump(), "application/json");
  REQUIRE(res);
  CHECK(res->status == 202);  // accepted even though the broker is gone
  json body = json::parse(res->body);
  CHECK(body["accepted"] == 1);
  CHECK(body["spooled"] == 1);
  CHECK(gateway.stats().spooled == 1);

  auto health = http.Get("/v1/health");
  REQUIRE(health);
  CHECK(json::parse(health->body)["spool_depth"] == 1);

  {
    auto& hub = mqtest::loopback_hub("gw-spool");
    std::lock_guard<std::mutex> lock(hub.mutex);
    hub.refuse_connects = false;
  }
  CHECK(mqtest::wait_until([&] { return hub_sent("gw-spool").size() == 1; },
                           5000));
  CHECK(hub_sent("gw-spool")[0].env.payload["message"] == "while down");
  CHECK(mqtest::wait_until(
      [&] {
        auto h = http.Get("/v1/health");
        return h && json::parse(h->body)["spool_depth"] == 0;
      },
      5000));
  gateway.stop();
}

// ----------------------------------------------------------------- shipper

namespace {

/// Minimal stand-in for the gateway that records every POST body.
struct CaptureServer {
  httplib::Server server;
  std::thread thread;
  std::mutex mutex;
  std::vector<json> bodies;
  int fail_first = 0;       // respond 500 to this many requests first
  int status_override = 0;  // nonzero: always respond with this status
  int port = 0;

  void start() {
    server.Post("/v1/logs", [this](const httplib::Request& req,
                                   httplib::Response& res) {
      json body = json::parse(req.body);
      int status = 202;
      {
        std::lock_guard<std::mutex> lock(mutex);
        bodies.push_back(body);
        if (status_override != 0) {
          status = status_override;
        } else if (fail_first > 0) {
          --fail_first;
          status = 500;
        }
      }
      res.status = status;
      res.set_content(
          status == 202
              ? json{{"accepted", body.size()}, {"spooled", 0}}.dump()
              : json{{"error", "nope"}}.dump(),
          "application/json");
    });
    port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }

  ~CaptureServer() {
    server.stop();
    if (thread.joinable()) thread.join();
  }

  std::size_t request_count() {
    std::lock_guard<std::mutex> lock(mutex);
    return bodies.size();
  }
};

ShipperOptions fixed_shipper(std::size_t batch_max) {
  ShipperOptions options;
  options.pilot_uuid = "123e4567-e89b-12d3-a456-426614174000";
  options.source = "ce-1";
  options.batch_max = batch_max;
  options.batch_linger_ms = 600000;  // batching driven purely by size here
  options.clock = [] { return std::int64_t{1700000000000}; };
  return options;
}

}  // namespace

TEST_CASE("shipper: batches by size and fills record fields") {
  CaptureServer server;
  server.start();

  std::string text;
  for (int i = 0; i < 10; ++i) {
    text += "install|ERROR|boom " + std::to_string(i) + "\n";
  }
  std::istringstream in(text);
  std::size_t shipped = ship_stream_http(
      in, "http://127.0.0.1:" + std::to_string(server.port), "tok",
      fixed_shipper(4));
  CHECK(shipped == 10);

  std::lock_guard<std::mutex> lock(server.mutex);
  REQUIRE(server.bodies.size() == 3);
  CHECK(server.bodies[0].size() == 4);
  CHECK(server.bodies[1].size() == 4);
  CHECK(server.bodies[2].size() == 2);
  const json& first = server.bodies[0][0];
  CHECK(first["pilot_uuid"] == "123e4567-e89b-12d3-a456-426614174000");
  CHECK(first["source"] == "ce-1");
  CHECK(first["timestamp"] == "2023-11-14T22:13:20.000Z");
  CHECK(first["phase"] == "install");
  CHECK(first["severity"] == "ERROR");
  CHECK(first["message"] == "boom 0");
  CHECK(server.bodies[2][1]["message"] == "boom 9");
}

TEST_CASE("shipper: skips blank lines and strips carriage returns") {
  CaptureServer server;
  server.start();

  std::istringstream in("first\r\n\n   \t\nsecond\n\r\nthird");
  std::size_t shipped = ship_stream_http(
      in, "http://127.0.0.1:" + std::to_string(server.port), "tok",
      fixed_shipper(50));
  // "   \t" is whitespace but not blank; it ships as a message.
  CHECK(shipped == 4);

  std::lock_guard<std::mutex> lock(server.mutex);
  REQUIRE(server.bodies.size() == 1);
  REQUIRE(server.bodies[0].size() == 4);
  CHECK(server.bodies[0][0]["message"] == "first");  // no trailing \r
  CHECK(server.bodies[0][1]["message"] == "   \t");
  CHECK(server.bodies[0][2]["message"] == "second");
  CHECK(server.bodies[0][3]["message"] == "third");
}

TEST_CASE("shipper: retries 5xx within budget then succeeds") {
  CaptureServer server;
  server.fail_first = 2;
  server.start();

  std::istringstream in("a\nb\nc\n");
  auto options = fixed_shipper(50);
  options.retry_budget = 3;
  std::size_t shipped = ship_stream_http(
      in, "http://127.0.0.1:" + std::to_string(server.port), "tok", options);
  CHECK(shipped == 3);
  CHECK(server.request_count() == 3);  // 500, 500, 202: same batch each time
  std::lock_guard<std::mutex> lock(server.mutex);
  CHECK(server.bodies[0] == server.bodies[2]);
}

TEST_CASE("shipper: gives up once the retry budget is spent") {
  CaptureServer server;
  server.status_override = 500;
  server.start();

  std::istringstream in("a\n");
  auto options = fixed_shipper(50);
  options.retry_budget = 1;
  CHECK(kind_of([&] {
          ship_stream_http(in, "http://127.0.0.1:" + std::to_string(server.port),
                           "tok", options);
        }) == ErrorKind::SendFailed);
  CHECK(server.request_count() == 2);  // initial try + one retry
}

TEST_CASE("shipper: does not retry a 4xx rejection") {
  CaptureServer server;
  server.status_override = 400;
  server.start();

  std::istringstream in("a\n");
  auto options = fixed_shipper(50);
  options.retry_budget = 3;
  try {
    ship_stream_http(in, "http://127.0.0.1:" + std::to_string(server.port),
                     "tok", options);
    FAIL("expected SendFailed");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::SendFailed);
    CHECK(std::string(e.what()).find("rejected") != std::string::npos);
  }
  CHECK(server.request_count() == 1);
}

TEST_CASE("shipper: mq path sends records through a producer") {
  auto tree = loopback_tree("ship-mq");
  MqClient client(tree);
  auto producer = client.create_producer("Queue::Q1");

  std::istringstream in("run|WARNING|late\n\nplain line\n");
  std::size_t shipped = ship_stream_mq(in, *producer, fixed_shipper(2));
  CHECK(shipped == 2);

  auto sent = hub_sent("ship-mq");
  REQUIRE(sent.size() == 2);
  CHECK(sent[0].env.payload["phase"] == "run");
  CHECK(sent[0].env.payload["severity"] == "WARNING");
  CHECK(sent[0].env.payload["message"] == "late");
  CHECK(sent[1].env.payload["message"] == "plain line");
  CHECK_FALSE(sent[1].env.payload.contains("phase"));
}

TEST_CASE("shipper: unreadable files throw SourceUnreadable") {
  CHECK(kind_of([&] {
          ship_file_http("/nonexistent/pilot.log", "http://127.0.0.1:1", "t");
        }) == ErrorKind::SourceUnreadable);

  auto tree = loopback_tree("ship-nofile");
  MqClient client(tree);
  auto producer = client.create_producer("Queue::Q1");
  CHECK(kind_of([&] { ship_file_mq("/nonexistent/pilot.log", *producer); }) ==
        ErrorKind::SourceUnreadable);
}

// -------------------------------------------------------------------- sink

TEST_CASE("sink: fans records out to per-pilot files") {
  auto tree = loopback_tree("sink-fan");
  MqClient client(tree);
  mqtest::TempDir out("sink-out");

  SinkOptions options;
  options.flush_every = 1;  // visible on disk immediately
  LogSink sink(client, "Queue::Q1", out.path(), options);
  sink.start();
  CHECK(mqtest::wait_until(
      [&] { return !mqtest::loopback_hub("sink-fan").subscribed_paths().empty(); },
      2000));

  const std::string pilot_a = "aaaaaaaa-1111-4111-8111-111111111111";
  const std::string pilot_b = "bbbbbbbb-2222-4222-8222-222222222222";
  auto record = [](const std::string& uuid, int n) {
    return json{{"pilot_uuid", uuid},
                {"timestamp", "2026-08-15T10:00:00.000Z"},
                {"message", "line " + std::to_string(n)}};
  };

  auto& hub = mqtest::loopback_hub("sink-fan");
  hub.deliver("/queue/Q1", envelope_for(record(pilot_a, 0)));
  hub.deliver("/queue/Q1", envelope_for(record(pilot_b, 0)));
  hub.deliver("/queue/Q1", envelope_for(record(pilot_a, 1)));
  hub.deliver("/queue/Q1", envelope_for(record(pilot_a, 2)));
  hub.deliver("/queue/Q1", envelope_for(record(pilot_b, 1)));

  // Malformed variants: non-object payload, missing uuid, invalid uuid.
  hub.deliver("/queue/Q1", envelope_for(json::array({1, 2, 3})));
  hub.deliver("/queue/Q1", envelope_for(json{{"message", "no uuid"}}));
  hub.deliver("/queue/Q1",
              envelope_for(json{{"pilot_uuid", "GARBAGE"}, {"message", "x"}}));

  CHECK(mqtest::wait_until(
      [&] {
        auto s = sink.stats();
        return s.written == 5 && s.malformed == 3;
      },
      5000));

  auto read_lines = [&](const std::string& name) {
    std::ifstream in(out.path() / name);
    REQUIRE(in);
    std::vector<json> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(json::parse(line));
    return lines;
  };

  auto lines_a = read_lines(pilot_a + ".log");
  REQUIRE(lines_a.size() == 3);
  for (int n = 0; n < 3; ++n) {
    CHECK(lines_a[n]["message"] == "line " + std::to_string(n));
    CHECK(lines_a[n]["pilot_uuid"] == pilot_a);
  }
  CHECK(read_lines(pilot_b + ".log").size() == 2);
  CHECK(read_lines("_malformed.log").size() == 3);
  CHECK(sink.stats().duplicates == 0);

  sink.stop();
  sink.stop();  // idempotent
}

TEST_CASE("sink: suppresses duplicates over a sliding window") {
  auto tree = loopback_tree("sink-dup");
  MqClient client(tree);
  mqtest::TempDir out("sink-dup-out");

  SinkOptions options;
  options.dedup_window = 5;
  options.flush_every = 1;
  LogSink sink(client, "Queue::Q1", out.path(), options);
  sink.start();
  CHECK(mqtest::wait_until(
      [&] { return !mqtest::loopback_hub("sink-dup").subscribed_paths().empty(); },
      2000));

  const std::string pilot = "cccccccc-3333-4333-8333-333333333333";
  std::vector<MessageEnvelope> envelopes;
  for (int n = 0; n < 7; ++n) {
    envelopes.push_back(envelope_for(json{{"pilot_uuid", pilot},
                                          {"timestamp", "t"},
                                          {"message", std::to_string(n)}}));
  }

  auto& hub = mqtest::loopback_hub("sink-dup");
  auto wait_written = [&](std::uint64_t n) {
    return mqtest::wait_until([&] { return sink.stats().written == n; }, 5000);
  };

  for (int n = 0; n < 5; ++n) hub.deliver("/queue/Q1", envelopes[n]);
  CHECK(wait_written(5));

  // Same message-id again: still inside the window of 5, so suppressed.
  hub.deliver("/queue/Q1", envelopes[0]);
  CHECK(mqtest::wait_until([&] { return sink.stats().duplicates == 1; }, 5000));
  CHECK(sink.stats().written == 5);

  // Two fresh ids push the first one out of the window...
  hub.deliver("/queue/Q1", envelopes[5]);
  hub.deliver("/queue/Q1", envelopes[6]);
  CHECK(wait_written(7));

  // ...so its replay now lands as a new line instead of a duplicate.
  hub.deliver("/queue/Q1", envelopes[0]);
  CHECK(wait_written(8));
  CHECK(sink.stats().duplicates == 1);

  sink.stop();
  std::ifstream in(out.path() / (pilot + ".log"));
  REQUIRE(in);
  std::size_t lines = 0;
  std::string line;
  while (std::getline(in, line)) ++lines;
  CHECK(lines == 8);
}

// --------------------------------------------------- pipeline end to end

TEST_CASE("pipeline: shipper through gateway and broker into sink files") {
  mqtest::BrokerHarness harness;
  auto tree = mqtest::make_tree(harness.port());
  MqClient client(tree);

  mqtest::TempDir spool_dir("pipe-spool");
  mqtest::TempDir out_dir("pipe-out");

  GatewayConfig config;
  config.port = 0;
  config.target = "mb::Queue::Q1";
  config.spool_dir = spool_dir.path().string();
  config.tokens.push_back(make_token_entry("pipe-token", "site-A"));
  Gateway gateway(client, std::move(config));
  gateway.start();

  SinkOptions sink_options;
  sink_options.flush_every = 1;
  LogSink sink(client, "mb::Queue::Q1", out_dir.path(), sink_options);
  sink.start();

  const std::string url = "http://127.0.0.1:" + std::to_string(gateway.port());
  const std::string pilots[2] = {"dddddddd-4444-4444-8444-444444444444",
                                 "eeeeeeee-5555-4555-8555-555555555555"};
  for (const auto& pilot : pilots) {
    std::string text;
    for (int n = 0; n < 5; ++n) {
      text += "run|INFO|" + pilot.substr(0, 8) + " line " + std::to_string(n) + "\n";
    }
    std::istringstream in(text);
    ShipperOptions options;
    options.pilot_uuid = pilot;
    options.source = "ce-1";
    options.batch_max = 3;
    CHECK(ship_stream_http(in, url, "pipe-token", options) == 5);
  }

  CHECK(mqtest::wait_until([&] { return sink.stats().written == 10; }, 20000));
  CHECK(sink.stats().malformed == 0);
  sink.stop();
  gateway.stop();

  for (const auto& pilot : pilots) {
    std::ifstream in(out_dir.path() / (pilot + ".log"));
    REQUIRE(in);
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
      json doc = json::parse(line);
      CHECK(doc["pilot_uuid"] == pilot);
      CHECK(doc["principal"] == "site-A");
      CHECK(doc["source"] == "ce-1");
      CHECK(doc["message"] ==
            pilot.substr(0, 8) + " line " + std::to_string(n));
      CHECK(doc["received-at-ms"].is_number_integer());
      ++n;
    }
    CHECK(n == 5);  // five lines per pilot, in shipping order
  }
}
