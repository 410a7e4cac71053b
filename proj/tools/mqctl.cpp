// mqctl: command line front end for the mqkit toolkit.
//
//   mqctl produce    --config cfg.json --dest svc::Queue::Q --message '{"a":1}'
//   mqctl consume    --config cfg.json --dest svc::Queue::Q --count 10
//   mqctl broker     --config cfg.json
//   mqctl gateway    --config cfg.json
//   mqctl ship-logs  --config cfg.json --source pilot.log --dest svc::Queue::Q
//   mqctl sink       --config cfg.json --dest svc::Queue::Q --output out/
//
// The config path may come from MQCONFIG instead of --config. Exit codes:
// 0 success, 2 configuration or input error, 3 connection or delivery error.

#include <csignal>
#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "mqkit/broker.hpp"
#include "mqkit/config.hpp"
#include "mqkit/error.hpp"
#include "mqkit/gateway.hpp"
#include "mqkit/mq_api.hpp"
#include "mqkit/pilot_log.hpp"
#include "mqkit/shipper.hpp"
#include "mqkit/sink.hpp"

namespace {

volatile std::sig_atomic_t g_stop = 0;

void handle_signal(int) { g_stop = 1; }

void install_signal_handlers() {
  struct sigaction sa = {};
  sa.sa_handler = handle_signal;
  sigaction(SIGINT, &sa, nullptr);
  sigaction(SIGTERM, &sa, nullptr);
}

int exit_code_for(const mqkit::Error& e) {
  using mqkit::ErrorKind;
  switch (e.kind()) {
    case ErrorKind::MalformedPseudoUrl:
    case ErrorKind::InvalidKind:
    case ErrorKind::UnknownService:
    case ErrorKind::UndeclaredDestination:
    case ErrorKind::AmbiguousShorthand:
    case ErrorKind::ParseError:
    case ErrorKind::SchemaError:
    case ErrorKind::UnknownProtocol:
    case ErrorKind::MissingSecret:
    case ErrorKind::InvalidJson:
    case ErrorKind::SourceUnreadable:
      return 2;
    default:
      return 3;
  }
}

struct CommonArgs {
  std::string config_path;
  std::string dest;
  bool verbose = false;
};

mqkit::ConfigTree load_tree(const CommonArgs& args) {
  if (args.config_path.empty()) {
    throw mqkit::Error(mqkit::ErrorKind::SchemaError,
                       "no config file: pass --config or set MQCONFIG");
  }
  return mqkit::load_config_file(args.config_path);
}

int cmd_produce(const CommonArgs& args, const std::string& message,
                bool confirm) {
  std::string text = message;
  if (text.empty()) {
    std::string line;
    while (std::getline(std::cin, line)) {
      text += line;
      text += '\n';
    }
  }
  auto payload = nlohmann::json::parse(text, nullptr, false);
  if (payload.is_discarded()) {
    std::cerr << "mqctl: message is not valid JSON\n";
    return 2;
  }

  auto tree = load_tree(args);
  mqkit::MqClient client(tree);
  auto producer = client.create_producer(args.dest, {confirm, nullptr, ""});
  if (args.verbose) {
    std::cerr << "mqctl: sending to " << producer->wire_path() << "\n";
  }
  auto outcome = producer->put(payload);
  producer->close();
  if (outcome != mqkit::PutOutcome::Delivered) {
    std::cerr << "mqctl: delivery failed (" << mqkit::to_string(outcome) << ")\n";
    return 3;
  }
  return 0;
}

int cmd_consume(const CommonArgs& args, std::uint64_t count, bool no_retry) {
  auto tree = load_tree(args);
  mqkit::MqClient client(tree);
  mqkit::ConsumerOptions options;
  options.mode = mqkit::ConsumerMode::Buffered;
  auto consumer = client.create_consumer(args.dest, std::move(options));

  std::uint64_t received = 0;
  while (!g_stop && (count == 0 || received < count)) {
    auto env = consumer->get(200);
    if (!env) {
      if (no_retry && client.manager().active_connections().size() == 1 &&
          !client.manager().active_connections().front().connected) {
        std::cerr << "mqctl: connection lost\n";
        consumer->close();
        return 3;
      }
      continue;
    }
    std::cout << env->payload.dump() << "\n" << std::flush;
    ++received;
  }
  consumer->close();
  return 0;
}

int cmd_broker(const CommonArgs& args) {
  auto tree = load_tree(args);
  if (tree.broker_section.is_null()) {
    throw mqkit::Error(mqkit::ErrorKind::SchemaError,
                       "config has no Broker section");
  }
  auto options = mqkit::BrokerOptions::from_json(tree.broker_section);
  mqkit::Broker broker(options);
  broker.start();
  std::cout << "listening on " << broker.port();
  if (options.enable_tls) std::cout << " (tls " << broker.tls_port() << ")";
  std::cout << "\n" << std::flush;
  while (!g_stop) {
    struct timespec ts = {0, 100 * 1000 * 1000};
    nanosleep(&ts, nullptr);
  }
  broker.stop();
  return 0;
}

int cmd_gateway(const CommonArgs& args, const std::string& mint_principal) {
  if (!mint_principal.empty()) {
    // Mint a fresh bearer token: print the secret once, and the salted-hash
    // table entry to paste into the Gateway config section.
    unsigned char raw[24];
    for (auto& b : raw) b = static_cast<unsigned char>(rand());
    std::string token = mqkit::sha256_hex(
        std::string(reinterpret_cast<char*>(raw), sizeof(raw)) +
        mqkit::random_uuid());
    auto entry = mqkit::make_token_entry(token, mint_principal);
    nlohmann::json doc{{"Token", token},
                       {"Entry",
                        {{"Salt", entry.salt_hex},
                         {"Hash", entry.hash_hex},
                         {"Principal", entry.principal}}}};
    std::cout << doc.dump(2) << "\n";
    return 0;
  }

  auto tree = load_tree(args);
  if (tree.gateway_section.is_null()) {
    throw mqkit::Error(mqkit::ErrorKind::SchemaError,
                       "config has no Gateway section");
  }
  auto config = mqkit::GatewayConfig::from_json(tree.gateway_section);
  mqkit::MqClient client(tree);
  mqkit::Gateway gateway(client, config);
  gateway.start();
  std::cout << "gateway on " << config.host << ":" << gateway.port() << "\n"
            << std::flush;
  while (!g_stop) {
    struct timespec ts = {0, 100 * 1000 * 1000};
    nanosleep(&ts, nullptr);
  }
  gateway.stop();
  return 0;
}

int cmd_ship_logs(const CommonArgs& args, const std::string& source,
                  const std::string& gateway_url, const std::string& token,
                  const std::string& pilot_uuid) {
  mqkit::ShipperOptions options;
  options.pilot_uuid = pilot_uuid;

  std::size_t shipped = 0;
  if (!gateway_url.empty()) {
    shipped = source.empty() || source == "-"
                  ? mqkit::ship_stream_http(std::cin, gateway_url, token, options)
                  : mqkit::ship_file_http(source, gateway_url, token, options);
  } else {
    auto tree = load_tree(args);
    mqkit::MqClient client(tree);
    auto producer = client.create_producer(args.dest);
    shipped = source.empty() || source == "-"
                  ? mqkit::ship_stream_mq(std::cin, *producer, options)
                  : mqkit::ship_file_mq(source, *producer, options);
    producer->close();
  }
  std::cout << shipped << " shipped\n";
  return 0;
}

int cmd_sink(const CommonArgs& args, const std::string& output_dir) {
  auto tree = load_tree(args);
  mqkit::MqClient client(tree);
  mqkit::LogSink sink(client, args.dest, output_dir);
  sink.start();
  while (!g_stop) {
    struct timespec ts = {0, 100 * 1000 * 1000};
    nanosleep(&ts, nullptr);
  }
  sink.stop();
  auto stats = sink.stats();
  std::cerr << "sink: " << stats.written << " written, " << stats.malformed
            << " quarantined, " << stats.duplicates << " duplicates\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  install_signal_handlers();

  CLI::App app{"mqkit message-queue toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  CommonArgs common;
  app.add_option("--config", common.config_path, "Config file path")
      ->envname("MQCONFIG");
  app.add_flag("--verbose", common.verbose, "Chatty diagnostics on stderr");

  auto* produce = app.add_subcommand("produce", "Send one message");
  std::string message;
  bool confirm = true;
  produce->add_option("--dest", common.dest, "Destination pseudo-URL")->required();
  produce->add_option("--message", message, "JSON payload (default: stdin)");
  produce->add_flag("!--no-confirm", confirm, "Skip the broker receipt");

  auto* consume = app.add_subcommand("consume", "Print messages as JSON lines");
  std::uint64_t count = 0;
  bool no_retry = false;
  consume->add_option("--dest", common.dest, "Destination pseudo-URL")->required();
  consume->add_option("--count", count, "Stop after this many (0: run forever)");
  consume->add_flag("--no-retry", no_retry, "Exit 3 when the connection drops");

  auto* broker = app.add_subcommand("broker", "Run the embedded broker");

  auto* gateway = app.add_subcommand("gateway", "Run the HTTP log gateway");
  std::string mint_principal;
  gateway->add_option("--mint-token", mint_principal,
                      "Print a fresh token and its config entry, then exit");

  auto* ship = app.add_subcommand("ship-logs", "Ship a pilot log");
  std::string source, gateway_url, token, pilot_uuid;
  ship->add_option("--source", source, "Log file (default or '-': stdin)");
  ship->add_option("--gateway-url", gateway_url, "Ship via HTTP gateway");
  ship->add_option("--token", token, "Bearer token for the gateway");
  ship->add_option("--dest", common.dest, "Ship directly to this pseudo-URL");
  ship->add_option("--pilot-uuid", pilot_uuid, "Pilot identity (default: random)");

  auto* sink = app.add_subcommand("sink", "Consume pilot logs into files");
  std::string output_dir = ".";
  sink->add_option("--dest", common.dest, "Destination pseudo-URL")->required();
  sink->add_option("--output", output_dir, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (produce->parsed()) return cmd_produce(common, message, confirm);
    if (consume->parsed()) return cmd_consume(common, count, no_retry);
    if (broker->parsed()) return cmd_broker(common);
    if (gateway->parsed()) return cmd_gateway(common, mint_principal);
    if (ship->parsed()) {
      if (gateway_url.empty() && common.dest.empty()) {
        std::cerr << "mqctl: ship-logs needs --gateway-url or --dest\n";
        return 2;
      }
      return cmd_ship_logs(common, source, gateway_url, token, pilot_uuid);
    }
    if (sink->parsed()) return cmd_sink(common, output_dir);
  } catch (const mqkit::Error& e) {
    std::cerr << "mqctl: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "mqctl: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
