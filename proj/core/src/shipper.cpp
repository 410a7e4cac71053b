#include "mqkit/shipper.hpp"

#include <unistd.h>

#include <chrono>
#include <fstream>
#include <functional>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "mqkit/error.hpp"
#include "mqkit/pilot_log.hpp"

namespace mqkit {

namespace {

using BatchSender = std::function<void(const std::vector<PilotLogRecord>&)>;

std::string default_source() {
  char host[256] = {0};
  if (::gethostname(host, sizeof(host) - 1) != 0) return "unknown-host";
  return host;
}

void fill_defaults(ShipperOptions& options) {
  if (options.pilot_uuid.empty()) options.pilot_uuid = random_uuid();
  if (options.source.empty()) options.source = default_source();
  if (!options.clock) options.clock = system_clock();
}

std::size_t ship_lines(std::istream& in, const ShipperOptions& options,
                       const BatchSender& send) {
  using std::chrono::steady_clock;
  std::vector<PilotLogRecord> batch;
  std::size_t total = 0;
  auto batch_started = steady_clock::now();

  auto flush = [&] {
    if (batch.empty()) return;
    send(batch);
    total += batch.size();
    batch.clear();
  };

  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;  // blank lines carry no record
    ParsedLogLine parsed = parse_log_line(line);
    PilotLogRecord rec;
    rec.pilot_uuid = options.pilot_uuid;
    rec.timestamp = iso8601_utc_ms(options.clock());
    rec.phase = std::move(parsed.phase);
    rec.severity = parsed.severity;
    rec.message = std::move(parsed.message);
    rec.source = options.source;
    if (batch.empty()) batch_started = steady_clock::now();
    batch.push_back(std::move(rec));
    if (batch.size() >= options.batch_max ||
        steady_clock::now() - batch_started >=
            std::chrono::milliseconds(options.batch_linger_ms)) {
      flush();
    }
  }
  flush();
  return total;
}

}  // namespace

std::size_t ship_stream_http(std::istream& in, const std::string& gateway_url,
                             const std::string& token,
                             ShipperOptions options) {
  fill_defaults(options);
  httplib::Client client(gateway_url);
  client.set_connection_timeout(5, 0);
  client.set_read_timeout(10, 0);
  const httplib::Headers headers{{"Authorization", "Bearer " + token}};

  auto send = [&](const std::vector<PilotLogRecord>& batch) {
    nlohmann::json body = nlohmann::json::array();
    for (const auto& rec : batch) body.push_back(rec.to_json());
    const std::string payload = body.dump();
    std::string last_error;
    for (int attempt = 0; attempt <= options.retry_budget; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(std::chrono::milliseconds(200 * attempt));
      }
      auto res = client.Post("/v1/logs", headers, payload, "application/json");
      if (res && res->status == 202) return;
      if (res && res->status >= 400 && res->status < 500 && res->status != 429) {
        // The gateway rejected the batch outright; retrying cannot help.
        throw Error(ErrorKind::SendFailed,
                    "gateway rejected batch: HTTP " + std::to_string(res->status) +
                        " " + res->body);
      }
      last_error = res ? "HTTP " + std::to_string(res->status)
                       : "no response from gateway";
    }
    throw Error(ErrorKind::SendFailed, "gateway unreachable: " + last_error);
  };
  return ship_lines(in, options, send);
}

std::size_t ship_stream_mq(std::istream& in, Producer& producer,
                           ShipperOptions options) {
  fill_defaults(options);
  auto send = [&](const std::vector<PilotLogRecord>& batch) {
    for (const auto& rec : batch) {
      PutOutcome outcome = PutOutcome::SendFailed;
      for (int attempt = 0; attempt <= options.retry_budget; ++attempt) {
        if (attempt > 0) {
          std::this_thread::sleep_for(std::chrono::milliseconds(200 * attempt));
        }
        outcome = producer.put(rec.to_json());
        if (outcome != PutOutcome::SendFailed) break;
      }
      if (outcome == PutOutcome::SendFailed) {
        throw Error(ErrorKind::SendFailed, "producer could not deliver record");
      }
    }
  };
  return ship_lines(in, options, send);
}

namespace {

std::ifstream open_source(const std::filesystem::path& source) {
  std::ifstream in(source);
  if (!in) {
    throw Error(ErrorKind::SourceUnreadable,
                "cannot read log source " + source.string());
  }
  return in;
}

}  // namespace

std::size_t ship_file_http(const std::filesystem::path& source,
                           const std::string& gateway_url,
                           const std::string& token, ShipperOptions options) {
  auto in = open_source(source);
  return ship_stream_http(in, gateway_url, token, std::move(options));
}

std::size_t ship_file_mq(const std::filesystem::path& source,
                         Producer& producer, ShipperOptions options) {
  auto in = open_source(source);
  return ship_stream_mq(in, producer, std::move(options));
}

}  // namespace mqkit
