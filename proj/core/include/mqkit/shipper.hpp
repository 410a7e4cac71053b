#pragma once

#include <cstddef>
#include <filesystem>
#include <istream>
#include <string>

#include "mqkit/message.hpp"
#include "mqkit/mq_api.hpp"

namespace mqkit {

struct ShipperOptions {
  /// Identity stamped on every record; a fresh random UUID when empty.
  std::string pilot_uuid;
  /// Source label (host or CE); the hostname when empty.
  std::string source;
  std::size_t batch_max = 50;
  int batch_linger_ms = 2000;
  /// Delivery attempts per batch before giving up with SendFailed.
  int retry_budget = 3;
  Clock clock = system_clock();
};

/// Reads `in` line by line to end of stream, wrapping each non-blank line as
/// a PilotLogRecord ("PHASE|SEVERITY|message" prefixes honored), and posts
/// them to the gateway in batches of at most batch_max, flushing early once
/// a batch has lingered past batch_linger_ms. Returns the count shipped.
/// Throws SendFailed once the retry budget is exhausted.
std::size_t ship_stream_http(std::istream& in, const std::string& gateway_url,
                             const std::string& token,
                             ShipperOptions options = {});

/// Same line handling, sent directly through an MQ producer (which may
/// spool). Delivered and Spooled both count as shipped.
std::size_t ship_stream_mq(std::istream& in, Producer& producer,
                           ShipperOptions options = {});

/// File front ends; throw SourceUnreadable when the file cannot be opened.
std::size_t ship_file_http(const std::filesystem::path& source,
                           const std::string& gateway_url,
                           const std::string& token,
                           ShipperOptions options = {});
std::size_t ship_file_mq(const std::filesystem::path& source,
                         Producer& producer, ShipperOptions options = {});

}  // namespace mqkit
