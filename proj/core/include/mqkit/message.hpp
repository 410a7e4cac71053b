#pragma once

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>

#include "mqkit/error.hpp"

namespace mqkit {

/// Milliseconds since the Unix epoch, UTC. Injectable for deterministic tests.
using Clock = std::function<std::int64_t()>;

std::int64_t system_clock_ms();
Clock system_clock();

/// Fresh 128-bit random token, 32 lowercase hex characters.
std::string make_message_id();

namespace headers {
inline constexpr const char* kMessageId = "message-id";
inline constexpr const char* kTimestampMs = "timestamp-ms";
inline constexpr const char* kDestination = "destination";
inline constexpr const char* kOrigin = "origin";
}  // namespace headers

/// Immutable JSON payload plus transport headers. Values; freely shareable
/// between threads.
struct MessageEnvelope {
  nlohmann::json payload;
  std::map<std::string, std::string> headers;

  // Set by decode_message when the wire headers lacked the field and a
  // substitute was synthesized. Not part of envelope equality.
  bool id_synthesized = false;
  bool timestamp_synthesized = false;

  const std::string& message_id() const;
  std::int64_t timestamp_ms() const;
  std::string destination() const;
  std::string origin() const;

  bool operator==(const MessageEnvelope& other) const;
};

/// Canonical JSON: UTF-8, no insignificant whitespace, object keys in
/// lexicographic order. Stable byte-for-byte under reparse.
std::string canonical_json(const nlohmann::json& doc);

/// Assigns a fresh message-id and the clock's current timestamp.
MessageEnvelope make_envelope(nlohmann::json payload, const std::string& origin,
                              const std::string& destination,
                              const Clock& clock = system_clock());

struct EncodedMessage {
  std::string body;  // canonical JSON bytes of the payload
  std::map<std::string, std::string> headers;
};

EncodedMessage encode_message(const MessageEnvelope& env);

/// Inverse of encode_message on its range. Missing message-id / timestamp-ms
/// headers are synthesized (fresh id, receive time) and flagged.
MessageEnvelope decode_message(std::string_view body,
                               const std::map<std::string, std::string>& hdrs,
                               const Clock& clock = system_clock());

/// Self-contained canonical encoding of a whole envelope (headers + payload),
/// used by the failover spool.
std::string encode_envelope_record(const MessageEnvelope& env);
MessageEnvelope decode_envelope_record(std::string_view bytes);

}  // namespace mqkit
