#include "mqkit/message.hpp"

#include <chrono>
#include <mutex>
#include <random>

namespace mqkit {

using nlohmann::json;

std::int64_t system_clock_ms() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

Clock system_clock() { return [] { return system_clock_ms(); }; }

std::string make_message_id() {
  static thread_local std::mt19937_64 rng = [] {
    std::random_device rd;
    std::seed_seq seed{rd(), rd(), rd(), rd(),
                       static_cast<unsigned>(
                           std::chrono::steady_clock::now().time_since_epoch().count())};
    return std::mt19937_64(seed);
  }();
  static constexpr char hex[] = "0123456789abcdef";
  std::string id(32, '0');
  for (int half = 0; half < 2; ++half) {
    std::uint64_t bits = rng();
    for (int i = 0; i < 16; ++i) {
      id[half * 16 + i] = hex[bits & 0xf];
      bits >>= 4;
    }
  }
  return id;
}

const std::string& MessageEnvelope::message_id() const {
  static const std::string empty;
  auto it = headers.find(headers::kMessageId);
  return it == headers.end() ? empty : it->second;
}

std::int64_t MessageEnvelope::timestamp_ms() const {
  auto it = headers.find(headers::kTimestampMs);
  if (it == headers.end()) return 0;
  try {
    return std::stoll(it->second);
  } catch (...) {
    return 0;
  }
}

std::string MessageEnvelope::destination() const {
  auto it = headers.find(headers::kDestination);
  return it == headers.end() ? std::string() : it->second;
}

std::string MessageEnvelope::origin() const {
  auto it = headers.find(headers::kOrigin);
  return it == headers.end() ? std::string() : it->second;
}

bool MessageEnvelope::operator==(const MessageEnvelope& other) const {
  // Payload equality at the byte level of the canonical form, so that e.g.
  // 1 vs 1.0 distinctions survive the comparison.
  return headers == other.headers && canonical_json(payload) == canonical_json(other.payload);
}

std::string canonical_json(const json& doc) {
  // nlohmann::json keeps object members in lexicographic key order and
  // dump() emits no insignificant whitespace; together that is the canonical
  // form. Invalid UTF-8 in strings is rejected rather than replaced.
  return doc.dump(-1, ' ', false, json::error_handler_t::strict);
}

MessageEnvelope make_envelope(json payload, const std::string& origin,
                              const std::string& destination, const Clock& clock) {
  if (payload.is_discarded()) {
    throw Error(ErrorKind::InvalidJson, "payload is not a JSON value");
  }
  MessageEnvelope env;
  env.payload = std::move(payload);
  env.headers[headers::kMessageId] = make_message_id();
  env.headers[headers::kTimestampMs] = std::to_string(clock());
  env.headers[headers::kDestination] = destination;
  env.headers[headers::kOrigin] = origin;
  return env;
}

EncodedMessage encode_message(const MessageEnvelope& env) {
  return {canonical_json(env.payload), env.headers};
}

namespace {

// Minimal UTF-8 validity scan so invalid input maps to InvalidUtf8 instead of
// a generic JSON parse failure.
bool valid_utf8(std::string_view s) {
  size_t i = 0;
  while (i < s.size()) {
    unsigned char c = s[i];
    size_t len;
    if (c < 0x80) len = 1;
    else if ((c & 0xe0) == 0xc0) len = 2;
    else if ((c & 0xf0) == 0xe0) len = 3;
    else if ((c & 0xf8) == 0xf0) len = 4;
    else return false;
    if (i + len > s.size()) return false;
    for (size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(s[i + k]) & 0xc0) != 0x80) return false;
    }
    if (len == 2 && c < 0xc2) return false;                       // overlong
    if (len == 3 && c == 0xe0 && (static_cast<unsigned char>(s[i + 1]) < 0xa0)) return false;
    if (len == 4 && (c > 0xf4 || (c == 0xf4 && static_cast<unsigned char>(s[i + 1]) > 0x8f)))
      return false;                                               // > U+10FFFF
    i += len;
  }
  return true;
}

}  // namespace

MessageEnvelope decode_message(std::string_view body,
                               const std::map<std::string, std::string>& hdrs,
                               const Clock& clock) {
  if (!valid_utf8(body)) {
    throw Error(ErrorKind::InvalidUtf8, "message body is not valid UTF-8");
  }
  MessageEnvelope env;
  try {
    env.payload = json::parse(body);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::InvalidJson, e.what());
  }
  env.headers = hdrs;
  auto id = env.headers.find(headers::kMessageId);
  if (id == env.headers.end() || id->second.empty()) {
    env.headers[headers::kMessageId] = make_message_id();
    env.id_synthesized = true;
  }
  auto ts = env.headers.find(headers::kTimestampMs);
  if (ts == env.headers.end() || ts->second.empty()) {
    env.headers[headers::kTimestampMs] = std::to_string(clock());
    env.timestamp_synthesized = true;
  }
  return env;
}

std::string encode_envelope_record(const MessageEnvelope& env) {
  json doc;
  doc["headers"] = env.headers;
  doc["payload"] = env.payload;
  return canonical_json(doc);
}

MessageEnvelope decode_envelope_record(std::string_view bytes) {
  json doc;
  try {
    doc = json::parse(bytes);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::InvalidJson, e.what());
  }
  if (!doc.is_object() || !doc.contains("headers") || !doc.contains("payload")) {
    throw Error(ErrorKind::InvalidJson, "envelope record needs headers and payload");
  }
  MessageEnvelope env;
  env.payload = doc["payload"];
  for (auto it = doc["headers"].begin(); it != doc["headers"].end(); ++it) {
    if (!it->is_string()) {
      throw Error(ErrorKind::InvalidJson, "envelope header values must be strings");
    }
    env.headers[it.key()] = it->get<std::string>();
  }
  return env;
}

}  // namespace mqkit
