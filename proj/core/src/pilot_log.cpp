#include "mqkit/pilot_log.hpp"

#include <cctype>
#include <cstdio>
#include <ctime>
#include <random>

#include "mqkit/error.hpp"

namespace mqkit {

std::string_view to_string(Severity severity) noexcept {
  switch (severity) {
    case Severity::Debug: return "DEBUG";
    case Severity::Info: return "INFO";
    case Severity::Warning: return "WARNING";
    case Severity::Error: return "ERROR";
  }
  return "INFO";
}

std::optional<Severity> parse_severity(std::string_view text) noexcept {
  if (text == "DEBUG") return Severity::Debug;
  if (text == "INFO") return Severity::Info;
  if (text == "WARNING") return Severity::Warning;
  if (text == "ERROR") return Severity::Error;
  return std::nullopt;
}

bool is_uuid(std::string_view text) noexcept {
  if (text.size() != 36) return false;
  for (std::size_t i = 0; i < 36; ++i) {
    if (i == 8 || i == 13 || i == 18 || i == 23) {
      if (text[i] != '-') return false;
    } else if (!std::isxdigit(static_cast<unsigned char>(text[i]))) {
      return false;
    }
  }
  return true;
}

std::string random_uuid() {
  static thread_local std::mt19937_64 rng{std::random_device{}()};
  std::uint64_t hi = rng();
  std::uint64_t lo = rng();
  // Version 4, variant 10xx.
  hi = (hi & 0xFFFFFFFFFFFF0FFFull) | 0x0000000000004000ull;
  lo = (lo & 0x3FFFFFFFFFFFFFFFull) | 0x8000000000000000ull;
  char buf[37];
  std::snprintf(buf, sizeof(buf), "%08x-%04x-%04x-%04x-%012llx",
                static_cast<unsigned>(hi >> 32),
                static_cast<unsigned>((hi >> 16) & 0xFFFF),
                static_cast<unsigned>(hi & 0xFFFF),
                static_cast<unsigned>(lo >> 48),
                static_cast<unsigned long long>(lo & 0xFFFFFFFFFFFFull));
  return buf;
}

std::string iso8601_utc_ms(std::int64_t ms) {
  const std::time_t secs = static_cast<std::time_t>(ms / 1000);
  const int frac = static_cast<int>(ms % 1000);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ",
                tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday, tm.tm_hour,
                tm.tm_min, tm.tm_sec, frac);
  return buf;
}

nlohmann::json PilotLogRecord::to_json() const {
  nlohmann::json doc{{"pilot_uuid", pilot_uuid},
                     {"timestamp", timestamp},
                     {"severity", std::string(to_string(severity))},
                     {"message", message}};
  if (!phase.empty()) doc["phase"] = phase;
  if (!source.empty()) doc["source"] = source;
  return doc;
}

namespace {

std::string required_string(const nlohmann::json& doc, const char* field) {
  auto it = doc.find(field);
  if (it == doc.end() || !it->is_string() || it->get<std::string>().empty()) {
    throw Error(ErrorKind::SchemaError, field);
  }
  return it->get<std::string>();
}

std::string optional_string(const nlohmann::json& doc, const char* field) {
  auto it = doc.find(field);
  if (it == doc.end()) return {};
  if (!it->is_string()) throw Error(ErrorKind::SchemaError, field);
  return it->get<std::string>();
}

}  // namespace

PilotLogRecord PilotLogRecord::from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) {
    throw Error(ErrorKind::SchemaError, "record must be a JSON object");
  }
  PilotLogRecord rec;
  rec.pilot_uuid = required_string(doc, "pilot_uuid");
  if (!is_uuid(rec.pilot_uuid)) {
    throw Error(ErrorKind::SchemaError, "pilot_uuid");
  }
  rec.timestamp = required_string(doc, "timestamp");
  rec.message = required_string(doc, "message");
  rec.phase = optional_string(doc, "phase");
  rec.source = optional_string(doc, "source");
  if (auto it = doc.find("severity"); it != doc.end()) {
    if (!it->is_string()) throw Error(ErrorKind::SchemaError, "severity");
    auto severity = parse_severity(it->get<std::string>());
    if (!severity) throw Error(ErrorKind::SchemaError, "severity");
    rec.severity = *severity;
  }
  return rec;
}

ParsedLogLine parse_log_line(std::string_view line) {
  ParsedLogLine out;
  const auto first = line.find('|');
  if (first != std::string_view::npos) {
    const auto second = line.find('|', first + 1);
    if (second != std::string_view::npos) {
      auto severity = parse_severity(line.substr(first + 1, second - first - 1));
      if (severity) {
        out.phase = std::string(line.substr(0, first));
        out.severity = *severity;
        out.message = std::string(line.substr(second + 1));
        return out;
      }
    }
  }
  out.message = std::string(line);
  return out;
}

}  // namespace mqkit
