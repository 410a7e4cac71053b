#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

namespace mqkit {

enum class Severity { Debug, Info, Warning, Error };

std::string_view to_string(Severity severity) noexcept;
std::optional<Severity> parse_severity(std::string_view text) noexcept;

/// One line of pilot output on its way through the pipeline.
struct PilotLogRecord {
  std::string pilot_uuid;  // RFC 4122 textual form
  std::string timestamp;   // UTC ISO 8601
  std::string phase;       // e.g. install, configure, run; may be empty
  Severity severity = Severity::Info;
  std::string message;
  std::string source;  // host or CE label; may be empty

  nlohmann::json to_json() const;

  /// Throws SchemaError naming the first offending field. pilot_uuid,
  /// timestamp and message are mandatory; severity defaults to INFO.
  static PilotLogRecord from_json(const nlohmann::json& doc);
};

/// True for the 8-4-4-4-12 lowercase-or-uppercase hex form.
bool is_uuid(std::string_view text) noexcept;

/// Fresh random (version 4) UUID in lowercase textual form.
std::string random_uuid();

/// "2026-08-15T12:34:56.789Z" for a wall-clock millisecond timestamp.
std::string iso8601_utc_ms(std::int64_t ms);

/// Shipper-side line grammar: "PHASE|SEVERITY|message" when the second
/// field names a severity, otherwise the whole line is the message with
/// default phase and severity.
struct ParsedLogLine {
  std::string phase;
  Severity severity = Severity::Info;
  std::string message;
};

ParsedLogLine parse_log_line(std::string_view line);

}  // namespace mqkit
