#include "mqkit/stomp.hpp"

#include <algorithm>
#include <charconv>

namespace mqkit {

namespace {

constexpr std::string_view kCommandNames[] = {
    "CONNECT", "STOMP",       "CONNECTED", "SEND",    "SUBSCRIBE",
    "UNSUBSCRIBE", "ACK",     "NACK",      "BEGIN",   "COMMIT",
    "ABORT",   "DISCONNECT",  "MESSAGE",   "RECEIPT", "ERROR",
    "HEARTBEAT",
};

bool command_has_body(StompCommand command) {
  return command == StompCommand::Send || command == StompCommand::Message ||
         command == StompCommand::Error;
}

// CONNECT and CONNECTED frames keep 1.0/1.1 compatibility: their headers are
// transmitted verbatim, with no escape sequences in either direction.
bool command_escapes_headers(StompCommand command) {
  return command != StompCommand::Connect &&
         command != StompCommand::Connected;
}

[[noreturn]] void violation(const std::string& message) {
  throw Error(ErrorKind::ProtocolViolation, message);
}

std::int64_t parse_nonneg_int(std::string_view text, std::string_view what) {
  std::int64_t value = 0;
  const char* begin = text.data();
  const char* end = begin + text.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end || value < 0) {
    violation("invalid " + std::string(what) + ": '" + std::string(text) + "'");
  }
  return value;
}

}  // namespace

std::string_view to_string(StompCommand command) noexcept {
  return kCommandNames[static_cast<size_t>(command)];
}

std::optional<StompCommand> parse_stomp_command(std::string_view name) noexcept {
  // HEARTBEAT is a synthetic name, never a wire command line.
  for (size_t i = 0; i + 1 < std::size(kCommandNames); ++i) {
    if (kCommandNames[i] == name) return static_cast<StompCommand>(i);
  }
  return std::nullopt;
}

const std::string* StompFrame::header(std::string_view key) const noexcept {
  for (const auto& [k, v] : headers) {
    if (k == key) return &v;
  }
  return nullptr;
}

void StompFrame::set_header(std::string_view key, std::string_view value) {
  for (auto& [k, v] : headers) {
    if (k == key) {
      v = value;
      return;
    }
  }
  headers.emplace_back(std::string(key), std::string(value));
}

void StompFrame::remove_header(std::string_view key) {
  headers.erase(std::remove_if(headers.begin(), headers.end(),
                               [&](const auto& h) { return h.first == key; }),
                headers.end());
}

std::string escape_header(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  for (char c : raw) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\r': out += "\\r"; break;
      case '\n': out += "\\n"; break;
      case ':': out += "\\c"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape_header(std::string_view wire) {
  std::string out;
  out.reserve(wire.size());
  for (size_t i = 0; i < wire.size(); ++i) {
    char c = wire[i];
    if (c != '\\') {
      out += c;
      continue;
    }
    if (++i == wire.size()) violation("truncated escape sequence in header");
    switch (wire[i]) {
      case '\\': out += '\\'; break;
      case 'r': out += '\r'; break;
      case 'n': out += '\n'; break;
      case 'c': out += ':'; break;
      default:
        violation(std::string("undefined escape sequence '\\") + wire[i] +
                  "' in header");
    }
  }
  return out;
}

std::string encode_frame(const StompFrame& frame) {
  if (frame.command == StompCommand::Heartbeat) return "\n";

  const bool escaped = command_escapes_headers(frame.command);
  const bool bodied = command_has_body(frame.command);
  if (!bodied && !frame.body.empty()) {
    violation(std::string(to_string(frame.command)) +
              " frames must not have a body");
  }

  auto headers = frame.headers;
  if (bodied) {
    // Always pinned to the actual body size so receivers can frame bodies
    // that contain NUL octets.
    std::string length = std::to_string(frame.body.size());
    bool replaced = false;
    for (auto& [k, v] : headers) {
      if (k == "content-length") {
        v = length;
        replaced = true;
        break;
      }
    }
    if (!replaced) headers.emplace_back("content-length", length);
  }

  std::string out(to_string(frame.command));
  out += '\n';
  for (const auto& [key, value] : headers) {
    for (std::string_view part : {std::string_view(key), std::string_view(value)}) {
      if (part.find('\0') != std::string_view::npos) {
        throw Error(ErrorKind::IllegalHeaderCharacter,
                    "NUL octet in header of " +
                        std::string(to_string(frame.command)) + " frame");
      }
    }
    if (escaped) {
      out += escape_header(key);
      out += ':';
      out += escape_header(value);
    } else {
      // No escape mechanism exists for these frames, so EOL and colon-in-key
      // are unrepresentable.
      if (key.find_first_of("\r\n:") != std::string::npos ||
          value.find_first_of("\r\n") != std::string::npos) {
        throw Error(ErrorKind::IllegalHeaderCharacter,
                    "unescapable character in header of " +
                        std::string(to_string(frame.command)) + " frame");
      }
      out += key;
      out += ':';
      out += value;
    }
    out += '\n';
  }
  out += '\n';
  out += frame.body;
  out += '\0';
  return out;
}

StompDecoder::StompDecoder(size_t max_frame_bytes)
    : max_frame_bytes_(max_frame_bytes) {}

std::vector<StompFrame> StompDecoder::feed(std::string_view bytes) {
  buffer_.append(bytes.data(), bytes.size());
  std::vector<StompFrame> frames;
  for (;;) {
    StompFrame frame;
    auto consumed_to = parse_one(frame);
    if (!consumed_to) break;
    pos_ = *consumed_to;
    frames.push_back(std::move(frame));
  }
  if (pos_ > 0) {
    buffer_.erase(0, pos_);
    pos_ = 0;
  }
  return frames;
}

std::string_view StompDecoder::remainder() const noexcept {
  return std::string_view(buffer_).substr(pos_);
}

// Attempts to parse one frame starting at pos_. Returns the end offset of the
// frame on success, nullopt when more bytes are needed.
std::optional<size_t> StompDecoder::parse_one(StompFrame& out) {
  const size_t size = buffer_.size();
  size_t p = pos_;
  if (p >= size) return std::nullopt;

  // A lone EOL octet between frames is a heartbeat.
  if (buffer_[p] == '\n') {
    out = StompFrame::heartbeat();
    return p + 1;
  }
  if (buffer_[p] == '\r') {
    if (p + 1 >= size) return std::nullopt;
    if (buffer_[p + 1] != '\n') violation("bare carriage return");
    out = StompFrame::heartbeat();
    return p + 2;
  }

  auto incomplete = [&]() -> std::optional<size_t> {
    if (size - pos_ > max_frame_bytes_) {
      violation("frame exceeds " + std::to_string(max_frame_bytes_) +
                " byte limit");
    }
    return std::nullopt;
  };

  // Reads one line (through its LF), tolerating a trailing CR.
  auto read_line = [&](std::string_view& line) -> bool {
    size_t nl = buffer_.find('\n', p);
    if (nl == std::string::npos) return false;
    size_t len = nl - p;
    if (len > 0 && buffer_[nl - 1] == '\r') --len;
    line = std::string_view(buffer_).substr(p, len);
    p = nl + 1;
    return true;
  };

  std::string_view command_line;
  if (!read_line(command_line)) return incomplete();
  auto command = parse_stomp_command(command_line);
  if (!command) {
    violation("unknown command '" + std::string(command_line) + "'");
  }
  out.command = *command;
  const bool escaped = command_escapes_headers(out.command);

  out.headers.clear();
  std::optional<size_t> content_length;
  for (;;) {
    std::string_view line;
    if (!read_line(line)) return incomplete();
    if (line.empty()) break;
    size_t colon = line.find(':');
    if (colon == std::string_view::npos) {
      violation("header line without colon: '" + std::string(line) + "'");
    }
    std::string key, value;
    if (escaped) {
      key = unescape_header(line.substr(0, colon));
      value = unescape_header(line.substr(colon + 1));
    } else {
      key = std::string(line.substr(0, colon));
      value = std::string(line.substr(colon + 1));
    }
    // Repeated keys are preserved in order; the first occurrence wins.
    if (key == "content-length" && !content_length) {
      auto n = parse_nonneg_int(value, "content-length");
      if (static_cast<size_t>(n) > max_frame_bytes_) {
        violation("declared content-length " + std::to_string(n) +
                  " exceeds " + std::to_string(max_frame_bytes_) +
                  " byte limit");
      }
      content_length = static_cast<size_t>(n);
    }
    out.headers.emplace_back(std::move(key), std::move(value));
  }

  size_t body_end;  // offset of the trailing NUL
  if (content_length) {
    if (p + *content_length + 1 > size) return incomplete();
    body_end = p + *content_length;
    if (buffer_[body_end] != '\0') {
      violation("no NUL octet after " + std::to_string(*content_length) +
                " byte body");
    }
  } else {
    body_end = buffer_.find('\0', p);
    if (body_end == std::string::npos) return incomplete();
  }
  out.body = buffer_.substr(p, body_end - p);
  if (!out.body.empty() && !command_has_body(out.command)) {
    violation(std::string(to_string(out.command)) +
              " frames must not have a body");
  }
  size_t end = body_end + 1;
  if (end - pos_ > max_frame_bytes_) {
    violation("frame exceeds " + std::to_string(max_frame_bytes_) +
              " byte limit");
  }
  return end;
}

std::pair<std::vector<StompFrame>, std::string> decode_stream(
    std::string_view buffer, size_t max_frame_bytes) {
  StompDecoder decoder(max_frame_bytes);
  auto frames = decoder.feed(buffer);
  return {std::move(frames), std::string(decoder.remainder())};
}

HeartbeatPlan negotiate_heartbeat(HeartbeatDecl client, HeartbeatDecl server) {
  HeartbeatPlan plan;
  if (client.can_send_ms != 0 && server.want_receive_ms != 0) {
    plan.send_interval_ms = std::max(client.can_send_ms, server.want_receive_ms);
  }
  if (server.can_send_ms != 0 && client.want_receive_ms != 0) {
    plan.recv_timeout_ms = std::max(server.can_send_ms, client.want_receive_ms);
  }
  return plan;
}

std::string format_heartbeat(const HeartbeatDecl& decl) {
  return std::to_string(decl.can_send_ms) + "," +
         std::to_string(decl.want_receive_ms);
}

HeartbeatDecl parse_heartbeat(std::string_view value) {
  size_t comma = value.find(',');
  if (comma == std::string_view::npos) {
    violation("heart-beat header must be '<cx>,<cy>': '" + std::string(value) +
              "'");
  }
  HeartbeatDecl decl;
  decl.can_send_ms = parse_nonneg_int(value.substr(0, comma), "heart-beat");
  decl.want_receive_ms =
      parse_nonneg_int(value.substr(comma + 1), "heart-beat");
  return decl;
}

}  // namespace mqkit
