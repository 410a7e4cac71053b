#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mqkit/error.hpp"

namespace mqkit {

enum class StompCommand {
  Connect,
  Stomp,
  Connected,
  Send,
  Subscribe,
  Unsubscribe,
  Ack,
  Nack,
  Begin,
  Commit,
  Abort,
  Disconnect,
  Message,
  Receipt,
  Error,
  Heartbeat,  // pseudo-frame: a lone end-of-line octet
};

std::string_view to_string(StompCommand command) noexcept;
std::optional<StompCommand> parse_stomp_command(std::string_view name) noexcept;

struct StompFrame {
  StompCommand command = StompCommand::Heartbeat;
  // Ordered; a key may repeat, in which case the first occurrence wins on
  // lookup (header() below).
  std::vector<std::pair<std::string, std::string>> headers;
  std::string body;

  StompFrame() = default;
  StompFrame(StompCommand cmd,
             std::vector<std::pair<std::string, std::string>> hdrs = {},
             std::string body_bytes = {})
      : command(cmd), headers(std::move(hdrs)), body(std::move(body_bytes)) {}

  static StompFrame heartbeat() { return StompFrame(); }

  const std::string* header(std::string_view key) const noexcept;
  /// Replaces the first occurrence or appends.
  void set_header(std::string_view key, std::string_view value);
  void remove_header(std::string_view key);

  bool operator==(const StompFrame&) const = default;
};

/// Header-value escaping per the 1.2 wire grammar. Not applied to
/// CONNECT/CONNECTED frames.
std::string escape_header(std::string_view raw);
/// Inverse of escape_header; throws ProtocolViolation on an undefined escape.
std::string unescape_header(std::string_view wire);

inline constexpr size_t kDefaultMaxFrameBytes = 1 << 20;  // 1 MiB

/// Serializes one frame. A content-length header equal to the body size is
/// always emitted for SEND/MESSAGE/ERROR (any caller-supplied value is
/// replaced). Throws IllegalHeaderCharacter on a NUL in a header, and
/// ProtocolViolation when the frame breaks a command/body invariant.
std::string encode_frame(const StompFrame& frame);

/// Incremental frame decoder; one instance per connection, single-threaded.
class StompDecoder {
 public:
  explicit StompDecoder(size_t max_frame_bytes = kDefaultMaxFrameBytes);

  /// Consumes as many complete frames as the accumulated bytes contain.
  /// Tolerates arbitrary chunk boundaries and \r\n line endings; honors
  /// content-length (bodies may contain NUL). Lone end-of-line octets decode
  /// as HEARTBEAT frames. Throws ProtocolViolation; the decoder is unusable
  /// afterwards.
  std::vector<StompFrame> feed(std::string_view bytes);

  /// Bytes buffered but not yet consumed by a complete frame.
  std::string_view remainder() const noexcept;

 private:
  std::optional<size_t> parse_one(StompFrame& out);

  std::string buffer_;
  size_t pos_ = 0;
  size_t max_frame_bytes_;
};

/// One-shot form: decodes every complete frame and returns the unconsumed
/// tail.
std::pair<std::vector<StompFrame>, std::string> decode_stream(
    std::string_view buffer, size_t max_frame_bytes = kDefaultMaxFrameBytes);

struct HeartbeatDecl {
  std::int64_t can_send_ms = 0;      // x: smallest interval this side can emit
  std::int64_t want_receive_ms = 0;  // y: smallest interval this side wants
};

struct HeartbeatPlan {
  std::int64_t send_interval_ms = 0;  // 0 = never send
  std::int64_t recv_timeout_ms = 0;   // base; disconnect after 2x of silence
};

/// Client-perspective negotiation: send = 0 if cx==0 or sy==0 else max(cx,sy);
/// recv = 0 if sx==0 or cy==0 else max(sx,cy).
HeartbeatPlan negotiate_heartbeat(HeartbeatDecl client, HeartbeatDecl server);

/// "x,y" header value helpers.
std::string format_heartbeat(const HeartbeatDecl& decl);
HeartbeatDecl parse_heartbeat(std::string_view value);

}  // namespace mqkit
