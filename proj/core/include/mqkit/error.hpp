#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mqkit {

enum class ErrorKind {
  // pseudo-url / config
  MalformedPseudoUrl,
  InvalidKind,
  UnknownService,
  UndeclaredDestination,
  AmbiguousShorthand,
  ParseError,
  SchemaError,
  UnknownProtocol,
  MissingSecret,
  // message model
  InvalidJson,
  InvalidUtf8,
  // stomp codec
  IllegalHeaderCharacter,
  ProtocolViolation,
  // connector / sessions
  ConnectionRefused,
  AuthFailed,
  TlsHandshakeFailed,
  Timeout,
  NotConnected,
  SendFailed,
  // connection manager
  UnknownToken,
  // mq-api
  WrongMode,
  ProducerClosed,
  ConsumerClosed,
  // spool / pipeline
  DiskFull,
  IoError,
  SourceUnreadable,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Exception carrying a machine-checkable kind next to the human message.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind),
        message_(message) {}

  ErrorKind kind() const noexcept { return kind_; }

  /// The message without the kind prefix that what() carries.
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorKind kind_;
  std::string message_;
};

}  // namespace mqkit
