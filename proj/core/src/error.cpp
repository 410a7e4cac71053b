#include "mqkit/error.hpp"

namespace mqkit {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::MalformedPseudoUrl: return "MalformedPseudoUrl";
    case ErrorKind::InvalidKind: return "InvalidKind";
    case ErrorKind::UnknownService: return "UnknownService";
    case ErrorKind::UndeclaredDestination: return "UndeclaredDestination";
    case ErrorKind::AmbiguousShorthand: return "AmbiguousShorthand";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::SchemaError: return "SchemaError";
    case ErrorKind::UnknownProtocol: return "UnknownProtocol";
    case ErrorKind::MissingSecret: return "MissingSecret";
    case ErrorKind::InvalidJson: return "InvalidJson";
    case ErrorKind::InvalidUtf8: return "InvalidUtf8";
    case ErrorKind::IllegalHeaderCharacter: return "IllegalHeaderCharacter";
    case ErrorKind::ProtocolViolation: return "ProtocolViolation";
    case ErrorKind::ConnectionRefused: return "ConnectionRefused";
    case ErrorKind::AuthFailed: return "AuthFailed";
    case ErrorKind::TlsHandshakeFailed: return "TlsHandshakeFailed";
    case ErrorKind::Timeout: return "Timeout";
    case ErrorKind::NotConnected: return "NotConnected";
    case ErrorKind::SendFailed: return "SendFailed";
    case ErrorKind::UnknownToken: return "UnknownToken";
    case ErrorKind::WrongMode: return "WrongMode";
    case ErrorKind::ProducerClosed: return "ProducerClosed";
    case ErrorKind::ConsumerClosed: return "ConsumerClosed";
    case ErrorKind::DiskFull: return "DiskFull";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::SourceUnreadable: return "SourceUnreadable";
  }
  return "UnknownError";
}

}  // namespace mqkit
