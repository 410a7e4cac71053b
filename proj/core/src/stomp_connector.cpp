#include <atomic>
#include <chrono>
#include <condition_variable>
#include <mutex>
#include <set>
#include <thread>

#include "mqkit/connector.hpp"
#include "mqkit/net.hpp"
#include "mqkit/stomp.hpp"

namespace mqkit {

namespace {

std::int64_t steady_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// Transport-owned headers the connector strips before reconstructing an
// envelope, so a consumed envelope compares equal to the produced one.
bool transport_header(const std::string& key) {
  return key == "subscription" || key == "ack" || key == "content-length" ||
         key == "content-type" || key == "redelivered" || key == "receipt-id";
}

class StompSession final : public Session {
 public:
  StompSession(const ConnectorParams& params, EventHandler handler,
               bool suppress_heartbeats)
      : params_(params),
        handler_(std::move(handler)),
        suppress_heartbeats_(suppress_heartbeats) {
    if (!handler_) handler_ = [](const ConnectorEvent&) {};
    open_stream();
    handshake();
    connected_.store(true);
    emit({ConnectorEvent::Type::Connected});
    reader_ = std::thread([this] { reader_loop(); });
  }

  ~StompSession() override {
    try {
      disconnect();
    } catch (...) {
    }
    if (reader_.joinable()) reader_.join();
  }

  bool connected() const override { return connected_.load(); }

  void put(const std::string& wire_path, const MessageEnvelope& env,
           bool confirm) override {
    if (!confirm) {
      StompFrame frame = build_send(wire_path, env);
      write_frame(frame);
      return;
    }
    std::uint64_t ticket = put_async(wire_path, env);
    if (!await_receipt(ticket, kReceiptTimeoutMs)) {
      throw Error(ErrorKind::SendFailed,
                  "no receipt within " + std::to_string(kReceiptTimeoutMs) +
                      " ms for " + wire_path);
    }
  }

  std::uint64_t put_async(const std::string& wire_path,
                          const MessageEnvelope& env) override {
    StompFrame frame = build_send(wire_path, env);
    std::uint64_t ticket = ++ticket_seq_;
    frame.set_header("receipt", "r-" + std::to_string(ticket));
    write_frame(frame);
    return ticket;
  }

  bool await_receipt(std::uint64_t ticket, int timeout_ms) override {
    std::unique_lock<std::mutex> lock(state_mutex_);
    bool satisfied = receipt_cv_.wait_for(
        lock, std::chrono::milliseconds(timeout_ms),
        [&] { return confirmed_.count(ticket) != 0 || dead_; });
    return satisfied && confirmed_.erase(ticket) > 0;
  }

  std::string subscribe(const SubscriptionSpec& spec) override {
    if (spec.wire_path.rfind("/queue/", 0) != 0 &&
        spec.wire_path.rfind("/topic/", 0) != 0) {
      throw Error(ErrorKind::ProtocolViolation,
                  "subscription path must start with /queue/ or /topic/: '" +
                      spec.wire_path + "'");
    }
    require_connected();
    std::string id = "sub-" + std::to_string(++sub_seq_);
    {
      std::lock_guard<std::mutex> lock(state_mutex_);
      subscriptions_[id] = spec;
    }
    StompFrame frame(StompCommand::Subscribe);
    frame.set_header("id", id);
    frame.set_header("destination", spec.wire_path);
    frame.set_header("ack", spec.ack_mode == AckMode::ClientIndividual
                                ? "client-individual"
                                : "auto");
    try {
      write_frame(frame);
    } catch (...) {
      std::lock_guard<std::mutex> lock(state_mutex_);
      subscriptions_.erase(id);
      throw;
    }
    return id;
  }

  void unsubscribe(const std::string& id) override {
    {
      std::lock_guard<std::mutex> lock(state_mutex_);
      if (subscriptions_.erase(id) == 0) {
        throw Error(ErrorKind::UnknownToken, "unknown subscription '" + id + "'");
      }
    }
    StompFrame frame(StompCommand::Unsubscribe);
    frame.set_header("id", id);
    write_frame(frame);
  }

  void disconnect() override {
    std::call_once(disconnect_once_, [this] { do_disconnect(); });
  }

 private:
  void open_stream() {
    bool tls =
        params_.use_tls || params_.auth.mode == AuthMode::TlsClientCert;
    if (!tls) {
      stream_ = tcp_connect(params_.host, params_.port, kConnectTimeoutMs);
      return;
    }
    TlsClientOptions options;
    options.ca_path = !params_.tls_ca_path.empty() ? params_.tls_ca_path
                                                   : params_.auth.ca_path;
    options.verify_hostname = params_.tls_verify_hostname;
    if (params_.auth.mode == AuthMode::TlsClientCert) {
      options.client_cert_path = params_.auth.cert_path;
      options.client_key_path = params_.auth.key_path;
    }
    stream_ = tls_connect(params_.host, params_.port, options,
                          kConnectTimeoutMs);
  }

  void handshake() {
    StompFrame connect(StompCommand::Connect);
    connect.set_header("accept-version", "1.2");
    connect.set_header("host", params_.virtual_host.empty()
                                   ? params_.host
                                   : params_.virtual_host);
    HeartbeatDecl mine{params_.heartbeat_out_ms, params_.heartbeat_in_ms};
    connect.set_header("heart-beat", format_heartbeat(mine));
    if (params_.auth.mode == AuthMode::UserPass) {
      connect.set_header("login", params_.auth.user);
      connect.set_header("passcode", resolve_password(params_.auth));
    }
    try {
      stream_->write_all(encode_frame(connect));
    } catch (const Error& e) {
      // TLS 1.3 defers client-certificate verification past the client's
      // view of the handshake; a rejection lands on this first write.
      bool tls =
          params_.use_tls || params_.auth.mode == AuthMode::TlsClientCert;
      if (tls && e.kind() == ErrorKind::IoError) {
        throw Error(ErrorKind::TlsHandshakeFailed,
                    "peer rejected the TLS session: " + e.message());
      }
      throw;
    }
    last_sent_.store(steady_ms());

    auto deadline = steady_ms() + kConnectTimeoutMs;
    for (;;) {
      StompFrame frame;
      if (!read_frame_until(deadline, frame)) {
        throw Error(ErrorKind::Timeout, "no CONNECTED frame within " +
                                            std::to_string(kConnectTimeoutMs) +
                                            " ms");
      }
      if (frame.command == StompCommand::Heartbeat) continue;
      if (frame.command == StompCommand::Error) {
        const std::string* message = frame.header("message");
        throw Error(ErrorKind::AuthFailed,
                    message != nullptr ? *message
                    : !frame.body.empty() ? frame.body
                                          : "broker rejected CONNECT");
      }
      if (frame.command != StompCommand::Connected) {
        throw Error(ErrorKind::ProtocolViolation,
                    "expected CONNECTED, got " +
                        std::string(to_string(frame.command)));
      }
      HeartbeatDecl server{0, 0};
      if (const std::string* hb = frame.header("heart-beat")) {
        server = parse_heartbeat(*hb);
      }
      plan_ = negotiate_heartbeat(mine, server);
      last_received_.store(steady_ms());
      return;
    }
  }

  // Blocking single-frame read used only during the handshake; afterwards
  // the decoder (with any buffered tail) passes to the reader thread.
  bool read_frame_until(std::int64_t deadline_ms, StompFrame& out) {
    for (;;) {
      if (!preread_.empty()) {
        out = std::move(preread_.front());
        preread_.erase(preread_.begin());
        return true;
      }
      std::int64_t left = deadline_ms - steady_ms();
      if (left <= 0) return false;
      if (!stream_->poll_readable(static_cast<int>(std::min<std::int64_t>(left, 200)))) {
        continue;
      }
      char buf[8192];
      ReadResult r = stream_->read_some(buf, sizeof(buf));
      if (r.status == ReadResult::Status::Eof) {
        throw Error(ErrorKind::ConnectionRefused,
                    "connection closed during handshake");
      }
      if (r.status == ReadResult::Status::WouldBlock) continue;
      auto frames = decoder_.feed(std::string_view(buf, r.bytes));
      for (auto& f : frames) preread_.push_back(std::move(f));
    }
  }

  StompFrame build_send(const std::string& wire_path,
                        const MessageEnvelope& env) {
    require_connected();
    EncodedMessage enc = encode_message(env);
    StompFrame frame(StompCommand::Send);
    for (const auto& [k, v] : enc.headers) frame.headers.emplace_back(k, v);
    frame.set_header("destination", wire_path);
    frame.set_header("content-type", "application/json");
    frame.body = enc.body;
    return frame;
  }

  void require_connected() const {
    if (!connected_.load()) {
      throw Error(ErrorKind::NotConnected, "session is not connected");
    }
  }

  void write_frame(const StompFrame& frame) {
    require_connected();
    try {
      stream_->write_all(encode_frame(frame));
      last_sent_.store(steady_ms());
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::IllegalHeaderCharacter) throw;
      throw Error(ErrorKind::SendFailed,
                  std::string("write failed: ") + e.what());
    }
  }

  void reader_loop() {
    char buf[16384];
    // Frames decoded during the handshake but not consumed by it.
    std::vector<StompFrame> frames = std::move(preread_);
    preread_.clear();
    for (;;) {
      for (auto& frame : frames) {
        if (!on_frame(frame)) return;
      }
      frames.clear();

      std::int64_t now = steady_ms();
      if (plan_.send_interval_ms > 0 && !suppress_heartbeats_ &&
          now - last_sent_.load() >= plan_.send_interval_ms) {
        try {
          stream_->write_all("\n");
          last_sent_.store(now);
        } catch (...) {
          finish(DisconnectReason::PeerClose, "heartbeat write failed");
          return;
        }
      }
      if (plan_.recv_timeout_ms > 0 &&
          now - last_received_.load() > 2 * plan_.recv_timeout_ms) {
        finish(DisconnectReason::HeartbeatTimeout,
               "no data for 2x " + std::to_string(plan_.recv_timeout_ms) +
                   " ms");
        return;
      }

      int timeout = poll_timeout_ms(now);
      if (!stream_->poll_readable(timeout)) continue;
      ReadResult r;
      try {
        r = stream_->read_some(buf, sizeof(buf));
      } catch (const std::exception&) {
        finish(DisconnectReason::PeerClose, "read failed");
        return;
      }
      if (r.status == ReadResult::Status::WouldBlock) continue;
      if (r.status == ReadResult::Status::Eof) {
        finish(DisconnectReason::PeerClose, "connection closed by peer");
        return;
      }
      last_received_.store(steady_ms());
      try {
        frames = decoder_.feed(std::string_view(buf, r.bytes));
      } catch (const Error& e) {
        emit_protocol_error(e.what());
        finish(DisconnectReason::ProtocolError, e.what());
        return;
      }
    }
  }

  int poll_timeout_ms(std::int64_t now) const {
    std::int64_t timeout = 200;
    if (plan_.send_interval_ms > 0) {
      timeout = std::min(timeout,
                         plan_.send_interval_ms - (now - last_sent_.load()));
    }
    if (plan_.recv_timeout_ms > 0) {
      timeout = std::min(timeout, 2 * plan_.recv_timeout_ms -
                                      (now - last_received_.load()));
    }
    return static_cast<int>(std::max<std::int64_t>(timeout, 10));
  }

  // False stops the reader loop.
  bool on_frame(const StompFrame& frame) {
    switch (frame.command) {
      case StompCommand::Heartbeat:
        return true;
      case StompCommand::Message:
        on_message(frame);
        return true;
      case StompCommand::Receipt:
        on_receipt(frame);
        return true;
      case StompCommand::Error: {
        const std::string* message = frame.header("message");
        std::string text = message != nullptr ? *message : frame.body;
        emit_protocol_error("broker error: " + text);
        finish(DisconnectReason::ProtocolError, text);
        return false;
      }
      default:
        emit_protocol_error("unexpected " +
                            std::string(to_string(frame.command)) +
                            " frame from broker");
        finish(DisconnectReason::ProtocolError, "unexpected frame");
        return false;
    }
  }

  void on_message(const StompFrame& frame) {
    const std::string* sub_id = frame.header("subscription");
    if (sub_id == nullptr) return;
    SubscriptionSpec spec;
    {
      std::lock_guard<std::mutex> lock(state_mutex_);
      auto it = subscriptions_.find(*sub_id);
      if (it == subscriptions_.end()) return;  // raced an unsubscribe: drop
      spec = it->second;
    }
    std::map<std::string, std::string> headers;
    for (const auto& [k, v] : frame.headers) {
      if (!transport_header(k)) headers.emplace(k, v);  // first value wins
    }
    MessageEnvelope env = decode_message(frame.body, headers);

    ConnectorEvent event{ConnectorEvent::Type::MessageArrived};
    event.subscription_id = *sub_id;
    event.envelope = env;
    emit(event);

    const std::string* ack_id = frame.header("ack");
    bool ok = true;
    try {
      if (spec.handler) spec.handler(env);
    } catch (const std::exception&) {
      ok = false;
    }
    if (spec.ack_mode == AckMode::ClientIndividual && ack_id != nullptr) {
      StompFrame reply(ok ? StompCommand::Ack : StompCommand::Nack);
      reply.set_header("id", *ack_id);
      try {
        stream_->write_all(encode_frame(reply));
        last_sent_.store(steady_ms());
      } catch (...) {
        // The broker will requeue on teardown; the read side reports the
        // failure.
      }
    }
  }

  void on_receipt(const StompFrame& frame) {
    const std::string* receipt_id = frame.header("receipt-id");
    if (receipt_id == nullptr) return;
    if (receipt_id->rfind("r-", 0) == 0) {
      std::uint64_t ticket = 0;
      try {
        ticket = std::stoull(receipt_id->substr(2));
      } catch (...) {
        ticket = 0;
      }
      if (ticket != 0) {
        std::lock_guard<std::mutex> lock(state_mutex_);
        confirmed_.insert(ticket);
      }
      receipt_cv_.notify_all();
    }
    ConnectorEvent event{ConnectorEvent::Type::ReceiptConfirmed};
    event.receipt_id = *receipt_id;
    emit(event);
  }

  void emit(const ConnectorEvent& event) { handler_(event); }

  void emit_protocol_error(const std::string& description) {
    ConnectorEvent event{ConnectorEvent::Type::ProtocolError};
    event.description = description;
    emit(event);
  }

  // Terminal transition; callable from any thread, effective once. Every
  // reader exit path lands here, as does do_disconnect; whichever arrives
  // first emits the single Disconnected event. Once graceful_ is set the
  // reason is Requested regardless of how the stream actually died.
  void finish(DisconnectReason reason, const std::string& description) {
    bool expected = false;
    if (!terminal_emitted_.compare_exchange_strong(expected, true)) return;
    connected_.store(false);
    {
      std::lock_guard<std::mutex> lock(state_mutex_);
      dead_ = true;
    }
    receipt_cv_.notify_all();
    ConnectorEvent event{ConnectorEvent::Type::Disconnected};
    event.reason = graceful_.load() ? DisconnectReason::Requested : reason;
    event.description = description;
    emit(event);
  }

  void do_disconnect() {
    graceful_.store(true);
    if (connected_.load()) {
      try {
        StompFrame frame(StompCommand::Disconnect);
        std::uint64_t ticket = ++ticket_seq_;
        frame.set_header("receipt", "r-" + std::to_string(ticket));
        stream_->write_all(encode_frame(frame));
        await_receipt(ticket, kDisconnectReceiptTimeoutMs);
      } catch (...) {
      }
    }
    stream_->shutdown();
    if (reader_.joinable() &&
        reader_.get_id() != std::this_thread::get_id()) {
      reader_.join();
    }
    finish(DisconnectReason::Requested, "disconnect requested");
  }

  ConnectorParams params_;
  EventHandler handler_;
  bool suppress_heartbeats_;

  std::unique_ptr<ByteStream> stream_;
  StompDecoder decoder_;
  std::vector<StompFrame> preread_;
  HeartbeatPlan plan_;

  std::thread reader_;
  std::atomic<bool> connected_{false};
  std::atomic<bool> terminal_emitted_{false};
  std::atomic<bool> graceful_{false};
  std::once_flag disconnect_once_;

  std::atomic<std::int64_t> last_sent_{0};
  std::atomic<std::int64_t> last_received_{0};

  mutable std::mutex state_mutex_;
  std::condition_variable receipt_cv_;
  std::set<std::uint64_t> confirmed_;
  bool dead_ = false;
  std::map<std::string, SubscriptionSpec> subscriptions_;

  std::atomic<std::uint64_t> ticket_seq_{0};
  std::atomic<std::uint64_t> sub_seq_{0};
};

}  // namespace

std::unique_ptr<Session> make_stomp_session(const ConnectorParams& params,
                                            EventHandler handler,
                                            bool suppress_client_heartbeats) {
  return std::make_unique<StompSession>(params, std::move(handler),
                                        suppress_client_heartbeats);
}

}  // namespace mqkit
