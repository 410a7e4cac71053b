#include "mqkit/mq_api.hpp"

#include <unistd.h>

#include <chrono>
#include <utility>
#include <vector>

#include "mqkit/error.hpp"

namespace mqkit {

namespace {

std::string default_origin() {
  char host[256] = {0};
  if (::gethostname(host, sizeof(host) - 1) != 0) return "unknown-host";
  return host;
}

}  // namespace

std::string_view to_string(PutOutcome outcome) noexcept {
  switch (outcome) {
    case PutOutcome::Delivered: return "Delivered";
    case PutOutcome::Spooled: return "Spooled";
    case PutOutcome::SendFailed: return "SendFailed";
  }
  return "?";
}

// ---------------------------------------------------------------- Producer

Producer::Producer(MqClient& client, ConnectionManager::Acquired acquired,
                   ProducerOptions options)
    : client_(client),
      session_(std::move(acquired.session)),
      token_(std::move(acquired.token)),
      wire_path_(std::move(acquired.resolved.wire_path)),
      confirm_(options.confirm),
      spool_(std::move(options.spool)),
      origin_(options.origin.empty() ? default_origin() : std::move(options.origin)) {
  if (spool_) {
    const std::string service_id = acquired.resolved.service.service_id;
    kick_registration_ =
        client_.register_kick(service_id, [this] { kick_drain(); });
    drain_thread_ = std::thread([this] { drain_loop(); });
  }
}

Producer::~Producer() { close(); }

bool Producer::connected() const {
  // session_ is written once in the constructor and never replaced, so this
  // is safe against a concurrent close.
  return !closed_.load() && session_->connected();
}

PutOutcome Producer::put(const nlohmann::json& payload) {
  if (closed_.load()) {
    throw Error(ErrorKind::ProducerClosed, "put on closed producer");
  }
  if (payload.is_discarded()) {
    throw Error(ErrorKind::InvalidJson, "payload is not a valid JSON document");
  }
  MessageEnvelope env = make_envelope(payload, origin_, wire_path_);

  std::lock_guard<std::mutex> gate(order_mutex_);
  // A backlog means earlier messages are still queued on disk; route this
  // one behind them so the destination sees them in order.
  if (spool_ && !spool_->empty()) {
    spool_->append(wire_path_, env);
    kick_drain();
    return PutOutcome::Spooled;
  }

  bool live_failed = !session_->connected();
  if (!live_failed) {
    try {
      session_->put(wire_path_, env, confirm_);
      return PutOutcome::Delivered;
    } catch (const Error& e) {
      switch (e.kind()) {
        case ErrorKind::NotConnected:
        case ErrorKind::SendFailed:
        case ErrorKind::Timeout:
          live_failed = true;
          break;
        default:
          throw;
      }
    }
  }

  if (spool_) {
    spool_->append(wire_path_, env);  // DiskFull propagates: the lossy case
    kick_drain();
    return PutOutcome::Spooled;
  }
  return PutOutcome::SendFailed;
}

void Producer::kick_drain() {
  {
    std::lock_guard<std::mutex> lock(drain_mutex_);
    drain_kick_ = true;
  }
  drain_cv_.notify_all();
}

void Producer::drain_loop() {
  std::unique_lock<std::mutex> lock(drain_mutex_);
  while (!closing_) {
    drain_cv_.wait_for(lock, std::chrono::milliseconds(200),
                       [&] { return closing_ || drain_kick_; });
    drain_kick_ = false;
    if (closing_) break;
    if (spool_->empty() || !session_->connected()) continue;
    lock.unlock();
    {
      std::lock_guard<std::mutex> gate(order_mutex_);
      try {
        spool_->replay(*session_);
      } catch (const Error&) {
        // Broker went away again; the next kick or poll retries.
      }
    }
    lock.lock();
  }
}

void Producer::close() {
  bool expected = false;
  if (!closed_.compare_exchange_strong(expected, true)) return;
  {
    std::lock_guard<std::mutex> lock(drain_mutex_);
    closing_ = true;
  }
  drain_cv_.notify_all();
  if (drain_thread_.joinable()) drain_thread_.join();
  if (kick_registration_ != 0) client_.unregister_kick(kick_registration_);
  // The order gate waits out any put still in flight before the token goes.
  std::lock_guard<std::mutex> gate(order_mutex_);
  try {
    client_.manager_.release(token_);
  } catch (const Error&) {
    // stop_all() already voided the token.
  }
}

// ---------------------------------------------------------------- Consumer

Consumer::Consumer(MqClient& client, ConnectionManager::Acquired acquired,
                   ConsumerOptions options)
    : client_(client),
      session_(std::move(acquired.session)),
      token_(std::move(acquired.token)),
      mode_(options.mode),
      handler_(std::move(options.handler)),
      capacity_(options.buffer_capacity) {
  if (mode_ == ConsumerMode::Callback && !handler_) {
    throw Error(ErrorKind::WrongMode, "Callback mode requires a handler");
  }
  SubscriptionSpec spec;
  spec.wire_path = acquired.resolved.wire_path;
  spec.ack_mode = options.ack_mode;
  spec.handler = [this](const MessageEnvelope& env) { on_message(env); };
  subscription_id_ = session_->subscribe(spec);
}

Consumer::~Consumer() { close(); }

void Consumer::on_message(const MessageEnvelope& env) {
  if (closed_.load()) {
    // Not ours anymore; a throw turns into a NACK so the broker requeues.
    throw Error(ErrorKind::ConsumerClosed, "consumer closed");
  }
  if (mode_ == ConsumerMode::Callback) {
    handler_(env);
    return;
  }
  {
    std::lock_guard<std::mutex> lock(buffer_mutex_);
    buffer_.push_back(env);
    if (buffer_.size() > capacity_) {
      buffer_.pop_front();
      dropped_.fetch_add(1);
    }
  }
  buffer_cv_.notify_one();
}

std::optional<MessageEnvelope> Consumer::get(int timeout_ms) {
  if (mode_ != ConsumerMode::Buffered) {
    throw Error(ErrorKind::WrongMode, "get() requires a Buffered consumer");
  }
  std::unique_lock<std::mutex> lock(buffer_mutex_);
  if (closed_.load()) {
    throw Error(ErrorKind::ConsumerClosed, "get on closed consumer");
  }
  buffer_cv_.wait_for(lock, std::chrono::milliseconds(timeout_ms),
                      [&] { return closed_.load() || !buffer_.empty(); });
  if (closed_.load()) {
    throw Error(ErrorKind::ConsumerClosed, "get on closed consumer");
  }
  if (buffer_.empty()) return std::nullopt;
  MessageEnvelope env = std::move(buffer_.front());
  buffer_.pop_front();
  return env;
}

void Consumer::close() {
  bool expected = false;
  if (!closed_.compare_exchange_strong(expected, true)) return;
  buffer_cv_.notify_all();
  try {
    session_->unsubscribe(subscription_id_);
  } catch (...) {
    // Session already dead; the broker cleans up on connection close.
  }
  try {
    client_.manager_.release(token_);
  } catch (const Error&) {
  }
}

// ---------------------------------------------------------------- MqClient

MqClient::MqClient(ConfigTree tree)
    : tree_(std::move(tree)),
      manager_([this](const std::string& service_id, const ConnectorEvent& event) {
        on_service_event(service_id, event);
      }) {}

MqClient::~MqClient() { manager_.stop_all(); }

std::unique_ptr<Producer> MqClient::create_producer(const std::string& query,
                                                    ProducerOptions options) {
  auto acquired = manager_.acquire(tree_, query, Role::Producer);
  const std::string token = acquired.token;
  try {
    return std::unique_ptr<Producer>(
        new Producer(*this, std::move(acquired), std::move(options)));
  } catch (...) {
    try {
      manager_.release(token);
    } catch (...) {
    }
    throw;
  }
}

std::unique_ptr<Consumer> MqClient::create_consumer(const std::string& query,
                                                    ConsumerOptions options) {
  auto acquired = manager_.acquire(tree_, query, Role::Consumer);
  const std::string token = acquired.token;
  try {
    return std::unique_ptr<Consumer>(
        new Consumer(*this, std::move(acquired), std::move(options)));
  } catch (...) {
    try {
      manager_.release(token);
    } catch (...) {
    }
    throw;
  }
}

std::uint64_t MqClient::register_kick(const std::string& service_id,
                                      std::function<void()> kick) {
  std::lock_guard<std::mutex> lock(kicks_mutex_);
  const std::uint64_t id = ++kick_seq_;
  kicks_.emplace(id, std::make_pair(service_id, std::move(kick)));
  return id;
}

void MqClient::unregister_kick(std::uint64_t id) {
  std::lock_guard<std::mutex> lock(kicks_mutex_);
  kicks_.erase(id);
}

void MqClient::on_service_event(const std::string& service_id,
                                const ConnectorEvent& event) {
  if (event.type != ConnectorEvent::Type::Connected) return;
  std::vector<std::function<void()>> kicks;
  {
    std::lock_guard<std::mutex> lock(kicks_mutex_);
    for (const auto& [id, entry] : kicks_) {
      if (entry.first == service_id) kicks.push_back(entry.second);
    }
  }
  for (const auto& kick : kicks) kick();
}

}  // namespace mqkit
