#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include <json.hpp>

#include "mqkit/config.hpp"
#include "mqkit/connection_manager.hpp"
#include "mqkit/message.hpp"
#include "mqkit/spool.hpp"

namespace mqkit {

class MqClient;

enum class PutOutcome { Delivered, Spooled, SendFailed };

std::string_view to_string(PutOutcome outcome) noexcept;

struct ProducerOptions {
  /// Ask the broker for a receipt on every put and wait for it.
  bool confirm = true;
  /// Failover buffer; without one, a failed put reports SendFailed.
  std::shared_ptr<Spool> spool;
  /// Stamped into the envelope origin header; defaults to the hostname.
  std::string origin;
};

/// Sends JSON payloads to one resolved destination over the shared
/// connection. Thread-safe; concurrent puts serialize. When a spool is
/// attached, puts flow through the spool whenever it has a backlog, so
/// consumers observe per-destination order across outages.
class Producer {
 public:
  ~Producer();
  Producer(const Producer&) = delete;
  Producer& operator=(const Producer&) = delete;

  /// Wraps the payload in an envelope and sends it. Returns Delivered on a
  /// live send, Spooled when the entry went to the failover spool, and
  /// SendFailed when the session is down and no spool is attached. Throws
  /// InvalidJson for a discarded document, ProducerClosed after close, and
  /// DiskFull when the spool path fails too.
  PutOutcome put(const nlohmann::json& payload);

  /// Idempotent. Releases the connection token; the physical connection
  /// closes when the last user on the service releases.
  void close();

  /// Snapshot of the underlying session state (false after close).
  bool connected() const;

  const std::string& token() const { return token_; }
  const std::string& wire_path() const { return wire_path_; }
  const std::shared_ptr<Spool>& spool() const { return spool_; }

 private:
  friend class MqClient;
  Producer(MqClient& client, ConnectionManager::Acquired acquired,
           ProducerOptions options);

  void drain_loop();
  void kick_drain();

  MqClient& client_;
  std::shared_ptr<Session> session_;
  std::string token_;
  std::string wire_path_;
  bool confirm_;
  std::shared_ptr<Spool> spool_;
  std::string origin_;

  // Held by every live send and by the whole of a drain pass: the order
  // gate that keeps spooled backlog ahead of fresh sends.
  std::mutex order_mutex_;

  std::mutex drain_mutex_;
  std::condition_variable drain_cv_;
  bool drain_kick_ = false;
  bool closing_ = false;
  std::atomic<bool> closed_{false};
  std::uint64_t kick_registration_ = 0;
  std::thread drain_thread_;
};

enum class ConsumerMode { Callback, Buffered };

struct ConsumerOptions {
  ConsumerMode mode = ConsumerMode::Buffered;
  /// Required in Callback mode; runs serially on the session reader context
  /// and must not block past the heartbeat receive window.
  std::function<void(const MessageEnvelope&)> handler;
  std::size_t buffer_capacity = 10000;
  AckMode ack_mode = AckMode::ClientIndividual;
};

/// Receives envelopes from one destination, either pushed to a callback or
/// pulled from a bounded buffer. Thread-safe.
class Consumer {
 public:
  ~Consumer();
  Consumer(const Consumer&) = delete;
  Consumer& operator=(const Consumer&) = delete;

  /// Buffered mode only: next envelope in delivery order, or nullopt after
  /// the timeout. Throws WrongMode in Callback mode and ConsumerClosed
  /// after close.
  std::optional<MessageEnvelope> get(int timeout_ms);

  /// Envelopes dropped by the bounded buffer (oldest first) since creation.
  std::uint64_t dropped() const { return dropped_.load(); }

  /// Idempotent: unsubscribes and releases the connection token.
  void close();

  const std::string& token() const { return token_; }
  ConsumerMode mode() const { return mode_; }

 private:
  friend class MqClient;
  Consumer(MqClient& client, ConnectionManager::Acquired acquired,
           ConsumerOptions options);

  void on_message(const MessageEnvelope& env);

  MqClient& client_;
  std::shared_ptr<Session> session_;
  std::string token_;
  std::string subscription_id_;
  ConsumerMode mode_;
  std::function<void(const MessageEnvelope&)> handler_;
  std::size_t capacity_;

  std::mutex buffer_mutex_;
  std::condition_variable buffer_cv_;
  std::deque<MessageEnvelope> buffer_;
  std::atomic<std::uint64_t> dropped_{0};
  std::atomic<bool> closed_{false};
};

/// Factory front door: resolves pseudo-URLs against one config tree and
/// hands out producers and consumers sharing per-service connections.
/// Destroy producers and consumers before their client.
class MqClient {
 public:
  explicit MqClient(ConfigTree tree);
  ~MqClient();

  MqClient(const MqClient&) = delete;
  MqClient& operator=(const MqClient&) = delete;

  std::unique_ptr<Producer> create_producer(const std::string& query,
                                            ProducerOptions options = {});
  std::unique_ptr<Consumer> create_consumer(const std::string& query,
                                            ConsumerOptions options = {});

  ConnectionManager& manager() { return manager_; }
  const ConfigTree& tree() const { return tree_; }

 private:
  friend class Producer;
  friend class Consumer;

  std::uint64_t register_kick(const std::string& service_id,
                              std::function<void()> kick);
  void unregister_kick(std::uint64_t id);
  void on_service_event(const std::string& service_id,
                        const ConnectorEvent& event);

  ConfigTree tree_;

  std::mutex kicks_mutex_;
  std::map<std::uint64_t, std::pair<std::string, std::function<void()>>> kicks_;
  std::uint64_t kick_seq_ = 0;

  ConnectionManager manager_;  // last member: torn down first
};

}  // namespace mqkit
