#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <set>
#include <string>
#include <thread>

#include "mqkit/connector.hpp"

namespace mqkit {

/// Exponential backoff with optional full jitter: each delay is the base
/// sequence value (initial x multiplier^n, capped) scaled by a uniform factor
/// in [0.5, 1.5]. With jitter off the base sequence comes back exactly.
class BackoffSchedule {
 public:
  explicit BackoffSchedule(ReconnectPolicy policy);

  std::int64_t next_delay_ms();
  void reset();

 private:
  ReconnectPolicy policy_;
  double current_ms_;
  std::mt19937_64 rng_;
};

/// Keeps one logical session alive across broker restarts.
///
/// The initial connect happens synchronously in the constructor and its
/// errors propagate. Afterwards a supervisor thread owns replacement: when
/// the underlying session reports an unsolicited Disconnected, the supervisor
/// (never the event thread) destroys it, waits out the backoff schedule,
/// reconnects, and re-issues every desired subscription.
///
/// Subscription ids returned here are stable across reconnects. Events
/// forward to the caller's handler with MessageArrived ids rewritten to the
/// stable form; expect one Disconnected per gap and a final
/// Disconnected(requested) from disconnect().
class SupervisedSession final : public Session {
 public:
  using Factory = std::function<std::unique_ptr<Session>(EventHandler)>;

  SupervisedSession(Factory factory, ReconnectPolicy policy,
                    EventHandler handler);
  ~SupervisedSession() override;

  bool connected() const override;
  void put(const std::string& wire_path, const MessageEnvelope& env,
           bool confirm) override;
  std::uint64_t put_async(const std::string& wire_path,
                          const MessageEnvelope& env) override;
  bool await_receipt(std::uint64_t ticket, int timeout_ms) override;
  std::string subscribe(const SubscriptionSpec& spec) override;
  void unsubscribe(const std::string& id) override;

  /// Stops the reconnect loop (even mid-backoff) and closes the live session.
  void disconnect() override;

 private:
  void on_event(std::uint64_t token, const ConnectorEvent& event);
  void supervisor_loop();
  std::shared_ptr<Session> live_session() const;
  EventHandler make_handler(std::uint64_t token);

  Factory factory_;
  ReconnectPolicy policy_;
  EventHandler handler_;

  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::shared_ptr<Session> current_;
  // Each connect attempt gets a token; a Disconnected event records its
  // token here, so a death of attempt N can never retire attempt N+1.
  std::uint64_t current_token_ = 0;
  std::uint64_t attempt_seq_ = 0;
  std::set<std::uint64_t> deaths_;
  bool stop_ = false;
  bool final_event_emitted_ = false;

  struct Desired {
    SubscriptionSpec spec;
    std::string underlying_id;  // empty while disconnected
  };
  std::map<std::string, Desired> desired_;           // stable id -> spec
  std::map<std::string, std::string> underlying_to_stable_;
  std::uint64_t sub_seq_ = 0;

  struct TicketRef {
    std::shared_ptr<Session> session;
    std::uint64_t ticket;
  };
  std::map<std::uint64_t, TicketRef> tickets_;
  std::uint64_t ticket_seq_ = 0;

  std::thread supervisor_;
};

}  // namespace mqkit
