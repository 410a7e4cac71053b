#include "mqkit/supervisor.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace mqkit {

BackoffSchedule::BackoffSchedule(ReconnectPolicy policy)
    : policy_(policy),
      current_ms_(static_cast<double>(policy.initial_backoff_ms)),
      rng_(std::random_device{}()) {}

std::int64_t BackoffSchedule::next_delay_ms() {
  double base =
      std::min(current_ms_, static_cast<double>(policy_.max_backoff_ms));
  current_ms_ = std::min(current_ms_ * policy_.multiplier,
                         2.0 * static_cast<double>(policy_.max_backoff_ms));
  double delay = base;
  if (policy_.jitter) {
    std::uniform_real_distribution<double> factor(0.5, 1.5);
    delay *= factor(rng_);
  }
  return std::llround(delay);
}

void BackoffSchedule::reset() {
  current_ms_ = static_cast<double>(policy_.initial_backoff_ms);
}

SupervisedSession::SupervisedSession(Factory factory, ReconnectPolicy policy,
                                     EventHandler handler)
    : factory_(std::move(factory)),
      policy_(policy),
      handler_(std::move(handler)) {
  if (!handler_) handler_ = [](const ConnectorEvent&) {};
  std::uint64_t token = ++attempt_seq_;
  // Synchronous first connect: failures propagate to the caller, and no
  // supervisor thread exists yet to clean up after.
  current_ = factory_(make_handler(token));
  current_token_ = token;
  supervisor_ = std::thread([this] { supervisor_loop(); });
}

SupervisedSession::~SupervisedSession() {
  try {
    disconnect();
  } catch (...) {
  }
  if (supervisor_.joinable()) supervisor_.join();
}

EventHandler SupervisedSession::make_handler(std::uint64_t token) {
  return [this, token](const ConnectorEvent& event) { on_event(token, event); };
}

void SupervisedSession::on_event(std::uint64_t token,
                                 const ConnectorEvent& event) {
  if (event.type == ConnectorEvent::Type::Disconnected) {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      if (stop_) {
        final_event_emitted_ = true;
      } else {
        deaths_.insert(token);
      }
    }
    cv_.notify_all();
    handler_(event);
    return;
  }
  if (event.type == ConnectorEvent::Type::MessageArrived) {
    ConnectorEvent rewritten = event;
    {
      std::lock_guard<std::mutex> lock(mutex_);
      auto it = underlying_to_stable_.find(event.subscription_id);
      if (it != underlying_to_stable_.end()) {
        rewritten.subscription_id = it->second;
      }
    }
    handler_(rewritten);
    return;
  }
  handler_(event);
}

std::shared_ptr<Session> SupervisedSession::live_session() const {
  std::lock_guard<std::mutex> lock(mutex_);
  if (!current_) {
    throw Error(ErrorKind::NotConnected, "session is reconnecting");
  }
  return current_;
}

bool SupervisedSession::connected() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return current_ != nullptr && deaths_.count(current_token_) == 0 &&
         current_->connected();
}

void SupervisedSession::put(const std::string& wire_path,
                            const MessageEnvelope& env, bool confirm) {
  live_session()->put(wire_path, env, confirm);
}

std::uint64_t SupervisedSession::put_async(const std::string& wire_path,
                                           const MessageEnvelope& env) {
  std::shared_ptr<Session> session = live_session();
  std::uint64_t underlying = session->put_async(wire_path, env);
  std::lock_guard<std::mutex> lock(mutex_);
  std::uint64_t ticket = ++ticket_seq_;
  tickets_[ticket] = TicketRef{std::move(session), underlying};
  return ticket;
}

bool SupervisedSession::await_receipt(std::uint64_t ticket, int timeout_ms) {
  TicketRef ref;
  {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = tickets_.find(ticket);
    if (it == tickets_.end()) return false;  // issued by a session now gone
    ref = std::move(it->second);
    tickets_.erase(it);
  }
  return ref.session->await_receipt(ref.ticket, timeout_ms);
}

std::string SupervisedSession::subscribe(const SubscriptionSpec& spec) {
  std::string stable_id;
  std::shared_ptr<Session> session;
  {
    std::lock_guard<std::mutex> lock(mutex_);
    stable_id = "s-" + std::to_string(++sub_seq_);
    desired_[stable_id] = Desired{spec, ""};
    session = current_;
  }
  // During a gap the subscription waits in desired_; the supervisor issues
  // it on the next successful reconnect.
  if (session && session->connected()) {
    try {
      std::string underlying = session->subscribe(spec);
      std::lock_guard<std::mutex> lock(mutex_);
      auto it = desired_.find(stable_id);
      if (it != desired_.end()) {
        it->second.underlying_id = underlying;
        underlying_to_stable_[underlying] = stable_id;
      }
    } catch (const Error&) {
      // The session is on its way out; the reconnect path will retry.
    }
  }
  return stable_id;
}

void SupervisedSession::unsubscribe(const std::string& id) {
  std::shared_ptr<Session> session;
  std::string underlying;
  {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = desired_.find(id);
    if (it == desired_.end()) {
      throw Error(ErrorKind::UnknownToken, "unknown subscription '" + id + "'");
    }
    underlying = it->second.underlying_id;
    desired_.erase(it);
    if (!underlying.empty()) underlying_to_stable_.erase(underlying);
    session = current_;
  }
  if (session != nullptr && !underlying.empty()) {
    try {
      session->unsubscribe(underlying);
    } catch (const Error&) {
    }
  }
}

void SupervisedSession::disconnect() {
  {
    std::lock_guard<std::mutex> lock(mutex_);
    if (stop_) return;
    stop_ = true;
  }
  cv_.notify_all();
  if (supervisor_.joinable() &&
      supervisor_.get_id() != std::this_thread::get_id()) {
    supervisor_.join();
  }
  std::shared_ptr<Session> last;
  {
    std::lock_guard<std::mutex> lock(mutex_);
    last = std::move(current_);
    current_ = nullptr;
    tickets_.clear();
  }
  if (last) last->disconnect();
  bool synthesize;
  {
    std::lock_guard<std::mutex> lock(mutex_);
    synthesize = !final_event_emitted_;
    final_event_emitted_ = true;
  }
  if (synthesize) {
    // The underlying session had already spent its terminal event (or never
    // existed mid-gap); the supervised session still owes the caller one.
    ConnectorEvent event{ConnectorEvent::Type::Disconnected};
    event.reason = DisconnectReason::Requested;
    event.description = "supervisor stopped";
    handler_(event);
  }
}

void SupervisedSession::supervisor_loop() {
  std::unique_lock<std::mutex> lock(mutex_);
  for (;;) {
    cv_.wait(lock, [&] { return stop_ || deaths_.count(current_token_) != 0; });
    if (stop_) return;
    deaths_.erase(current_token_);
    std::shared_ptr<Session> dead = std::move(current_);
    current_ = nullptr;
    tickets_.clear();
    for (auto& [sid, desired] : desired_) desired.underlying_id.clear();
    underlying_to_stable_.clear();
    lock.unlock();
    if (dead) {
      // Destroying the old session here (never on its event thread) is the
      // whole point of this thread.
      try {
        dead->disconnect();
      } catch (...) {
      }
      dead.reset();
    }

    BackoffSchedule backoff(policy_);
    for (;;) {
      std::int64_t delay = backoff.next_delay_ms();
      lock.lock();
      if (cv_.wait_for(lock, std::chrono::milliseconds(delay),
                       [&] { return stop_; })) {
        return;
      }
      std::uint64_t token = ++attempt_seq_;
      auto desired_copy = desired_;
      lock.unlock();

      std::shared_ptr<Session> fresh;
      try {
        fresh = factory_(make_handler(token));
      } catch (const std::exception&) {
        continue;
      }
      std::vector<std::pair<std::string, std::string>> mapping;
      bool ok = true;
      for (const auto& [stable_id, desired] : desired_copy) {
        try {
          mapping.emplace_back(stable_id, fresh->subscribe(desired.spec));
        } catch (const std::exception&) {
          ok = false;
          break;
        }
      }
      if (!ok) {
        try {
          fresh->disconnect();
        } catch (...) {
        }
        continue;
      }

      lock.lock();
      for (auto& [stable_id, underlying] : mapping) {
        auto it = desired_.find(stable_id);
        if (it != desired_.end()) {
          it->second.underlying_id = underlying;
          underlying_to_stable_[underlying] = stable_id;
        }
      }
      current_ = std::move(fresh);
      current_token_ = token;
      break;  // back to the outer wait, which notices if `token` died already
    }
  }
}

}  // namespace mqkit
