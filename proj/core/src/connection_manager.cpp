#include "mqkit/connection_manager.hpp"

#include <utility>

#include "mqkit/error.hpp"
#include "mqkit/supervisor.hpp"

namespace mqkit {

std::string_view to_string(Role role) noexcept {
  return role == Role::Producer ? "producer" : "consumer";
}

struct ConnectionManager::Record {
  enum class State { Opening, Live, Draining };
  State state = State::Opening;
  std::shared_ptr<Session> session;  // set once state reaches Live
  std::size_t user_count = 0;
};

ConnectionManager::ConnectionManager(ServiceEventHandler handler)
    : handler_(std::move(handler)) {}

ConnectionManager::~ConnectionManager() { stop_all(); }

std::shared_ptr<Session> ConnectionManager::open_session(
    const MQServiceConfig& service) {
  const std::string service_id = service.service_id;
  EventHandler forward;
  if (handler_) {
    auto handler = handler_;
    forward = [handler, service_id](const ConnectorEvent& event) {
      handler(service_id, event);
    };
  }
  SupervisedSession::Factory factory = [service](EventHandler h) {
    return ConnectorRegistry::global().create(service, std::move(h));
  };
  return std::make_shared<SupervisedSession>(std::move(factory),
                                             service.reconnect,
                                             std::move(forward));
}

std::string ConnectionManager::issue_token(const ResolvedDestination& resolved,
                                           Role role) {
  std::string token = resolved.spec.service_id;
  token += '/';
  token += to_string(resolved.spec.kind);
  token += '/';
  token += resolved.spec.name;
  token += '/';
  token += to_string(role);
  token += std::to_string(++token_seq_);
  return token;
}

ConnectionManager::Acquired ConnectionManager::acquire(const ConfigTree& tree,
                                                       const std::string& query,
                                                       Role role) {
  ResolvedDestination resolved = resolve(tree, query);
  const std::string& service_id = resolved.service.service_id;

  std::unique_lock<std::mutex> lock(mutex_);
  for (;;) {
    auto it = records_.find(service_id);
    if (it == records_.end()) {
      // Claim the key so nobody else opens concurrently, then connect
      // outside the lock.
      auto rec = std::make_shared<Record>();
      records_.emplace(service_id, rec);
      lock.unlock();
      std::shared_ptr<Session> session;
      try {
        session = open_session(resolved.service);
      } catch (...) {
        lock.lock();
        records_.erase(service_id);
        cv_.notify_all();
        throw;
      }
      lock.lock();
      if (rec->state == Record::State::Draining) {
        // stop_all() voided the record while we were connecting. Close the
        // fresh session rather than hand out a connection nobody tracks.
        records_.erase(service_id);
        lock.unlock();
        try {
          session->disconnect();
        } catch (...) {
        }
        session.reset();
        lock.lock();
        cv_.notify_all();
        continue;
      }
      rec->session = session;
      rec->state = Record::State::Live;
      rec->user_count = 1;
      std::string token = issue_token(resolved, role);
      token_service_.emplace(token, service_id);
      cv_.notify_all();
      return {std::move(session), std::move(token), std::move(resolved)};
    }

    auto rec = it->second;
    if (rec->state == Record::State::Live) {
      ++rec->user_count;
      std::string token = issue_token(resolved, role);
      token_service_.emplace(token, service_id);
      return {rec->session, std::move(token), std::move(resolved)};
    }

    // Opening by another thread, or Draining. Wait for the map to change;
    // the drainer erases the record when the socket is really closed, so we
    // can never be handed a session that is going away.
    cv_.wait(lock);
  }
}

ReleaseResult ConnectionManager::release(const std::string& token) {
  std::unique_lock<std::mutex> lock(mutex_);
  auto tok = token_service_.find(token);
  if (tok == token_service_.end()) {
    throw Error(ErrorKind::UnknownToken, "unknown or already released token: " + token);
  }
  const std::string service_id = tok->second;
  token_service_.erase(tok);

  auto it = records_.find(service_id);
  if (it == records_.end()) {
    // stop_all() already tore the connection down after this token was
    // issued; nothing left to close.
    return ReleaseResult::Closed;
  }
  auto rec = it->second;
  if (rec->user_count > 0) --rec->user_count;
  if (rec->user_count > 0) return ReleaseResult::StillShared;
  if (rec->state != Record::State::Live) return ReleaseResult::Closed;

  // Last user: drain. Keep the record in the map while the socket closes so
  // a racing acquire waits instead of opening a second connection.
  rec->state = Record::State::Draining;
  auto session = std::move(rec->session);
  lock.unlock();
  try {
    session->disconnect();
  } catch (...) {
  }
  session.reset();
  lock.lock();
  auto again = records_.find(service_id);
  if (again != records_.end() && again->second == rec) records_.erase(again);
  cv_.notify_all();
  return ReleaseResult::Closed;
}

std::vector<ConnectionInfo> ConnectionManager::active_connections() const {
  std::lock_guard<std::mutex> lock(mutex_);
  std::vector<ConnectionInfo> out;
  out.reserve(records_.size());
  for (const auto& [service_id, rec] : records_) {
    ConnectionInfo info;
    info.service_id = service_id;
    info.user_count = rec->user_count;
    info.connected = rec->session && rec->session->connected();
    out.push_back(std::move(info));
  }
  return out;
}

std::size_t ConnectionManager::stop_all() {
  std::unique_lock<std::mutex> lock(mutex_);
  std::vector<std::shared_ptr<Record>> draining;
  std::vector<std::shared_ptr<Session>> sessions;
  for (auto& [service_id, rec] : records_) {
    if (rec->state == Record::State::Live) {
      rec->state = Record::State::Draining;
      rec->user_count = 0;
      sessions.push_back(std::move(rec->session));
      draining.push_back(rec);
    } else if (rec->state == Record::State::Opening) {
      // The opener notices Draining when it comes back and closes the
      // session it just made.
      rec->state = Record::State::Draining;
    }
  }
  token_service_.clear();
  lock.unlock();

  for (auto& session : sessions) {
    try {
      session->disconnect();
    } catch (...) {
    }
  }
  sessions.clear();

  lock.lock();
  for (auto it = records_.begin(); it != records_.end();) {
    bool ours = false;
    for (const auto& rec : draining) {
      if (rec == it->second) {
        ours = true;
        break;
      }
    }
    it = ours ? records_.erase(it) : ++it;
  }
  cv_.notify_all();
  return draining.size();
}

}  // namespace mqkit
