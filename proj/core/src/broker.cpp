#include "mqkit/broker.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <future>
#include <optional>
#include <set>
#include <thread>

#include "mqkit/config.hpp"
#include "mqkit/connector.hpp"
#include "mqkit/stomp.hpp"

namespace mqkit {

namespace {

using json = nlohmann::json;

std::int64_t steady_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::int64_t wall_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

[[noreturn]] void schema_error(const std::string& path,
                               const std::string& message) {
  throw Error(ErrorKind::SchemaError, path + ": " + message);
}

void check_keys(const json& obj, const std::string& path,
                std::initializer_list<std::string_view> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      schema_error(path, "unknown key \"" + it.key() + "\"");
    }
  }
}

std::string get_string(const json& obj, const std::string& path,
                       const char* key, const std::string& fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_string()) schema_error(path + "." + key, "must be a string");
  return v.get<std::string>();
}

std::int64_t get_int(const json& obj, const std::string& path, const char* key,
                     std::int64_t fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer()) schema_error(path + "." + key, "must be an integer");
  return v.get<std::int64_t>();
}

std::string resolve_user_secret(const std::string& value,
                                const std::string& path) {
  if (value.rfind("env:", 0) != 0) return value;
  const char* resolved = std::getenv(value.substr(4).c_str());
  if (resolved == nullptr) {
    throw Error(ErrorKind::MissingSecret,
                path + ": environment variable '" + value.substr(4) +
                    "' is not set");
  }
  return resolved;
}

bool accepts_version_12(const std::string& accept_version) {
  size_t start = 0;
  while (start <= accept_version.size()) {
    size_t comma = accept_version.find(',', start);
    std::string_view token(accept_version);
    token = token.substr(start, (comma == std::string::npos ? accept_version.size() : comma) - start);
    while (!token.empty() && token.front() == ' ') token.remove_prefix(1);
    while (!token.empty() && token.back() == ' ') token.remove_suffix(1);
    if (token == "1.2") return true;
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return false;
}

// Headers the broker owns on MESSAGE frames; everything else relays through.
bool relayable_header(const std::string& key) {
  return key != "destination" && key != "subscription" && key != "ack" &&
         key != "receipt" && key != "transaction" && key != "content-length" &&
         key != "redelivered";
}

constexpr int kRedeliveryCap = 5;
constexpr std::int64_t kConnectDeadlineMs = 10000;

}  // namespace

BrokerOptions BrokerOptions::from_json(const json& section) {
  BrokerOptions o;
  if (!section.is_object()) schema_error("Broker", "must be an object");
  check_keys(section, "Broker",
             {"Host", "Port", "TlsPort", "Users", "CertUsers",
              "QueueDepthLimit", "HeartbeatCanSendMs", "HeartbeatWantRecvMs",
              "Tls"});
  o.host = get_string(section, "Broker", "Host", o.host);
  std::int64_t port = get_int(section, "Broker", "Port", o.port);
  if (port < 0 || port > 65535) schema_error("Broker.Port", "port out of range");
  o.port = static_cast<std::uint16_t>(port);
  if (section.contains("Users")) {
    const json& users = section.at("Users");
    if (!users.is_object()) schema_error("Broker.Users", "must be an object");
    for (auto it = users.begin(); it != users.end(); ++it) {
      if (!it.value().is_string()) {
        schema_error("Broker.Users." + it.key(), "must be a string");
      }
      o.users[it.key()] = resolve_user_secret(it.value().get<std::string>(),
                                              "Broker.Users." + it.key());
    }
  }
  if (section.contains("CertUsers")) {
    const json& cns = section.at("CertUsers");
    if (!cns.is_array()) schema_error("Broker.CertUsers", "must be an array");
    for (const json& cn : cns) {
      if (!cn.is_string()) schema_error("Broker.CertUsers", "entries must be strings");
      o.cert_users.push_back(cn.get<std::string>());
    }
  }
  std::int64_t depth = get_int(section, "Broker", "QueueDepthLimit",
                               static_cast<std::int64_t>(o.queue_depth_limit));
  if (depth < 1) schema_error("Broker.QueueDepthLimit", "must be >= 1");
  o.queue_depth_limit = static_cast<size_t>(depth);
  o.heartbeat_can_send_ms =
      get_int(section, "Broker", "HeartbeatCanSendMs", o.heartbeat_can_send_ms);
  o.heartbeat_want_recv_ms = get_int(section, "Broker", "HeartbeatWantRecvMs",
                                     o.heartbeat_want_recv_ms);
  if (o.heartbeat_can_send_ms < 0 || o.heartbeat_want_recv_ms < 0) {
    schema_error("Broker", "heartbeat intervals must be >= 0");
  }
  if (section.contains("Tls")) {
    const json& tls = section.at("Tls");
    if (!tls.is_object()) schema_error("Broker.Tls", "must be an object");
    check_keys(tls, "Broker.Tls", {"CertPath", "KeyPath", "ClientCaPath"});
    o.enable_tls = true;
    o.tls.cert_path = get_string(tls, "Broker.Tls", "CertPath", "");
    o.tls.key_path = get_string(tls, "Broker.Tls", "KeyPath", "");
    o.tls.client_ca_path = get_string(tls, "Broker.Tls", "ClientCaPath", "");
    if (o.tls.cert_path.empty() || o.tls.key_path.empty()) {
      schema_error("Broker.Tls", "CertPath and KeyPath are required");
    }
    std::int64_t tls_port = get_int(section, "Broker", "TlsPort", o.tls_port);
    if (tls_port < 0 || tls_port > 65535) {
      schema_error("Broker.TlsPort", "port out of range");
    }
    o.tls_port = static_cast<std::uint16_t>(tls_port);
  } else if (section.contains("TlsPort")) {
    schema_error("Broker.TlsPort", "requires a Broker.Tls section");
  }
  return o;
}

class Broker::Impl {
 public:
  explicit Impl(BrokerOptions options) : opts_(std::move(options)) {
    if (!opts_.log_sink) {
      opts_.log_sink = [](std::string_view line) {
        std::fprintf(stderr, "%.*s\n", static_cast<int>(line.size()),
                     line.data());
      };
    }
  }

  ~Impl() { stop(); }

  void start() {
    listener_ = std::make_unique<TcpListener>(opts_.host, opts_.port);
    port_ = listener_->port();
    if (opts_.enable_tls) {
      tls_server_ = std::make_unique<TlsServer>(opts_.tls);
      tls_listener_ = std::make_unique<TcpListener>(opts_.host, opts_.tls_port);
      tls_port_ = tls_listener_->port();
    }
    {
      std::lock_guard<std::mutex> lock(cmd_mutex_);
      core_running_ = true;
    }
    core_thread_ = std::thread([this] { core_loop(); });
    accept_thread_ = std::thread([this] { accept_loop(*listener_, false); });
    if (opts_.enable_tls) {
      tls_accept_thread_ =
          std::thread([this] { accept_loop(*tls_listener_, true); });
    }
    started_ = true;
  }

  void stop() {
    if (!started_ || stopped_) return;
    stopped_ = true;
    accept_stopping_.store(true);
    listener_->shutdown();
    if (tls_listener_) tls_listener_->shutdown();
    accept_thread_.join();
    if (tls_accept_thread_.joinable()) tls_accept_thread_.join();
    post([this] {
      for (auto& [id, session] : sessions_) teardown(session, "broker-stop");
    });
    {
      std::lock_guard<std::mutex> lock(cmd_mutex_);
      stopping_ = true;
    }
    cmd_cv_.notify_one();
    core_thread_.join();
  }

  std::uint16_t port() const { return port_; }
  std::uint16_t tls_port() const { return tls_port_; }

  void suppress_heartbeats(bool on) { suppress_heartbeats_.store(on); }

  BrokerStats stats() const {
    BrokerStats out;
    auto* self = const_cast<Impl*>(this);
    if (!self->post_and_wait([&] { out = self->compute_stats(); })) {
      out = final_stats_;
    }
    return out;
  }

  std::uint64_t queue_depth(const std::string& queue_name) const {
    std::uint64_t depth = 0;
    auto* self = const_cast<Impl*>(this);
    self->post_and_wait([&] {
      auto it = self->queues_.find(queue_name);
      if (it != self->queues_.end()) depth = it->second.pending.size();
    });
    return depth;
  }

 private:
  struct MessageRecord {
    std::uint64_t seq = 0;
    std::vector<std::pair<std::string, std::string>> headers;
    std::string body;
    int redeliveries = 0;
  };

  struct Unacked {
    MessageRecord rec;
    std::string queue;
    std::string sub_id;
  };

  struct QueueDest {
    struct QSub {
      std::uint64_t session;
      std::string sub_id;
      AckMode mode;
    };
    std::deque<MessageRecord> pending;
    std::vector<QSub> subs;
    size_t cursor = 0;
  };

  struct TopicDest {
    struct TSub {
      std::uint64_t session;
      std::string sub_id;
    };
    std::vector<TSub> subs;
  };

  struct Sub {
    DestinationKind kind = DestinationKind::Queue;
    std::string name;
    AckMode mode = AckMode::Auto;
  };

  struct SessionState {
    std::uint64_t id = 0;
    std::shared_ptr<ByteStream> stream;
    std::thread reader;
    std::string transport;
    std::optional<std::string> peer_cn;
    std::atomic<std::int64_t> last_received{0};  // reader-written, core-read
    std::int64_t last_sent = 0;
    std::int64_t opened_at = 0;
    bool connected = false;
    bool closing = false;
    std::string principal;
    HeartbeatPlan plan;
    std::map<std::string, Sub> subs;
    std::map<std::string, Unacked> unacked;
    std::map<std::string, int> outstanding;  // sub id -> in-flight deliveries
  };

  // ---- threading plumbing ----------------------------------------------

  void post(std::function<void()> fn) {
    {
      std::lock_guard<std::mutex> lock(cmd_mutex_);
      commands_.push_back(std::move(fn));
    }
    cmd_cv_.notify_one();
  }

  // Runs fn on the core thread and waits. False once the core has exited.
  // Must not be called from the core thread itself.
  bool post_and_wait(const std::function<void()>& fn) {
    std::promise<void> done;
    {
      std::lock_guard<std::mutex> lock(cmd_mutex_);
      if (!core_running_) return false;
      commands_.push_back([&] {
        fn();
        done.set_value();
      });
    }
    cmd_cv_.notify_one();
    done.get_future().wait();
    return true;
  }

  void core_loop() {
    for (;;) {
      std::function<void()> fn;
      {
        std::unique_lock<std::mutex> lock(cmd_mutex_);
        cmd_cv_.wait_for(lock, std::chrono::milliseconds(20),
                         [&] { return !commands_.empty() || stopping_; });
        if (!commands_.empty()) {
          fn = std::move(commands_.front());
          commands_.pop_front();
        } else if (stopping_ && sessions_.empty()) {
          final_stats_ = compute_stats();
          core_running_ = false;
          break;
        }
      }
      if (fn) {
        fn();
        continue;
      }
      tick();
    }
  }

  void accept_loop(TcpListener& listener, bool tls) {
    for (;;) {
      auto stream = listener.accept(200);
      if (accept_stopping_.load()) return;
      if (!stream) continue;
      if (tls) {
        try {
          stream = tls_server_->wrap(std::move(stream), 5000);
        } catch (const std::exception&) {
          continue;  // handshake failures are the peer's problem
        }
      }
      auto shared = std::shared_ptr<ByteStream>(std::move(stream));
      post([this, shared, tls] { register_session(shared, tls); });
    }
  }

  void register_session(std::shared_ptr<ByteStream> stream, bool tls) {
    if (stopping_after_accept_join()) return;
    std::uint64_t id = ++session_seq_;
    auto [it, inserted] = sessions_.try_emplace(id);
    SessionState& s = it->second;
    s.id = id;
    s.stream = std::move(stream);
    s.transport = tls ? "tls" : "tcp";
    s.peer_cn = peer_common_name(*s.stream);
    s.opened_at = steady_ms();
    s.last_received.store(s.opened_at);
    s.last_sent = s.opened_at;
    log_event({{"event", "session-open"},
               {"session", id},
               {"transport", s.transport}});
    s.reader = std::thread([this, id, &s] { reader_loop(id, s); });
  }

  bool stopping_after_accept_join() {
    std::lock_guard<std::mutex> lock(cmd_mutex_);
    return stopping_;
  }

  void reader_loop(std::uint64_t id, SessionState& s) {
    // Keeps the stream alive independently of the session map entry; the
    // entry is only erased after this thread is joined.
    std::shared_ptr<ByteStream> stream = s.stream;
    StompDecoder decoder;
    char buf[16384];
    for (;;) {
      if (!stream->poll_readable(100)) continue;
      ReadResult r;
      try {
        r = stream->read_some(buf, sizeof(buf));
      } catch (const std::exception&) {
        post([this, id] { teardown_by_id(id, "read-error"); });
        break;
      }
      if (r.status == ReadResult::Status::WouldBlock) continue;
      if (r.status == ReadResult::Status::Eof) {
        post([this, id] { teardown_by_id(id, "peer-close"); });
        break;
      }
      s.last_received.store(steady_ms());
      std::vector<StompFrame> frames;
      try {
        frames = decoder.feed(std::string_view(buf, r.bytes));
      } catch (const Error& e) {
        std::string detail = e.what();
        post([this, id, detail] { error_close_by_id(id, detail); });
        break;
      }
      for (auto& frame : frames) {
        if (frame.command == StompCommand::Heartbeat) continue;
        auto shared = std::make_shared<StompFrame>(std::move(frame));
        post([this, id, shared] { handle_frame(id, *shared); });
      }
    }
    post([this, id] { reap_session(id); });
  }

  void reap_session(std::uint64_t id) {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) return;
    teardown(it->second, "peer-close");
    it->second.reader.join();
    sessions_.erase(it);
  }

  // ---- timers -----------------------------------------------------------

  void tick() {
    std::int64_t now = steady_ms();
    for (auto& [id, s] : sessions_) {
      if (s.closing) continue;
      if (!s.connected) {
        if (now - s.opened_at > kConnectDeadlineMs) {
          teardown(s, "connect-timeout");
        }
        continue;
      }
      if (s.plan.send_interval_ms > 0 && !suppress_heartbeats_.load() &&
          now - s.last_sent >= s.plan.send_interval_ms) {
        write_raw(s, "\n");
      }
      if (s.plan.recv_timeout_ms > 0 &&
          now - s.last_received.load() > 2 * s.plan.recv_timeout_ms) {
        teardown(s, "heartbeat-timeout");
      }
    }
  }

  // ---- wire helpers -----------------------------------------------------

  bool write_raw(SessionState& s, const std::string& bytes) {
    if (s.closing) return false;
    try {
      s.stream->write_all(bytes);
      s.last_sent = steady_ms();
      return true;
    } catch (const std::exception&) {
      teardown(s, "write-failed");
      return false;
    }
  }

  bool write_frame(SessionState& s, const StompFrame& frame) {
    return write_raw(s, encode_frame(frame));
  }

  void honor_receipt(SessionState& s, const StompFrame& cause) {
    const std::string* receipt = cause.header("receipt");
    if (receipt == nullptr) return;
    StompFrame f(StompCommand::Receipt);
    f.set_header("receipt-id", *receipt);
    write_frame(s, f);
  }

  void error_close(SessionState& s, const std::string& message,
                   const StompFrame* cause) {
    if (s.closing) return;
    StompFrame f(StompCommand::Error);
    f.set_header("message", message);
    if (cause != nullptr) {
      if (const std::string* receipt = cause->header("receipt")) {
        f.set_header("receipt-id", *receipt);
      }
    }
    f.set_header("content-type", "text/plain");
    f.body = message;
    write_frame(s, f);
    teardown(s, "protocol-error");
  }

  void error_close_by_id(std::uint64_t id, const std::string& message) {
    auto it = sessions_.find(id);
    if (it != sessions_.end()) error_close(it->second, message, nullptr);
  }

  void teardown_by_id(std::uint64_t id, const std::string& reason) {
    auto it = sessions_.find(id);
    if (it != sessions_.end()) teardown(it->second, reason);
  }

  // Requeues unacked work, removes subscriptions, logs, and shuts the
  // stream down (which makes the reader thread exit). The map entry stays
  // until reap_session joins the reader.
  void teardown(SessionState& s, const std::string& reason) {
    if (s.closing) return;
    s.closing = true;
    s.connected = false;

    std::vector<Unacked> unacked;
    unacked.reserve(s.unacked.size());
    for (auto& [ack_id, u] : s.unacked) unacked.push_back(std::move(u));
    s.unacked.clear();
    size_t requeued = unacked.size();
    // Descending seq, so pushing each at the head restores ascending order.
    std::sort(unacked.begin(), unacked.end(),
              [](const Unacked& a, const Unacked& b) {
                return a.rec.seq > b.rec.seq;
              });
    std::set<std::string> affected;
    for (auto& u : unacked) {
      affected.insert(u.queue);
      requeue_or_dlq(std::move(u.rec), u.queue, affected);
    }

    for (auto& [sub_id, sub] : s.subs) {
      if (sub.kind == DestinationKind::Queue) {
        auto qit = queues_.find(sub.name);
        if (qit != queues_.end()) remove_queue_sub(qit->second, s.id, sub_id);
      } else {
        auto tit = topics_.find(sub.name);
        if (tit != topics_.end()) {
          auto& subs = tit->second.subs;
          subs.erase(std::remove_if(subs.begin(), subs.end(),
                                    [&](const TopicDest::TSub& t) {
                                      return t.session == s.id &&
                                             t.sub_id == sub_id;
                                    }),
                     subs.end());
        }
      }
    }
    s.subs.clear();
    s.outstanding.clear();

    log_event({{"event", "session-close"},
               {"session", s.id},
               {"reason", reason},
               {"requeued", requeued}});
    s.stream->shutdown();
    for (const std::string& queue : affected) dispatch(queue);
  }

  // ---- destination state --------------------------------------------

  void remove_queue_sub(QueueDest& q, std::uint64_t session,
                        const std::string& sub_id) {
    for (size_t i = 0; i < q.subs.size(); ++i) {
      if (q.subs[i].session == session && q.subs[i].sub_id == sub_id) {
        remove_queue_sub_at(q, i);
        return;
      }
    }
  }

  void remove_queue_sub_at(QueueDest& q, size_t index) {
    q.subs.erase(q.subs.begin() + static_cast<ptrdiff_t>(index));
    if (q.subs.empty()) {
      q.cursor = 0;
      return;
    }
    if (index < q.cursor) --q.cursor;
    q.cursor %= q.subs.size();
  }

  void requeue_or_dlq(MessageRecord rec, const std::string& queue,
                      std::set<std::string>& affected) {
    if (rec.redeliveries >= kRedeliveryCap) {
      ++dead_lettered_;
      rec.redeliveries = 0;
      std::string dlq = "DLQ." + queue;
      queues_[dlq].pending.push_back(std::move(rec));
      affected.insert(dlq);
    } else {
      ++rec.redeliveries;
      queues_[queue].pending.push_front(std::move(rec));
      affected.insert(queue);
    }
  }

  StompFrame build_message(const MessageRecord& rec,
                           const std::string& dest_path,
                           const std::string& sub_id) {
    StompFrame m(StompCommand::Message);
    m.headers = rec.headers;
    m.set_header("destination", dest_path);
    m.set_header("subscription", sub_id);
    if (rec.redeliveries > 0) m.set_header("redelivered", "true");
    m.body = rec.body;
    return m;
  }

  // Delivers while the subscriber at the cursor is ready. A client-individual
  // subscriber with its window full stops the queue until it acks: this is
  // what makes round-robin counts structurally equal.
  void dispatch(const std::string& name) {
    auto qit = queues_.find(name);
    if (qit == queues_.end()) return;
    QueueDest& q = qit->second;
    for (;;) {
      if (q.pending.empty() || q.subs.empty()) return;
      q.cursor %= q.subs.size();
      QueueDest::QSub target = q.subs[q.cursor];
      auto sit = sessions_.find(target.session);
      if (sit == sessions_.end() || sit->second.closing ||
          !sit->second.connected) {
        remove_queue_sub_at(q, q.cursor);
        continue;
      }
      SessionState& sess = sit->second;
      if (target.mode == AckMode::ClientIndividual &&
          sess.outstanding[target.sub_id] >= 1) {
        return;
      }
      MessageRecord rec = std::move(q.pending.front());
      q.pending.pop_front();
      StompFrame msg = build_message(rec, "/queue/" + name, target.sub_id);
      if (target.mode == AckMode::ClientIndividual) {
        std::string ack_id = "ack-" + std::to_string(++ack_seq_);
        msg.set_header("ack", ack_id);
        ++sess.outstanding[target.sub_id];
        sess.unacked.emplace(ack_id,
                             Unacked{std::move(rec), name, target.sub_id});
      } else {
        ++delivered_acked_;
      }
      q.cursor = (q.cursor + 1) % q.subs.size();
      write_frame(sess, msg);
    }
  }

  // ---- frame handling -------------------------------------------------

  void handle_frame(std::uint64_t id, const StompFrame& frame) {
    auto it = sessions_.find(id);
    if (it == sessions_.end() || it->second.closing) return;
    SessionState& s = it->second;
    try {
      dispatch_frame(s, frame);
    } catch (const Error& e) {
      error_close(s, e.what(), &frame);
    } catch (const std::exception& e) {
      error_close(s, std::string("internal error: ") + e.what(), &frame);
    }
  }

  void dispatch_frame(SessionState& s, const StompFrame& frame) {
    if (!s.connected) {
      if (frame.command == StompCommand::Connect ||
          frame.command == StompCommand::Stomp) {
        handle_connect(s, frame);
      } else {
        error_close(s, "not connected: first frame must be CONNECT", &frame);
      }
      return;
    }
    switch (frame.command) {
      case StompCommand::Connect:
      case StompCommand::Stomp:
        error_close(s, "already connected", &frame);
        return;
      case StompCommand::Send:
        handle_send(s, frame);
        return;
      case StompCommand::Subscribe:
        handle_subscribe(s, frame);
        return;
      case StompCommand::Unsubscribe:
        handle_unsubscribe(s, frame);
        return;
      case StompCommand::Ack:
        handle_ack_nack(s, frame, false);
        return;
      case StompCommand::Nack:
        handle_ack_nack(s, frame, true);
        return;
      case StompCommand::Begin:
      case StompCommand::Commit:
      case StompCommand::Abort:
        error_close(s, "transactions unsupported", &frame);
        return;
      case StompCommand::Disconnect:
        honor_receipt(s, frame);
        teardown(s, "requested");
        return;
      default:
        error_close(s,
                    "client may not send " +
                        std::string(to_string(frame.command)) + " frames",
                    &frame);
        return;
    }
  }

  void handle_connect(SessionState& s, const StompFrame& frame) {
    const std::string* accept_version = frame.header("accept-version");
    if (accept_version == nullptr || !accepts_version_12(*accept_version)) {
      error_close(s, "version mismatch: this broker speaks STOMP 1.2", &frame);
      return;
    }
    const std::string* login = frame.header("login");
    const std::string* passcode = frame.header("passcode");
    if (login != nullptr) {
      auto uit = opts_.users.find(*login);
      if (uit == opts_.users.end() || passcode == nullptr ||
          *passcode != uit->second) {
        error_close(s, "authentication failed", &frame);
        return;
      }
      s.principal = *login;
    } else if (s.peer_cn &&
               std::find(opts_.cert_users.begin(), opts_.cert_users.end(),
                         *s.peer_cn) != opts_.cert_users.end()) {
      s.principal = *s.peer_cn;
    } else {
      error_close(s, "authentication failed", &frame);
      return;
    }
    HeartbeatDecl client{0, 0};
    if (const std::string* hb = frame.header("heart-beat")) {
      client = parse_heartbeat(*hb);
    }
    HeartbeatDecl mine{opts_.heartbeat_can_send_ms,
                       opts_.heartbeat_want_recv_ms};
    // negotiate_heartbeat is written from the caller's perspective, so the
    // broker passes itself first.
    s.plan = negotiate_heartbeat(mine, client);
    StompFrame connected(StompCommand::Connected);
    connected.set_header("version", "1.2");
    connected.set_header("heart-beat", format_heartbeat(mine));
    connected.set_header("session", "session-" + std::to_string(s.id));
    if (!write_frame(s, connected)) return;
    s.connected = true;
    s.last_received.store(steady_ms());
    log_event({{"event", "connected"},
               {"session", s.id},
               {"principal", s.principal}});
  }

  struct Target {
    DestinationKind kind;
    std::string name;
  };

  std::optional<Target> parse_path(const std::string& path) {
    if (path.rfind("/queue/", 0) == 0 && path.size() > 7) {
      return Target{DestinationKind::Queue, path.substr(7)};
    }
    if (path.rfind("/topic/", 0) == 0 && path.size() > 7) {
      return Target{DestinationKind::Topic, path.substr(7)};
    }
    return std::nullopt;
  }

  void handle_send(SessionState& s, const StompFrame& frame) {
    if (frame.header("transaction") != nullptr) {
      error_close(s, "transactions unsupported", &frame);
      return;
    }
    const std::string* dest = frame.header("destination");
    if (dest == nullptr) {
      error_close(s, "SEND requires a destination header", &frame);
      return;
    }
    auto target = parse_path(*dest);
    if (!target) {
      error_close(s,
                  "unknown destination '" + *dest +
                      "': expected /queue/<name> or /topic/<name>",
                  &frame);
      return;
    }

    std::vector<std::pair<std::string, std::string>> headers;
    for (const auto& [k, v] : frame.headers) {
      if (relayable_header(k)) headers.emplace_back(k, v);
    }
    std::uint64_t seq = ++message_seq_;
    bool has_message_id = false;
    for (const auto& [k, v] : headers) has_message_id |= (k == "message-id");
    if (!has_message_id) {
      headers.emplace_back("message-id", "b-" + std::to_string(seq));
    }

    if (target->kind == DestinationKind::Queue) {
      QueueDest& q = queues_[target->name];
      if (q.pending.size() >= opts_.queue_depth_limit) {
        ++depth_dropped_;
        error_close(s,
                    "queue '" + target->name + "' is at its depth limit (" +
                        std::to_string(opts_.queue_depth_limit) + ")",
                    &frame);
        return;
      }
      ++published_;
      q.pending.push_back(MessageRecord{seq, std::move(headers), frame.body, 0});
      honor_receipt(s, frame);
      dispatch(target->name);
    } else {
      ++topic_published_;
      auto tit = topics_.find(target->name);
      if (tit == topics_.end() || tit->second.subs.empty()) {
        ++topic_dropped_;
      } else {
        MessageRecord rec{seq, std::move(headers), frame.body, 0};
        auto subs = tit->second.subs;  // fan-out over a stable copy
        for (const auto& tsub : subs) {
          auto sit = sessions_.find(tsub.session);
          if (sit == sessions_.end() || sit->second.closing ||
              !sit->second.connected) {
            continue;
          }
          StompFrame m =
              build_message(rec, "/topic/" + target->name, tsub.sub_id);
          if (write_frame(sit->second, m)) ++topic_deliveries_;
        }
      }
      honor_receipt(s, frame);
    }
  }

  void handle_subscribe(SessionState& s, const StompFrame& frame) {
    const std::string* id = frame.header("id");
    const std::string* dest = frame.header("destination");
    if (id == nullptr || id->empty()) {
      error_close(s, "SUBSCRIBE requires an id header", &frame);
      return;
    }
    if (dest == nullptr) {
      error_close(s, "SUBSCRIBE requires a destination header", &frame);
      return;
    }
    if (s.subs.count(*id) != 0) {
      error_close(s, "subscription id '" + *id + "' already in use", &frame);
      return;
    }
    auto target = parse_path(*dest);
    if (!target) {
      error_close(s,
                  "unknown destination '" + *dest +
                      "': expected /queue/<name> or /topic/<name>",
                  &frame);
      return;
    }
    AckMode mode = AckMode::Auto;
    if (const std::string* ack = frame.header("ack")) {
      if (*ack == "auto") {
        mode = AckMode::Auto;
      } else if (*ack == "client-individual") {
        mode = AckMode::ClientIndividual;
      } else if (*ack == "client") {
        error_close(s, "cumulative ack mode unsupported", &frame);
        return;
      } else {
        error_close(s, "unknown ack mode '" + *ack + "'", &frame);
        return;
      }
    }
    if (target->kind == DestinationKind::Queue) {
      queues_[target->name].subs.push_back(
          QueueDest::QSub{s.id, *id, mode});
      s.subs[*id] = Sub{DestinationKind::Queue, target->name, mode};
      s.outstanding[*id] = 0;
      honor_receipt(s, frame);
      dispatch(target->name);
    } else {
      // Topic deliveries are fire-and-forget; they never carry ack headers.
      topics_[target->name].subs.push_back(TopicDest::TSub{s.id, *id});
      s.subs[*id] = Sub{DestinationKind::Topic, target->name, AckMode::Auto};
      honor_receipt(s, frame);
    }
  }

  void handle_unsubscribe(SessionState& s, const StompFrame& frame) {
    const std::string* id = frame.header("id");
    if (id == nullptr) {
      error_close(s, "UNSUBSCRIBE requires an id header", &frame);
      return;
    }
    auto sub_it = s.subs.find(*id);
    if (sub_it == s.subs.end()) {
      error_close(s, "unknown subscription '" + *id + "'", &frame);
      return;
    }
    Sub sub = sub_it->second;
    s.subs.erase(sub_it);
    s.outstanding.erase(*id);
    std::set<std::string> affected;
    if (sub.kind == DestinationKind::Queue) {
      auto qit = queues_.find(sub.name);
      if (qit != queues_.end()) remove_queue_sub(qit->second, s.id, *id);
      // In-flight deliveries for the dropped subscription go back to the
      // head, oldest first.
      std::vector<Unacked> orphans;
      for (auto it = s.unacked.begin(); it != s.unacked.end();) {
        if (it->second.sub_id == *id) {
          orphans.push_back(std::move(it->second));
          it = s.unacked.erase(it);
        } else {
          ++it;
        }
      }
      std::sort(orphans.begin(), orphans.end(),
                [](const Unacked& a, const Unacked& b) {
                  return a.rec.seq > b.rec.seq;
                });
      for (auto& u : orphans) {
        affected.insert(u.queue);
        requeue_or_dlq(std::move(u.rec), u.queue, affected);
      }
    } else {
      auto tit = topics_.find(sub.name);
      if (tit != topics_.end()) {
        auto& subs = tit->second.subs;
        subs.erase(std::remove_if(subs.begin(), subs.end(),
                                  [&](const TopicDest::TSub& t) {
                                    return t.session == s.id &&
                                           t.sub_id == *id;
                                  }),
                   subs.end());
      }
    }
    honor_receipt(s, frame);
    for (const std::string& queue : affected) dispatch(queue);
  }

  void handle_ack_nack(SessionState& s, const StompFrame& frame, bool nack) {
    const std::string* id = frame.header("id");
    if (id == nullptr) {
      error_close(s, "ACK/NACK requires an id header", &frame);
      return;
    }
    auto it = s.unacked.find(*id);
    if (it == s.unacked.end()) {
      error_close(s, "unknown ack id '" + *id + "'", &frame);
      return;
    }
    Unacked u = std::move(it->second);
    s.unacked.erase(it);
    auto oit = s.outstanding.find(u.sub_id);
    if (oit != s.outstanding.end() && oit->second > 0) --oit->second;
    std::set<std::string> affected{u.queue};
    if (nack) {
      requeue_or_dlq(std::move(u.rec), u.queue, affected);
    } else {
      ++delivered_acked_;
    }
    honor_receipt(s, frame);
    for (const std::string& queue : affected) dispatch(queue);
  }

  // ---- bookkeeping ------------------------------------------------------

  BrokerStats compute_stats() {
    BrokerStats st;
    st.published = published_;
    st.delivered_acked = delivered_acked_;
    st.dead_lettered = dead_lettered_;
    st.depth_dropped = depth_dropped_;
    st.topic_published = topic_published_;
    st.topic_deliveries = topic_deliveries_;
    st.topic_dropped = topic_dropped_;
    for (const auto& [name, q] : queues_) {
      if (name.rfind("DLQ.", 0) == 0) {
        st.dlq_depth += q.pending.size();
      } else {
        st.pending += q.pending.size();
      }
    }
    for (const auto& [id, s] : sessions_) {
      ++st.open_sessions;
      if (s.connected && !s.closing) ++st.connected_sessions;
      st.unacked += s.unacked.size();
    }
    return st;
  }

  void log_event(json event) {
    event["ts"] = wall_ms();
    opts_.log_sink(event.dump());
  }

  BrokerOptions opts_;

  std::unique_ptr<TcpListener> listener_;
  std::unique_ptr<TcpListener> tls_listener_;
  std::unique_ptr<TlsServer> tls_server_;
  std::uint16_t port_ = 0;
  std::uint16_t tls_port_ = 0;

  std::thread core_thread_;
  std::thread accept_thread_;
  std::thread tls_accept_thread_;
  std::atomic<bool> accept_stopping_{false};
  bool started_ = false;
  bool stopped_ = false;

  std::mutex cmd_mutex_;
  std::condition_variable cmd_cv_;
  std::deque<std::function<void()>> commands_;
  bool stopping_ = false;
  bool core_running_ = false;

  std::atomic<bool> suppress_heartbeats_{false};

  // Core-thread-owned state.
  std::map<std::uint64_t, SessionState> sessions_;
  std::map<std::string, QueueDest> queues_;
  std::map<std::string, TopicDest> topics_;
  std::uint64_t session_seq_ = 0;
  std::uint64_t message_seq_ = 0;
  std::uint64_t ack_seq_ = 0;
  std::uint64_t published_ = 0;
  std::uint64_t delivered_acked_ = 0;
  std::uint64_t dead_lettered_ = 0;
  std::uint64_t depth_dropped_ = 0;
  std::uint64_t topic_published_ = 0;
  std::uint64_t topic_deliveries_ = 0;
  std::uint64_t topic_dropped_ = 0;
  BrokerStats final_stats_;
};

Broker::Broker(BrokerOptions options)
    : impl_(std::make_unique<Impl>(std::move(options))) {}

Broker::~Broker() = default;

void Broker::start() { impl_->start(); }
void Broker::stop() { impl_->stop(); }
std::uint16_t Broker::port() const { return impl_->port(); }
std::uint16_t Broker::tls_port() const { return impl_->tls_port(); }
void Broker::suppress_heartbeats(bool on) { impl_->suppress_heartbeats(on); }
BrokerStats Broker::stats() const { return impl_->stats(); }
std::uint64_t Broker::queue_depth(const std::string& queue_name) const {
  return impl_->queue_depth(queue_name);
}

}  // namespace mqkit
