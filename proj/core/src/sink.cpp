#include "mqkit/sink.hpp"

#include <chrono>
#include <utility>

#include "mqkit/error.hpp"
#include "mqkit/pilot_log.hpp"

namespace mqkit {

LogSink::LogSink(MqClient& client, std::string query,
                 std::filesystem::path output_dir, SinkOptions options)
    : client_(client),
      query_(std::move(query)),
      output_dir_(std::move(output_dir)),
      options_(options) {}

LogSink::~LogSink() { stop(); }

void LogSink::start() {
  if (consumer_) return;
  std::error_code ec;
  std::filesystem::create_directories(output_dir_, ec);
  if (ec) {
    throw Error(ErrorKind::IoError,
                "cannot create sink output directory: " + ec.message());
  }
  ConsumerOptions options;
  options.mode = ConsumerMode::Callback;
  options.ack_mode = AckMode::ClientIndividual;
  options.handler = [this](const MessageEnvelope& env) { on_envelope(env); };
  consumer_ = client_.create_consumer(query_, std::move(options));
  flusher_ = std::thread([this] { flusher_loop(); });
}

void LogSink::stop() {
  if (!consumer_) return;
  consumer_->close();
  {
    std::lock_guard<std::mutex> lock(flusher_mutex_);
    stopping_ = true;
  }
  flusher_cv_.notify_all();
  if (flusher_.joinable()) flusher_.join();
  std::lock_guard<std::mutex> lock(mutex_);
  flush_all();
  files_.clear();
  consumer_.reset();
  {
    std::lock_guard<std::mutex> flock(flusher_mutex_);
    stopping_ = false;
  }
}

std::ofstream& LogSink::open_file(const std::string& name) {
  auto it = files_.find(name);
  if (it != files_.end()) return it->second;
  std::ofstream out(output_dir_ / name, std::ios::app);
  if (!out) {
    throw Error(ErrorKind::IoError, "cannot open sink file " + name);
  }
  return files_.emplace(name, std::move(out)).first->second;
}

void LogSink::remember(const std::string& id) {
  seen_.insert(id);
  seen_order_.push_back(id);
  while (seen_order_.size() > options_.dedup_window) {
    seen_.erase(seen_order_.front());
    seen_order_.pop_front();
  }
}

void LogSink::flush_all() {
  for (auto& [name, out] : files_) out.flush();
  unflushed_ = 0;
}

void LogSink::flusher_loop() {
  std::unique_lock<std::mutex> lock(flusher_mutex_);
  while (!stopping_) {
    flusher_cv_.wait_for(lock,
                         std::chrono::milliseconds(options_.flush_interval_ms));
    if (stopping_) break;
    std::lock_guard<std::mutex> state(mutex_);
    flush_all();
  }
}

void LogSink::on_envelope(const MessageEnvelope& env) {
  std::lock_guard<std::mutex> lock(mutex_);
  const std::string& id = env.message_id();
  if (seen_.count(id) != 0) {
    ++stats_.duplicates;
    return;  // normal return acks the duplicate away
  }

  std::string file = "_malformed.log";
  bool well_formed = false;
  if (env.payload.is_object()) {
    auto it = env.payload.find("pilot_uuid");
    if (it != env.payload.end() && it->is_string() &&
        is_uuid(it->get<std::string>())) {
      file = it->get<std::string>() + ".log";
      well_formed = true;
    }
  }

  std::ofstream& out = open_file(file);
  out << env.payload.dump() << '\n';
  if (!out) {
    // Drop the stream so the next attempt reopens it, and NACK this
    // delivery by throwing.
    files_.erase(file);
    throw Error(ErrorKind::IoError, "sink write failed for " + file);
  }

  remember(id);
  if (well_formed) {
    ++stats_.written;
  } else {
    ++stats_.malformed;
  }
  if (++unflushed_ >= options_.flush_every) flush_all();
}

LogSink::Stats LogSink::stats() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return stats_;
}

}  // namespace mqkit
