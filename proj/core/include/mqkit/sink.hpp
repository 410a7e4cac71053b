#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_set>

#include "mqkit/mq_api.hpp"

namespace mqkit {

struct SinkOptions {
  /// Message-ids remembered for duplicate suppression.
  std::size_t dedup_window = 100000;
  /// Flush open files every this many written records,
  std::size_t flush_every = 100;
  /// and at least this often regardless.
  int flush_interval_ms = 1000;
};

/// Terminal consumer of the pilot-log pipeline: subscribes with
/// client-individual ack, suppresses duplicate message-ids over a sliding
/// window, and appends each record as one JSON line to
/// <output>/<pilot_uuid>.log. Records without a usable pilot_uuid go to
/// <output>/_malformed.log and are still acked. A failed write throws out of
/// the delivery handler, which NACKs the message so the broker redelivers
/// it (and dead-letters it after repeated failures).
class LogSink {
 public:
  /// The client must outlive the sink.
  LogSink(MqClient& client, std::string query, std::filesystem::path output_dir,
          SinkOptions options = {});
  ~LogSink();

  LogSink(const LogSink&) = delete;
  LogSink& operator=(const LogSink&) = delete;

  void start();
  void stop();

  struct Stats {
    std::uint64_t written = 0;     // lines appended to per-pilot files
    std::uint64_t malformed = 0;   // lines quarantined
    std::uint64_t duplicates = 0;  // deliveries suppressed by dedup
  };
  Stats stats() const;

 private:
  void on_envelope(const MessageEnvelope& env);
  std::ofstream& open_file(const std::string& name);
  void remember(const std::string& id);
  void flush_all();
  void flusher_loop();

  MqClient& client_;
  std::string query_;
  std::filesystem::path output_dir_;
  SinkOptions options_;

  std::unique_ptr<Consumer> consumer_;

  mutable std::mutex mutex_;
  std::unordered_set<std::string> seen_;
  std::deque<std::string> seen_order_;
  std::map<std::string, std::ofstream> files_;
  std::size_t unflushed_ = 0;
  Stats stats_;

  std::mutex flusher_mutex_;
  std::condition_variable flusher_cv_;
  bool stopping_ = false;
  std::thread flusher_;
};

}  // namespace mqkit
