#pragma once

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <string>
#include <vector>

#include "mqkit/connector.hpp"
#include "mqkit/message.hpp"

namespace mqkit {

/// One recovered spool entry.
struct SpoolRecord {
  std::uint64_t seq = 0;
  std::uint64_t enqueued_at_ms = 0;
  std::string wire_path;
  std::string body;  // canonical envelope record bytes
};

struct SpoolCounters {
  std::uint64_t appended = 0;
  std::uint64_t replayed = 0;
  std::uint64_t dropped_corrupt = 0;
};

/// Result of scanning one segment file: every record whose checksum
/// verifies, up to the first torn or corrupt one. `clean` is false when the
/// file has bytes past the last valid record.
struct SegmentScan {
  std::vector<SpoolRecord> records;
  std::uint64_t valid_bytes = 0;
  bool clean = true;
};

SegmentScan scan_segment(const std::filesystem::path& file);

/// Disk-backed FIFO buffer for messages the broker could not take.
///
/// Record format (little-endian): magic "MQSP" | version u8=1 | seq u64 |
/// enqueued-at-ms u64 | path-len u16 | path | body-len u32 | body |
/// crc32c u32 over all preceding bytes of the record. Segments are named
/// spool-<first seq, 20 digits>.dat and rotate at segment_bytes; the sidecar
/// cursor.json holds {"last_replayed_seq": n} and is replaced atomically
/// after each receipt-confirmed replay batch.
///
/// Construction recovers existing state: segments are scanned in order, a
/// torn or corrupt record and everything after it in that segment are
/// dropped (counted in dropped_corrupt), and the cursor resumes at the first
/// unsent entry.
///
/// All public methods are serialized by one internal mutex; replay holds it
/// across its network round-trips, so appends wait for the active batch.
class Spool {
 public:
  static constexpr std::uint64_t kDefaultSegmentBytes = 64ull << 20;
  static constexpr std::size_t kReplayBatch = 100;

  explicit Spool(std::filesystem::path directory,
                 std::uint64_t segment_bytes = kDefaultSegmentBytes,
                 Clock clock = system_clock());
  ~Spool();

  Spool(const Spool&) = delete;
  Spool& operator=(const Spool&) = delete;

  /// Appends one entry, flushed to the operating system before returning.
  /// Returns the entry's seq. Throws DiskFull when the volume is out of
  /// space (the partial tail is cut back off) and IoError otherwise.
  std::uint64_t append(const std::string& wire_path,
                       const MessageEnvelope& env);

  /// Same, for callers that already hold canonical envelope record bytes.
  std::uint64_t append_raw(const std::string& wire_path,
                           const std::string& body);

  /// Sends every entry from the cursor onward in seq order, in
  /// receipt-confirmed batches of kReplayBatch. The cursor advances (and is
  /// persisted) only after a whole batch confirms; fully replayed segments
  /// are deleted. Returns the number replayed. Throws SendFailed on an
  /// unconfirmed batch, leaving the cursor at the failure point.
  std::size_t replay(Session& session);

  /// Entries at or past the cursor, i.e. still waiting for replay.
  std::uint64_t depth() const;
  bool empty() const { return depth() == 0; }

  /// Seq of the next unsent entry.
  std::uint64_t cursor() const;
  /// Highest seq ever appended (0 when none).
  std::uint64_t max_seq() const;
  SpoolCounters counters() const;
  const std::filesystem::path& directory() const { return dir_; }

 private:
  struct Segment {
    std::filesystem::path path;
    std::uint64_t first_seq = 0;
    std::uint64_t last_seq = 0;
    std::uint64_t valid_bytes = 0;
  };

  void recover();
  void open_active_segment();
  void write_record(const std::string& buf);
  void persist_cursor();
  void drop_replayed_segments();

  std::filesystem::path dir_;
  std::uint64_t segment_bytes_;
  Clock clock_;

  mutable std::mutex mutex_;
  std::vector<Segment> segments_;
  int active_fd_ = -1;
  std::uint64_t next_seq_ = 1;
  std::uint64_t cursor_ = 1;
  SpoolCounters counters_;
};

}  // namespace mqkit
