#include "mqkit/spool.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <system_error>
#include <utility>

#include <json.hpp>

#include "mqkit/crc32c.hpp"
#include "mqkit/error.hpp"

namespace mqkit {

namespace {

// Fixed part of a record before the variable-length path: magic(4) +
// version(1) + seq(8) + enqueued-at(8) + path-len(2).
constexpr std::size_t kHeaderBytes = 23;
constexpr char kMagic[4] = {'M', 'Q', 'S', 'P'};
constexpr unsigned char kVersion = 1;
constexpr const char* kCursorFile = "cursor.json";

void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xFF));
  s.push_back(static_cast<char>((v >> 8) & 0xFF));
}

void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& s, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::string encode_record(std::uint64_t seq, std::uint64_t enqueued_at_ms,
                          std::string_view path, std::string_view body) {
  std::string s;
  s.reserve(kHeaderBytes + path.size() + 4 + body.size() + 4);
  s.append(kMagic, 4);
  s.push_back(static_cast<char>(kVersion));
  put_u64(s, seq);
  put_u64(s, enqueued_at_ms);
  put_u16(s, static_cast<std::uint16_t>(path.size()));
  s.append(path);
  put_u32(s, static_cast<std::uint32_t>(body.size()));
  s.append(body);
  put_u32(s, crc32c(s.data(), s.size()));
  return s;
}

std::string segment_name(std::uint64_t first_seq) {
  char name[40];
  std::snprintf(name, sizeof(name), "spool-%020llu.dat",
                static_cast<unsigned long long>(first_seq));
  return name;
}

}  // namespace

SegmentScan scan_segment(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) {
    throw Error(ErrorKind::IoError, "cannot open spool segment " + file.string());
  }
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(data.data());
  const std::size_t size = data.size();

  SegmentScan out;
  std::size_t off = 0;
  std::uint64_t prev_seq = 0;
  for (;;) {
    if (size - off < kHeaderBytes) break;
    if (std::memcmp(p + off, kMagic, 4) != 0 || p[off + 4] != kVersion) break;
    const std::uint64_t seq = get_u64(p + off + 5);
    const std::uint64_t enqueued = get_u64(p + off + 13);
    const std::uint16_t path_len = get_u16(p + off + 21);
    if (size - off < kHeaderBytes + path_len + 4) break;
    const std::uint32_t body_len = get_u32(p + off + kHeaderBytes + path_len);
    const std::uint64_t total =
        kHeaderBytes + path_len + 4 + static_cast<std::uint64_t>(body_len) + 4;
    if (size - off < total) break;
    const std::uint32_t stored = get_u32(p + off + total - 4);
    if (crc32c(p + off, total - 4) != stored) break;
    if (prev_seq != 0 && seq <= prev_seq) break;

    SpoolRecord rec;
    rec.seq = seq;
    rec.enqueued_at_ms = enqueued;
    rec.wire_path.assign(data, off + kHeaderBytes, path_len);
    rec.body.assign(data, off + kHeaderBytes + path_len + 4, body_len);
    out.records.push_back(std::move(rec));
    prev_seq = seq;
    off += total;
  }
  out.valid_bytes = off;
  out.clean = (off == size);
  return out;
}

Spool::Spool(std::filesystem::path directory, std::uint64_t segment_bytes,
             Clock clock)
    : dir_(std::move(directory)),
      segment_bytes_(segment_bytes),
      clock_(std::move(clock)) {
  recover();
}

Spool::~Spool() {
  if (active_fd_ >= 0) ::close(active_fd_);
}

void Spool::recover() {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec) {
    throw Error(ErrorKind::IoError,
                "cannot create spool directory " + dir_.string() + ": " + ec.message());
  }

  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir_)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name.size() == 30 && name.rfind("spool-", 0) == 0 &&
        name.compare(26, 4, ".dat") == 0 &&
        name.find_first_not_of("0123456789", 6) == 26) {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());

  for (const auto& file : files) {
    SegmentScan scan = scan_segment(file);
    if (!scan.clean) ++counters_.dropped_corrupt;
    if (scan.records.empty()) continue;
    Segment seg;
    seg.path = file;
    seg.first_seq = scan.records.front().seq;
    seg.last_seq = scan.records.back().seq;
    seg.valid_bytes = scan.valid_bytes;
    segments_.push_back(std::move(seg));
  }
  if (!segments_.empty()) next_seq_ = segments_.back().last_seq + 1;

  const auto cursor_path = dir_ / kCursorFile;
  if (std::filesystem::exists(cursor_path, ec)) {
    try {
      std::ifstream in(cursor_path);
      auto doc = nlohmann::json::parse(in);
      cursor_ = doc.at("last_replayed_seq").get<std::uint64_t>() + 1;
    } catch (...) {
      // Unreadable cursor: replay from the start. Duplicates are fine,
      // losses are not.
      cursor_ = 1;
    }
  }
  // A stale cursor past every stored record must not swallow new appends.
  next_seq_ = std::max(next_seq_, cursor_);
}

void Spool::open_active_segment() {
  const bool have_room = !segments_.empty() &&
                         segments_.back().last_seq >= segments_.back().first_seq &&
                         segments_.back().valid_bytes < segment_bytes_;
  if (active_fd_ >= 0 && have_room) return;
  if (active_fd_ >= 0) {
    ::close(active_fd_);
    active_fd_ = -1;
  }

  if (!have_room) {
    Segment seg;
    seg.path = dir_ / segment_name(next_seq_);
    seg.first_seq = next_seq_;
    seg.last_seq = 0;  // no record yet
    seg.valid_bytes = 0;
    int fd = ::open(seg.path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd < 0) {
      throw Error(ErrorKind::IoError,
                  "cannot create spool segment " + seg.path.string() + ": " +
                      std::strerror(errno));
    }
    // The name may collide with a wholly corrupt leftover; start clean.
    if (::ftruncate(fd, 0) != 0) {
      ::close(fd);
      throw Error(ErrorKind::IoError, "cannot truncate spool segment");
    }
    segments_.push_back(std::move(seg));
    active_fd_ = fd;
    return;
  }

  Segment& seg = segments_.back();
  int fd = ::open(seg.path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) {
    throw Error(ErrorKind::IoError, "cannot open spool segment " + seg.path.string() +
                                        ": " + std::strerror(errno));
  }
  // Cut any torn tail found at recovery so appends continue a clean prefix.
  if (::ftruncate(fd, static_cast<off_t>(seg.valid_bytes)) != 0) {
    ::close(fd);
    throw Error(ErrorKind::IoError, "cannot truncate spool segment");
  }
  active_fd_ = fd;
}

void Spool::write_record(const std::string& buf) {
  std::size_t written = 0;
  while (written < buf.size()) {
    ssize_t n = ::write(active_fd_, buf.data() + written, buf.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      const int err = errno;
      // Cut the partial record back off so the segment stays a clean prefix.
      [[maybe_unused]] int rc =
          ::ftruncate(active_fd_, static_cast<off_t>(segments_.back().valid_bytes));
      if (err == ENOSPC || err == EDQUOT) {
        throw Error(ErrorKind::DiskFull, "spool volume out of space");
      }
      throw Error(ErrorKind::IoError,
                  std::string("spool write failed: ") + std::strerror(err));
    }
    written += static_cast<std::size_t>(n);
  }
}

std::uint64_t Spool::append(const std::string& wire_path,
                            const MessageEnvelope& env) {
  return append_raw(wire_path, encode_envelope_record(env));
}

std::uint64_t Spool::append_raw(const std::string& wire_path,
                                const std::string& body) {
  if (wire_path.size() > 0xFFFF) {
    throw Error(ErrorKind::ProtocolViolation, "wire path too long for spool record");
  }
  std::lock_guard<std::mutex> lock(mutex_);
  open_active_segment();
  const std::uint64_t seq = next_seq_;
  const std::string buf =
      encode_record(seq, static_cast<std::uint64_t>(clock_()), wire_path, body);
  write_record(buf);
  Segment& seg = segments_.back();
  if (seg.last_seq < seg.first_seq) seg.first_seq = seq;
  seg.last_seq = seq;
  seg.valid_bytes += buf.size();
  ++next_seq_;
  ++counters_.appended;
  return seq;
}

void Spool::persist_cursor() {
  const auto tmp = dir_ / (std::string(kCursorFile) + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << nlohmann::json{{"last_replayed_seq", cursor_ - 1}}.dump();
    out.flush();
    if (!out) {
      throw Error(ErrorKind::IoError, "cannot write spool cursor file");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, dir_ / kCursorFile, ec);
  if (ec) {
    throw Error(ErrorKind::IoError, "cannot replace spool cursor file: " + ec.message());
  }
}

void Spool::drop_replayed_segments() {
  while (!segments_.empty()) {
    const Segment& front = segments_.front();
    if (front.last_seq < front.first_seq) break;  // open segment with no records
    if (front.last_seq >= cursor_) break;
    if (segments_.size() == 1 && active_fd_ >= 0) {
      ::close(active_fd_);
      active_fd_ = -1;
    }
    std::error_code ec;
    std::filesystem::remove(front.path, ec);
    segments_.erase(segments_.begin());
  }
}

std::size_t Spool::replay(Session& session) {
  std::lock_guard<std::mutex> lock(mutex_);
  std::size_t total = 0;

  for (;;) {
    // Locate the first segment holding records at or past the cursor.
    std::size_t seg_i = segments_.size();
    for (std::size_t i = 0; i < segments_.size(); ++i) {
      const Segment& s = segments_[i];
      if (s.last_seq >= s.first_seq && s.last_seq >= cursor_) {
        seg_i = i;
        break;
      }
    }
    if (seg_i == segments_.size()) break;

    // Collect one batch, possibly spanning segment boundaries.
    std::vector<SpoolRecord> batch;
    for (std::size_t i = seg_i; i < segments_.size() && batch.size() < kReplayBatch;
         ++i) {
      const Segment& s = segments_[i];
      if (s.last_seq < s.first_seq) continue;
      SegmentScan scan = scan_segment(s.path);
      for (auto& rec : scan.records) {
        if (rec.seq < cursor_) continue;
        batch.push_back(std::move(rec));
        if (batch.size() >= kReplayBatch) break;
      }
    }
    if (batch.empty()) break;

    std::vector<std::uint64_t> tickets;
    tickets.reserve(batch.size());
    for (const auto& rec : batch) {
      MessageEnvelope env;
      try {
        env = decode_envelope_record(rec.body);
      } catch (const Error&) {
        // Checksum-valid but undecodable: count it and move on rather than
        // wedging the cursor forever.
        ++counters_.dropped_corrupt;
        continue;
      }
      tickets.push_back(session.put_async(rec.wire_path, env));
    }
    for (std::uint64_t ticket : tickets) {
      if (!session.await_receipt(ticket, kReceiptTimeoutMs)) {
        throw Error(ErrorKind::SendFailed,
                    "spool replay batch unconfirmed starting at seq " +
                        std::to_string(batch.front().seq));
      }
    }

    cursor_ = batch.back().seq + 1;
    counters_.replayed += tickets.size();
    total += tickets.size();
    persist_cursor();
    drop_replayed_segments();
  }
  return total;
}

std::uint64_t Spool::depth() const {
  std::lock_guard<std::mutex> lock(mutex_);
  std::uint64_t n = 0;
  for (const auto& s : segments_) {
    if (s.last_seq < s.first_seq) continue;
    const std::uint64_t from = std::max(cursor_, s.first_seq);
    if (s.last_seq >= from) n += s.last_seq - from + 1;
  }
  return n;
}

std::uint64_t Spool::cursor() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return cursor_;
}

std::uint64_t Spool::max_seq() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return next_seq_ - 1;
}

SpoolCounters Spool::counters() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return counters_;
}

}  // namespace mqkit
