// Frame and payload codec throughput. Bytes-per-second figures come from
// SetBytesProcessed, so regressions show up as MB/s drops.

#include <benchmark/benchmark.h>

#include <string>

#include <json.hpp>
#include <mqkit/message.hpp>
#include <mqkit/stomp.hpp>

using namespace mqkit;
using nlohmann::json;

namespace {

StompFrame send_frame(std::size_t body_bytes) {
  StompFrame frame(StompCommand::Send);
  frame.set_header("destination", "/queue/bench");
  frame.set_header("message-id", "0123456789abcdef0123456789abcdef");
  frame.set_header("timestamp-ms", "1700000000000");
  frame.set_header("content-type", "application/json");
  frame.body.assign(body_bytes, 'x');
  return frame;
}

void bm_encode_frame(benchmark::State& state) {
  const StompFrame frame = send_frame(static_cast<std::size_t>(state.range(0)));
  std::size_t bytes = 0;
  for (auto _ : state) {
    std::string wire = encode_frame(frame);
    bytes += wire.size();
    benchmark::DoNotOptimize(wire);
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(bytes));
}
BENCHMARK(bm_encode_frame)->Arg(64)->Arg(1024)->Arg(64 * 1024);

void bm_decode_frame(benchmark::State& state) {
  const std::string wire =
      encode_frame(send_frame(static_cast<std::size_t>(state.range(0))));
  std::size_t bytes = 0;
  for (auto _ : state) {
    StompDecoder decoder;
    auto frames = decoder.feed(wire);
    bytes += wire.size();
    benchmark::DoNotOptimize(frames);
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(bytes));
}
BENCHMARK(bm_decode_frame)->Arg(64)->Arg(1024)->Arg(64 * 1024);

// Worst case for the decoder: the stream arrives in small chunks, so frame
// boundaries land mid-header and mid-body.
void bm_decode_chunked(benchmark::State& state) {
  std::string wire;
  for (int i = 0; i < 100; ++i) wire += encode_frame(send_frame(256));
  const std::size_t chunk = static_cast<std::size_t>(state.range(0));
  std::size_t bytes = 0;
  for (auto _ : state) {
    StompDecoder decoder;
    std::size_t delivered = 0;
    for (std::size_t off = 0; off < wire.size(); off += chunk) {
      auto frames = decoder.feed(
          std::string_view(wire).substr(off, std::min(chunk, wire.size() - off)));
      delivered += frames.size();
    }
    if (delivered != 100) state.SkipWithError("frame loss");
    bytes += wire.size();
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(bytes));
}
BENCHMARK(bm_decode_chunked)->Arg(64)->Arg(512)->Arg(4096);

void bm_escape_header(benchmark::State& state) {
  const std::string value = "queue:with\\escapes\nand lines:everywhere";
  for (auto _ : state) {
    std::string escaped = escape_header(value);
    benchmark::DoNotOptimize(escaped);
  }
}
BENCHMARK(bm_escape_header);

json payload_of(std::size_t entries) {
  json doc = json::object();
  for (std::size_t i = 0; i < entries; ++i) {
    doc["key" + std::to_string(i)] =
        json{{"count", i}, {"label", "value-" + std::to_string(i)}};
  }
  return doc;
}

void bm_canonical_json(benchmark::State& state) {
  const json doc = payload_of(static_cast<std::size_t>(state.range(0)));
  std::size_t bytes = 0;
  for (auto _ : state) {
    std::string canonical = canonical_json(doc);
    bytes += canonical.size();
    benchmark::DoNotOptimize(canonical);
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(bytes));
}
BENCHMARK(bm_canonical_json)->Arg(4)->Arg(64);

void bm_message_round_trip(benchmark::State& state) {
  Clock fixed = [] { return 1700000000000LL; };
  const auto env = make_envelope(payload_of(8), "bench", "/queue/bench", fixed);
  for (auto _ : state) {
    EncodedMessage wire = encode_message(env);
    MessageEnvelope back = decode_message(wire.body, wire.headers, fixed);
    benchmark::DoNotOptimize(back);
  }
}
BENCHMARK(bm_message_round_trip);

}  // namespace

BENCHMARK_MAIN();
