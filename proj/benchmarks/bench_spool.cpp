// Failover spool costs: append (the per-put overhead a producer pays while
// the broker is down), recovery scan, and replay into a no-op session.

#include <benchmark/benchmark.h>

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include <json.hpp>
#include <mqkit/connector.hpp>
#include <mqkit/message.hpp>
#include <mqkit/spool.hpp>

using namespace mqkit;
using nlohmann::json;

namespace {

class ScratchDir {
 public:
  ScratchDir() {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() /
            ("mqkit-bench-" + std::to_string(rng()));
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

class NullSession : public Session {
 public:
  bool connected() const override { return true; }
  void put(const std::string&, const MessageEnvelope&, bool) override {}
  std::uint64_t put_async(const std::string&, const MessageEnvelope& env) override {
    benchmark::DoNotOptimize(env.payload);
    return ++tickets_;
  }
  bool await_receipt(std::uint64_t, int) override { return true; }
  std::string subscribe(const SubscriptionSpec&) override { return "bench-sub"; }
  void unsubscribe(const std::string&) override {}
  void disconnect() override {}

 private:
  std::uint64_t tickets_ = 0;
};

MessageEnvelope bench_envelope(std::size_t body_bytes) {
  Clock fixed = [] { return 1700000000000LL; };
  return make_envelope(json{{"data", std::string(body_bytes, 'x')}}, "bench",
                       "/queue/bench", fixed);
}

void bm_spool_append(benchmark::State& state) {
  ScratchDir dir;
  Spool spool(dir.path());
  const auto env = bench_envelope(static_cast<std::size_t>(state.range(0)));
  const std::string record = encode_envelope_record(env);
  std::size_t bytes = 0;
  for (auto _ : state) {
    spool.append_raw("/queue/bench", record);
    bytes += record.size();
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(bytes));
  state.counters["appended"] =
      static_cast<double>(spool.counters().appended);
}
BENCHMARK(bm_spool_append)->Arg(128)->Arg(1024)->Arg(16 * 1024);

// Cold-start cost: how long opening a spool directory with a populated
// segment takes (the full segment is scanned and validated).
void bm_spool_recovery_scan(benchmark::State& state) {
  ScratchDir dir;
  const auto env = bench_envelope(256);
  const std::string record = encode_envelope_record(env);
  {
    Spool spool(dir.path());
    for (int i = 0; i < state.range(0); ++i) {
      spool.append_raw("/queue/bench", record);
    }
  }
  std::uint64_t depth = 0;
  for (auto _ : state) {
    Spool spool(dir.path());
    depth = spool.depth();
    benchmark::DoNotOptimize(depth);
  }
  if (depth != static_cast<std::uint64_t>(state.range(0))) {
    state.SkipWithError("recovery lost records");
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(bm_spool_recovery_scan)->Arg(1000)->Arg(10000);

void bm_spool_replay(benchmark::State& state) {
  const auto env = bench_envelope(256);
  const std::string record = encode_envelope_record(env);
  for (auto _ : state) {
    state.PauseTiming();
    ScratchDir dir;
    Spool spool(dir.path());
    for (int i = 0; i < state.range(0); ++i) {
      spool.append_raw("/queue/bench", record);
    }
    NullSession session;
    state.ResumeTiming();
    const std::size_t replayed = spool.replay(session);
    if (replayed != static_cast<std::size_t>(state.range(0))) {
      state.SkipWithError("incomplete replay");
    }
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(bm_spool_replay)->Arg(1000)->Arg(10000);

void bm_envelope_record_round_trip(benchmark::State& state) {
  const auto env = bench_envelope(static_cast<std::size_t>(state.range(0)));
  std::size_t bytes = 0;
  for (auto _ : state) {
    std::string record = encode_envelope_record(env);
    MessageEnvelope back = decode_envelope_record(record);
    bytes += record.size();
    benchmark::DoNotOptimize(back);
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(bytes));
}
BENCHMARK(bm_envelope_record_round_trip)->Arg(128)->Arg(4096);

}  // namespace

BENCHMARK_MAIN();
