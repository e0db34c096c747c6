#pragma once

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>

namespace mocaps::bench {

// What a tensor buffer is currently used for. The first three are
// "activation" sites: memory that a backward pass forces us to keep alive.
// The rest (parameters, gradients, optimizer moments, static data such as
// datasets) grow with model/dataset size in every training mode and are
// tracked but excluded from the activation gauge.
enum class MemSite : uint8_t {
  kTransient = 0,  // scratch produced by a kernel, not yet claimed by anyone
  kTape,           // operand saved by a tape node for its backward rule
  kSnapshot,       // retained chain state (terminal x/v of a reversible chain)
  kParameter,
  kGradient,
  kOptimizer,
  kStatic,
};
inline constexpr int kNumMemSites = 7;

const char* mem_site_name(MemSite site);
bool is_activation_site(MemSite site);

struct LedgerSnapshot {
  uint64_t live_activation_bytes = 0;
  uint64_t peak_activation_bytes = 0;
  std::array<uint64_t, kNumMemSites> by_site{};
};

// Coarse training phases, for attribution in reports. The trainer marks
// transitions; the ledger keeps, per phase, the gauge at its last exit and
// the high-water mark within its latest run.
enum class Phase : uint8_t { kIdle = 0, kForward, kBackward };
inline constexpr int kNumPhases = 3;
const char* phase_name(Phase p);

// Process-wide byte accounting for tensor storage. Tensor allocation and
// destruction report here; the gauge sums the activation sites only, and the
// peak is its high-water mark since the last reset_peak(). Thread-safe via
// atomics; the peak update is a CAS loop.
class MemoryLedger {
 public:
  static MemoryLedger& instance();

  void on_alloc(size_t bytes, MemSite site);
  void on_free(size_t bytes, MemSite site);
  void on_retag(size_t bytes, MemSite from, MemSite to);

  uint64_t live_activation_bytes() const;
  uint64_t peak_activation_bytes() const;
  uint64_t site_bytes(MemSite site) const;
  uint64_t total_live_bytes() const;

  // Sets the peak back to the current gauge value.
  void reset_peak();
  LedgerSnapshot snapshot() const;

  void begin_phase(Phase p);
  Phase phase() const;
  // Gauge value when `p` last ended; 0 if it never ran.
  uint64_t phase_exit_gauge(Phase p) const;
  // High-water mark within the latest run of `p`.
  uint64_t phase_peak(Phase p) const;

 private:
  MemoryLedger() = default;
  void bump_gauge(int64_t delta);

  std::array<std::atomic<uint64_t>, kNumMemSites> by_site_{};
  std::atomic<uint64_t> activation_gauge_{0};
  std::atomic<uint64_t> activation_peak_{0};
  std::atomic<uint8_t> phase_{0};
  std::array<std::atomic<uint64_t>, kNumPhases> phase_exit_gauge_{};
  std::array<std::atomic<uint64_t>, kNumPhases> phase_peak_{};
};

// Ambient site applied to storage allocated on this thread. Defaults to
// kTransient; scopes nest.
MemSite current_mem_site();

class MemSiteScope {
 public:
  explicit MemSiteScope(MemSite site);
  ~MemSiteScope();
  MemSiteScope(const MemSiteScope&) = delete;
  MemSiteScope& operator=(const MemSiteScope&) = delete;

 private:
  MemSite prev_;
};

}  // namespace mocaps::bench
