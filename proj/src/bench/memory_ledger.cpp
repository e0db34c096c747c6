#include "mocaps/bench/memory_ledger.hpp"

namespace mocaps::bench {

const char* mem_site_name(MemSite site) {
  switch (site) {
    case MemSite::kTransient: return "transient";
    case MemSite::kTape: return "tape";
    case MemSite::kSnapshot: return "snapshot";
    case MemSite::kParameter: return "parameter";
    case MemSite::kGradient: return "gradient";
    case MemSite::kOptimizer: return "optimizer";
    case MemSite::kStatic: return "static";
  }
  return "?";
}

bool is_activation_site(MemSite site) {
  return site == MemSite::kTransient || site == MemSite::kTape ||
         site == MemSite::kSnapshot;
}

MemoryLedger& MemoryLedger::instance() {
  static MemoryLedger ledger;
  return ledger;
}

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::kIdle: return "idle";
    case Phase::kForward: return "forward";
    case Phase::kBackward: return "backward";
  }
  return "?";
}

void MemoryLedger::bump_gauge(int64_t delta) {
  uint64_t now = activation_gauge_.fetch_add(static_cast<uint64_t>(delta),
                                             std::memory_order_relaxed) +
                 static_cast<uint64_t>(delta);
  if (delta > 0) {
    uint64_t peak = activation_peak_.load(std::memory_order_relaxed);
    while (now > peak && !activation_peak_.compare_exchange_weak(
                             peak, now, std::memory_order_relaxed)) {
    }
    auto& pp = phase_peak_[phase_.load(std::memory_order_relaxed)];
    uint64_t cur = pp.load(std::memory_order_relaxed);
    while (now > cur &&
           !pp.compare_exchange_weak(cur, now, std::memory_order_relaxed)) {
    }
  }
}

void MemoryLedger::on_alloc(size_t bytes, MemSite site) {
  by_site_[static_cast<int>(site)].fetch_add(bytes, std::memory_order_relaxed);
  if (is_activation_site(site)) bump_gauge(static_cast<int64_t>(bytes));
}

void MemoryLedger::on_free(size_t bytes, MemSite site) {
  by_site_[static_cast<int>(site)].fetch_sub(bytes, std::memory_order_relaxed);
  if (is_activation_site(site)) bump_gauge(-static_cast<int64_t>(bytes));
}

void MemoryLedger::on_retag(size_t bytes, MemSite from, MemSite to) {
  if (from == to) return;
  by_site_[static_cast<int>(from)].fetch_sub(bytes, std::memory_order_relaxed);
  by_site_[static_cast<int>(to)].fetch_add(bytes, std::memory_order_relaxed);
  bool was = is_activation_site(from), is = is_activation_site(to);
  if (was && !is) bump_gauge(-static_cast<int64_t>(bytes));
  if (!was && is) bump_gauge(static_cast<int64_t>(bytes));
}

uint64_t MemoryLedger::live_activation_bytes() const {
  return activation_gauge_.load(std::memory_order_relaxed);
}

uint64_t MemoryLedger::peak_activation_bytes() const {
  return activation_peak_.load(std::memory_order_relaxed);
}

uint64_t MemoryLedger::site_bytes(MemSite site) const {
  return by_site_[static_cast<int>(site)].load(std::memory_order_relaxed);
}

uint64_t MemoryLedger::total_live_bytes() const {
  uint64_t total = 0;
  for (const auto& s : by_site_) total += s.load(std::memory_order_relaxed);
  return total;
}

void MemoryLedger::reset_peak() {
  activation_peak_.store(activation_gauge_.load(std::memory_order_relaxed),
                         std::memory_order_relaxed);
}

void MemoryLedger::begin_phase(Phase p) {
  uint8_t prev = phase_.exchange(static_cast<uint8_t>(p),
                                 std::memory_order_relaxed);
  uint64_t gauge = activation_gauge_.load(std::memory_order_relaxed);
  phase_exit_gauge_[prev].store(gauge, std::memory_order_relaxed);
  phase_peak_[static_cast<int>(p)].store(gauge, std::memory_order_relaxed);
}

Phase MemoryLedger::phase() const {
  return static_cast<Phase>(phase_.load(std::memory_order_relaxed));
}

uint64_t MemoryLedger::phase_exit_gauge(Phase p) const {
  return phase_exit_gauge_[static_cast<int>(p)].load(std::memory_order_relaxed);
}

uint64_t MemoryLedger::phase_peak(Phase p) const {
  return phase_peak_[static_cast<int>(p)].load(std::memory_order_relaxed);
}

LedgerSnapshot MemoryLedger::snapshot() const {
  LedgerSnapshot snap;
  snap.live_activation_bytes = live_activation_bytes();
  snap.peak_activation_bytes = peak_activation_bytes();
  for (int i = 0; i < kNumMemSites; ++i)
    snap.by_site[i] = by_site_[i].load(std::memory_order_relaxed);
  return snap;
}

namespace {
thread_local MemSite g_current_site = MemSite::kTransient;
}

MemSite current_mem_site() { return g_current_site; }

MemSiteScope::MemSiteScope(MemSite site) : prev_(g_current_site) {
  g_current_site = site;
}

MemSiteScope::~MemSiteScope() { g_current_site = prev_; }

}  // namespace mocaps::bench
