#pragma once

#include <atomic>
#include <cstdint>

namespace tb {

// Forward/backward pass accounting for one attack run. One forward call on a
// batch counts as one forward pass, matching how attack budgets are quoted.
struct CostLedger {
    int64_t forward_passes = 0;
    int64_t backward_passes = 0;
};

namespace detail {
CostLedger*& active_ledger_slot();
}

inline CostLedger* active_ledger() { return detail::active_ledger_slot(); }

// RAII scope binding a ledger to the current thread. Attack runners own one
// ledger each; nothing is counted when no scope is active (training, eval).
class LedgerScope {
public:
    explicit LedgerScope(CostLedger& ledger) : prev_(detail::active_ledger_slot()) {
        detail::active_ledger_slot() = &ledger;
    }
    ~LedgerScope() { detail::active_ledger_slot() = prev_; }
    LedgerScope(const LedgerScope&) = delete;
    LedgerScope& operator=(const LedgerScope&) = delete;

private:
    CostLedger* prev_;
};

// Process-wide instrumentation, independent of ledger scoping. Tests compare
// deltas of these against reported ledgers to catch miscounting attacks.
namespace instrumentation {
std::atomic<int64_t>& forward_calls();
std::atomic<int64_t>& backward_calls();
}

void count_forward_pass();
void count_backward_pass();

}  // namespace tb
