#include "tb/ledger.hpp"

#include "tb/common.hpp"

#include <cstdio>

namespace tb {

namespace detail {
CostLedger*& active_ledger_slot() {
    thread_local CostLedger* slot = nullptr;
    return slot;
}
}  // namespace detail

namespace instrumentation {
std::atomic<int64_t>& forward_calls() {
    static std::atomic<int64_t> c{0};
    return c;
}
std::atomic<int64_t>& backward_calls() {
    static std::atomic<int64_t> c{0};
    return c;
}
}  // namespace instrumentation

void count_forward_pass() {
    instrumentation::forward_calls().fetch_add(1, std::memory_order_relaxed);
    if (auto* l = active_ledger()) l->forward_passes += 1;
}

void count_backward_pass() {
    instrumentation::backward_calls().fetch_add(1, std::memory_order_relaxed);
    if (auto* l = active_ledger()) l->backward_passes += 1;
}

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

}  // namespace tb
