#pragma once

#include <atomic>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace gradmem {

inline constexpr const char* kVersion = "0.1.0";

// Thrown by tape/engine code for contract violations and non-finite values.
struct TapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Global allocation accounting for tensor payloads. Tracks live and peak
// bytes across all threads; benches reset the peak around a measured region.
namespace membytes {

inline std::atomic<int64_t>& live() {
    static std::atomic<int64_t> v{0};
    return v;
}

inline std::atomic<int64_t>& peak() {
    static std::atomic<int64_t> v{0};
    return v;
}

inline void on_alloc(int64_t n) {
    const int64_t now = live().fetch_add(n, std::memory_order_relaxed) + n;
    int64_t p = peak().load(std::memory_order_relaxed);
    while (now > p && !peak().compare_exchange_weak(p, now, std::memory_order_relaxed)) {
    }
}

inline void on_free(int64_t n) {
    live().fetch_sub(n, std::memory_order_relaxed);
}

inline void reset_peak() {
    peak().store(live().load(std::memory_order_relaxed), std::memory_order_relaxed);
}

}  // namespace membytes

}  // namespace gradmem
