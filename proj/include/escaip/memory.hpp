#pragma once

#include <atomic>
#include <cstddef>
#include <new>

namespace escaip {

/// Process-wide byte counters for tensor storage. The benchmark harness reads the
/// peak watermark to report per-sample memory.
class MemoryTracker {
   public:
    static void on_alloc(std::size_t bytes) noexcept {
        const std::size_t now = current().fetch_add(bytes, std::memory_order_relaxed) + bytes;
        std::size_t prev = peak().load(std::memory_order_relaxed);
        while (now > prev && !peak().compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
        }
    }
    static void on_free(std::size_t bytes) noexcept {
        current().fetch_sub(bytes, std::memory_order_relaxed);
    }

    static std::size_t current_bytes() noexcept { return current().load(std::memory_order_relaxed); }
    static std::size_t peak_bytes() noexcept { return peak().load(std::memory_order_relaxed); }

    /// Allocations that would push live bytes past `bytes` throw std::bad_alloc; 0 disables.
    static void set_limit(std::size_t bytes) noexcept { limit().store(bytes, std::memory_order_relaxed); }
    static std::size_t limit_bytes() noexcept { return limit().load(std::memory_order_relaxed); }
    static void check_limit(std::size_t bytes) {
        const std::size_t cap = limit_bytes();
        if (cap != 0 && current_bytes() + bytes > cap) throw std::bad_alloc();
    }

    /// Resets the watermark to the current live byte count.
    static void reset_peak() noexcept { peak().store(current_bytes(), std::memory_order_relaxed); }

   private:
    static std::atomic<std::size_t>& current() noexcept {
        static std::atomic<std::size_t> value{0};
        return value;
    }
    static std::atomic<std::size_t>& limit() noexcept {
        static std::atomic<std::size_t> value{0};
        return value;
    }
    static std::atomic<std::size_t>& peak() noexcept {
        static std::atomic<std::size_t> value{0};
        return value;
    }
};

template <class T>
struct TrackingAllocator {
    using value_type = T;

    TrackingAllocator() noexcept = default;
    template <class U>
    TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        MemoryTracker::check_limit(n * sizeof(T));
        auto* p = static_cast<T*>(::operator new(n * sizeof(T)));
        MemoryTracker::on_alloc(n * sizeof(T));
        return p;
    }
    void deallocate(T* p, std::size_t n) noexcept {
        MemoryTracker::on_free(n * sizeof(T));
        ::operator delete(p);
    }

    template <class U>
    bool operator==(const TrackingAllocator<U>&) const noexcept {
        return true;
    }
};

}  // namespace escaip
