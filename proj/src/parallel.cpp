#include "madan/parallel.hpp"

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

namespace madan {
namespace {

class Pool {
public:
    explicit Pool(int workers) {
        for (int i = 0; i < workers; ++i) {
            threads_.emplace_back([this, i] { worker_loop(i); });
        }
    }

    ~Pool() {
        {
            std::unique_lock<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_start_.notify_all();
        for (auto& t : threads_) t.join();
    }

    int width() const { return static_cast<int>(threads_.size()) + 1; }

    // Runs fn(chunk_index) on chunks [0, nchunks); chunk 0 on the caller.
    void run(int nchunks, const std::function<void(int)>& fn) {
        {
            std::unique_lock<std::mutex> lk(mu_);
            fn_ = &fn;
            nchunks_ = nchunks;
            next_chunk_.store(1, std::memory_order_relaxed);
            pending_ = static_cast<int>(threads_.size());
            ++generation_;
        }
        cv_start_.notify_all();
        fn(0);
        for (int c = next_chunk_.fetch_add(1, std::memory_order_relaxed); c < nchunks;
             c = next_chunk_.fetch_add(1, std::memory_order_relaxed)) {
            fn(c);
        }
        std::unique_lock<std::mutex> lk(mu_);
        cv_done_.wait(lk, [this] { return pending_ == 0; });
        fn_ = nullptr;
    }

private:
    void worker_loop(int) {
        std::uint64_t seen = 0;
        for (;;) {
            const std::function<void(int)>* fn = nullptr;
            int nchunks = 0;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_start_.wait(lk, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
                fn = fn_;
                nchunks = nchunks_;
            }
            for (int c = next_chunk_.fetch_add(1, std::memory_order_relaxed); c < nchunks;
                 c = next_chunk_.fetch_add(1, std::memory_order_relaxed)) {
                (*fn)(c);
            }
            {
                std::unique_lock<std::mutex> lk(mu_);
                if (--pending_ == 0) cv_done_.notify_one();
            }
        }
    }

    std::vector<std::thread> threads_;
    std::mutex mu_;
    std::condition_variable cv_start_, cv_done_;
    const std::function<void(int)>* fn_ = nullptr;
    int nchunks_ = 0;
    int pending_ = 0;
    bool stop_ = false;
    std::uint64_t generation_ = 0;
    std::atomic<int> next_chunk_{0};
};

int g_requested = 0;
Pool* g_pool = nullptr;

Pool& pool() {
    if (!g_pool) {
        int n = g_requested > 0 ? g_requested : static_cast<int>(std::thread::hardware_concurrency());
        if (n < 1) n = 1;
        g_pool = new Pool(n - 1);
    }
    return *g_pool;
}

} // namespace

void set_thread_count(int n) {
    if (g_pool && g_pool->width() != (n > 0 ? n : g_pool->width())) {
        delete g_pool;
        g_pool = nullptr;
    }
    g_requested = n;
}

int thread_count() { return pool().width(); }

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
    if (n == 0) return;
    Pool& p = pool();
    std::size_t width = static_cast<std::size_t>(p.width());
    if (width <= 1 || n == 1) {
        fn(0, n);
        return;
    }
    // One chunk per worker; fixed partition so the work split (and therefore
    // every per-chunk accumulation order) is a pure function of n and width.
    std::size_t nchunks = width < n ? width : n;
    std::size_t base = n / nchunks, rem = n % nchunks;
    std::function<void(int)> task = [&](int c) {
        std::size_t uc = static_cast<std::size_t>(c);
        std::size_t begin = uc * base + (uc < rem ? uc : rem);
        std::size_t end = begin + base + (uc < rem ? 1 : 0);
        fn(begin, end);
    };
    p.run(static_cast<int>(nchunks), task);
}

} // namespace madan
