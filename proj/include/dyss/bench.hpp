#pragma once

#include <chrono>
#include <vector>

#include "dyss/decoder.hpp"

namespace dyss {

struct BenchResult {
    double mean_ms = 0.0;
    std::size_t iterations = 0;
    std::vector<LayerLogRow> trajectory;  // query counts of the last forward
    std::size_t final_queries = 0;
};

// Wall-clock forward latency on a fixed input; dynamic toggles the
// merge/remove/split update.
inline BenchResult bench_forward(DetectionModel& model, const QuerySet& qinit,
                                 const SceneInputs& in, std::size_t warmup, std::size_t iters,
                                 bool dynamic) {
    using clock = std::chrono::steady_clock;
    BenchResult res;
    res.iterations = iters;
    for (std::size_t i = 0; i < warmup; ++i) (void)forward_values(model, qinit, in, dynamic);
    double total_ms = 0.0;
    for (std::size_t i = 0; i < iters; ++i) {
        auto t0 = clock::now();
        auto iv = forward_values(model, qinit, in, dynamic);
        auto t1 = clock::now();
        total_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
        if (i + 1 == iters) {
            res.trajectory = std::move(iv.trajectory);
            res.final_queries = iv.final_query_count;
        }
    }
    res.mean_ms = total_ms / static_cast<double>(iters == 0 ? 1 : iters);
    return res;
}

inline std::string bench_csv_header() { return "mode,iterations,mean_ms,final_queries"; }

}  // namespace dyss
