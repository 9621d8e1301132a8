#pragma once

#include <vector>

#include "mlstm/perfmodel.hpp"
#include "mlstm/tiled.hpp"

namespace mlstm {

enum class BenchImpl { Chunkwise, Tiled };

struct BenchRow {
    std::string impl;
    long chunk_size = 0;
    double median_seconds = 0.0;
    double peak_bytes_estimate = 0.0;  // materialized inter-chunk states
};

struct BenchConfig {
    BenchImpl impl = BenchImpl::Chunkwise;
    Variant variant = Variant::Sig;
    Dims dims;                     // L is taken from chunk_sizes per row
    std::vector<long> chunk_sizes;
    long repeats = 30;
    long warmup = 10;
    Precision precision;
    PerfParams params;             // byte widths for the memory estimate
    std::uint64_t seed = 0;
};

/// Median forward wall time per chunk size, plus the cost model's estimate
/// of the bytes held by materialized chunk boundary states.
std::vector<BenchRow> run_bench(const BenchConfig& cfg);

}  // namespace mlstm
