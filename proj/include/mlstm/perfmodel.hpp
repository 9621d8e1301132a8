#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mlstm/core.hpp"

namespace mlstm {

/// Cost-model knobs. F_causal is the fraction of the quadratic work actually
/// computed under causal masking (0.5 = past only, up to 1.0 = compute all
/// then mask). The per-op factors weight non-matmul operations; simplified
/// counts pin them all to 1. Byte widths describe activation vs state
/// storage (bfloat16 activations, float32 states by default).
struct PerfParams {
    double f_causal = 0.5;
    double f_exp = 1.0, f_log = 1.0, f_sig = 1.0, f_max = 1.0, f_abs = 1.0, f_mask = 1.0;
    double bytes_qkv = 2.0, bytes_if = 2.0, bytes_cmn = 4.0;

    void validate() const;
    PerfParams simplified() const;  // all per-op factors forced to 1
};

struct AcceleratorSpec {
    std::string name;
    double flops_per_s = 0.0;
    double bytes_per_s = 0.0;
};

enum class Formulation { Recurrent, Parallel, Chunkwise };
enum class CountMode { Exact, Simplified };

const char* formulation_name(Formulation f);
Formulation formulation_from_string(const std::string& s);

/// Named FLOP line items for one formulation, scaled to the full problem
/// (batch x heads x sequence). total() is the sum of the items.
struct CostBreakdown {
    std::vector<std::pair<std::string, double>> items;
    double total() const;
    double item(const std::string& name) const;
};

struct MemopCounts {
    double loaded = 0.0;
    double stored = 0.0;
    double total() const { return loaded + stored; }
};

CostBreakdown flops_chunkwise(const Dims& dims, const PerfParams& params, Variant variant,
                              CountMode mode);
CostBreakdown flops_parallel(const Dims& dims, const PerfParams& params, Variant variant,
                             CountMode mode);
CostBreakdown flops_recurrent(const Dims& dims, const PerfParams& params, Variant variant,
                              CountMode mode);

MemopCounts memops(const Dims& dims, const PerfParams& params, Variant variant, Formulation f);

/// Closed-form simplified FLOP total per head for a full sequence (the
/// polynomial the optimal-chunk-size formulas are stationary points of).
/// Continuous in L; batch and head factors are applied by the caller.
double chunkwise_flops_model(Variant variant, double T, double L, double d_qk, double d_hv,
                             double f_causal);

/// Closed-form memory traffic per head for a full sequence.
double chunkwise_bytes_model(Variant variant, double T, double L, double d_qk, double d_hv,
                             const PerfParams& params);

/// sqrt((2 d_hv^2 p_qk + 5) / (2 F_causal (d_hv (1 + p_qk) + 3) + 1)).
double flop_optimal_chunk_size(double d_hv, double p_qk, double f_causal);

/// Adds the accelerator-intensity-weighted state traffic to the numerator:
/// sqrt((2 d_hv^2 p_qk + 5 + 2 I_acc d_hv^2 p_qk bytes_cmn) / (same denom)).
double runtime_optimal_chunk_size(double d_hv, double p_qk, double f_causal, double bytes_cmn,
                                  double i_acc);

enum class RuntimeBound { Sum, Max };

/// Modeled forward runtime in seconds: FLOP time plus (or max with) memory
/// time for the chunkwise formulation at chunk size L. dims.L is ignored; L
/// may be fractional.
double theoretical_runtime(const Dims& dims, const PerfParams& params, Variant variant,
                           const AcceleratorSpec& accel, double L, RuntimeBound bound);

/// FLOPs per byte of the chunkwise sigmoid forward at chunk size L.
double arithmetic_intensity(const Dims& dims, const PerfParams& params, double L);

double accelerator_intensity(const AcceleratorSpec& accel);

/// Attainable performance: min(bandwidth * intensity, peak FLOPs/s).
double roofline(const AcceleratorSpec& accel, double intensity);

/// Built-in presets: V100 SXM2, A100 SXM, H100 SXM, B200 HGX.
const std::vector<AcceleratorSpec>& accelerator_registry();

/// Parse a JSON array of {name, flops_per_s, bytes_per_s}.
std::vector<AcceleratorSpec> load_accelerator_file(const std::string& path);

/// Lookup by exact name in `extra` first, then the presets.
AcceleratorSpec find_accelerator(const std::string& name,
                                 const std::vector<AcceleratorSpec>& extra = {});

/// Integer chunk-size grid for brute-force argmin scans: divisors of T when
/// T > 0, otherwise every integer in [lo, hi].
std::vector<long> chunk_size_candidates(long lo, long hi, long T);

/// Brute-force argmin of the closed-form FLOP model (sigmoid variant).
long flop_argmin_chunk_size(double d_hv, double p_qk, double f_causal,
                            const std::vector<long>& candidates);

/// Brute-force argmin of the modeled runtime (sigmoid variant, sum bound).
long runtime_argmin_chunk_size(double d_hv, double p_qk, double f_causal, double bytes_cmn,
                               const AcceleratorSpec& accel, const std::vector<long>& candidates);

}  // namespace mlstm
