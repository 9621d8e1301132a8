#pragma once

#include "mlstm/chunkwise.hpp"
#include "mlstm/core.hpp"

namespace mlstm {

/// Block sizes of the two-level intra-chunk tiling. b_lhq and b_lkv tile the
/// two sequence axes of the intra-chunk attention matrix, b_dqk and b_dhv the
/// two embedding axes. Requirements: b_lhq >= b_lkv, b_lkv divides b_lhq, and
/// each block size divides its dimension.
struct BlockConfig {
    long b_lhq = 0;
    long b_lkv = 0;
    long b_dqk = 0;
    long b_dhv = 0;

    void validate(const Dims& dims) const;

    /// Largest power-of-two-ish divisors capped at typical kernel tile sizes.
    static BlockConfig pick_default(const Dims& dims);
};

namespace detail {

/// Truncated kv-loop bound: blocks at or above the diagonal are skipped
/// entirely. i_lq is the 0-based query block index; the returned count is the
/// number of kv blocks (1-based loop).
long kv_block_count(long i_lq, const BlockConfig& blocks);

/// A kv block needs the causal mask once it touches the diagonal of the
/// query block (blocks strictly below the diagonal are left unmasked).
bool block_needs_mask(long i_kv_1based, long i_lq, const BlockConfig& blocks);

template <class TS>
struct HeadGates;

/// Blocked intra-chunk forward for one head, consuming states materialized
/// by state_recurrence_head. Activation scalar TA, state scalar TS.
template <class TA, class TS>
void tfla_forward_head(const TA* q, const TA* k, const TA* v, const HeadGates<TS>& gates,
                       const Dims& dims, const BlockConfig& blocks, Variant variant, TA* h_out,
                       const TS* c_states, const TS* n_states, const TS* m_states, TS* m_comb,
                       TS* h_denom);

}  // namespace detail

/// Blocked intra-chunk forward with online max rescaling (exponential
/// variant) or a single fused accumulation pass (sigmoid variant). Produces
/// the same states and saved statistics as chunkwise_forward.
ChunkwiseForward tfla_forward(const SequenceInputs& inputs, const Dims& dims,
                              const BlockConfig& blocks, Variant variant);

/// Query gradients plus the gate partials that ride along with them
/// (cumulative-forget contributions from the query-side paths).
struct TfLaDqResult {
    Tensor dq;       // [B,H,T,d_qk]
    Tensor d_b_cum;  // [B,H,T]
};

/// Key gradients plus the key-side gate partials: the input-weight path
/// (d_a_tail), and the column sums of the gate-matrix gradient split into
/// the cumulative-forget (negative) and input-gate (positive) parts.
struct TfLaDkResult {
    Tensor dk;        // [B,H,T,d_qk]
    Tensor d_a_tail;  // [B,H,T]
    Tensor d_b_cum;   // [B,H,T]
    Tensor d_i_log;   // [B,H,T]
};

/// Parallel over (L_hq, d_qk); loops over (L_kv, d_hv).
TfLaDqResult tfla_backward_dq(const SequenceInputs& inputs, const Dims& dims,
                              const BlockConfig& blocks, Variant variant, const Tensor& d_h,
                              const ChunkStates& states, const SavedStats& stats);

/// Parallel over (L_kv, d_qk); loops over (L_hq, d_hv).
TfLaDkResult tfla_backward_dk(const SequenceInputs& inputs, const Dims& dims,
                              const BlockConfig& blocks, Variant variant, const Tensor& d_h,
                              const ChunkStates& states, const SavedStats& stats);

/// Parallel over (L_kv, d_hv); loops over (L_hq, d_qk).
Tensor tfla_backward_dv(const SequenceInputs& inputs, const Dims& dims, const BlockConfig& blocks,
                        Variant variant, const Tensor& d_h, const ChunkStates& states,
                        const SavedStats& stats);

/// All three blocked gradient kernels plus the reverse state sweep and the
/// gate-gradient assembly; the full counterpart of chunkwise_backward.
Gradients tfla_backward(const SequenceInputs& inputs, const Dims& dims, const BlockConfig& blocks,
                        Variant variant, const Tensor& d_h, const ChunkStates& states,
                        const SavedStats& stats);

}  // namespace mlstm
