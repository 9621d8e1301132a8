#pragma once

#include "mlstm/core.hpp"
#include "mlstm/gates.hpp"

namespace mlstm {

/// Materialized inter-chunk states. Index 0 along the chunk axis holds the
/// zero initial state; entry k+1 is the state after chunk k. The sigmoid
/// variant uses C only (n stays zero, m stays zero).
struct ChunkStates {
    Tensor C;  // [B, H, n_chunk+1, d_qk, d_hv]
    Tensor n;  // [B, H, n_chunk+1, d_qk]
    Tensor m;  // [B, H, n_chunk+1]
};

/// Per-position stabilizer statistics saved by the forward pass and reused
/// verbatim by the backward pass. h_denom >= exp(-m_combine) entrywise for
/// the exponential variant; both are trivial (0 and 1) for sigmoid.
struct SavedStats {
    Tensor m_combine;  // [B, H, T]
    Tensor h_denom;    // [B, H, T]
};

struct ChunkwiseForward {
    Tensor h_tilde;  // [B, H, T, d_hv]
    ChunkStates states;
    SavedStats stats;
};

/// Input-side gradients. Shapes mirror SequenceInputs.
struct Gradients {
    Tensor dq, dk, dv;      // [B,H,T,d_qk], [B,H,T,d_qk], [B,H,T,d_hv]
    Tensor d_fpre, d_ipre;  // [B,H,T]
};

/// Chunkwise-parallel forward: sequential inter-chunk state recurrence,
/// quadratic intra-chunk part per chunk, stabilized combination.
ChunkwiseForward chunkwise_forward(const SequenceInputs& inputs, const Dims& dims,
                                   Variant variant);

/// Forward with the stabilizer reparameterization (m states, m_combine) and
/// the output denominator pinned to previously saved values. This is the
/// function whose exact gradient the backward pass computes for the
/// exponential variant; finite-difference checks differentiate it.
Tensor chunkwise_forward_frozen(const SequenceInputs& inputs, const Dims& dims, Variant variant,
                                const ChunkStates& frozen_states, const SavedStats& frozen_stats);

/// Reference backward pass. Treats h_denom and the max-state reparameterization
/// as constants (their row-scales cancel under a trailing norm layer); the
/// normalizer state carries no gradient.
Gradients chunkwise_backward(const SequenceInputs& inputs, const Dims& dims, Variant variant,
                             const Tensor& d_h, const ChunkStates& states,
                             const SavedStats& stats);

namespace detail {

/// Per-head forward kernel. TA is the activation scalar (q/k/v/h), TS the
/// state scalar (gates, C/n/m, saved stats). The f64 reference instantiates
/// both as double; the benchmark harness uses float activations with float
/// or double states.
/// Layout: q,k [T,d_qk]; v [T,d_hv]; i_pre,f_pre [T]; h_out [T,d_hv];
/// c_states [(n_chunk+1), d_qk, d_hv]; n_states [(n_chunk+1), d_qk];
/// m_states [n_chunk+1]; m_comb, h_denom [T].
template <class TA, class TS>
void chunkwise_forward_head(const TA* q, const TA* k, const TA* v, const TS* i_pre,
                            const TS* f_pre, const Dims& dims, Variant variant, TA* h_out,
                            TS* c_states, TS* n_states, TS* m_states, TS* m_comb, TS* h_denom);

/// Reverse sweep over chunk boundaries: fills d_c [(n_chunk+1), d_qk, d_hv]
/// with state gradients (entry n_chunk is zero) and d_g [n_chunk] with the
/// summed-forget-gate gradients.
void backward_state_pass_head(const double* q, const double* v_unused, const Dims& dims,
                              const ChunkwiseGates& gates, const double* c_states,
                              const double* m_states, const double* m_comb,
                              const double* dh_tilde, double* d_c, double* d_g, Variant variant);

/// Combine per-path gate gradients into pre-activation gradients.
/// d_b_total/d_a/d_i_extra are per-position [T]; outputs d_fpre/d_ipre [T].
void assemble_gate_grads_head(const double* f_pre, const double* i_pre, const Dims& dims,
                              Variant variant, const double* d_g, const double* d_b_total,
                              const double* d_a, const double* d_i_extra, double* d_fpre,
                              double* d_ipre);

}  // namespace detail

}  // namespace mlstm
