#pragma once

#include <optional>

#include "mlstm/core.hpp"

namespace mlstm {

/// Pre-norm hidden outputs of a step-by-step run, plus the final memory state
/// per (batch, head) and, on request, a snapshot after every step.
struct RecurrentTrace {
    Tensor h_tilde;  // [B, H, T, d_hv]
    Tensor C_final;  // [B, H, d_qk, d_hv]
    Tensor n_final;  // [B, H, d_qk]
    Tensor m_final;  // [B, H]
    // Present only when requested: [B, H, T, ...] snapshots after each step.
    Tensor C_steps;
    Tensor n_steps;
    Tensor m_steps;
    bool has_step_states = false;
};

struct RecurrentOptions {
    bool store_step_states = false;
    // Applied to every (batch, head); zero state when absent.
    std::optional<MemoryState> initial_state;
};

/// One step of the exponential-input-gate recurrence.
///   m' = max(logsig(f_pre) + m, i_pre)
///   C' = exp(logsig(f_pre)+m-m') C + exp(i_pre-m') k v^T     (n' analogous)
///   h  = C'^T (q/sqrt(d_qk)) / max(|n'^T (q/sqrt(d_qk))|, exp(-m'))
/// q, k: [d_qk]; v, h_tilde: [d_hv].
void step_exp(MemoryState& state, const double* q, const double* k, const double* v, double i_pre,
              double f_pre, const Dims& dims, double* h_tilde);

/// One step of the sigmoid-input-gate recurrence: C' = sig(f)C + sig(i)kv^T,
/// h = C'^T (q/sqrt(d_qk)). No normalizer, no max state.
void step_sig(MemoryState& state, const double* q, const double* k, const double* v, double i_pre,
              double f_pre, const Dims& dims, double* h_tilde);

/// Fold the step function over t = 1..T from the zero state.
RecurrentTrace run_recurrent(const SequenceInputs& inputs, const Dims& dims, Variant variant,
                             const RecurrentOptions& opts = {});

}  // namespace mlstm
