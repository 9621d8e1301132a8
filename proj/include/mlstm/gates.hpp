#pragma once

#include "mlstm/core.hpp"

namespace mlstm {

/// log(sigmoid(x)) in the branch-free stable form min(x,0) - log1p(exp(-|x|)).
/// Total on finite input; no overflow for |x| up to 1e4 and beyond.
double log_sigmoid(double x);

double sigmoid(double x);

/// c * tanh(x / c); output in (-c, c). c must be > 0.
double softcap(double x, double c);

/// Per-chunk log-domain gates.
///   g_sum [n_chunk]     : summed log forget gate of each chunk
///   b_cum [n_chunk, L]  : inclusive within-chunk cumsum of log forget gates
///   a_tail [n_chunk, L] : log input gate plus log forget tail to chunk end
/// b_cum[k, L-1] == g_sum[k] and a_tail[k, L-1] carries no forget tail.
struct ChunkwiseGates {
    Tensor g_sum;
    Tensor b_cum;
    Tensor a_tail;
};

/// Decompose per-step gate pre-activations into chunkwise log gates.
/// f_bar = log_sigmoid(f_pre); i_bar = i_pre (Exp) or log_sigmoid(i_pre) (Sig).
/// a_tail is built from the reversed cumulative sum of f_bar[1:], never as
/// g - b + i_bar, which cancels catastrophically for long chunks.
ChunkwiseGates chunkwise_gates(const double* f_pre, const double* i_pre, long T, long L,
                               Variant variant);

/// Convenience overload for rank-1 [T] tensors.
ChunkwiseGates chunkwise_gates(const Tensor& f_pre, const Tensor& i_pre, long L, Variant variant);

/// Optional preprocessing: softcap both gate pre-activation tensors
/// (training-style capping; the formulations consume raw pre-activations).
SequenceInputs apply_gate_softcap(SequenceInputs inputs, double cap);

}  // namespace mlstm
