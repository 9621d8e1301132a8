#pragma once

#include "mlstm/core.hpp"

namespace mlstm {

/// Denominator choices for the full-sequence form. Default is the clamped
/// normalizer for Exp; Ones (no normalizer) is the default for Sig. The
/// remaining variants exist for the transfer-behavior analysis only.
enum class Normalizer {
    Default,    // max(|row sum|, exp(-m))   (Exp only)
    MaxAbsOne,  // max(|row sum|, 1)
    AbsSum,     // |row sum|                 (Sig only)
    RawSum,     // row sum                   (Sig only)
    Ones,       // 1
};

const char* normalizer_name(Normalizer n);
Normalizer normalizer_from_string(const std::string& s);
bool normalizer_valid_for(Variant variant, Normalizer n);

/// Fully parallel forward for the exponential input gate. Materializes the
/// T x T log gate matrix, subtracts the row max, and divides by the clamped
/// normalizer. Masked entries use a finite -1e30 sentinel so exp maps them
/// to exact zero.
Tensor parallel_forward_exp(const SequenceInputs& inputs, const Dims& dims);

/// Fully parallel forward for the sigmoid input gate: H = (S o exp(Dt)) V
/// with no max subtraction and no normalizer.
Tensor parallel_forward_sig(const SequenceInputs& inputs, const Dims& dims);

/// Full-sequence forward with a named normalizer replacement. Rejects
/// combinations outside the analysis grid (see normalizer_valid_for).
Tensor normalizer_variant_forward(const SequenceInputs& inputs, const Dims& dims, Variant variant,
                                  Normalizer normalizer);

namespace detail {

/// Core of the parallel forward for one (batch, head) slice, with the score
/// matrix S = Q K^T / sqrt(d_qk) precomputed by the caller. The transfer scan
/// reuses one S across its whole gate grid.
/// s_scores: [T, T] (only the lower triangle is read); v: [T, d_hv];
/// i_pre/f_pre: [T]; h_out: [T, d_hv].
void parallel_head_core(const double* s_scores, const double* v, const double* i_pre,
                        const double* f_pre, long T, long d_hv, Variant variant,
                        Normalizer normalizer, double* h_out);

/// S = Q K^T / sqrt(d_qk) for one head; fills the lower triangle only.
void head_scores(const double* q, const double* k, long T, long d_qk, double* s_out);

}  // namespace detail

}  // namespace mlstm
