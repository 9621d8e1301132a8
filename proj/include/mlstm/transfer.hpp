#pragma once

#include "mlstm/core.hpp"
#include "mlstm/parallel.hpp"

namespace mlstm {

/// y = x / sqrt(mean(x^2) + eps) * gamma. eps = 0 with x = 0 returns the
/// zero vector by convention.
void rms_norm(const double* x, const double* gamma, long d, double eps, double* y);
Tensor rms_norm(const Tensor& x, const Tensor& gamma, double eps);

/// Mean over time of maxnorm(h_t) / maxnorm(v_t). Both [T, d]. A zero v_t
/// makes the ratio undefined and raises an error.
double gain(const Tensor& h_seq, const Tensor& v_seq);

struct TransferGridSpec {
    double i_min = -12.0, i_max = 8.0;   // input gate pre-activation range
    double f_min = -5.0, f_max = 12.0;   // forget gate pre-activation range
    long n_i = 50, n_f = 50;
};

/// Gains before and after the norm layer over an (i_pre, f_pre) grid.
struct GainGrid {
    std::vector<double> i_values, f_values;
    Tensor g_before, g_after;  // [n_i, n_f]
};

/// One random sequence (q, k, v ~ N(0,1)); per grid point the gate
/// pre-activations are held constant over all T steps. Gains are measured on
/// the full-sequence forward with the requested normalizer, before and after
/// an RMS norm with unit scale.
GainGrid transfer_scan(Variant variant, Normalizer normalizer, double eps,
                       const TransferGridSpec& grid, const Dims& dims, Rng& rng);

/// Default geometry of the scan: T=512, d_qk=d_hv=128, one head, one batch.
Dims transfer_default_dims();

}  // namespace mlstm
