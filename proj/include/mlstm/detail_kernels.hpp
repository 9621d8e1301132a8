#pragma once

// Shared per-head kernel pieces for the chunkwise and tiled forward passes.
// TA is the activation scalar, TS the state scalar; the f64 reference uses
// double for both.

#include <vector>

#include "mlstm/chunkwise.hpp"

namespace mlstm::detail {

/// Log gates of one head, flattened over time. g [n_chunk]; b, a, i_bar [T].
template <class TS>
struct HeadGates {
    std::vector<TS> g, b, a, i_bar;
};

template <class TS>
HeadGates<TS> prepare_head_gates(const double* f_pre, const double* i_pre, const Dims& dims,
                                 Variant variant) {
    const long T = dims.T, L = dims.L;
    ChunkwiseGates cg = chunkwise_gates(f_pre, i_pre, T, L, variant);
    HeadGates<TS> out;
    out.g.resize(static_cast<size_t>(dims.n_chunk()));
    out.b.resize(static_cast<size_t>(T));
    out.a.resize(static_cast<size_t>(T));
    out.i_bar.resize(static_cast<size_t>(T));
    for (long k = 0; k < dims.n_chunk(); ++k) out.g[static_cast<size_t>(k)] = static_cast<TS>(cg.g_sum(k));
    for (long t = 0; t < T; ++t) {
        out.b[static_cast<size_t>(t)] = static_cast<TS>(cg.b_cum(t / L, t % L));
        out.a[static_cast<size_t>(t)] = static_cast<TS>(cg.a_tail(t / L, t % L));
        out.i_bar[static_cast<size_t>(t)] = static_cast<TS>(
            variant == Variant::Exp ? i_pre[t] : log_sigmoid(i_pre[t]));
    }
    return out;
}

/// Sequential recurrence over chunk boundaries; materializes every state.
/// c_states [(n_chunk+1)*d_qk*d_hv], n_states [(n_chunk+1)*d_qk],
/// m_states [n_chunk+1]. The sigmoid variant leaves n and m untouched at 0.
template <class TA, class TS>
void state_recurrence_head(const TA* k, const TA* v, const HeadGates<TS>& gates, const Dims& dims,
                           Variant variant, TS* c_states, TS* n_states, TS* m_states);

extern template void state_recurrence_head<double, double>(const double*, const double*,
                                                           const HeadGates<double>&, const Dims&,
                                                           Variant, double*, double*, double*);
extern template void state_recurrence_head<float, float>(const float*, const float*,
                                                         const HeadGates<float>&, const Dims&,
                                                         Variant, float*, float*, float*);
extern template void state_recurrence_head<float, double>(const float*, const float*,
                                                          const HeadGates<double>&, const Dims&,
                                                          Variant, double*, double*, double*);

}  // namespace mlstm::detail
