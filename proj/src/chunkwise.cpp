#include "mlstm/chunkwise.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include "mlstm/detail_kernels.hpp"

namespace mlstm {

namespace detail {

template <class TA, class TS>
void state_recurrence_head(const TA* k, const TA* v, const HeadGates<TS>& gates, const Dims& dims,
                           Variant variant, TS* c_states, TS* n_states, TS* m_states) {
    const long L = dims.L, d_qk = dims.d_qk, d_hv = dims.d_hv;
    const long n_chunk = dims.n_chunk();
    const long state_sz = d_qk * d_hv;
    const bool is_exp = (variant == Variant::Exp);

    for (long i = 0; i < state_sz; ++i) c_states[i] = TS(0);
    for (long p = 0; p < d_qk; ++p) n_states[p] = TS(0);
    for (long kk = 0; kk <= n_chunk; ++kk) m_states[kk] = TS(0);

    std::vector<TS> a_bar(static_cast<size_t>(L));
    for (long kk = 0; kk < n_chunk; ++kk) {
        const TS* c_prev = c_states + kk * state_sz;
        const TS* n_prev = n_states + kk * d_qk;
        TS* c_next = c_states + (kk + 1) * state_sz;
        TS* n_next = n_states + (kk + 1) * d_qk;

        double g_bar;
        if (is_exp) {
            double a_max = -std::numeric_limits<double>::infinity();
            for (long j = 0; j < L; ++j)
                a_max = std::fmax(a_max, static_cast<double>(gates.a[static_cast<size_t>(kk * L + j)]));
            const double g_shift = static_cast<double>(gates.g[static_cast<size_t>(kk)]) +
                                   static_cast<double>(m_states[kk]);
            const double m_next = std::fmax(g_shift, a_max);
            g_bar = stab::exp_guarded(g_shift - m_next);
            for (long j = 0; j < L; ++j)
                a_bar[static_cast<size_t>(j)] = static_cast<TS>(stab::exp_guarded(
                    static_cast<double>(gates.a[static_cast<size_t>(kk * L + j)]) - m_next));
            m_states[kk + 1] = static_cast<TS>(m_next);
        } else {
            g_bar = std::exp(static_cast<double>(gates.g[static_cast<size_t>(kk)]));
            for (long j = 0; j < L; ++j)
                a_bar[static_cast<size_t>(j)] = static_cast<TS>(
                    std::exp(static_cast<double>(gates.a[static_cast<size_t>(kk * L + j)])));
        }

        for (long i = 0; i < state_sz; ++i) c_next[i] = static_cast<TS>(g_bar) * c_prev[i];
        if (is_exp)
            for (long p = 0; p < d_qk; ++p) n_next[p] = static_cast<TS>(g_bar) * n_prev[p];
        for (long j = 0; j < L; ++j) {
            const long t = kk * L + j;
            const TA* kt = k + t * d_qk;
            const TA* vt = v + t * d_hv;
            const TS aw = a_bar[static_cast<size_t>(j)];
            for (long p = 0; p < d_qk; ++p) {
                const TS kw = aw * static_cast<TS>(kt[p]);
                TS* crow = c_next + p * d_hv;
                for (long x = 0; x < d_hv; ++x) crow[x] += kw * static_cast<TS>(vt[x]);
                if (is_exp) n_next[p] += kw;
            }
        }
    }
}

template void state_recurrence_head<double, double>(const double*, const double*,
                                                    const HeadGates<double>&, const Dims&, Variant,
                                                    double*, double*, double*);
template void state_recurrence_head<float, float>(const float*, const float*,
                                                  const HeadGates<float>&, const Dims&, Variant,
                                                  float*, float*, float*);
template void state_recurrence_head<float, double>(const float*, const float*,
                                                   const HeadGates<double>&, const Dims&, Variant,
                                                   double*, double*, double*);

template <class TA, class TS>
void chunkwise_forward_head(const TA* q, const TA* k, const TA* v, const TS* i_pre,
                            const TS* f_pre, const Dims& dims, Variant variant, TA* h_out,
                            TS* c_states, TS* n_states, TS* m_states, TS* m_comb, TS* h_denom) {
    const long T = dims.T, L = dims.L, d_qk = dims.d_qk, d_hv = dims.d_hv;
    const long n_chunk = dims.n_chunk();
    const long state_sz = d_qk * d_hv;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d_qk));
    const bool is_exp = (variant == Variant::Exp);

    std::vector<double> fp(static_cast<size_t>(T)), ip(static_cast<size_t>(T));
    for (long t = 0; t < T; ++t) {
        fp[static_cast<size_t>(t)] = static_cast<double>(f_pre[t]);
        ip[static_cast<size_t>(t)] = static_cast<double>(i_pre[t]);
    }
    HeadGates<TS> gates = prepare_head_gates<TS>(fp.data(), ip.data(), dims, variant);

    state_recurrence_head<TA, TS>(k, v, gates, dims, variant, c_states, n_states, m_states);

    std::vector<double> s_row(static_cast<size_t>(L)), dt_row(static_cast<size_t>(L));
    std::vector<TS> num(static_cast<size_t>(d_hv)), inter(static_cast<size_t>(d_hv));
    for (long kk = 0; kk < n_chunk; ++kk) {
        const TS* c_prev = c_states + kk * state_sz;
        const TS* n_prev = n_states + kk * d_qk;
        const double m_prev = static_cast<double>(m_states[kk]);

        for (long i = 0; i < L; ++i) {
            const long t = kk * L + i;
            const TA* qt = q + t * d_qk;

            double m_intra = -std::numeric_limits<double>::infinity();
            for (long j = 0; j <= i; ++j) {
                const long tj = kk * L + j;
                const TA* kj = k + tj * d_qk;
                double acc = 0.0;
                for (long p = 0; p < d_qk; ++p)
                    acc += static_cast<double>(qt[p]) * static_cast<double>(kj[p]);
                s_row[static_cast<size_t>(j)] = acc * inv_sqrt_d;
                const double dt = static_cast<double>(gates.b[static_cast<size_t>(t)]) -
                                  static_cast<double>(gates.b[static_cast<size_t>(tj)]) +
                                  static_cast<double>(gates.i_bar[static_cast<size_t>(tj)]);
                dt_row[static_cast<size_t>(j)] = dt;
                if (is_exp && dt > m_intra) m_intra = dt;
            }

            double b_bar, scale_intra, m_c;
            if (is_exp) {
                const double shifted = static_cast<double>(gates.b[static_cast<size_t>(t)]) + m_prev;
                m_c = std::fmax(shifted, m_intra);
                scale_intra = stab::exp_guarded(m_intra - m_c);
                b_bar = stab::exp_guarded(shifted - m_c);
            } else {
                m_c = 0.0;
                scale_intra = 1.0;
                b_bar = std::exp(static_cast<double>(gates.b[static_cast<size_t>(t)]));
            }

            for (long x = 0; x < d_hv; ++x) num[static_cast<size_t>(x)] = TS(0);
            double nsum = 0.0;
            for (long j = 0; j <= i; ++j) {
                const double gate =
                    is_exp ? stab::exp_guarded(dt_row[static_cast<size_t>(j)] - m_intra)
                           : std::exp(dt_row[static_cast<size_t>(j)]);
                const double w = s_row[static_cast<size_t>(j)] * gate;
                const TA* vj = v + (kk * L + j) * d_hv;
                const TS tw = static_cast<TS>(w);
                for (long x = 0; x < d_hv; ++x)
                    num[static_cast<size_t>(x)] += tw * static_cast<TS>(vj[x]);
                nsum += w;
            }

            for (long x = 0; x < d_hv; ++x) inter[static_cast<size_t>(x)] = TS(0);
            double n_dot = 0.0;
            for (long p = 0; p < d_qk; ++p) {
                const double qb = b_bar * static_cast<double>(qt[p]) * inv_sqrt_d;
                const TS* crow = c_prev + p * d_hv;
                const TS tqb = static_cast<TS>(qb);
                for (long x = 0; x < d_hv; ++x) inter[static_cast<size_t>(x)] += tqb * crow[x];
                if (is_exp) n_dot += qb * static_cast<double>(n_prev[p]);
            }

            TA* hrow = h_out + t * d_hv;
            if (is_exp) {
                const double nsum_comb = scale_intra * nsum + n_dot;
                const double denom = std::fmax(std::fabs(nsum_comb), std::exp(-m_c));
                const TS ts_scale = static_cast<TS>(scale_intra);
                for (long x = 0; x < d_hv; ++x)
                    hrow[x] = static_cast<TA>(
                        (ts_scale * num[static_cast<size_t>(x)] + inter[static_cast<size_t>(x)]) /
                        static_cast<TS>(denom));
                m_comb[t] = static_cast<TS>(m_c);
                h_denom[t] = static_cast<TS>(denom);
            } else {
                for (long x = 0; x < d_hv; ++x)
                    hrow[x] =
                        static_cast<TA>(num[static_cast<size_t>(x)] + inter[static_cast<size_t>(x)]);
                m_comb[t] = TS(0);
                h_denom[t] = TS(1);
            }
        }
    }
}

template void chunkwise_forward_head<double, double>(const double*, const double*, const double*,
                                                     const double*, const double*, const Dims&,
                                                     Variant, double*, double*, double*, double*,
                                                     double*, double*);
template void chunkwise_forward_head<float, float>(const float*, const float*, const float*,
                                                   const float*, const float*, const Dims&,
                                                   Variant, float*, float*, float*, float*, float*,
                                                   float*);
template void chunkwise_forward_head<float, double>(const float*, const float*, const float*,
                                                    const double*, const double*, const Dims&,
                                                    Variant, float*, double*, double*, double*,
                                                    double*, double*);

void backward_state_pass_head(const double* q, const double* /*unused*/, const Dims& dims,
                              const ChunkwiseGates& gates, const double* c_states,
                              const double* m_states, const double* m_comb,
                              const double* dh_tilde, double* d_c, double* d_g, Variant variant) {
    const long L = dims.L, d_qk = dims.d_qk, d_hv = dims.d_hv;
    const long n_chunk = dims.n_chunk();
    const long state_sz = d_qk * d_hv;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d_qk));
    const bool is_exp = (variant == Variant::Exp);

    for (long i = 0; i < state_sz; ++i) d_c[n_chunk * state_sz + i] = 0.0;

    for (long kk = n_chunk - 1; kk >= 0; --kk) {
        const double g_bar =
            is_exp ? stab::exp_guarded(gates.g_sum(kk) + m_states[kk] - m_states[kk + 1])
                   : std::exp(gates.g_sum(kk));
        const double* d_next = d_c + (kk + 1) * state_sz;
        const double* c_prev = c_states + kk * state_sz;
        double* d_cur = d_c + kk * state_sz;

        double d_gbar = 0.0;
        for (long i = 0; i < state_sz; ++i) {
            d_gbar += c_prev[i] * d_next[i];
            d_cur[i] = g_bar * d_next[i];
        }
        d_g[kk] = d_gbar * g_bar;

        for (long i = 0; i < L; ++i) {
            const long t = kk * L + i;
            const double b_bar =
                is_exp ? stab::exp_guarded(gates.b_cum(kk, i) + m_states[kk] - m_comb[t])
                       : std::exp(gates.b_cum(kk, i));
            const double* qt = q + t * d_qk;
            const double* dh = dh_tilde + t * d_hv;
            for (long p = 0; p < d_qk; ++p) {
                const double qb = b_bar * qt[p] * inv_sqrt_d;
                double* drow = d_cur + p * d_hv;
                for (long x = 0; x < d_hv; ++x) drow[x] += qb * dh[x];
            }
        }
    }
}

void assemble_gate_grads_head(const double* f_pre, const double* i_pre, const Dims& dims,
                              Variant variant, const double* d_g, const double* d_b_total,
                              const double* d_a, const double* d_i_extra, double* d_fpre,
                              double* d_ipre) {
    const long L = dims.L;
    const long n_chunk = dims.n_chunk();
    const bool is_exp = (variant == Variant::Exp);

    std::vector<double> rev_b(static_cast<size_t>(L));
    for (long kk = 0; kk < n_chunk; ++kk) {
        const long base = kk * L;
        // d_fbar[i] = d_g + sum_{j>=i} d_b[j] + sum_{j<i} d_a[j]
        double rev = 0.0;
        for (long i = L - 1; i >= 0; --i) {
            rev += d_b_total[base + i];
            rev_b[static_cast<size_t>(i)] = rev;
        }
        double excl = 0.0;
        for (long i = 0; i < L; ++i) {
            const long t = base + i;
            const double d_fbar = d_g[kk] + rev_b[static_cast<size_t>(i)] + excl;
            excl += d_a[t];
            d_fpre[t] = d_fbar * sigmoid(-f_pre[t]);
            const double d_ibar = d_a[t] + d_i_extra[t];
            d_ipre[t] = is_exp ? d_ibar : d_ibar * sigmoid(-i_pre[t]);
        }
    }
}

}  // namespace detail

ChunkwiseForward chunkwise_forward(const SequenceInputs& inputs, const Dims& dims,
                                   Variant variant) {
    dims.validate_chunked();
    inputs.validate(dims);

    const long B = dims.n_batch, H = dims.n_head, T = dims.T;
    const long n_chunk = dims.n_chunk();

    ChunkwiseForward out;
    out.h_tilde = Tensor({B, H, T, dims.d_hv});
    out.states.C = Tensor({B, H, n_chunk + 1, dims.d_qk, dims.d_hv});
    out.states.n = Tensor({B, H, n_chunk + 1, dims.d_qk});
    out.states.m = Tensor({B, H, n_chunk + 1});
    out.stats.m_combine = Tensor({B, H, T});
    out.stats.h_denom = Tensor({B, H, T});

    for (long b = 0; b < B; ++b) {
        for (long h = 0; h < H; ++h) {
            detail::chunkwise_forward_head<double, double>(
                inputs.q.data() + inputs.q.offset(b, h), inputs.k.data() + inputs.k.offset(b, h),
                inputs.v.data() + inputs.v.offset(b, h),
                inputs.i_pre.data() + inputs.i_pre.offset(b, h),
                inputs.f_pre.data() + inputs.f_pre.offset(b, h), dims, variant,
                out.h_tilde.data() + out.h_tilde.offset(b, h),
                out.states.C.data() + out.states.C.offset(b, h),
                out.states.n.data() + out.states.n.offset(b, h),
                out.states.m.data() + out.states.m.offset(b, h),
                out.stats.m_combine.data() + out.stats.m_combine.offset(b, h),
                out.stats.h_denom.data() + out.stats.h_denom.offset(b, h));
        }
    }
    return out;
}

Tensor chunkwise_forward_frozen(const SequenceInputs& inputs, const Dims& dims, Variant variant,
                                const ChunkStates& frozen_states, const SavedStats& frozen_stats) {
    dims.validate_chunked();
    inputs.validate(dims);
    if (frozen_states.m.empty() || frozen_stats.m_combine.empty() || frozen_stats.h_denom.empty())
        throw ParameterError("chunkwise_forward_frozen: missing saved stats");

    const long B = dims.n_batch, H = dims.n_head, T = dims.T, L = dims.L;
    const long d_qk = dims.d_qk, d_hv = dims.d_hv;
    const long n_chunk = dims.n_chunk();
    const long state_sz = d_qk * d_hv;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d_qk));
    const bool is_exp = (variant == Variant::Exp);

    Tensor h({B, H, T, d_hv});
    std::vector<double> c_states(static_cast<size_t>((n_chunk + 1) * state_sz));
    std::vector<double> num(static_cast<size_t>(d_hv));

    for (long bb = 0; bb < B; ++bb) {
        for (long hh = 0; hh < H; ++hh) {
            const double* q = inputs.q.data() + inputs.q.offset(bb, hh);
            const double* k = inputs.k.data() + inputs.k.offset(bb, hh);
            const double* v = inputs.v.data() + inputs.v.offset(bb, hh);
            const double* fp = inputs.f_pre.data() + inputs.f_pre.offset(bb, hh);
            const double* ip = inputs.i_pre.data() + inputs.i_pre.offset(bb, hh);
            const double* m_states = frozen_states.m.data() + frozen_states.m.offset(bb, hh);
            const double* m_comb =
                frozen_stats.m_combine.data() + frozen_stats.m_combine.offset(bb, hh);
            const double* denom0 =
                frozen_stats.h_denom.data() + frozen_stats.h_denom.offset(bb, hh);

            ChunkwiseGates gates = chunkwise_gates(fp, ip, T, L, variant);

            // Live state recurrence under the pinned max-state schedule.
            for (long i = 0; i < state_sz; ++i) c_states[static_cast<size_t>(i)] = 0.0;
            for (long kk = 0; kk < n_chunk; ++kk) {
                const double* c_prev = c_states.data() + kk * state_sz;
                double* c_next = c_states.data() + (kk + 1) * state_sz;
                const double g_bar =
                    is_exp ? std::exp(gates.g_sum(kk) + m_states[kk] - m_states[kk + 1])
                           : std::exp(gates.g_sum(kk));
                for (long i = 0; i < state_sz; ++i) c_next[i] = g_bar * c_prev[i];
                for (long j = 0; j < L; ++j) {
                    const long t = kk * L + j;
                    const double aw = is_exp ? std::exp(gates.a_tail(kk, j) - m_states[kk + 1])
                                             : std::exp(gates.a_tail(kk, j));
                    const double* kt = k + t * d_qk;
                    const double* vt = v + t * d_hv;
                    for (long p = 0; p < d_qk; ++p) {
                        const double kw = aw * kt[p];
                        double* crow = c_next + p * d_hv;
                        for (long x = 0; x < d_hv; ++x) crow[x] += kw * vt[x];
                    }
                }
            }

            for (long kk = 0; kk < n_chunk; ++kk) {
                const double* c_prev = c_states.data() + kk * state_sz;
                for (long i = 0; i < L; ++i) {
                    const long t = kk * L + i;
                    const double* qt = q + t * d_qk;
                    for (long x = 0; x < d_hv; ++x) num[static_cast<size_t>(x)] = 0.0;
                    for (long j = 0; j <= i; ++j) {
                        const long tj = kk * L + j;
                        const double* kj = k + tj * d_qk;
                        double acc = 0.0;
                        for (long p = 0; p < d_qk; ++p) acc += qt[p] * kj[p];
                        const double ib = is_exp ? ip[tj] : log_sigmoid(ip[tj]);
                        const double dt = gates.b_cum(kk, i) - gates.b_cum(kk, j) + ib;
                        const double w =
                            acc * inv_sqrt_d * std::exp(is_exp ? dt - m_comb[t] : dt);
                        const double* vj = v + tj * d_hv;
                        for (long x = 0; x < d_hv; ++x) num[static_cast<size_t>(x)] += w * vj[x];
                    }
                    const double b_bar =
                        is_exp ? std::exp(gates.b_cum(kk, i) + m_states[kk] - m_comb[t])
                               : std::exp(gates.b_cum(kk, i));
                    for (long p = 0; p < d_qk; ++p) {
                        const double qb = b_bar * qt[p] * inv_sqrt_d;
                        const double* crow = c_prev + p * d_hv;
                        for (long x = 0; x < d_hv; ++x) num[static_cast<size_t>(x)] += qb * crow[x];
                    }
                    double* hrow = h.data() + h.offset(bb, hh, t);
                    const double denom = is_exp ? denom0[t] : 1.0;
                    for (long x = 0; x < d_hv; ++x) hrow[x] = num[static_cast<size_t>(x)] / denom;
                }
            }
        }
    }
    return h;
}

Gradients chunkwise_backward(const SequenceInputs& inputs, const Dims& dims, Variant variant,
                             const Tensor& d_h, const ChunkStates& states,
                             const SavedStats& stats) {
    dims.validate_chunked();
    inputs.validate(dims);
    if (states.C.empty() || states.m.empty() || stats.m_combine.empty() || stats.h_denom.empty())
        throw ParameterError("chunkwise_backward: missing saved forward tensors");
    if (!d_h.same_shape(inputs.v)) throw GeometryError("chunkwise_backward: dH shape mismatch");

    const long B = dims.n_batch, H = dims.n_head, T = dims.T, L = dims.L;
    const long d_qk = dims.d_qk, d_hv = dims.d_hv;
    const long n_chunk = dims.n_chunk();
    const long state_sz = d_qk * d_hv;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d_qk));
    const bool is_exp = (variant == Variant::Exp);

    Gradients g;
    g.dq = Tensor({B, H, T, d_qk});
    g.dk = Tensor({B, H, T, d_qk});
    g.dv = Tensor({B, H, T, d_hv});
    g.d_fpre = Tensor({B, H, T});
    g.d_ipre = Tensor({B, H, T});

    std::vector<double> dh_tilde(static_cast<size_t>(T * d_hv));
    std::vector<double> d_c(static_cast<size_t>((n_chunk + 1) * state_sz));
    std::vector<double> d_g(static_cast<size_t>(n_chunk));
    std::vector<double> d_b_total(static_cast<size_t>(T)), d_a(static_cast<size_t>(T)),
        d_i_extra(static_cast<size_t>(T));
    std::vector<double> s_mat(static_cast<size_t>(L * L)), dprime(static_cast<size_t>(L * L)),
        ds_bar(static_cast<size_t>(L * L));

    for (long bb = 0; bb < B; ++bb) {
        for (long hh = 0; hh < H; ++hh) {
            const double* q = inputs.q.data() + inputs.q.offset(bb, hh);
            const double* k = inputs.k.data() + inputs.k.offset(bb, hh);
            const double* v = inputs.v.data() + inputs.v.offset(bb, hh);
            const double* fp = inputs.f_pre.data() + inputs.f_pre.offset(bb, hh);
            const double* ip = inputs.i_pre.data() + inputs.i_pre.offset(bb, hh);
            const double* c_states = states.C.data() + states.C.offset(bb, hh);
            const double* m_states = states.m.data() + states.m.offset(bb, hh);
            const double* m_comb = stats.m_combine.data() + stats.m_combine.offset(bb, hh);
            const double* denom = stats.h_denom.data() + stats.h_denom.offset(bb, hh);
            const double* dh = d_h.data() + d_h.offset(bb, hh);

            ChunkwiseGates gates = chunkwise_gates(fp, ip, T, L, variant);

            for (long t = 0; t < T; ++t)
                for (long x = 0; x < d_hv; ++x)
                    dh_tilde[static_cast<size_t>(t * d_hv + x)] =
                        dh[t * d_hv + x] / (is_exp ? denom[t] : 1.0);

            detail::backward_state_pass_head(q, nullptr, dims, gates, c_states, m_states, m_comb,
                                             dh_tilde.data(), d_c.data(), d_g.data(), variant);

            std::fill(d_b_total.begin(), d_b_total.end(), 0.0);
            std::fill(d_a.begin(), d_a.end(), 0.0);
            std::fill(d_i_extra.begin(), d_i_extra.end(), 0.0);

            for (long kk = 0; kk < n_chunk; ++kk) {
                const long base = kk * L;
                const double* c_prev = c_states + kk * state_sz;
                const double* d_next = d_c.data() + (kk + 1) * state_sz;

                // Recompute S and the combine-consistent gate weights D'.
                for (long i = 0; i < L; ++i) {
                    const double* qi = q + (base + i) * d_qk;
                    for (long j = 0; j <= i; ++j) {
                        const double* kj = k + (base + j) * d_qk;
                        double acc = 0.0;
                        for (long p = 0; p < d_qk; ++p) acc += qi[p] * kj[p];
                        s_mat[static_cast<size_t>(i * L + j)] = acc * inv_sqrt_d;
                        const double ib = is_exp ? ip[base + j] : log_sigmoid(ip[base + j]);
                        const double dt = gates.b_cum(kk, i) - gates.b_cum(kk, j) + ib;
                        dprime[static_cast<size_t>(i * L + j)] =
                            is_exp ? stab::exp_guarded(dt - m_comb[base + i]) : std::exp(dt);
                    }
                }

                // dS_bar = dH~ V^T on the lower triangle.
                for (long i = 0; i < L; ++i) {
                    const double* dhi = dh_tilde.data() + (base + i) * d_hv;
                    for (long j = 0; j <= i; ++j) {
                        const double* vj = v + (base + j) * d_hv;
                        double acc = 0.0;
                        for (long x = 0; x < d_hv; ++x) acc += dhi[x] * vj[x];
                        ds_bar[static_cast<size_t>(i * L + j)] = acc;
                    }
                }

                for (long i = 0; i < L; ++i) {
                    const long t = base + i;
                    const double* qt = q + t * d_qk;
                    const double* dhi = dh_tilde.data() + t * d_hv;
                    double* dq_row = g.dq.data() + g.dq.offset(bb, hh, t);

                    // Intra: dQ = (dS_bar o D') K / sqrt(d); gate-matrix row sums.
                    double row_dd = 0.0;
                    for (long j = 0; j <= i; ++j) {
                        const double ds = ds_bar[static_cast<size_t>(i * L + j)] *
                                          dprime[static_cast<size_t>(i * L + j)];
                        const double* kj = k + (base + j) * d_qk;
                        for (long p = 0; p < d_qk; ++p) dq_row[p] += ds * inv_sqrt_d * kj[p];
                        const double d_dt = ds_bar[static_cast<size_t>(i * L + j)] *
                                            s_mat[static_cast<size_t>(i * L + j)] *
                                            dprime[static_cast<size_t>(i * L + j)];
                        row_dd += d_dt;
                        d_b_total[static_cast<size_t>(base + j)] -= d_dt;
                        d_i_extra[static_cast<size_t>(base + j)] += d_dt;
                    }
                    d_b_total[static_cast<size_t>(t)] += row_dd;

                    // Inter output path: dQ_bar = dH~ C_{k-1}^T.
                    const double b_bar =
                        is_exp ? stab::exp_guarded(gates.b_cum(kk, i) + m_states[kk] - m_comb[t])
                               : std::exp(gates.b_cum(kk, i));
                    double d_bbar = 0.0;
                    for (long p = 0; p < d_qk; ++p) {
                        const double* crow = c_prev + p * d_hv;
                        double acc = 0.0;
                        for (long x = 0; x < d_hv; ++x) acc += dhi[x] * crow[x];
                        dq_row[p] += b_bar * acc * inv_sqrt_d;
                        d_bbar += acc * qt[p] * inv_sqrt_d;
                    }
                    d_b_total[static_cast<size_t>(t)] += d_bbar * b_bar;
                }

                for (long j = 0; j < L; ++j) {
                    const long t = base + j;
                    const double* kt = k + t * d_qk;
                    const double* vt = v + t * d_hv;
                    double* dk_row = g.dk.data() + g.dk.offset(bb, hh, t);
                    double* dv_row = g.dv.data() + g.dv.offset(bb, hh, t);

                    // Intra: dK = (dS_bar o D')^T Q / sqrt(d); dV = S_bar'^T dH~.
                    for (long i = j; i < L; ++i) {
                        const double ds = ds_bar[static_cast<size_t>(i * L + j)] *
                                          dprime[static_cast<size_t>(i * L + j)];
                        const double* qi = q + (base + i) * d_qk;
                        for (long p = 0; p < d_qk; ++p) dk_row[p] += ds * inv_sqrt_d * qi[p];
                        const double w = s_mat[static_cast<size_t>(i * L + j)] *
                                         dprime[static_cast<size_t>(i * L + j)];
                        const double* dhi = dh_tilde.data() + (base + i) * d_hv;
                        for (long x = 0; x < d_hv; ++x) dv_row[x] += w * dhi[x];
                    }

                    // Inter recurrence path via the next state gradient.
                    const double a_bar =
                        is_exp ? stab::exp_guarded(gates.a_tail(kk, j) - m_states[kk + 1])
                               : std::exp(gates.a_tail(kk, j));
                    double d_abar = 0.0;
                    for (long p = 0; p < d_qk; ++p) {
                        const double* drow = d_next + p * d_hv;
                        double acc = 0.0;
                        for (long x = 0; x < d_hv; ++x) acc += vt[x] * drow[x];
                        dk_row[p] += a_bar * acc;
                        d_abar += acc * kt[p];
                        const double kw = a_bar * kt[p];
                        for (long x = 0; x < d_hv; ++x) dv_row[x] += kw * drow[x];
                    }
                    d_a[static_cast<size_t>(t)] = d_abar * a_bar;
                }
            }

            detail::assemble_gate_grads_head(fp, ip, dims, variant, d_g.data(), d_b_total.data(),
                                             d_a.data(), d_i_extra.data(),
                                             g.d_fpre.data() + g.d_fpre.offset(bb, hh),
                                             g.d_ipre.data() + g.d_ipre.offset(bb, hh));
        }
    }
    return g;
}

}  // namespace mlstm
