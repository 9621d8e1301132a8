#include "mlstm/tiled.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include "mlstm/detail_kernels.hpp"

namespace mlstm {

namespace {
constexpr double kNegInf = -1e30;  // masked gate entries; exp maps to exact 0

long largest_divisor_up_to(long n, long cap) {
    for (long d = std::min(n, cap); d >= 1; --d)
        if (n % d == 0) return d;
    return 1;
}
}  // namespace

void BlockConfig::validate(const Dims& dims) const {
    if (b_lhq < 1 || b_lkv < 1 || b_dqk < 1 || b_dhv < 1)
        throw GeometryError("block sizes must be >= 1");
    if (b_lhq < b_lkv) throw GeometryError("b_lhq must be >= b_lkv");
    if (dims.L % b_lhq != 0 || dims.L % b_lkv != 0)
        throw GeometryError("sequence block sizes must divide L");
    if (b_lhq % b_lkv != 0) throw GeometryError("b_lkv must divide b_lhq");
    if (dims.d_qk % b_dqk != 0) throw GeometryError("b_dqk must divide d_qk");
    if (dims.d_hv % b_dhv != 0) throw GeometryError("b_dhv must divide d_hv");
}

BlockConfig BlockConfig::pick_default(const Dims& dims) {
    BlockConfig cfg;
    cfg.b_lhq = largest_divisor_up_to(dims.L, 32);
    cfg.b_lkv = largest_divisor_up_to(cfg.b_lhq, 8);
    cfg.b_dqk = largest_divisor_up_to(dims.d_qk, 16);
    cfg.b_dhv = largest_divisor_up_to(dims.d_hv, 32);
    return cfg;
}

namespace detail {

long kv_block_count(long i_lq, const BlockConfig& blocks) {
    return ((i_lq + 1) * blocks.b_lhq) / blocks.b_lkv;
}

bool block_needs_mask(long i_kv_1based, long i_lq, const BlockConfig& blocks) {
    return i_kv_1based * blocks.b_lkv >= i_lq * blocks.b_lhq;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace detail {

template <class TA, class TS>
void tfla_forward_head(const TA* q, const TA* k, const TA* v, const HeadGates<TS>& gates,
                       const Dims& dims, const BlockConfig& blocks, Variant variant, TA* h_out,
                       const TS* c_states, const TS* n_states, const TS* m_states, TS* m_comb,
                       TS* h_denom) {
    const long L = dims.L, d_qk = dims.d_qk, d_hv = dims.d_hv;
    const long n_chunk = dims.n_chunk();
    const long state_sz = d_qk * d_hv;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d_qk));
    const bool is_exp = (variant == Variant::Exp);

    const long blhq = blocks.b_lhq, blkv = blocks.b_lkv, bdqk = blocks.b_dqk, bdhv = blocks.b_dhv;
    const long n_lhq = L / blhq, n_dhv = d_hv / bdhv, n_dqk = d_qk / bdqk;

    std::vector<double> s_blk(static_cast<size_t>(blhq * blkv));
    std::vector<double> dt_blk(static_cast<size_t>(blhq * blkv));
    std::vector<double> h_intra(static_cast<size_t>(blhq * bdhv));
    std::vector<double> h_inter(static_cast<size_t>(blhq * bdhv));
    std::vector<double> n_intra(static_cast<size_t>(blhq)), n_inter(static_cast<size_t>(blhq));
    std::vector<double> m_old(static_cast<size_t>(blhq)), m_cv(static_cast<size_t>(blhq));
    std::vector<double> b_bar(static_cast<size_t>(blhq));

    for (long kk = 0; kk < n_chunk; ++kk) {
        const TS* c_prev = c_states + kk * state_sz;
        const TS* n_prev = n_states + kk * d_qk;
        const double m_prev = static_cast<double>(m_states[kk]);
        const long base = kk * L;

        for (long i_lq = 0; i_lq < n_lhq; ++i_lq) {
            const long row0 = i_lq * blhq;  // chunk-local first row
            for (long i_hv = 0; i_hv < n_dhv; ++i_hv) {
                const long hv0 = i_hv * bdhv;

                std::fill(h_intra.begin(), h_intra.end(), 0.0);
                std::fill(n_intra.begin(), n_intra.end(), 0.0);
                std::fill(m_old.begin(), m_old.end(),
                          -std::numeric_limits<double>::infinity());

                const long n_kv = detail::kv_block_count(i_lq, blocks);
                for (long ib = 1; ib <= n_kv; ++ib) {
                    const long col0 = (ib - 1) * blkv;

                    for (long r = 0; r < blhq; ++r)
                        for (long c = 0; c < blkv; ++c) s_blk[static_cast<size_t>(r * blkv + c)] = 0.0;
                    for (long jb = 0; jb < n_dqk; ++jb) {
                        const long p0 = jb * bdqk;
                        for (long r = 0; r < blhq; ++r) {
                            const TA* qrow = q + (base + row0 + r) * d_qk + p0;
                            double* srow = s_blk.data() + r * blkv;
                            for (long c = 0; c < blkv; ++c) {
                                const TA* krow = k + (base + col0 + c) * d_qk + p0;
                                double acc = 0.0;
                                for (long p = 0; p < bdqk; ++p)
                                    acc += static_cast<double>(qrow[p]) *
                                           static_cast<double>(krow[p]);
                                srow[c] += acc;
                            }
                        }
                    }

                    const bool mask = detail::block_needs_mask(ib, i_lq, blocks);
                    for (long r = 0; r < blhq; ++r) {
                        const long lr = row0 + r;
                        double* drow = dt_blk.data() + r * blkv;
                        for (long c = 0; c < blkv; ++c) {
                            const long lc = col0 + c;
                            if (mask && lc > lr) {
                                drow[c] = kNegInf;
                                continue;
                            }
                            drow[c] = static_cast<double>(gates.b[static_cast<size_t>(base + lr)]) -
                                      static_cast<double>(gates.b[static_cast<size_t>(base + lc)]) +
                                      static_cast<double>(gates.i_bar[static_cast<size_t>(base + lc)]);
                        }
                    }

                    if (is_exp) {
                        for (long r = 0; r < blhq; ++r) {
                            const double* drow = dt_blk.data() + r * blkv;
                            double m_new = m_old[static_cast<size_t>(r)];
                            for (long c = 0; c < blkv; ++c)
                                if (drow[c] > m_new) m_new = drow[c];
                            const double rescale =
                                stab::exp_guarded(m_old[static_cast<size_t>(r)] - m_new);
                            double* hrow = h_intra.data() + r * bdhv;
                            for (long x = 0; x < bdhv; ++x) hrow[x] *= rescale;
                            n_intra[static_cast<size_t>(r)] *= rescale;

                            const double* srow = s_blk.data() + r * blkv;
                            for (long c = 0; c < blkv; ++c) {
                                const double w = srow[c] * inv_sqrt_d *
                                                 stab::exp_guarded(drow[c] - m_new);
                                const TA* vrow = v + (base + col0 + c) * d_hv + hv0;
                                for (long x = 0; x < bdhv; ++x)
                                    hrow[x] += w * static_cast<double>(vrow[x]);
                                n_intra[static_cast<size_t>(r)] += w;
                            }
                            m_old[static_cast<size_t>(r)] = m_new;
                        }
                    } else {
                        for (long r = 0; r < blhq; ++r) {
                            const double* drow = dt_blk.data() + r * blkv;
                            const double* srow = s_blk.data() + r * blkv;
                            double* hrow = h_intra.data() + r * bdhv;
                            for (long c = 0; c < blkv; ++c) {
                                const double w = srow[c] * inv_sqrt_d * std::exp(drow[c]);
                                const TA* vrow = v + (base + col0 + c) * d_hv + hv0;
                                for (long x = 0; x < bdhv; ++x)
                                    hrow[x] += w * static_cast<double>(vrow[x]);
                            }
                        }
                    }
                }

                // Inter-chunk contribution; for the sigmoid variant this is
                // the fused continuation of the same accumulator.
                std::fill(h_inter.begin(), h_inter.end(), 0.0);
                std::fill(n_inter.begin(), n_inter.end(), 0.0);
                if (is_exp) {
                    for (long r = 0; r < blhq; ++r) {
                        const double shifted =
                            static_cast<double>(gates.b[static_cast<size_t>(base + row0 + r)]) +
                            m_prev;
                        m_cv[static_cast<size_t>(r)] =
                            std::fmax(shifted, m_old[static_cast<size_t>(r)]);
                        b_bar[static_cast<size_t>(r)] =
                            stab::exp_guarded(shifted - m_cv[static_cast<size_t>(r)]);
                    }
                } else {
                    for (long r = 0; r < blhq; ++r)
                        b_bar[static_cast<size_t>(r)] = std::exp(
                            static_cast<double>(gates.b[static_cast<size_t>(base + row0 + r)]));
                }

                for (long jb = 0; jb < n_dqk; ++jb) {
                    const long p0 = jb * bdqk;
                    for (long r = 0; r < blhq; ++r) {
                        const TA* qrow = q + (base + row0 + r) * d_qk + p0;
                        double* hrow = h_inter.data() + r * bdhv;
                        const double bb = b_bar[static_cast<size_t>(r)];
                        for (long p = 0; p < bdqk; ++p) {
                            const double qb = inv_sqrt_d * static_cast<double>(qrow[p]) * bb;
                            const TS* crow = c_prev + (p0 + p) * d_hv + hv0;
                            for (long x = 0; x < bdhv; ++x)
                                hrow[x] += qb * static_cast<double>(crow[x]);
                            if (is_exp)
                                n_inter[static_cast<size_t>(r)] +=
                                    qb * static_cast<double>(n_prev[p0 + p]);
                        }
                    }
                }

                for (long r = 0; r < blhq; ++r) {
                    const long t = base + row0 + r;
                    TA* out = h_out + t * d_hv + hv0;
                    const double* hi = h_intra.data() + r * bdhv;
                    const double* he = h_inter.data() + r * bdhv;
                    if (is_exp) {
                        const double sc = stab::exp_guarded(m_old[static_cast<size_t>(r)] -
                                                            m_cv[static_cast<size_t>(r)]);
                        const double nc = sc * n_intra[static_cast<size_t>(r)] +
                                          n_inter[static_cast<size_t>(r)];
                        const double denom =
                            std::fmax(std::fabs(nc), std::exp(-m_cv[static_cast<size_t>(r)]));
                        for (long x = 0; x < bdhv; ++x)
                            out[x] = static_cast<TA>((sc * hi[x] + he[x]) / denom);
                        if (i_hv == 0) {
                            m_comb[t] = static_cast<TS>(m_cv[static_cast<size_t>(r)]);
                            h_denom[t] = static_cast<TS>(denom);
                        }
                    } else {
                        for (long x = 0; x < bdhv; ++x) out[x] = static_cast<TA>(hi[x] + he[x]);
                        if (i_hv == 0) {
                            m_comb[t] = TS(0);
                            h_denom[t] = TS(1);
                        }
                    }
                }
            }
        }
    }
}

template void tfla_forward_head<double, double>(const double*, const double*, const double*,
                                                const HeadGates<double>&, const Dims&,
                                                const BlockConfig&, Variant, double*,
                                                const double*, const double*, const double*,
                                                double*, double*);
template void tfla_forward_head<float, float>(const float*, const float*, const float*,
                                              const HeadGates<float>&, const Dims&,
                                              const BlockConfig&, Variant, float*, const float*,
                                              const float*, const float*, float*, float*);
template void tfla_forward_head<float, double>(const float*, const float*, const float*,
                                               const HeadGates<double>&, const Dims&,
                                               const BlockConfig&, Variant, float*, const double*,
                                               const double*, const double*, double*, double*);

}  // namespace detail

ChunkwiseForward tfla_forward(const SequenceInputs& inputs, const Dims& dims,
                              const BlockConfig& blocks, Variant variant) {
    dims.validate_chunked();
    blocks.validate(dims);
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
            const double* fp = inputs.f_pre.data() + inputs.f_pre.offset(b, h);
            const double* ip = inputs.i_pre.data() + inputs.i_pre.offset(b, h);
            detail::HeadGates<double> gates =
                detail::prepare_head_gates<double>(fp, ip, dims, variant);

            double* c_states = out.states.C.data() + out.states.C.offset(b, h);
            double* n_states = out.states.n.data() + out.states.n.offset(b, h);
            double* m_states = out.states.m.data() + out.states.m.offset(b, h);
            detail::state_recurrence_head<double, double>(
                inputs.k.data() + inputs.k.offset(b, h), inputs.v.data() + inputs.v.offset(b, h),
                gates, dims, variant, c_states, n_states, m_states);

            detail::tfla_forward_head<double, double>(
                inputs.q.data() + inputs.q.offset(b, h), inputs.k.data() + inputs.k.offset(b, h),
                inputs.v.data() + inputs.v.offset(b, h), gates, dims, blocks, variant,
                out.h_tilde.data() + out.h_tilde.offset(b, h), c_states, n_states, m_states,
                out.stats.m_combine.data() + out.stats.m_combine.offset(b, h),
                out.stats.h_denom.data() + out.stats.h_denom.offset(b, h));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace {

// Shared per-head context for the three gradient kernels.
struct BackwardHeadCtx {
    const double *q, *k, *v, *fp, *ip;
    const double *c_states, *m_states, *m_comb, *h_denom, *dh;
    Dims dims;
    Variant variant;
    ChunkwiseGates gates;
    std::vector<double> dh_tilde;       // [T * d_hv]
    std::vector<double> b_bar, a_bar;   // [T]
    std::vector<double> i_bar;          // [T]
    std::vector<double> d_c;            // [(n_chunk+1) * d_qk * d_hv]
    std::vector<double> d_g;            // [n_chunk]

    BackwardHeadCtx(const SequenceInputs& inputs, const Dims& d, Variant var, const Tensor& d_h,
                    const ChunkStates& states, const SavedStats& stats, long bb, long hh,
                    bool need_state_pass)
        : dims(d), variant(var) {
        q = inputs.q.data() + inputs.q.offset(bb, hh);
        k = inputs.k.data() + inputs.k.offset(bb, hh);
        v = inputs.v.data() + inputs.v.offset(bb, hh);
        fp = inputs.f_pre.data() + inputs.f_pre.offset(bb, hh);
        ip = inputs.i_pre.data() + inputs.i_pre.offset(bb, hh);
        c_states = states.C.data() + states.C.offset(bb, hh);
        m_states = states.m.data() + states.m.offset(bb, hh);
        m_comb = stats.m_combine.data() + stats.m_combine.offset(bb, hh);
        h_denom = stats.h_denom.data() + stats.h_denom.offset(bb, hh);
        dh = d_h.data() + d_h.offset(bb, hh);

        const long T = dims.T, L = dims.L, d_hv = dims.d_hv;
        const bool is_exp = (variant == Variant::Exp);
        gates = chunkwise_gates(fp, ip, T, L, variant);

        dh_tilde.resize(static_cast<size_t>(T * d_hv));
        for (long t = 0; t < T; ++t)
            for (long x = 0; x < d_hv; ++x)
                dh_tilde[static_cast<size_t>(t * d_hv + x)] =
                    dh[t * d_hv + x] / (is_exp ? h_denom[t] : 1.0);

        b_bar.resize(static_cast<size_t>(T));
        a_bar.resize(static_cast<size_t>(T));
        i_bar.resize(static_cast<size_t>(T));
        for (long t = 0; t < T; ++t) {
            const long kk = t / L, j = t % L;
            b_bar[static_cast<size_t>(t)] =
                is_exp ? stab::exp_guarded(gates.b_cum(kk, j) + m_states[kk] - m_comb[t])
                       : std::exp(gates.b_cum(kk, j));
            a_bar[static_cast<size_t>(t)] =
                is_exp ? stab::exp_guarded(gates.a_tail(kk, j) - m_states[kk + 1])
                       : std::exp(gates.a_tail(kk, j));
            i_bar[static_cast<size_t>(t)] = is_exp ? ip[t] : log_sigmoid(ip[t]);
        }

        if (need_state_pass) {
            d_c.resize(static_cast<size_t>((dims.n_chunk() + 1) * dims.d_qk * d_hv));
            d_g.resize(static_cast<size_t>(dims.n_chunk()));
            mlstm::detail::backward_state_pass_head(q, nullptr, dims, gates, c_states, m_states,
                                                    m_comb, dh_tilde.data(), d_c.data(),
                                                    d_g.data(), variant);
        }
    }

    // Combine-consistent gate weight for chunk-local (row, col), or 0 above
    // the diagonal.
    double gate_weight(long kk, long lr, long lc) const {
        const long base = kk * dims.L;
        const double dt = gates.b_cum(kk, lr) - gates.b_cum(kk, lc) +
                          i_bar[static_cast<size_t>(base + lc)];
        if (variant == Variant::Exp) return stab::exp_guarded(dt - m_comb[base + lr]);
        return std::exp(dt);
    }
};

void validate_backward_args(const SequenceInputs& inputs, const Dims& dims,
                            const BlockConfig& blocks, const Tensor& d_h,
                            const ChunkStates& states, const SavedStats& stats) {
    dims.validate_chunked();
    blocks.validate(dims);
    inputs.validate(dims);
    if (states.C.empty() || states.m.empty() || stats.m_combine.empty() || stats.h_denom.empty())
        throw ParameterError("tiled backward: missing saved forward tensors");
    if (!d_h.same_shape(inputs.v)) throw GeometryError("tiled backward: dH shape mismatch");
}

}  // namespace

TfLaDqResult tfla_backward_dq(const SequenceInputs& inputs, const Dims& dims,
                              const BlockConfig& blocks, Variant variant, const Tensor& d_h,
                              const ChunkStates& states, const SavedStats& stats) {
    validate_backward_args(inputs, dims, blocks, d_h, states, stats);

    const long B = dims.n_batch, H = dims.n_head, L = dims.L;
    const long d_qk = dims.d_qk, d_hv = dims.d_hv;
    const long state_sz = d_qk * d_hv;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d_qk));
    const long blhq = blocks.b_lhq, blkv = blocks.b_lkv, bdqk = blocks.b_dqk, bdhv = blocks.b_dhv;
    const long n_lhq = L / blhq, n_dqk = d_qk / bdqk, n_dhv = d_hv / bdhv;

    TfLaDqResult out;
    out.dq = Tensor({B, H, dims.T, d_qk});
    out.d_b_cum = Tensor({B, H, dims.T});

    std::vector<double> dsb(static_cast<size_t>(blhq * blkv));
    std::vector<double> dp(static_cast<size_t>(blhq * blkv));
    std::vector<double> acc(static_cast<size_t>(blhq * bdqk));
    std::vector<double> dqbar(static_cast<size_t>(blhq * bdqk));

    for (long bb = 0; bb < B; ++bb) {
        for (long hh = 0; hh < H; ++hh) {
            BackwardHeadCtx ctx(inputs, dims, variant, d_h, states, stats, bb, hh, false);
            double* dq_out = out.dq.data() + out.dq.offset(bb, hh);
            double* dbq_out = out.d_b_cum.data() + out.d_b_cum.offset(bb, hh);

            for (long kk = 0; kk < dims.n_chunk(); ++kk) {
                const long base = kk * L;
                const double* c_prev = ctx.c_states + kk * state_sz;

                for (long i_lq = 0; i_lq < n_lhq; ++i_lq) {
                    const long row0 = i_lq * blhq;
                    const long n_kv = detail::kv_block_count(i_lq, blocks);

                    for (long i_dqk = 0; i_dqk < n_dqk; ++i_dqk) {
                        const long p0 = i_dqk * bdqk;
                        std::fill(acc.begin(), acc.end(), 0.0);

                        for (long ib = 1; ib <= n_kv; ++ib) {
                            const long col0 = (ib - 1) * blkv;

                            // dS_bar block via the d_hv loop axis.
                            std::fill(dsb.begin(), dsb.end(), 0.0);
                            for (long hb = 0; hb < n_dhv; ++hb) {
                                const long x0 = hb * bdhv;
                                for (long r = 0; r < blhq; ++r) {
                                    const double* dhr =
                                        ctx.dh_tilde.data() + (base + row0 + r) * d_hv + x0;
                                    double* row = dsb.data() + r * blkv;
                                    for (long c = 0; c < blkv; ++c) {
                                        const double* vr = ctx.v + (base + col0 + c) * d_hv + x0;
                                        double a = 0.0;
                                        for (long x = 0; x < bdhv; ++x) a += dhr[x] * vr[x];
                                        row[c] += a;
                                    }
                                }
                            }

                            for (long r = 0; r < blhq; ++r) {
                                const long lr = row0 + r;
                                double* row = dp.data() + r * blkv;
                                for (long c = 0; c < blkv; ++c) {
                                    const long lc = col0 + c;
                                    row[c] = (lc > lr) ? 0.0 : ctx.gate_weight(kk, lr, lc);
                                }
                            }

                            for (long r = 0; r < blhq; ++r) {
                                const double* dsr = dsb.data() + r * blkv;
                                const double* dpr = dp.data() + r * blkv;
                                double* arow = acc.data() + r * bdqk;
                                for (long c = 0; c < blkv; ++c) {
                                    const double ds = dsr[c] * dpr[c];
                                    if (ds == 0.0) continue;
                                    const double* kr = ctx.k + (base + col0 + c) * d_qk + p0;
                                    for (long p = 0; p < bdqk; ++p) arow[p] += ds * kr[p];
                                }
                            }

                            // Gate-matrix row sums; S is recomputed here, which
                            // the cost model deliberately does not count.
                            if (i_dqk == 0) {
                                for (long r = 0; r < blhq; ++r) {
                                    const long lr = row0 + r;
                                    const double* qrow = ctx.q + (base + lr) * d_qk;
                                    const double* dsr = dsb.data() + r * blkv;
                                    const double* dpr = dp.data() + r * blkv;
                                    double row_dd = 0.0;
                                    for (long c = 0; c < blkv; ++c) {
                                        if (dpr[c] == 0.0) continue;
                                        const double* krow = ctx.k + (base + col0 + c) * d_qk;
                                        double s = 0.0;
                                        for (long p = 0; p < d_qk; ++p) s += qrow[p] * krow[p];
                                        row_dd += dsr[c] * s * inv_sqrt_d * dpr[c];
                                    }
                                    dbq_out[base + lr] += row_dd;
                                }
                            }
                        }

                        // Inter output path: dQ_bar = dH~ C_{k-1}^T.
                        std::fill(dqbar.begin(), dqbar.end(), 0.0);
                        for (long hb = 0; hb < n_dhv; ++hb) {
                            const long x0 = hb * bdhv;
                            for (long r = 0; r < blhq; ++r) {
                                const double* dhr =
                                    ctx.dh_tilde.data() + (base + row0 + r) * d_hv + x0;
                                double* row = dqbar.data() + r * bdqk;
                                for (long p = 0; p < bdqk; ++p) {
                                    const double* crow = c_prev + (p0 + p) * d_hv + x0;
                                    double a = 0.0;
                                    for (long x = 0; x < bdhv; ++x) a += dhr[x] * crow[x];
                                    row[p] += a;
                                }
                            }
                        }

                        for (long r = 0; r < blhq; ++r) {
                            const long t = base + row0 + r;
                            const double bb_r = ctx.b_bar[static_cast<size_t>(t)];
                            double* dq_row = dq_out + t * d_qk + p0;
                            const double* arow = acc.data() + r * bdqk;
                            const double* qbar = dqbar.data() + r * bdqk;
                            const double* qrow = ctx.q + t * d_qk + p0;
                            double d_bbar = 0.0;
                            for (long p = 0; p < bdqk; ++p) {
                                dq_row[p] = (arow[p] + qbar[p] * bb_r) * inv_sqrt_d;
                                d_bbar += qbar[p] * qrow[p] * inv_sqrt_d;
                            }
                            dbq_out[t] += d_bbar * bb_r;
                        }
                    }
                }
            }
        }
    }
    return out;
}

TfLaDkResult tfla_backward_dk(const SequenceInputs& inputs, const Dims& dims,
                              const BlockConfig& blocks, Variant variant, const Tensor& d_h,
                              const ChunkStates& states, const SavedStats& stats) {
    validate_backward_args(inputs, dims, blocks, d_h, states, stats);

    const long B = dims.n_batch, H = dims.n_head, L = dims.L;
    const long d_qk = dims.d_qk, d_hv = dims.d_hv;
    const long state_sz = d_qk * d_hv;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d_qk));
    const long blhq = blocks.b_lhq, blkv = blocks.b_lkv, bdqk = blocks.b_dqk, bdhv = blocks.b_dhv;
    const long n_lhq = L / blhq, n_lkv = L / blkv, n_dqk = d_qk / bdqk, n_dhv = d_hv / bdhv;

    TfLaDkResult out;
    out.dk = Tensor({B, H, dims.T, d_qk});
    out.d_a_tail = Tensor({B, H, dims.T});
    out.d_b_cum = Tensor({B, H, dims.T});
    out.d_i_log = Tensor({B, H, dims.T});

    std::vector<double> dsb(static_cast<size_t>(blhq * blkv));
    std::vector<double> dp(static_cast<size_t>(blhq * blkv));
    std::vector<double> acc(static_cast<size_t>(blkv * bdqk));
    std::vector<double> dkbar(static_cast<size_t>(blkv * bdqk));

    for (long bb = 0; bb < B; ++bb) {
        for (long hh = 0; hh < H; ++hh) {
            BackwardHeadCtx ctx(inputs, dims, variant, d_h, states, stats, bb, hh, true);
            double* dk_out = out.dk.data() + out.dk.offset(bb, hh);
            double* da_out = out.d_a_tail.data() + out.d_a_tail.offset(bb, hh);
            double* dbkv_out = out.d_b_cum.data() + out.d_b_cum.offset(bb, hh);
            double* di_out = out.d_i_log.data() + out.d_i_log.offset(bb, hh);

            for (long kk = 0; kk < dims.n_chunk(); ++kk) {
                const long base = kk * L;
                const double* d_next = ctx.d_c.data() + (kk + 1) * state_sz;

                for (long i_kv = 0; i_kv < n_lkv; ++i_kv) {
                    const long col0 = i_kv * blkv;
                    const long j_start = (i_kv * blkv) / blhq;

                    for (long i_dqk = 0; i_dqk < n_dqk; ++i_dqk) {
                        const long p0 = i_dqk * bdqk;
                        std::fill(acc.begin(), acc.end(), 0.0);

                        for (long jb = j_start; jb < n_lhq; ++jb) {
                            const long row0 = jb * blhq;

                            std::fill(dsb.begin(), dsb.end(), 0.0);
                            for (long hb = 0; hb < n_dhv; ++hb) {
                                const long x0 = hb * bdhv;
                                for (long r = 0; r < blhq; ++r) {
                                    const double* dhr =
                                        ctx.dh_tilde.data() + (base + row0 + r) * d_hv + x0;
                                    double* row = dsb.data() + r * blkv;
                                    for (long c = 0; c < blkv; ++c) {
                                        const double* vr = ctx.v + (base + col0 + c) * d_hv + x0;
                                        double a = 0.0;
                                        for (long x = 0; x < bdhv; ++x) a += dhr[x] * vr[x];
                                        row[c] += a;
                                    }
                                }
                            }

                            for (long r = 0; r < blhq; ++r) {
                                const long lr = row0 + r;
                                double* row = dp.data() + r * blkv;
                                for (long c = 0; c < blkv; ++c) {
                                    const long lc = col0 + c;
                                    row[c] = (lc > lr) ? 0.0 : ctx.gate_weight(kk, lr, lc);
                                }
                            }

                            for (long r = 0; r < blhq; ++r) {
                                const double* dsr = dsb.data() + r * blkv;
                                const double* dpr = dp.data() + r * blkv;
                                const double* qrow = ctx.q + (base + row0 + r) * d_qk + p0;
                                for (long c = 0; c < blkv; ++c) {
                                    const double ds = dsr[c] * dpr[c];
                                    if (ds == 0.0) continue;
                                    double* arow = acc.data() + c * bdqk;
                                    for (long p = 0; p < bdqk; ++p) arow[p] += ds * qrow[p];
                                }
                            }

                            if (i_dqk == 0) {
                                for (long c = 0; c < blkv; ++c) {
                                    const long lc = col0 + c;
                                    const double* krow = ctx.k + (base + lc) * d_qk;
                                    double col_dd = 0.0;
                                    for (long r = 0; r < blhq; ++r) {
                                        const double pr = dp[static_cast<size_t>(r * blkv + c)];
                                        if (pr == 0.0) continue;
                                        const double* qrow = ctx.q + (base + row0 + r) * d_qk;
                                        double s = 0.0;
                                        for (long p = 0; p < d_qk; ++p) s += qrow[p] * krow[p];
                                        col_dd +=
                                            dsb[static_cast<size_t>(r * blkv + c)] * s * inv_sqrt_d * pr;
                                    }
                                    dbkv_out[base + lc] -= col_dd;
                                    di_out[base + lc] += col_dd;
                                }
                            }
                        }

                        // Inter recurrence path: dK_bar = V dC_next^T.
                        std::fill(dkbar.begin(), dkbar.end(), 0.0);
                        for (long hb = 0; hb < n_dhv; ++hb) {
                            const long x0 = hb * bdhv;
                            for (long c = 0; c < blkv; ++c) {
                                const double* vr = ctx.v + (base + col0 + c) * d_hv + x0;
                                double* row = dkbar.data() + c * bdqk;
                                for (long p = 0; p < bdqk; ++p) {
                                    const double* drow = d_next + (p0 + p) * d_hv + x0;
                                    double a = 0.0;
                                    for (long x = 0; x < bdhv; ++x) a += vr[x] * drow[x];
                                    row[p] += a;
                                }
                            }
                        }

                        for (long c = 0; c < blkv; ++c) {
                            const long t = base + col0 + c;
                            const double ab = ctx.a_bar[static_cast<size_t>(t)];
                            double* dk_row = dk_out + t * d_qk + p0;
                            const double* arow = acc.data() + c * bdqk;
                            const double* kbar = dkbar.data() + c * bdqk;
                            const double* krow = ctx.k + t * d_qk + p0;
                            double d_abar = 0.0;
                            for (long p = 0; p < bdqk; ++p) {
                                dk_row[p] = arow[p] * inv_sqrt_d + kbar[p] * ab;
                                d_abar += kbar[p] * krow[p];
                            }
                            da_out[t] += d_abar * ab;
                        }
                    }
                }
            }
        }
    }
    return out;
}

Tensor tfla_backward_dv(const SequenceInputs& inputs, const Dims& dims, const BlockConfig& blocks,
                        Variant variant, const Tensor& d_h, const ChunkStates& states,
                        const SavedStats& stats) {
    validate_backward_args(inputs, dims, blocks, d_h, states, stats);

    const long B = dims.n_batch, H = dims.n_head, L = dims.L;
    const long d_qk = dims.d_qk, d_hv = dims.d_hv;
    const long state_sz = d_qk * d_hv;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d_qk));
    const long blhq = blocks.b_lhq, blkv = blocks.b_lkv, bdqk = blocks.b_dqk, bdhv = blocks.b_dhv;
    const long n_lhq = L / blhq, n_lkv = L / blkv, n_dqk = d_qk / bdqk, n_dhv = d_hv / bdhv;

    Tensor dv({B, H, dims.T, d_hv});

    std::vector<double> s_blk(static_cast<size_t>(blhq * blkv));
    std::vector<double> w_blk(static_cast<size_t>(blhq * blkv));
    std::vector<double> acc(static_cast<size_t>(blkv * bdhv));

    for (long bb = 0; bb < B; ++bb) {
        for (long hh = 0; hh < H; ++hh) {
            BackwardHeadCtx ctx(inputs, dims, variant, d_h, states, stats, bb, hh, true);
            double* dv_out = dv.data() + dv.offset(bb, hh);

            for (long kk = 0; kk < dims.n_chunk(); ++kk) {
                const long base = kk * L;
                const double* d_next = ctx.d_c.data() + (kk + 1) * state_sz;

                for (long i_kv = 0; i_kv < n_lkv; ++i_kv) {
                    const long col0 = i_kv * blkv;
                    const long j_start = (i_kv * blkv) / blhq;

                    for (long i_hv = 0; i_hv < n_dhv; ++i_hv) {
                        const long x0 = i_hv * bdhv;
                        std::fill(acc.begin(), acc.end(), 0.0);

                        for (long jb = j_start; jb < n_lhq; ++jb) {
                            const long row0 = jb * blhq;

                            // S block via the d_qk loop axis.
                            std::fill(s_blk.begin(), s_blk.end(), 0.0);
                            for (long qb = 0; qb < n_dqk; ++qb) {
                                const long p0 = qb * bdqk;
                                for (long r = 0; r < blhq; ++r) {
                                    const double* qrow = ctx.q + (base + row0 + r) * d_qk + p0;
                                    double* row = s_blk.data() + r * blkv;
                                    for (long c = 0; c < blkv; ++c) {
                                        const double* krow = ctx.k + (base + col0 + c) * d_qk + p0;
                                        double a = 0.0;
                                        for (long p = 0; p < bdqk; ++p) a += qrow[p] * krow[p];
                                        row[c] += a;
                                    }
                                }
                            }

                            for (long r = 0; r < blhq; ++r) {
                                const long lr = row0 + r;
                                double* wrow = w_blk.data() + r * blkv;
                                const double* srow = s_blk.data() + r * blkv;
                                for (long c = 0; c < blkv; ++c) {
                                    const long lc = col0 + c;
                                    wrow[c] = (lc > lr)
                                                  ? 0.0
                                                  : srow[c] * inv_sqrt_d * ctx.gate_weight(kk, lr, lc);
                                }
                            }

                            for (long r = 0; r < blhq; ++r) {
                                const double* wrow = w_blk.data() + r * blkv;
                                const double* dhr =
                                    ctx.dh_tilde.data() + (base + row0 + r) * d_hv + x0;
                                for (long c = 0; c < blkv; ++c) {
                                    const double w = wrow[c];
                                    if (w == 0.0) continue;
                                    double* arow = acc.data() + c * bdhv;
                                    for (long x = 0; x < bdhv; ++x) arow[x] += w * dhr[x];
                                }
                            }
                        }

                        // Inter recurrence path: (a_bar o K) dC_next.
                        for (long qb = 0; qb < n_dqk; ++qb) {
                            const long p0 = qb * bdqk;
                            for (long c = 0; c < blkv; ++c) {
                                const long t = base + col0 + c;
                                const double ab = ctx.a_bar[static_cast<size_t>(t)];
                                const double* krow = ctx.k + t * d_qk + p0;
                                double* arow = acc.data() + c * bdhv;
                                for (long p = 0; p < bdqk; ++p) {
                                    const double kw = ab * krow[p];
                                    const double* drow = d_next + (p0 + p) * d_hv + x0;
                                    for (long x = 0; x < bdhv; ++x) arow[x] += kw * drow[x];
                                }
                            }
                        }

                        for (long c = 0; c < blkv; ++c) {
                            const long t = base + col0 + c;
                            double* dv_row = dv_out + t * d_hv + x0;
                            const double* arow = acc.data() + c * bdhv;
                            for (long x = 0; x < bdhv; ++x) dv_row[x] = arow[x];
                        }
                    }
                }
            }
        }
    }
    return dv;
}

Gradients tfla_backward(const SequenceInputs& inputs, const Dims& dims, const BlockConfig& blocks,
                        Variant variant, const Tensor& d_h, const ChunkStates& states,
                        const SavedStats& stats) {
    TfLaDqResult dq = tfla_backward_dq(inputs, dims, blocks, variant, d_h, states, stats);
    TfLaDkResult dk = tfla_backward_dk(inputs, dims, blocks, variant, d_h, states, stats);

    Gradients g;
    g.dq = std::move(dq.dq);
    g.dk = std::move(dk.dk);
    g.dv = tfla_backward_dv(inputs, dims, blocks, variant, d_h, states, stats);
    g.d_fpre = Tensor({dims.n_batch, dims.n_head, dims.T});
    g.d_ipre = Tensor({dims.n_batch, dims.n_head, dims.T});

    const long T = dims.T;
    std::vector<double> d_b_total(static_cast<size_t>(T));
    for (long bb = 0; bb < dims.n_batch; ++bb) {
        for (long hh = 0; hh < dims.n_head; ++hh) {
            BackwardHeadCtx ctx(inputs, dims, variant, d_h, states, stats, bb, hh, true);
            const double* dbq = dq.d_b_cum.data() + dq.d_b_cum.offset(bb, hh);
            const double* dbkv = dk.d_b_cum.data() + dk.d_b_cum.offset(bb, hh);
            const double* da = dk.d_a_tail.data() + dk.d_a_tail.offset(bb, hh);
            const double* di = dk.d_i_log.data() + dk.d_i_log.offset(bb, hh);
            for (long t = 0; t < T; ++t) d_b_total[static_cast<size_t>(t)] = dbq[t] + dbkv[t];
            detail::assemble_gate_grads_head(ctx.fp, ctx.ip, dims, variant, ctx.d_g.data(),
                                             d_b_total.data(), da, di,
                                             g.d_fpre.data() + g.d_fpre.offset(bb, hh),
                                             g.d_ipre.data() + g.d_ipre.offset(bb, hh));
        }
    }
    return g;
}

}  // namespace mlstm
