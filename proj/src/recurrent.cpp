#include "mlstm/recurrent.hpp"

#include <cmath>

#include "mlstm/gates.hpp"

namespace mlstm {

void step_exp(MemoryState& state, const double* q, const double* k, const double* v, double i_pre,
              double f_pre, const Dims& dims, double* h_tilde) {
    const long d_qk = dims.d_qk;
    const long d_hv = dims.d_hv;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d_qk));

    const double f_log = log_sigmoid(f_pre) + state.m;
    const double m_new = std::fmax(f_log, i_pre);
    const double f_gate = stab::exp_guarded(f_log - m_new);
    const double i_gate = stab::exp_guarded(i_pre - m_new);

    double* C = state.C.data();
    double* n = state.n.data();
    for (long p = 0; p < d_qk; ++p) {
        double* crow = C + p * d_hv;
        const double ik = i_gate * k[p];
        for (long x = 0; x < d_hv; ++x) crow[x] = f_gate * crow[x] + ik * v[x];
        n[p] = f_gate * n[p] + ik;
    }
    state.m = m_new;

    double n_dot_q = 0.0;
    for (long p = 0; p < d_qk; ++p) n_dot_q += n[p] * q[p] * inv_sqrt_d;
    const double denom = std::fmax(std::fabs(n_dot_q), std::exp(-m_new));

    for (long x = 0; x < d_hv; ++x) h_tilde[x] = 0.0;
    for (long p = 0; p < d_qk; ++p) {
        const double qp = q[p] * inv_sqrt_d;
        const double* crow = C + p * d_hv;
        for (long x = 0; x < d_hv; ++x) h_tilde[x] += crow[x] * qp;
    }
    for (long x = 0; x < d_hv; ++x) h_tilde[x] /= denom;
}

void step_sig(MemoryState& state, const double* q, const double* k, const double* v, double i_pre,
              double f_pre, const Dims& dims, double* h_tilde) {
    const long d_qk = dims.d_qk;
    const long d_hv = dims.d_hv;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d_qk));

    const double f_gate = sigmoid(f_pre);
    const double i_gate = sigmoid(i_pre);

    double* C = state.C.data();
    for (long x = 0; x < d_hv; ++x) h_tilde[x] = 0.0;
    for (long p = 0; p < d_qk; ++p) {
        double* crow = C + p * d_hv;
        const double ik = i_gate * k[p];
        const double qp = q[p] * inv_sqrt_d;
        for (long x = 0; x < d_hv; ++x) {
            crow[x] = f_gate * crow[x] + ik * v[x];
            h_tilde[x] += crow[x] * qp;
        }
    }
}

RecurrentTrace run_recurrent(const SequenceInputs& inputs, const Dims& dims, Variant variant,
                             const RecurrentOptions& opts) {
    dims.validate();
    inputs.validate(dims);

    const long B = dims.n_batch, H = dims.n_head, T = dims.T;
    const long d_qk = dims.d_qk, d_hv = dims.d_hv;

    RecurrentTrace trace;
    trace.h_tilde = Tensor({B, H, T, d_hv});
    trace.C_final = Tensor({B, H, d_qk, d_hv});
    trace.n_final = Tensor({B, H, d_qk});
    trace.m_final = Tensor({B, H});
    if (opts.store_step_states) {
        trace.C_steps = Tensor({B, H, T, d_qk, d_hv});
        trace.n_steps = Tensor({B, H, T, d_qk});
        trace.m_steps = Tensor({B, H, T});
        trace.has_step_states = true;
    }

    for (long b = 0; b < B; ++b) {
        for (long h = 0; h < H; ++h) {
            MemoryState state =
                opts.initial_state ? *opts.initial_state : MemoryState::zero(dims);
            for (long t = 0; t < T; ++t) {
                const double* q = inputs.q.data() + inputs.q.offset(b, h, t);
                const double* k = inputs.k.data() + inputs.k.offset(b, h, t);
                const double* v = inputs.v.data() + inputs.v.offset(b, h, t);
                double* out = trace.h_tilde.data() + trace.h_tilde.offset(b, h, t);
                const double ip = inputs.i_pre(b, h, t);
                const double fp = inputs.f_pre(b, h, t);
                if (variant == Variant::Exp)
                    step_exp(state, q, k, v, ip, fp, dims, out);
                else
                    step_sig(state, q, k, v, ip, fp, dims, out);
                if (opts.store_step_states) {
                    for (long p = 0; p < d_qk; ++p)
                        for (long x = 0; x < d_hv; ++x)
                            trace.C_steps(b, h, t, p, x) = state.C(p, x);
                    for (long p = 0; p < d_qk; ++p) trace.n_steps(b, h, t, p) = state.n(p);
                    trace.m_steps(b, h, t) = state.m;
                }
            }
            for (long p = 0; p < d_qk; ++p)
                for (long x = 0; x < d_hv; ++x) trace.C_final(b, h, p, x) = state.C(p, x);
            for (long p = 0; p < d_qk; ++p) trace.n_final(b, h, p) = state.n(p);
            trace.m_final(b, h) = state.m;
        }
    }
    return trace;
}

}  // namespace mlstm
