#include "mlstm/gates.hpp"

#include <cmath>

namespace mlstm {

double log_sigmoid(double x) { return std::fmin(x, 0.0) - std::log1p(std::exp(-std::fabs(x))); }

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

double softcap(double x, double c) {
    if (!(c > 0.0)) throw ParameterError("softcap: cap must be > 0");
    return c * std::tanh(x / c);
}

ChunkwiseGates chunkwise_gates(const double* f_pre, const double* i_pre, long T, long L,
                               Variant variant) {
    if (L < 1 || T < 1 || T % L != 0) throw GeometryError("chunkwise_gates: T not divisible by L");
    const long n_chunk = T / L;

    ChunkwiseGates out;
    out.g_sum = Tensor({n_chunk});
    out.b_cum = Tensor({n_chunk, L});
    out.a_tail = Tensor({n_chunk, L});

    std::vector<double> f_bar(static_cast<size_t>(L));
    for (long k = 0; k < n_chunk; ++k) {
        const double* f = f_pre + k * L;
        const double* ip = i_pre + k * L;
        for (long j = 0; j < L; ++j) f_bar[static_cast<size_t>(j)] = log_sigmoid(f[j]);

        double run = 0.0;
        for (long j = 0; j < L; ++j) {
            run += f_bar[static_cast<size_t>(j)];
            out.b_cum(k, j) = run;
        }
        out.g_sum(k) = run;

        // Reverse cumsum of f_bar excluding the first element: position j gets
        // the sum over (j, L-1]; the last position carries no tail.
        double tail = 0.0;
        for (long j = L - 1; j >= 0; --j) {
            double i_bar = (variant == Variant::Exp) ? ip[j] : log_sigmoid(ip[j]);
            out.a_tail(k, j) = tail + i_bar;
            tail += f_bar[static_cast<size_t>(j)];
        }
    }
    return out;
}

ChunkwiseGates chunkwise_gates(const Tensor& f_pre, const Tensor& i_pre, long L, Variant variant) {
    if (f_pre.rank() != 1 || !f_pre.same_shape(i_pre))
        throw GeometryError("chunkwise_gates: expected matching rank-1 tensors");
    return chunkwise_gates(f_pre.data(), i_pre.data(), f_pre.numel(), L, variant);
}

SequenceInputs apply_gate_softcap(SequenceInputs inputs, double cap) {
    double* ip = inputs.i_pre.data();
    double* fp = inputs.f_pre.data();
    for (long i = 0; i < inputs.i_pre.numel(); ++i) ip[i] = softcap(ip[i], cap);
    for (long i = 0; i < inputs.f_pre.numel(); ++i) fp[i] = softcap(fp[i], cap);
    return inputs;
}

}  // namespace mlstm
