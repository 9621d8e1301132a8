#include "mlstm/transfer.hpp"

#include <cmath>
#include <vector>

namespace mlstm {

void rms_norm(const double* x, const double* gamma, long d, double eps, double* y) {
    if (eps < 0.0) throw ParameterError("rms_norm: eps must be >= 0");
    double sq = 0.0;
    for (long i = 0; i < d; ++i) sq += x[i] * x[i];
    const double rms = std::sqrt(sq / static_cast<double>(d) + eps);
    if (rms == 0.0) {
        for (long i = 0; i < d; ++i) y[i] = 0.0;
        return;
    }
    for (long i = 0; i < d; ++i) y[i] = x[i] / rms * gamma[i];
}

Tensor rms_norm(const Tensor& x, const Tensor& gamma, double eps) {
    if (x.rank() != 1 || !x.same_shape(gamma)) throw GeometryError("rms_norm: shape mismatch");
    Tensor y(x.shape());
    rms_norm(x.data(), gamma.data(), x.numel(), eps, y.data());
    return y;
}

double gain(const Tensor& h_seq, const Tensor& v_seq) {
    if (h_seq.rank() != 2 || v_seq.rank() != 2 || h_seq.dim(0) != v_seq.dim(0))
        throw GeometryError("gain: expected [T, d] tensors with matching T");
    const long T = h_seq.dim(0);
    const long dh = h_seq.dim(1), dv = v_seq.dim(1);
    double total = 0.0;
    for (long t = 0; t < T; ++t) {
        double hm = 0.0, vm = 0.0;
        for (long x = 0; x < dh; ++x) hm = std::fmax(hm, std::fabs(h_seq(t, x)));
        for (long x = 0; x < dv; ++x) vm = std::fmax(vm, std::fabs(v_seq(t, x)));
        if (vm == 0.0) throw NumericError("gain: zero reference vector at step " + std::to_string(t));
        total += hm / vm;
    }
    return total / static_cast<double>(T);
}

Dims transfer_default_dims() {
    Dims d;
    d.T = 512;
    d.L = 512;
    d.d_qk = 128;
    d.d_hv = 128;
    d.n_head = 1;
    d.n_batch = 1;
    return d;
}

GainGrid transfer_scan(Variant variant, Normalizer normalizer, double eps,
                       const TransferGridSpec& grid, const Dims& dims, Rng& rng) {
    dims.validate();
    if (grid.n_i < 1 || grid.n_f < 1) throw ParameterError("transfer_scan: grid must be >= 1x1");
    if (!normalizer_valid_for(variant, normalizer))
        throw ParameterError(std::string("normalizer '") + normalizer_name(normalizer) +
                             "' not defined for variant '" + variant_name(variant) + "'");

    SequenceInputs in = make_inputs(dims, rng, 1.0);

    GainGrid out;
    out.i_values.resize(static_cast<size_t>(grid.n_i));
    out.f_values.resize(static_cast<size_t>(grid.n_f));
    for (long a = 0; a < grid.n_i; ++a)
        out.i_values[static_cast<size_t>(a)] =
            grid.n_i == 1 ? grid.i_min
                          : grid.i_min + (grid.i_max - grid.i_min) * static_cast<double>(a) /
                                             static_cast<double>(grid.n_i - 1);
    for (long c = 0; c < grid.n_f; ++c)
        out.f_values[static_cast<size_t>(c)] =
            grid.n_f == 1 ? grid.f_min
                          : grid.f_min + (grid.f_max - grid.f_min) * static_cast<double>(c) /
                                             static_cast<double>(grid.n_f - 1);
    out.g_before = Tensor({grid.n_i, grid.n_f});
    out.g_after = Tensor({grid.n_i, grid.n_f});

    const long T = dims.T, d_hv = dims.d_hv;

    // One sequence per scan: the score matrix is gate-independent, so hoist
    // it out of the grid loop.
    std::vector<double> scores(static_cast<size_t>(T) * static_cast<size_t>(T));
    detail::head_scores(in.q.data(), in.k.data(), T, dims.d_qk, scores.data());

    Tensor v_seq({T, d_hv});
    for (long t = 0; t < T; ++t)
        for (long x = 0; x < d_hv; ++x) v_seq(t, x) = in.v(0, 0, t, x);

    Tensor gamma_vec({d_hv});
    gamma_vec.fill(1.0);

    Tensor h_seq({T, d_hv});
    Tensor h_norm({T, d_hv});
    std::vector<double> i_const(static_cast<size_t>(T)), f_const(static_cast<size_t>(T));

    for (long a = 0; a < grid.n_i; ++a) {
        for (long c = 0; c < grid.n_f; ++c) {
            const double iv = out.i_values[static_cast<size_t>(a)];
            const double fv = out.f_values[static_cast<size_t>(c)];
            for (long t = 0; t < T; ++t) {
                i_const[static_cast<size_t>(t)] = iv;
                f_const[static_cast<size_t>(t)] = fv;
            }
            detail::parallel_head_core(scores.data(), v_seq.data(), i_const.data(),
                                       f_const.data(), T, d_hv, variant, normalizer,
                                       h_seq.data());
            for (long t = 0; t < T; ++t)
                rms_norm(h_seq.data() + t * d_hv, gamma_vec.data(), d_hv, eps,
                         h_norm.data() + t * d_hv);
            out.g_before(a, c) = gain(h_seq, v_seq);
            out.g_after(a, c) = gain(h_norm, v_seq);
        }
    }
    return out;
}

}  // namespace mlstm
