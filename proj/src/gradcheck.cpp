#include "mlstm/gradcheck.hpp"

#include <cmath>

namespace mlstm {

double max_rel_error(const Tensor& a, const Tensor& ref) {
    const double scale = std::fmax(max_abs(ref), 1e-12);
    return max_abs_diff(a, ref) / scale;
}

namespace {

double fd_entry(const SequenceInputs& base, Tensor SequenceInputs::*field, long idx,
                const LossFn& loss, double step) {
    SequenceInputs work = base;
    (work.*field)[idx] = (base.*field)[idx] + step;
    const double up = loss(work);
    (work.*field)[idx] = (base.*field)[idx] - step;
    const double down = loss(work);
    return (up - down) / (2.0 * step);
}

void fd_tensor(const SequenceInputs& base, Tensor SequenceInputs::*field, const LossFn& loss,
               double step, Tensor& out) {
    for (long i = 0; i < out.numel(); ++i) out[i] = fd_entry(base, field, i, loss, step);
}

}  // namespace

Gradients finite_difference_gradients(const SequenceInputs& base, const Dims& dims,
                                      const LossFn& loss, double step) {
    if (step <= 0.0) throw ParameterError("finite differences: step must be > 0");
    Gradients g;
    g.dq = Tensor(base.q.shape());
    g.dk = Tensor(base.k.shape());
    g.dv = Tensor(base.v.shape());
    g.d_fpre = Tensor(base.f_pre.shape());
    g.d_ipre = Tensor(base.i_pre.shape());
    fd_tensor(base, &SequenceInputs::q, loss, step, g.dq);
    fd_tensor(base, &SequenceInputs::k, loss, step, g.dk);
    fd_tensor(base, &SequenceInputs::v, loss, step, g.dv);
    fd_tensor(base, &SequenceInputs::f_pre, loss, step, g.d_fpre);
    fd_tensor(base, &SequenceInputs::i_pre, loss, step, g.d_ipre);
    (void)dims;
    return g;
}

LossFn make_detached_loss(const Dims& dims, Variant variant, const Tensor& w,
                          const SequenceInputs& base) {
    ChunkwiseForward fwd0 = chunkwise_forward(base, dims, variant);
    // Copies keep the closure self-contained.
    ChunkStates frozen_states = fwd0.states;
    SavedStats frozen_stats = fwd0.stats;
    Tensor weights = w;
    return [dims, variant, weights, frozen_states, frozen_stats](const SequenceInputs& x) {
        Tensor h = chunkwise_forward_frozen(x, dims, variant, frozen_states, frozen_stats);
        double loss = 0.0;
        const double* hp = h.data();
        const double* wp = weights.data();
        for (long i = 0; i < h.numel(); ++i) loss += wp[i] * hp[i];
        return loss;
    };
}

double GradcheckReport::worst() const {
    return std::fmax(std::fmax(std::fmax(dq, dk), std::fmax(dv, d_fpre)), d_ipre);
}

namespace {

GradcheckReport compare(const Gradients& analytic, const Gradients& fd) {
    GradcheckReport r;
    r.dq = max_rel_error(analytic.dq, fd.dq);
    r.dk = max_rel_error(analytic.dk, fd.dk);
    r.dv = max_rel_error(analytic.dv, fd.dv);
    r.d_fpre = max_rel_error(analytic.d_fpre, fd.d_fpre);
    r.d_ipre = max_rel_error(analytic.d_ipre, fd.d_ipre);
    return r;
}

}  // namespace

GradcheckReport gradcheck_chunkwise(const SequenceInputs& inputs, const Dims& dims,
                                    Variant variant, const Tensor& w, double step) {
    ChunkwiseForward fwd = chunkwise_forward(inputs, dims, variant);
    Gradients analytic = chunkwise_backward(inputs, dims, variant, w, fwd.states, fwd.stats);
    Gradients fd = finite_difference_gradients(
        inputs, dims, make_detached_loss(dims, variant, w, inputs), step);
    return compare(analytic, fd);
}

GradcheckReport gradcheck_tiled(const SequenceInputs& inputs, const Dims& dims,
                                const BlockConfig& blocks, Variant variant, const Tensor& w,
                                double step) {
    ChunkwiseForward fwd = tfla_forward(inputs, dims, blocks, variant);
    Gradients analytic = tfla_backward(inputs, dims, blocks, variant, w, fwd.states, fwd.stats);
    Gradients fd = finite_difference_gradients(
        inputs, dims, make_detached_loss(dims, variant, w, inputs), step);
    return compare(analytic, fd);
}

}  // namespace mlstm
