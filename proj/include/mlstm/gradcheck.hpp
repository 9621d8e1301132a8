#pragma once

#include <functional>

#include "mlstm/chunkwise.hpp"
#include "mlstm/tiled.hpp"

namespace mlstm {

/// max |a - ref| over entries, relative to the largest |ref| entry.
double max_rel_error(const Tensor& a, const Tensor& ref);

using LossFn = std::function<double(const SequenceInputs&)>;

/// Central differences of an arbitrary scalar loss with respect to every
/// entry of q, k, v and both gate pre-activation tensors.
Gradients finite_difference_gradients(const SequenceInputs& base, const Dims& dims,
                                      const LossFn& loss, double step);

/// Loss used by the gradient checks: sum(w o F(x)) where F is the forward
/// whose exact gradient the backward pass computes. For the sigmoid variant
/// F is the plain forward; for the exponential variant the max-state
/// schedule and output denominator are pinned to their values at `base`
/// (the backward treats both as constants).
LossFn make_detached_loss(const Dims& dims, Variant variant, const Tensor& w,
                          const SequenceInputs& base);

struct GradcheckReport {
    double dq = 0.0, dk = 0.0, dv = 0.0, d_fpre = 0.0, d_ipre = 0.0;
    double worst() const;
    bool pass(double tol) const { return worst() < tol; }
};

/// Analytic chunkwise backward vs central differences, one weight tensor w
/// playing the role of dH.
GradcheckReport gradcheck_chunkwise(const SequenceInputs& inputs, const Dims& dims,
                                    Variant variant, const Tensor& w, double step);

/// Same check against the three tiled gradient kernels (assembled).
GradcheckReport gradcheck_tiled(const SequenceInputs& inputs, const Dims& dims,
                                const BlockConfig& blocks, Variant variant, const Tensor& w,
                                double step);

}  // namespace mlstm
