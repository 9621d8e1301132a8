#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "mlstm/chunkwise.hpp"
#include "mlstm/gradcheck.hpp"
#include "mlstm/parallel.hpp"
#include "mlstm/recurrent.hpp"

using namespace mlstm;

namespace {

Dims make_dims(long T, long L, long d_qk, long d_hv, long heads = 1) {
    Dims d;
    d.T = T;
    d.L = L;
    d.d_qk = d_qk;
    d.d_hv = d_hv;
    d.n_head = heads;
    return d;
}

}  // namespace

TEST_CASE("a single chunk degenerates to the parallel form") {
    Dims d = make_dims(32, 32, 8, 8);
    Rng rng(41);
    SequenceInputs in = make_inputs(d, rng, 1.0, 1.0);
    CHECK(max_abs_diff(chunkwise_forward(in, d, Variant::Exp).h_tilde,
                       parallel_forward_exp(in, d)) < 1e-12);
    CHECK(max_abs_diff(chunkwise_forward(in, d, Variant::Sig).h_tilde,
                       parallel_forward_sig(in, d)) < 1e-12);
}

TEST_CASE("chunk size one degenerates to the recurrence") {
    Dims d = make_dims(24, 1, 6, 6);
    Rng rng(42);
    SequenceInputs in = make_inputs(d, rng, 1.0, 1.0);
    for (Variant variant : {Variant::Exp, Variant::Sig})
        CHECK(max_abs_diff(chunkwise_forward(in, d, variant).h_tilde,
                           run_recurrent(in, d, variant).h_tilde) < 1e-12);
}

TEST_CASE("outputs are invariant to the chunk size") {
    Rng rng(43);
    Dims d0 = make_dims(128, 8, 8, 12, 2);
    SequenceInputs in = make_inputs(d0, rng, 1.0, 1.0);
    for (Variant variant : {Variant::Exp, Variant::Sig}) {
        Tensor ref;
        bool first = true;
        for (long L : {8L, 16L, 32L, 64L}) {
            Dims d = d0;
            d.L = L;
            Tensor h = chunkwise_forward(in, d, variant).h_tilde;
            if (first) {
                ref = h;
                first = false;
            } else {
                CHECK(max_abs_diff(ref, h) < 1e-10);
            }
        }
    }
}

TEST_CASE("indivisible chunk geometry is rejected") {
    Dims d = make_dims(100, 16, 4, 4);
    Rng rng(1);
    d.L = 4;  // valid for construction
    SequenceInputs in = make_inputs(d, rng, 1.0);
    d.L = 16;
    CHECK_THROWS_AS(chunkwise_forward(in, d, Variant::Sig), GeometryError);
}

TEST_CASE("missing saved tensors are rejected") {
    Dims d = make_dims(8, 4, 4, 4);
    Rng rng(2);
    SequenceInputs in = make_inputs(d, rng, 1.0);
    Tensor dh({1, 1, 8, 4});
    CHECK_THROWS_AS(chunkwise_backward(in, d, Variant::Sig, dh, ChunkStates{}, SavedStats{}),
                    ParameterError);
}

TEST_CASE("zero upstream gradient gives zero gradients") {
    Dims d = make_dims(16, 4, 4, 4);
    Rng rng(3);
    SequenceInputs in = make_inputs(d, rng, 1.0, 1.0);
    for (Variant variant : {Variant::Exp, Variant::Sig}) {
        ChunkwiseForward fwd = chunkwise_forward(in, d, variant);
        Tensor dh({1, 1, 16, 4});
        Gradients g = chunkwise_backward(in, d, variant, dh, fwd.states, fwd.stats);
        CHECK(max_abs(g.dq) == 0.0);
        CHECK(max_abs(g.dk) == 0.0);
        CHECK(max_abs(g.dv) == 0.0);
        CHECK(max_abs(g.d_fpre) == 0.0);
        CHECK(max_abs(g.d_ipre) == 0.0);
    }
}

TEST_CASE("backward matches central finite differences (weighted loss)") {
    Dims d = make_dims(16, 4, 4, 4);
    Rng rng(44);
    SequenceInputs in = make_inputs(d, rng, 1.0, 1.0);
    Tensor w({1, 1, 16, 4});
    rng.fill_normal(w, 1.0);

    for (Variant variant : {Variant::Sig, Variant::Exp}) {
        GradcheckReport r = gradcheck_chunkwise(in, d, variant, w, 1e-6);
        INFO("variant ", variant_name(variant), " worst ", r.worst());
        CHECK(r.dq < 1e-5);
        CHECK(r.dk < 1e-5);
        CHECK(r.dv < 1e-5);
        CHECK(r.d_fpre < 1e-5);
        CHECK(r.d_ipre < 1e-5);
    }
}

TEST_CASE("sig backward matches finite differences of the true squared loss") {
    Dims d = make_dims(16, 4, 4, 4);
    Rng rng(45);
    SequenceInputs in = make_inputs(d, rng, 1.0, 1.0);

    ChunkwiseForward fwd = chunkwise_forward(in, d, Variant::Sig);
    Tensor two_h = fwd.h_tilde;
    for (long i = 0; i < two_h.numel(); ++i) two_h[i] *= 2.0;
    Gradients analytic = chunkwise_backward(in, d, Variant::Sig, two_h, fwd.states, fwd.stats);

    LossFn loss = [&](const SequenceInputs& x) {
        Tensor h = chunkwise_forward(x, d, Variant::Sig).h_tilde;
        double acc = 0.0;
        for (long i = 0; i < h.numel(); ++i) acc += h[i] * h[i];
        return acc;
    };
    Gradients fd = finite_difference_gradients(in, d, loss, 1e-6);

    CHECK(max_rel_error(analytic.dq, fd.dq) < 1e-5);
    CHECK(max_rel_error(analytic.dk, fd.dk) < 1e-5);
    CHECK(max_rel_error(analytic.dv, fd.dv) < 1e-5);
    CHECK(max_rel_error(analytic.d_fpre, fd.d_fpre) < 1e-5);
    CHECK(max_rel_error(analytic.d_ipre, fd.d_ipre) < 1e-5);
}

TEST_CASE("gradients are invariant to the chunk size") {
    Dims d4 = make_dims(32, 4, 4, 4);
    Rng rng(46);
    SequenceInputs in = make_inputs(d4, rng, 1.0, 1.0);
    Tensor w({1, 1, 32, 4});
    rng.fill_normal(w, 1.0);

    for (Variant variant : {Variant::Exp, Variant::Sig}) {
        ChunkwiseForward f4 = chunkwise_forward(in, d4, variant);
        Gradients g4 = chunkwise_backward(in, d4, variant, w, f4.states, f4.stats);

        Dims d16 = d4;
        d16.L = 16;
        ChunkwiseForward f16 = chunkwise_forward(in, d16, variant);
        Gradients g16 = chunkwise_backward(in, d16, variant, w, f16.states, f16.stats);

        CHECK(max_abs_diff(g4.dq, g16.dq) < 1e-9);
        CHECK(max_abs_diff(g4.dk, g16.dk) < 1e-9);
        CHECK(max_abs_diff(g4.dv, g16.dv) < 1e-9);
        CHECK(max_abs_diff(g4.d_fpre, g16.d_fpre) < 1e-9);
        CHECK(max_abs_diff(g4.d_ipre, g16.d_ipre) < 1e-9);
    }
}

TEST_CASE("saved statistics satisfy the clamp definition") {
    Dims d = make_dims(64, 16, 8, 8);
    Rng rng(47);
    SequenceInputs in = make_inputs(d, rng, 1.0, 1.0);
    ChunkwiseForward fwd = chunkwise_forward(in, d, Variant::Exp);
    for (long t = 0; t < d.T; ++t)
        CHECK(fwd.stats.h_denom(0, 0, t) >= std::exp(-fwd.stats.m_combine(0, 0, t)));
}

TEST_CASE("frozen forward equals the live forward at the base point") {
    Dims d = make_dims(32, 8, 6, 6);
    Rng rng(48);
    SequenceInputs in = make_inputs(d, rng, 1.0, 1.0);
    for (Variant variant : {Variant::Exp, Variant::Sig}) {
        ChunkwiseForward fwd = chunkwise_forward(in, d, variant);
        Tensor frozen = chunkwise_forward_frozen(in, d, variant, fwd.states, fwd.stats);
        CHECK(max_abs_diff(frozen, fwd.h_tilde) < 1e-12);
    }
}
