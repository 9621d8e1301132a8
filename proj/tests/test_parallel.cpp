#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "mlstm/gates.hpp"
#include "mlstm/parallel.hpp"
#include "mlstm/recurrent.hpp"

using namespace mlstm;

namespace {

Dims make_dims(long T, long d_qk, long d_hv, long heads = 1) {
    Dims d;
    d.T = T;
    d.L = T;
    d.d_qk = d_qk;
    d.d_hv = d_hv;
    d.n_head = heads;
    return d;
}

}  // namespace

TEST_CASE("T=1 reduces to a single recurrent step") {
    Dims d = make_dims(1, 4, 3);
    Rng rng(2);
    SequenceInputs in = make_inputs(d, rng, 1.0, 1.0);
    for (Variant variant : {Variant::Exp, Variant::Sig}) {
        Tensor h = variant == Variant::Exp ? parallel_forward_exp(in, d)
                                           : parallel_forward_sig(in, d);
        RecurrentTrace tr = run_recurrent(in, d, variant);
        CHECK(max_abs_diff(h, tr.h_tilde) < 1e-14);
    }
}

TEST_CASE("T=2 with neutral gates exposes the raw scores") {
    Dims d = make_dims(2, 4, 2);
    Rng rng(6);
    SequenceInputs in = make_inputs(d, rng, 1.0);
    in.f_pre.fill(1e3);  // log F = 0
    in.i_pre.fill(0.0);

    Tensor h = parallel_forward_exp(in, d);

    // Row 2: D = 1s, m = 0 => h_2 = (s21 v1 + s22 v2) / max(|s21+s22|, 1)
    const double inv = 1.0 / 2.0;
    double s21 = 0.0, s22 = 0.0;
    for (long p = 0; p < 4; ++p) {
        s21 += in.q(0, 0, 1, p) * in.k(0, 0, 0, p);
        s22 += in.q(0, 0, 1, p) * in.k(0, 0, 1, p);
    }
    s21 *= inv;
    s22 *= inv;
    const double denom = std::fmax(std::fabs(s21 + s22), 1.0);
    for (long x = 0; x < 2; ++x) {
        const double expect = (s21 * in.v(0, 0, 0, x) + s22 * in.v(0, 0, 1, x)) / denom;
        CHECK(h(0, 0, 1, x) == doctest::Approx(expect).epsilon(1e-13));
    }
}

TEST_CASE("sig variant with saturated input gate at T=1") {
    Dims d = make_dims(1, 4, 3);
    Rng rng(7);
    SequenceInputs in = make_inputs(d, rng, 1.0);
    in.i_pre.fill(1e3);
    Tensor h = parallel_forward_sig(in, d);
    double s = 0.0;
    for (long p = 0; p < 4; ++p) s += in.q(0, 0, 0, p) * in.k(0, 0, 0, p);
    s *= 0.5;  // 1/sqrt(4) scaling and sigma(1e3) = 1 up to rounding
    for (long x = 0; x < 3; ++x)
        CHECK(h(0, 0, 0, x) == doctest::Approx(s * in.v(0, 0, 0, x) * sigmoid(1e3)).epsilon(1e-13));
}

TEST_CASE("blocked input zeroes the whole output") {
    Dims d = make_dims(32, 8, 8);
    Rng rng(13);
    SequenceInputs in = make_inputs(d, rng, 1.0);
    in.i_pre.fill(-1e4);
    Tensor h = parallel_forward_sig(in, d);
    CHECK(max_abs(h) < 1e-30);
}

TEST_CASE("parallel matches recurrent at T=128 for both variants") {
    Dims d = make_dims(128, 16, 24, 2);
    Rng rng(21);
    SequenceInputs in = make_inputs(d, rng, 1.0, 1.0);
    CHECK(max_abs_diff(parallel_forward_exp(in, d),
                       run_recurrent(in, d, Variant::Exp).h_tilde) < 1e-10);
    CHECK(max_abs_diff(parallel_forward_sig(in, d),
                       run_recurrent(in, d, Variant::Sig).h_tilde) < 1e-10);
}

TEST_CASE("causality: the future never changes the past") {
    Dims d = make_dims(48, 8, 8);
    Rng rng(5);
    SequenceInputs in = make_inputs(d, rng, 1.0, 1.0);
    Tensor full = parallel_forward_exp(in, d);

    for (long cut : {7L, 17L, 23L, 31L, 40L}) {
        SequenceInputs trunc = in;
        for (long t = cut + 1; t < d.T; ++t) {
            for (long p = 0; p < d.d_qk; ++p) {
                trunc.q(0, 0, t, p) = 0.0;
                trunc.k(0, 0, t, p) = 0.0;
            }
            for (long x = 0; x < d.d_hv; ++x) trunc.v(0, 0, t, x) = 0.0;
            trunc.i_pre(0, 0, t) = 0.0;
            trunc.f_pre(0, 0, t) = 0.0;
        }
        Tensor cut_h = parallel_forward_exp(trunc, d);
        double diff = 0.0;
        for (long t = 0; t <= cut; ++t)
            for (long x = 0; x < d.d_hv; ++x)
                diff = std::fmax(diff, std::fabs(full(0, 0, t, x) - cut_h(0, 0, t, x)));
        CHECK(diff == 0.0);
    }
}

TEST_CASE("row-max subtraction keeps every exponent argument non-positive") {
    Dims d = make_dims(64, 8, 8);
    Rng rng(19);
    SequenceInputs in = make_inputs(d, rng, 1.0, 3.0);
    stab::reset();
    (void)parallel_forward_exp(in, d);
    CHECK(stab::checks() > 0);
    CHECK(stab::violations() == 0);
}

TEST_CASE("normalizer variant wiring") {
    Dims d = make_dims(24, 4, 4);
    Rng rng(3);
    SequenceInputs in = make_inputs(d, rng, 1.0, 1.0);

    CHECK(max_abs_diff(normalizer_variant_forward(in, d, Variant::Exp, Normalizer::Default),
                       parallel_forward_exp(in, d)) == 0.0);
    CHECK(max_abs_diff(normalizer_variant_forward(in, d, Variant::Sig, Normalizer::Ones),
                       parallel_forward_sig(in, d)) == 0.0);

    CHECK_THROWS_AS(normalizer_variant_forward(in, d, Variant::Exp, Normalizer::RawSum),
                    ParameterError);
    CHECK_THROWS_AS(normalizer_variant_forward(in, d, Variant::Exp, Normalizer::AbsSum),
                    ParameterError);
    CHECK_THROWS_AS(normalizer_variant_forward(in, d, Variant::Sig, Normalizer::Default),
                    ParameterError);

    // The remaining analysis-grid combinations evaluate to finite surfaces.
    CHECK(normalizer_variant_forward(in, d, Variant::Exp, Normalizer::MaxAbsOne).all_finite());
    CHECK(normalizer_variant_forward(in, d, Variant::Exp, Normalizer::Ones).all_finite());
    CHECK(normalizer_variant_forward(in, d, Variant::Sig, Normalizer::AbsSum).all_finite());
}

TEST_CASE("sig + clamped normalizer agrees with a from-scratch evaluation") {
    Dims d = make_dims(512, 16, 16);
    Rng rng(29);
    SequenceInputs in = make_inputs(d, rng, 1.0);
    in.i_pre.fill(-2.0);
    in.f_pre.fill(3.0);

    Tensor got = normalizer_variant_forward(in, d, Variant::Sig, Normalizer::MaxAbsOne);

    // Direct evaluation with an explicit normalizer vector.
    const double inv = 1.0 / std::sqrt(16.0);
    Tensor want({1, 1, d.T, d.d_hv});
    std::vector<double> logf(static_cast<size_t>(d.T));
    for (long t = 0; t < d.T; ++t) logf[static_cast<size_t>(t)] = log_sigmoid(in.f_pre(0, 0, t));
    for (long t = 0; t < d.T; ++t) {
        std::vector<double> w(static_cast<size_t>(t + 1));
        double row_sum = 0.0;
        for (long j = 0; j <= t; ++j) {
            double decay = 0.0;
            for (long u = j + 1; u <= t; ++u) decay += logf[static_cast<size_t>(u)];
            double s = 0.0;
            for (long p = 0; p < d.d_qk; ++p) s += in.q(0, 0, t, p) * in.k(0, 0, j, p);
            w[static_cast<size_t>(j)] =
                s * inv * std::exp(decay + log_sigmoid(in.i_pre(0, 0, j)));
            row_sum += w[static_cast<size_t>(j)];
        }
        const double denom = std::fmax(std::fabs(row_sum), 1.0);
        for (long x = 0; x < d.d_hv; ++x) {
            double acc = 0.0;
            for (long j = 0; j <= t; ++j) acc += w[static_cast<size_t>(j)] * in.v(0, 0, j, x);
            want(0, 0, t, x) = acc / denom;
        }
    }
    CHECK(max_abs_diff(got, want) < 1e-10);
    CHECK(got.all_finite());
}
