#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "mlstm/core.hpp"

using namespace mlstm;

TEST_CASE("dims validation") {
    Dims d;
    d.T = 100;
    d.L = 16;
    CHECK_NOTHROW(d.validate());
    CHECK_THROWS_AS(d.validate_chunked(), GeometryError);
    d.L = 0;
    CHECK_THROWS_AS(d.validate(), GeometryError);
    d.L = 25;
    d.d_qk = 0;
    CHECK_THROWS_AS(d.validate(), GeometryError);
    d.d_qk = 8;
    CHECK_NOTHROW(d.validate_chunked());
    CHECK(d.n_chunk() == 4);
}

TEST_CASE("tensor shape and strides") {
    Tensor t({2, 3, 4});
    CHECK(t.numel() == 24);
    t(1, 2, 3) = 5.0;
    CHECK(t.data()[23] == 5.0);
    t(0, 1, 0) = 2.5;
    CHECK(t.data()[4] == 2.5);
    CHECK(t.offset(1, 2) == 20);
}

TEST_CASE("max_abs_diff matches an elementwise scan") {
    Rng rng(3);
    Tensor a({5, 7}), b({5, 7});
    rng.fill_normal(a, 1.0);
    rng.fill_normal(b, 1.0);
    double expect = 0.0;
    for (long i = 0; i < a.numel(); ++i) expect = std::fmax(expect, std::fabs(a[i] - b[i]));
    CHECK(max_abs_diff(a, b) == expect);
    CHECK(max_abs_diff(a, a) == 0.0);

    Tensor c({7, 5});
    CHECK_THROWS_AS(max_abs_diff(a, c), GeometryError);
}

TEST_CASE("max_abs_diff on direct values") {
    Tensor a({2}), b({2});
    a[0] = 1.0;
    a[1] = 2.0;
    b[0] = 1.0;
    b[1] = 3.0;
    CHECK(max_abs_diff(a, b) == 1.0);
}

TEST_CASE("make_inputs determinism and zero case") {
    Dims d;
    d.T = 8;
    d.L = 4;
    d.d_qk = 3;
    d.d_hv = 5;
    d.n_head = 2;
    d.n_batch = 2;

    Rng r0(42);
    SequenceInputs zero = make_inputs(d, r0, 0.0);
    CHECK(max_abs(zero.q) == 0.0);
    CHECK(max_abs(zero.v) == 0.0);
    CHECK(max_abs(zero.i_pre) == 0.0);

    Rng r1(42), r2(42), r3(43);
    SequenceInputs a = make_inputs(d, r1, 1.0, 1.0);
    SequenceInputs b = make_inputs(d, r2, 1.0, 1.0);
    SequenceInputs c = make_inputs(d, r3, 1.0, 1.0);
    CHECK(max_abs_diff(a.q, b.q) == 0.0);
    CHECK(max_abs_diff(a.k, b.k) == 0.0);
    CHECK(max_abs_diff(a.v, b.v) == 0.0);
    CHECK(max_abs_diff(a.f_pre, b.f_pre) == 0.0);
    CHECK(max_abs_diff(a.q, c.q) > 0.0);
}

TEST_CASE("rng stream looks standard normal") {
    Rng rng(123);
    const long n = 200000;
    double sum = 0.0, sq = 0.0;
    for (long i = 0; i < n; ++i) {
        double v = rng.normal();
        sum += v;
        sq += v * v;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::fabs(mean) < 0.02);
    CHECK(std::fabs(var - 1.0) < 0.02);
}

TEST_CASE("input validation rejects bad shapes and non-finite entries") {
    Dims d;
    d.T = 4;
    d.L = 2;
    d.d_qk = 2;
    d.d_hv = 2;
    Rng rng(1);
    SequenceInputs in = make_inputs(d, rng, 1.0);
    CHECK_NOTHROW(in.validate(d));
    in.q[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(in.validate(d), NumericError);

    SequenceInputs bad = make_inputs(d, rng, 1.0);
    bad.v = Tensor({1, 1, 4, 3});
    CHECK_THROWS_AS(bad.validate(d), GeometryError);
}

TEST_CASE("stabilization instrumentation counts") {
    stab::reset();
    CHECK(stab::checks() == 0);
    (void)stab::exp_guarded(-1.0);
    (void)stab::exp_guarded(0.0);
    CHECK(stab::checks() == 2);
    CHECK(stab::violations() == 0);
    (void)stab::exp_guarded(1e-9);
    CHECK(stab::violations() == 1);
    stab::reset();
    CHECK(stab::violations() == 0);
}
