#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "mlstm/gates.hpp"

using namespace mlstm;

namespace {

// O(L^2) oracle: every entry summed term by term from the definitions.
ChunkwiseGates gates_bruteforce(const std::vector<double>& f_pre, const std::vector<double>& i_pre,
                                long L, Variant variant) {
    const long T = static_cast<long>(f_pre.size());
    const long n_chunk = T / L;
    ChunkwiseGates out;
    out.g_sum = Tensor({n_chunk});
    out.b_cum = Tensor({n_chunk, L});
    out.a_tail = Tensor({n_chunk, L});
    for (long k = 0; k < n_chunk; ++k) {
        double g = 0.0;
        for (long i = 0; i < L; ++i) g += log_sigmoid(f_pre[static_cast<size_t>(k * L + i)]);
        out.g_sum(k) = g;
        for (long j = 0; j < L; ++j) {
            double b = 0.0;
            for (long i = 0; i <= j; ++i) b += log_sigmoid(f_pre[static_cast<size_t>(k * L + i)]);
            out.b_cum(k, j) = b;
            double tail = 0.0;
            for (long i = j + 1; i < L; ++i)
                tail += log_sigmoid(f_pre[static_cast<size_t>(k * L + i)]);
            const double ib = variant == Variant::Exp
                                  ? i_pre[static_cast<size_t>(k * L + j)]
                                  : log_sigmoid(i_pre[static_cast<size_t>(k * L + j)]);
            out.a_tail(k, j) = tail + ib;
        }
    }
    return out;
}

}  // namespace

TEST_CASE("log_sigmoid reference values") {
    CHECK(log_sigmoid(0.0) == doctest::Approx(-0.6931471805599453).epsilon(1e-15));
    CHECK(std::fabs(log_sigmoid(-100.0) - (-100.0)) < 1e-12);
    CHECK(log_sigmoid(100.0) < 0.0);
    CHECK(log_sigmoid(100.0) > -1e-40);
    // no overflow far out
    CHECK(std::isfinite(log_sigmoid(1e4)));
    CHECK(std::isfinite(log_sigmoid(-1e4)));
    CHECK(log_sigmoid(-1e4) == doctest::Approx(-1e4));
}

TEST_CASE("softcap") {
    CHECK(softcap(0.0, 30.0) == 0.0);
    CHECK(softcap(15.0, 30.0) == doctest::Approx(30.0 * std::tanh(0.5)).epsilon(1e-15));
    CHECK(softcap(1e6, 15.0) == doctest::Approx(15.0).epsilon(1e-12));
    CHECK(softcap(-1e6, 15.0) == doctest::Approx(-15.0).epsilon(1e-12));
    CHECK_THROWS_AS(softcap(1.0, 0.0), ParameterError);
    CHECK_THROWS_AS(softcap(1.0, -2.0), ParameterError);
}

TEST_CASE("chunkwise gates: saturated forget gate") {
    std::vector<double> f(4, 1e3), i(4, 0.0);
    ChunkwiseGates g = chunkwise_gates(f.data(), i.data(), 4, 4, Variant::Exp);
    CHECK(std::fabs(g.g_sum(0)) < 1e-12);
    for (long j = 0; j < 4; ++j) {
        CHECK(std::fabs(g.b_cum(0, j)) < 1e-12);
        CHECK(std::fabs(g.a_tail(0, j)) < 1e-12);
    }
}

TEST_CASE("chunkwise gates: multiples of log 2") {
    std::vector<double> f(4, 0.0), i(4, 0.0);
    ChunkwiseGates g = chunkwise_gates(f.data(), i.data(), 4, 4, Variant::Exp);
    const double l2 = -0.6931471805599453;
    CHECK(g.g_sum(0) == doctest::Approx(4 * l2).epsilon(1e-14));
    for (long j = 0; j < 4; ++j)
        CHECK(g.b_cum(0, j) == doctest::Approx((j + 1) * l2).epsilon(1e-14));
    CHECK(g.a_tail(0, 0) == doctest::Approx(3 * l2).epsilon(1e-14));
    CHECK(g.a_tail(0, 1) == doctest::Approx(2 * l2).epsilon(1e-14));
    CHECK(g.a_tail(0, 2) == doctest::Approx(1 * l2).epsilon(1e-14));
    CHECK(g.a_tail(0, 3) == 0.0);
}

TEST_CASE("chunkwise gates match the double-loop summation oracle") {
    Rng rng(11);
    const long T = 32, L = 8;
    std::vector<double> f(T), i(T);
    for (auto& v : f) v = rng.normal() * 2.0;
    for (auto& v : i) v = rng.normal() * 2.0;

    for (Variant variant : {Variant::Exp, Variant::Sig}) {
        ChunkwiseGates got = chunkwise_gates(f.data(), i.data(), T, L, variant);
        ChunkwiseGates want = gates_bruteforce(f, i, L, variant);
        CHECK(max_abs_diff(got.g_sum, want.g_sum) < 1e-13);
        CHECK(max_abs_diff(got.b_cum, want.b_cum) < 1e-13);
        CHECK(max_abs_diff(got.a_tail, want.a_tail) < 1e-13);
    }
}

TEST_CASE("chunkwise gate invariants") {
    Rng rng(5);
    const long T = 64, L = 16;
    std::vector<double> f(T), i(T);
    for (auto& v : f) v = rng.normal() * 3.0;
    for (auto& v : i) v = rng.normal() * 3.0;

    for (Variant variant : {Variant::Exp, Variant::Sig}) {
        ChunkwiseGates g = chunkwise_gates(f.data(), i.data(), T, L, variant);
        for (long k = 0; k < T / L; ++k) {
            // cumsum ends at the chunk sum
            CHECK(std::fabs(g.b_cum(k, L - 1) - g.g_sum(k)) < 1e-12);
            double prev = 0.0;
            for (long j = 0; j < L; ++j) {
                CHECK(g.b_cum(k, j) <= 0.0);
                CHECK(g.b_cum(k, j) <= prev);  // non-increasing
                prev = g.b_cum(k, j);
                // stable tail equals the cancelling identity g - b + i_bar
                const double ib = variant == Variant::Exp
                                      ? i[static_cast<size_t>(k * L + j)]
                                      : log_sigmoid(i[static_cast<size_t>(k * L + j)]);
                const double unstable = g.g_sum(k) - g.b_cum(k, j) + ib;
                CHECK(std::fabs(g.a_tail(k, j) - unstable) < 1e-10);
                if (variant == Variant::Sig) CHECK(g.a_tail(k, j) <= 0.0);
            }
            // last position carries no forget tail
            const double ib_last = variant == Variant::Exp
                                       ? i[static_cast<size_t>(k * L + L - 1)]
                                       : log_sigmoid(i[static_cast<size_t>(k * L + L - 1)]);
            CHECK(g.a_tail(k, L - 1) == ib_last);
        }
    }
}

TEST_CASE("chunkwise gates reject bad geometry") {
    std::vector<double> f(10, 0.0), i(10, 0.0);
    CHECK_THROWS_AS(chunkwise_gates(f.data(), i.data(), 10, 4, Variant::Exp), GeometryError);

    Tensor ft({8}), it({8});
    CHECK_NOTHROW(chunkwise_gates(ft, it, 4, Variant::Sig));
    Tensor bad({2, 4});
    CHECK_THROWS_AS(chunkwise_gates(bad, bad, 4, Variant::Sig), GeometryError);
}

TEST_CASE("gate softcap preprocessing") {
    Dims d;
    d.T = 4;
    d.L = 2;
    d.d_qk = 2;
    d.d_hv = 2;
    Rng rng(1);
    SequenceInputs in = make_inputs(d, rng, 1.0, 50.0);
    SequenceInputs capped = apply_gate_softcap(in, 15.0);
    CHECK(max_abs(capped.i_pre) < 15.0);
    CHECK(max_abs(capped.f_pre) < 15.0);
    CHECK(max_abs_diff(capped.q, in.q) == 0.0);
}
