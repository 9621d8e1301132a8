#include "mlstm/parallel.hpp"

#include <cmath>
#include <vector>

#include "mlstm/gates.hpp"

namespace mlstm {

namespace {
constexpr double kNegInf = -1e30;  // finite sentinel; exp maps it to exact 0
}

const char* normalizer_name(Normalizer n) {
    switch (n) {
        case Normalizer::Default: return "default";
        case Normalizer::MaxAbsOne: return "max_abs_one";
        case Normalizer::AbsSum: return "abs_sum";
        case Normalizer::RawSum: return "raw_sum";
        case Normalizer::Ones: return "ones";
    }
    return "?";
}

Normalizer normalizer_from_string(const std::string& s) {
    if (s == "default") return Normalizer::Default;
    if (s == "max_abs_one") return Normalizer::MaxAbsOne;
    if (s == "abs_sum") return Normalizer::AbsSum;
    if (s == "raw_sum") return Normalizer::RawSum;
    if (s == "ones") return Normalizer::Ones;
    throw ParameterError("unknown normalizer: " + s);
}

bool normalizer_valid_for(Variant variant, Normalizer n) {
    if (variant == Variant::Exp)
        return n == Normalizer::Default || n == Normalizer::MaxAbsOne || n == Normalizer::Ones;
    return n == Normalizer::Ones || n == Normalizer::MaxAbsOne || n == Normalizer::AbsSum ||
           n == Normalizer::RawSum;
}

namespace detail {

void head_scores(const double* q, const double* k, long T, long d_qk, double* s_out) {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d_qk));
    for (long i = 0; i < T; ++i) {
        const double* qi = q + i * d_qk;
        double* srow = s_out + i * T;
        for (long j = 0; j <= i; ++j) {
            const double* kj = k + j * d_qk;
            double acc = 0.0;
            for (long p = 0; p < d_qk; ++p) acc += qi[p] * kj[p];
            srow[j] = acc * inv_sqrt_d;
        }
    }
}

void parallel_head_core(const double* s_scores, const double* v, const double* i_pre,
                        const double* f_pre, long T, long d_hv, Variant variant,
                        Normalizer normalizer, double* h_out) {
    // Prefix sums of the log forget gates; log F_ij = ps[i] - ps[j] for i >= j.
    std::vector<double> ps(static_cast<size_t>(T));
    std::vector<double> i_bar(static_cast<size_t>(T));
    double run = 0.0;
    for (long t = 0; t < T; ++t) {
        run += log_sigmoid(f_pre[t]);
        ps[static_cast<size_t>(t)] = run;
        i_bar[static_cast<size_t>(t)] =
            (variant == Variant::Exp) ? i_pre[t] : log_sigmoid(i_pre[t]);
    }

    std::vector<double> w(static_cast<size_t>(T));  // weighted row of S
    for (long i = 0; i < T; ++i) {
        const double* srow = s_scores + i * T;

        double m = kNegInf;
        if (variant == Variant::Exp) {
            for (long j = 0; j <= i; ++j) {
                double d = ps[static_cast<size_t>(i)] - ps[static_cast<size_t>(j)] +
                           i_bar[static_cast<size_t>(j)];
                if (d > m) m = d;
            }
        }

        double row_sum = 0.0;
        for (long j = 0; j <= i; ++j) {
            double d = ps[static_cast<size_t>(i)] - ps[static_cast<size_t>(j)] +
                       i_bar[static_cast<size_t>(j)];
            double gate = (variant == Variant::Exp) ? stab::exp_guarded(d - m) : std::exp(d);
            double sw = srow[j] * gate;
            w[static_cast<size_t>(j)] = sw;
            row_sum += sw;
        }

        double denom = 1.0;
        switch (normalizer) {
            case Normalizer::Default: denom = std::fmax(std::fabs(row_sum), std::exp(-m)); break;
            case Normalizer::MaxAbsOne: denom = std::fmax(std::fabs(row_sum), 1.0); break;
            case Normalizer::AbsSum: denom = std::fabs(row_sum); break;
            case Normalizer::RawSum: denom = row_sum; break;
            case Normalizer::Ones: denom = 1.0; break;
        }

        double* hrow = h_out + i * d_hv;
        for (long x = 0; x < d_hv; ++x) hrow[x] = 0.0;
        for (long j = 0; j <= i; ++j) {
            const double wj = w[static_cast<size_t>(j)];
            if (wj == 0.0) continue;
            const double* vj = v + j * d_hv;
            for (long x = 0; x < d_hv; ++x) hrow[x] += wj * vj[x];
        }
        for (long x = 0; x < d_hv; ++x) hrow[x] /= denom;
    }
}

}  // namespace detail

static Tensor parallel_forward_impl(const SequenceInputs& inputs, const Dims& dims,
                                    Variant variant, Normalizer normalizer) {
    dims.validate();
    inputs.validate(dims);
    if (!normalizer_valid_for(variant, normalizer))
        throw ParameterError(std::string("normalizer '") + normalizer_name(normalizer) +
                             "' not defined for variant '" + variant_name(variant) + "'");

    const long B = dims.n_batch, H = dims.n_head, T = dims.T;
    Tensor h({B, H, T, dims.d_hv});
    std::vector<double> scores(static_cast<size_t>(T) * static_cast<size_t>(T));
    for (long b = 0; b < B; ++b) {
        for (long hd = 0; hd < H; ++hd) {
            detail::head_scores(inputs.q.data() + inputs.q.offset(b, hd),
                                inputs.k.data() + inputs.k.offset(b, hd), T, dims.d_qk,
                                scores.data());
            detail::parallel_head_core(scores.data(), inputs.v.data() + inputs.v.offset(b, hd),
                                       inputs.i_pre.data() + inputs.i_pre.offset(b, hd),
                                       inputs.f_pre.data() + inputs.f_pre.offset(b, hd), T,
                                       dims.d_hv, variant, normalizer,
                                       h.data() + h.offset(b, hd));
        }
    }
    if (!h.all_finite()) throw NumericError("parallel forward produced non-finite values");
    return h;
}

Tensor parallel_forward_exp(const SequenceInputs& inputs, const Dims& dims) {
    return parallel_forward_impl(inputs, dims, Variant::Exp, Normalizer::Default);
}

Tensor parallel_forward_sig(const SequenceInputs& inputs, const Dims& dims) {
    return parallel_forward_impl(inputs, dims, Variant::Sig, Normalizer::Ones);
}

Tensor normalizer_variant_forward(const SequenceInputs& inputs, const Dims& dims, Variant variant,
                                  Normalizer normalizer) {
    return parallel_forward_impl(inputs, dims, variant, normalizer);
}

}  // namespace mlstm
