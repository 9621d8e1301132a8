#include "mlstm/core.hpp"

#include <atomic>
#include <cmath>
#include <numbers>

namespace mlstm {

void Dims::validate() const {
    if (T < 1) throw GeometryError("T must be >= 1");
    if (L < 1) throw GeometryError("L must be >= 1");
    if (d_qk < 1) throw GeometryError("d_qk must be >= 1");
    if (d_hv < 1) throw GeometryError("d_hv must be >= 1");
    if (n_head < 1) throw GeometryError("n_head must be >= 1");
    if (n_batch < 1) throw GeometryError("n_batch must be >= 1");
}

void Dims::validate_chunked() const {
    validate();
    if (T % L != 0) throw GeometryError("T not divisible by L");
}

Tensor::Tensor(std::vector<long> shape) : shape_(std::move(shape)) {
    numel_ = 1;
    for (long d : shape_) {
        if (d < 0) throw GeometryError("negative tensor dimension");
        numel_ *= d;
    }
    stride_.assign(shape_.empty() ? 0 : shape_.size() - 1, 1);
    for (long i = static_cast<long>(stride_.size()) - 1; i >= 0; --i) {
        long s = shape_[static_cast<size_t>(i) + 1];
        stride_[static_cast<size_t>(i)] = s * (static_cast<size_t>(i) + 1 < stride_.size()
                                                   ? stride_[static_cast<size_t>(i) + 1]
                                                   : 1);
    }
    data_.assign(static_cast<size_t>(numel_), 0.0);
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

void Tensor::fill(double v) { data_.assign(data_.size(), v); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw GeometryError("max_abs_diff: shape mismatch");
    double m = 0.0;
    const double* pa = a.data();
    const double* pb = b.data();
    for (long i = 0; i < a.numel(); ++i) {
        double d = std::fabs(pa[i] - pb[i]);
        if (d > m) m = d;
    }
    return m;
}

double max_abs(const Tensor& t) {
    double m = 0.0;
    const double* p = t.data();
    for (long i = 0; i < t.numel(); ++i) {
        double d = std::fabs(p[i]);
        if (d > m) m = d;
    }
    return m;
}

const char* variant_name(Variant v) { return v == Variant::Exp ? "exp" : "sig"; }

Variant variant_from_string(const std::string& s) {
    if (s == "exp") return Variant::Exp;
    if (s == "sig") return Variant::Sig;
    throw ParameterError("unknown variant: " + s);
}

// splitmix64; decorrelates nearby seeds before Box-Muller.
std::uint64_t Rng::next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    // u1 in (0,1], u2 in [0,1) from the top 53 bits.
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    double angle = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(angle);
    have_spare_ = true;
    return r * std::cos(angle);
}

void Rng::fill_normal(Tensor& t, double scale) {
    double* p = t.data();
    for (long i = 0; i < t.numel(); ++i) p[i] = scale * normal();
}

void SequenceInputs::validate(const Dims& dims) const {
    const std::vector<long> qk{dims.n_batch, dims.n_head, dims.T, dims.d_qk};
    const std::vector<long> hv{dims.n_batch, dims.n_head, dims.T, dims.d_hv};
    const std::vector<long> g{dims.n_batch, dims.n_head, dims.T};
    if (q.shape() != qk || k.shape() != qk) throw GeometryError("q/k shape mismatch with dims");
    if (v.shape() != hv) throw GeometryError("v shape mismatch with dims");
    if (i_pre.shape() != g || f_pre.shape() != g)
        throw GeometryError("gate pre-activation shape mismatch with dims");
    if (!q.all_finite() || !k.all_finite() || !v.all_finite() || !i_pre.all_finite() ||
        !f_pre.all_finite())
        throw NumericError("non-finite entries in sequence inputs");
}

MemoryState MemoryState::zero(const Dims& dims) {
    MemoryState s;
    s.C = Tensor({dims.d_qk, dims.d_hv});
    s.n = Tensor({dims.d_qk});
    s.m = 0.0;
    return s;
}

SequenceInputs make_inputs(const Dims& dims, Rng& rng, double scale, double gate_scale) {
    dims.validate();
    SequenceInputs in;
    in.q = Tensor({dims.n_batch, dims.n_head, dims.T, dims.d_qk});
    in.k = Tensor({dims.n_batch, dims.n_head, dims.T, dims.d_qk});
    in.v = Tensor({dims.n_batch, dims.n_head, dims.T, dims.d_hv});
    in.i_pre = Tensor({dims.n_batch, dims.n_head, dims.T});
    in.f_pre = Tensor({dims.n_batch, dims.n_head, dims.T});
    rng.fill_normal(in.q, scale);
    rng.fill_normal(in.k, scale);
    rng.fill_normal(in.v, scale);
    if (gate_scale != 0.0) {
        rng.fill_normal(in.i_pre, gate_scale);
        rng.fill_normal(in.f_pre, gate_scale);
    }
    return in;
}

namespace stab {

namespace {
std::atomic<long long> g_checks{0};
std::atomic<long long> g_violations{0};
}  // namespace

void reset() {
    g_checks.store(0);
    g_violations.store(0);
}

long long checks() { return g_checks.load(); }
long long violations() { return g_violations.load(); }

double exp_guarded(double x) {
    g_checks.fetch_add(1, std::memory_order_relaxed);
    if (x > 0.0) g_violations.fetch_add(1, std::memory_order_relaxed);
    return std::exp(x);
}

}  // namespace stab

}  // namespace mlstm
