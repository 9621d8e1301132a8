#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mlstm {

// Thrown when tensor shapes or sequence/chunk geometry are inconsistent.
struct GeometryError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Thrown for out-of-range scalar parameters (caps, tolerances, registry keys).
struct ParameterError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Thrown when an operation encounters or would produce non-finite values.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Sequence and head geometry shared by every formulation.
/// T must be divisible by L whenever a chunked operation is invoked.
struct Dims {
    long T = 1;        // sequence length (steps)
    long L = 1;        // chunk size (steps)
    long d_qk = 1;     // query/key head dimension
    long d_hv = 1;     // value/hidden head dimension
    long n_head = 1;   // heads
    long n_batch = 1;  // batch

    long n_chunk() const { return T / L; }

    void validate() const;          // basic ranges
    void validate_chunked() const;  // additionally T % L == 0
};

/// Dense row-major tensor of doubles with explicit shape metadata.
/// No broadcasting; indexing is plain offset arithmetic so loop order
/// stays auditable in the tiled kernels.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<long> shape);

    static Tensor zeros(std::vector<long> shape) { return Tensor(std::move(shape)); }

    long rank() const { return static_cast<long>(shape_.size()); }
    long dim(long i) const { return shape_[static_cast<size_t>(i)]; }
    long numel() const { return numel_; }
    const std::vector<long>& shape() const { return shape_; }
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool empty() const { return numel_ == 0; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](long i) { return data_[static_cast<size_t>(i)]; }
    double operator[](long i) const { return data_[static_cast<size_t>(i)]; }

    double& operator()(long i) { return data_[static_cast<size_t>(i)]; }
    double operator()(long i) const { return data_[static_cast<size_t>(i)]; }
    double& operator()(long i, long j) { return data_[static_cast<size_t>(i * stride_[0] + j)]; }
    double operator()(long i, long j) const { return data_[static_cast<size_t>(i * stride_[0] + j)]; }
    double& operator()(long i, long j, long k) {
        return data_[static_cast<size_t>(i * stride_[0] + j * stride_[1] + k)];
    }
    double operator()(long i, long j, long k) const {
        return data_[static_cast<size_t>(i * stride_[0] + j * stride_[1] + k)];
    }
    double& operator()(long i, long j, long k, long l) {
        return data_[static_cast<size_t>(i * stride_[0] + j * stride_[1] + k * stride_[2] + l)];
    }
    double operator()(long i, long j, long k, long l) const {
        return data_[static_cast<size_t>(i * stride_[0] + j * stride_[1] + k * stride_[2] + l)];
    }
    double& operator()(long i, long j, long k, long l, long m) {
        return data_[static_cast<size_t>(i * stride_[0] + j * stride_[1] + k * stride_[2] +
                                         l * stride_[3] + m)];
    }
    double operator()(long i, long j, long k, long l, long m) const {
        return data_[static_cast<size_t>(i * stride_[0] + j * stride_[1] + k * stride_[2] +
                                         l * stride_[3] + m)];
    }

    // Offset of the slice starting at (outer indices ...), e.g. the row base
    // of a [B,H,T,d] tensor for fixed (b,h,t).
    long offset(long i) const { return i * stride_[0]; }
    long offset(long i, long j) const { return i * stride_[0] + j * stride_[1]; }
    long offset(long i, long j, long k) const {
        return i * stride_[0] + j * stride_[1] + k * stride_[2];
    }

    bool all_finite() const;
    void fill(double v);

  private:
    std::vector<long> shape_;
    std::vector<long> stride_;  // strides for all but the last axis
    std::vector<double> data_;
    long numel_ = 0;
};

/// Max over entries of |a - b|. Shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

/// Largest |entry|.
double max_abs(const Tensor& t);

enum class Variant { Exp, Sig };

const char* variant_name(Variant v);
Variant variant_from_string(const std::string& s);

/// Numeric configuration. f64 is the reference mode for every equivalence
/// and gradient test; f32 exists for the benchmark harness only.
enum class PrecisionMode { F64, F32 };
enum class StateMode { Same, Wider };

struct Precision {
    PrecisionMode mode = PrecisionMode::F64;
    StateMode state_mode = StateMode::Same;
};

/// Seeded standard-normal stream: mt19937_64 driving a Box-Muller transform
/// on 53-bit uniforms. Same seed, same build => identical tensors.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

    std::uint64_t seed() const { return seed_; }
    double normal();
    void fill_normal(Tensor& t, double scale);

  private:
    std::uint64_t next_u64();

    std::uint64_t seed_ = 0;
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

/// Per-head q/k/v tensors plus input/forget gate pre-activations.
/// Shapes: q,k [B,H,T,d_qk]; v [B,H,T,d_hv]; i_pre,f_pre [B,H,T].
struct SequenceInputs {
    Tensor q, k, v, i_pre, f_pre;

    void validate(const Dims& dims) const;
};

/// Matrix memory C, normalizer n and log-domain max state m for one head.
/// The sigmoid variant carries C only (n and m fixed to 1 and 0).
struct MemoryState {
    Tensor C;  // [d_qk, d_hv]
    Tensor n;  // [d_qk]
    double m = 0.0;

    static MemoryState zero(const Dims& dims);
};

/// q,k,v ~ scale * N(0,1); gate pre-activations ~ gate_scale * N(0,1)
/// (zeros by default -- constant gates are supplied by the caller).
SequenceInputs make_inputs(const Dims& dims, Rng& rng, double scale, double gate_scale = 0.0);

// Instrumentation for the stabilized exponentials: every gate-path argument
// must be <= 0 by construction of the running maxima. exp_guarded() counts
// violations instead of asserting so test suites can report totals.
namespace stab {

void reset();
long long checks();
long long violations();
double exp_guarded(double x);

}  // namespace stab

}  // namespace mlstm
