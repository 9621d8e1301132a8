#include "mlstm/bench.hpp"

#include <algorithm>
#include <chrono>

#include "mlstm/detail_kernels.hpp"

namespace mlstm {

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<float> to_float(const Tensor& t) {
    std::vector<float> out(static_cast<size_t>(t.numel()));
    const double* p = t.data();
    for (long i = 0; i < t.numel(); ++i) out[static_cast<size_t>(i)] = static_cast<float>(p[i]);
    return out;
}

// One full forward over all (batch, head) slices in float activations.
template <class TS>
void run_f32_forward(const BenchConfig& cfg, const Dims& dims, const BlockConfig& blocks,
                     const SequenceInputs& in, const std::vector<float>& qf,
                     const std::vector<float>& kf, const std::vector<float>& vf) {
    const long n_chunk = dims.n_chunk();
    const long head_in_qk = dims.T * dims.d_qk;
    const long head_in_hv = dims.T * dims.d_hv;

    std::vector<float> h(static_cast<size_t>(head_in_hv));
    std::vector<TS> c_states(static_cast<size_t>((n_chunk + 1) * dims.d_qk * dims.d_hv));
    std::vector<TS> n_states(static_cast<size_t>((n_chunk + 1) * dims.d_qk));
    std::vector<TS> m_states(static_cast<size_t>(n_chunk + 1));
    std::vector<TS> m_comb(static_cast<size_t>(dims.T)), h_denom(static_cast<size_t>(dims.T));

    for (long b = 0; b < dims.n_batch; ++b) {
        for (long hd = 0; hd < dims.n_head; ++hd) {
            const long slice = (b * dims.n_head + hd);
            const float* q = qf.data() + slice * head_in_qk;
            const float* k = kf.data() + slice * head_in_qk;
            const float* v = vf.data() + slice * head_in_hv;
            const double* fp = in.f_pre.data() + in.f_pre.offset(b, hd);
            const double* ip = in.i_pre.data() + in.i_pre.offset(b, hd);

            detail::HeadGates<TS> gates = detail::prepare_head_gates<TS>(fp, ip, dims, cfg.variant);
            detail::state_recurrence_head<float, TS>(k, v, gates, dims, cfg.variant,
                                                     c_states.data(), n_states.data(),
                                                     m_states.data());
            if (cfg.impl == BenchImpl::Tiled) {
                detail::tfla_forward_head<float, TS>(q, k, v, gates, dims, blocks, cfg.variant,
                                                     h.data(), c_states.data(), n_states.data(),
                                                     m_states.data(), m_comb.data(),
                                                     h_denom.data());
            } else {
                // The chunkwise head recomputes gates and states internally;
                // call it on the raw buffers for a like-for-like measurement.
                std::vector<TS> ipf(static_cast<size_t>(dims.T)), fpf(static_cast<size_t>(dims.T));
                for (long t = 0; t < dims.T; ++t) {
                    ipf[static_cast<size_t>(t)] = static_cast<TS>(ip[t]);
                    fpf[static_cast<size_t>(t)] = static_cast<TS>(fp[t]);
                }
                detail::chunkwise_forward_head<float, TS>(q, k, v, ipf.data(), fpf.data(), dims,
                                                          cfg.variant, h.data(), c_states.data(),
                                                          n_states.data(), m_states.data(),
                                                          m_comb.data(), h_denom.data());
            }
        }
    }
}

}  // namespace

std::vector<BenchRow> run_bench(const BenchConfig& cfg) {
    if (cfg.repeats < 3) throw ParameterError("bench: repeats must be >= 3");
    if (cfg.warmup < 0) throw ParameterError("bench: warmup must be >= 0");
    if (cfg.chunk_sizes.empty()) throw ParameterError("bench: empty chunk-size list");

    std::vector<BenchRow> rows;
    for (long L : cfg.chunk_sizes) {
        Dims dims = cfg.dims;
        dims.L = L;
        dims.validate_chunked();
        BlockConfig blocks = BlockConfig::pick_default(dims);

        Rng rng(cfg.seed);
        SequenceInputs in = make_inputs(dims, rng, 1.0, 1.0);

        std::vector<float> qf, kf, vf;
        const bool f32 = cfg.precision.mode == PrecisionMode::F32;
        if (f32) {
            qf = to_float(in.q);
            kf = to_float(in.k);
            vf = to_float(in.v);
        }

        auto run_once = [&]() {
            if (!f32) {
                if (cfg.impl == BenchImpl::Tiled)
                    (void)tfla_forward(in, dims, blocks, cfg.variant);
                else
                    (void)chunkwise_forward(in, dims, cfg.variant);
            } else if (cfg.precision.state_mode == StateMode::Wider) {
                run_f32_forward<double>(cfg, dims, blocks, in, qf, kf, vf);
            } else {
                run_f32_forward<float>(cfg, dims, blocks, in, qf, kf, vf);
            }
        };

        for (long i = 0; i < cfg.warmup; ++i) run_once();
        std::vector<double> times;
        times.reserve(static_cast<size_t>(cfg.repeats));
        for (long i = 0; i < cfg.repeats; ++i) {
            const auto start = std::chrono::steady_clock::now();
            run_once();
            const auto stop = std::chrono::steady_clock::now();
            times.push_back(std::chrono::duration<double>(stop - start).count());
        }

        const double state_elems = cfg.variant == Variant::Exp
                                       ? static_cast<double>(dims.d_qk * dims.d_hv + dims.d_qk + 1)
                                       : static_cast<double>(dims.d_qk * dims.d_hv);
        BenchRow row;
        row.impl = cfg.impl == BenchImpl::Tiled ? "tiled" : "chunkwise";
        row.chunk_size = L;
        row.median_seconds = median(times);
        row.peak_bytes_estimate = static_cast<double>(dims.n_batch * dims.n_head) *
                                  static_cast<double>(dims.n_chunk()) * state_elems *
                                  cfg.params.bytes_cmn;
        rows.push_back(row);
    }
    return rows;
}

}  // namespace mlstm
