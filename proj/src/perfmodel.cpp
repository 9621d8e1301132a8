#include "mlstm/perfmodel.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"

namespace mlstm {

void PerfParams::validate() const {
    if (f_causal < 0.5 || f_causal > 1.0)
        throw ParameterError("f_causal must lie in [0.5, 1]");
    if ((bytes_qkv != 2.0 && bytes_qkv != 4.0) || (bytes_if != 2.0 && bytes_if != 4.0) ||
        (bytes_cmn != 2.0 && bytes_cmn != 4.0))
        throw ParameterError("byte widths must be 2 or 4");
}

PerfParams PerfParams::simplified() const {
    PerfParams p = *this;
    p.f_exp = p.f_log = p.f_sig = p.f_max = p.f_abs = p.f_mask = 1.0;
    return p;
}

const char* formulation_name(Formulation f) {
    switch (f) {
        case Formulation::Recurrent: return "recurrent";
        case Formulation::Parallel: return "parallel";
        case Formulation::Chunkwise: return "chunkwise";
    }
    return "?";
}

Formulation formulation_from_string(const std::string& s) {
    if (s == "recurrent") return Formulation::Recurrent;
    if (s == "parallel") return Formulation::Parallel;
    if (s == "chunkwise") return Formulation::Chunkwise;
    throw ParameterError("unknown formulation: " + s);
}

double CostBreakdown::total() const {
    double sum = 0.0;
    for (const auto& it : items) sum += it.second;
    return sum;
}

double CostBreakdown::item(const std::string& name) const {
    for (const auto& it : items)
        if (it.first == name) return it.second;
    throw ParameterError("unknown cost item: " + name);
}

CostBreakdown flops_chunkwise(const Dims& dims, const PerfParams& params, Variant variant,
                              CountMode mode) {
    dims.validate_chunked();
    params.validate();
    const PerfParams p = (mode == CountMode::Simplified) ? params.simplified() : params;
    const double L = static_cast<double>(dims.L);
    const double dqk = static_cast<double>(dims.d_qk);
    const double dhv = static_cast<double>(dims.d_hv);
    const double fc = p.f_causal;
    const double scale = static_cast<double>(dims.n_batch * dims.n_head * dims.n_chunk());

    CostBreakdown out;
    double gates, denominator, cum_forget, gate_matrix, inter_outputs, combination;
    if (variant == Variant::Exp) {
        gates = 2.0 * L + 0.5 * L * (L + 1.0) + L * (1.0 + p.f_exp + p.f_log + p.f_sig) + 3.0 +
                p.f_max + p.f_exp;
        denominator = 2.0 * dqk + 2.0 * L * dqk;
        cum_forget = 0.5 * L * (L + 1.0) + L * (p.f_log + p.f_sig);
        gate_matrix = fc * (L * L * (3.0 + p.f_exp + p.f_max) + L * (1.0 + p.f_max));
        inter_outputs = 2.0 * L * dqk * dhv + 3.0 * L * dqk;
        combination = 2.0 * L * dhv + L * (1.0 + p.f_max + p.f_abs + p.f_exp);
    } else {
        gates = 2.0 * L + 0.5 * L * (L + 1.0) + L * p.f_exp + p.f_exp +
                2.0 * L * (p.f_log + p.f_sig);
        denominator = 0.0;
        cum_forget = 0.5 * L * (L + 1.0) + 2.0 * L * (p.f_log + p.f_sig);
        gate_matrix = fc * (L * L * (2.0 + p.f_exp));
        inter_outputs = 2.0 * L * dqk * dhv + L * dqk;
        combination = L * dhv;
    }
    const double numerator = 2.0 * dqk * dhv + 2.0 * L * dqk * dhv + L * dqk;
    const double intra_outputs = fc * (2.0 * L * L * (dqk + dhv) + 3.0 * L * L);

    out.items = {{"gates", scale * gates},
                 {"numerator", scale * numerator},
                 {"denominator", scale * denominator},
                 {"cum_forget", scale * cum_forget},
                 {"gate_matrix", scale * gate_matrix},
                 {"intra_outputs", scale * intra_outputs},
                 {"inter_outputs", scale * inter_outputs},
                 {"combination", scale * combination}};
    return out;
}

CostBreakdown flops_parallel(const Dims& dims, const PerfParams& params, Variant variant,
                             CountMode mode) {
    dims.validate();
    params.validate();
    const PerfParams p = (mode == CountMode::Simplified) ? params.simplified() : params;
    const double T = static_cast<double>(dims.T);
    const double dqk = static_cast<double>(dims.d_qk);
    const double dhv = static_cast<double>(dims.d_hv);
    const double fc = p.f_causal;
    const double scale = static_cast<double>(dims.n_batch * dims.n_head);

    const double cum_forget =
        0.5 * T * (T + 1.0) +
        (variant == Variant::Exp ? T * (p.f_log + p.f_sig) : 2.0 * T * (p.f_log + p.f_sig));
    const double gate_matrix = T * T * (3.0 + p.f_exp + p.f_max + p.f_mask);
    const double attention_logits = fc * (2.0 * T * T * dqk + 2.0 * T * T);
    const double normalization =
        variant == Variant::Exp ? fc * (T * T * (3.0 + p.f_abs) + T * (p.f_exp + p.f_max)) : 0.0;
    const double outputs = fc * 2.0 * T * T * dhv;

    CostBreakdown out;
    out.items = {{"cum_forget", scale * cum_forget},
                 {"gate_matrix", scale * gate_matrix},
                 {"attention_logits", scale * attention_logits},
                 {"normalization", scale * normalization},
                 {"outputs", scale * outputs}};
    return out;
}

CostBreakdown flops_recurrent(const Dims& dims, const PerfParams& params, Variant variant,
                              CountMode mode) {
    dims.validate();
    params.validate();
    const PerfParams p = (mode == CountMode::Simplified) ? params.simplified() : params;
    const double dqk = static_cast<double>(dims.d_qk);
    const double dhv = static_cast<double>(dims.d_hv);
    const double scale =
        static_cast<double>(dims.n_batch * dims.n_head) * static_cast<double>(dims.T);

    double gates, denominator_scale;
    if (variant == Variant::Exp) {
        gates = 4.0 + 2.0 * p.f_exp + p.f_log + p.f_sig + p.f_max;
        denominator_scale = 6.0 * dqk + dhv + 1.0 + p.f_abs + p.f_max;
    } else {
        gates = 2.0 * p.f_sig;
        denominator_scale = 0.0;
    }
    const double memory_cell = 4.0 * dqk * dhv;
    const double output = 2.0 * dqk * dhv + dqk;

    CostBreakdown out;
    out.items = {{"gates", scale * gates},
                 {"memory_cell_update", scale * memory_cell},
                 {"denominator_scale", scale * denominator_scale},
                 {"output", scale * output}};
    return out;
}

MemopCounts memops(const Dims& dims, const PerfParams& params, Variant variant, Formulation f) {
    params.validate();
    const double dqk = static_cast<double>(dims.d_qk);
    const double dhv = static_cast<double>(dims.d_hv);
    const double bq = params.bytes_qkv, bi = params.bytes_if, bc = params.bytes_cmn;
    const double state_elems = variant == Variant::Exp ? dqk * dhv + dqk + 1.0 : dqk * dhv;

    MemopCounts out;
    switch (f) {
        case Formulation::Chunkwise: {
            dims.validate_chunked();
            const double L = static_cast<double>(dims.L);
            const double scale =
                static_cast<double>(dims.n_batch * dims.n_head * dims.n_chunk());
            const double load_rec = L * (dqk + dhv) * bq + 2.0 * L * bi;
            const double store_rec = state_elems * bc;
            const double load_par = L * (2.0 * dqk + dhv) * bq + 2.0 * L * bi + state_elems * bc;
            const double store_par =
                L * dhv * bq + (variant == Variant::Exp ? 2.0 * L * bc : 0.0);
            out.loaded = scale * (load_rec + load_par);
            out.stored = scale * (store_rec + store_par);
            break;
        }
        case Formulation::Parallel: {
            dims.validate();
            const double T = static_cast<double>(dims.T);
            const double scale = static_cast<double>(dims.n_batch * dims.n_head);
            out.loaded = scale * (T * (2.0 * dqk + dhv) * bq + 2.0 * T * bi);
            out.stored =
                scale * (T * dhv * bq + (variant == Variant::Exp ? 2.0 * T * bc : 0.0));
            break;
        }
        case Formulation::Recurrent: {
            dims.validate();
            const double scale =
                static_cast<double>(dims.n_batch * dims.n_head) * static_cast<double>(dims.T);
            out.loaded = scale * ((2.0 * dqk + dhv) * bq + 2.0 * bi + state_elems * bc);
            out.stored = scale * (dhv * bq + state_elems * bc);
            break;
        }
    }
    return out;
}

double chunkwise_flops_model(Variant variant, double T, double L, double d_qk, double d_hv,
                             double f_causal) {
    const double dd = d_qk * d_hv;
    if (variant == Variant::Sig) {
        return T * L * f_causal * (2.0 * (d_qk + d_hv) + 6.0) + T * L +
               T * (4.0 * dd + 2.0 * d_qk + d_hv + 11.0) + (T / L) * (2.0 * dd + 5.0);
    }
    return T * L * f_causal * (2.0 * (d_qk + d_hv) + 8.0) + T * L + 2.0 * T * f_causal +
           T * (4.0 * dd + 6.0 * d_qk + 4.0 * d_hv + 13.0) +
           (T / L) * (2.0 * dd + 2.0 * d_qk + 5.0);
}

double chunkwise_bytes_model(Variant variant, double T, double L, double d_qk, double d_hv,
                             const PerfParams& params) {
    const double per_chunk =
        4.0 * L * params.bytes_if + 3.0 * L * (d_hv + d_qk) * params.bytes_qkv +
        2.0 *
            (variant == Variant::Exp ? L + d_hv * d_qk + d_qk + 1.0 : d_hv * d_qk) *
            params.bytes_cmn;
    return (T / L) * per_chunk;
}

double flop_optimal_chunk_size(double d_hv, double p_qk, double f_causal) {
    if (d_hv <= 0.0 || p_qk <= 0.0 || f_causal <= 0.0)
        throw ParameterError("flop_optimal_chunk_size: arguments must be positive");
    const double num = 2.0 * d_hv * d_hv * p_qk + 5.0;
    const double den = 2.0 * f_causal * (d_hv * (1.0 + p_qk) + 3.0) + 1.0;
    return std::sqrt(num / den);
}

double runtime_optimal_chunk_size(double d_hv, double p_qk, double f_causal, double bytes_cmn,
                                  double i_acc) {
    if (d_hv <= 0.0 || p_qk <= 0.0 || f_causal <= 0.0 || bytes_cmn <= 0.0 || i_acc < 0.0)
        throw ParameterError("runtime_optimal_chunk_size: arguments must be positive");
    const double num =
        2.0 * d_hv * d_hv * p_qk + 5.0 + 2.0 * i_acc * d_hv * d_hv * p_qk * bytes_cmn;
    const double den = 2.0 * f_causal * (d_hv * (1.0 + p_qk) + 3.0) + 1.0;
    return std::sqrt(num / den);
}

double theoretical_runtime(const Dims& dims, const PerfParams& params, Variant variant,
                           const AcceleratorSpec& accel, double L, RuntimeBound bound) {
    if (L < 1.0) throw ParameterError("theoretical_runtime: L must be >= 1");
    if (accel.flops_per_s <= 0.0 || accel.bytes_per_s <= 0.0)
        throw ParameterError("theoretical_runtime: accelerator rates must be positive");
    const double scale = static_cast<double>(dims.n_batch * dims.n_head);
    const double flops = scale * chunkwise_flops_model(variant, static_cast<double>(dims.T), L,
                                                       static_cast<double>(dims.d_qk),
                                                       static_cast<double>(dims.d_hv),
                                                       params.f_causal);
    const double bytes = scale * chunkwise_bytes_model(variant, static_cast<double>(dims.T), L,
                                                       static_cast<double>(dims.d_qk),
                                                       static_cast<double>(dims.d_hv), params);
    const double t_flops = flops / accel.flops_per_s;
    const double t_bytes = bytes / accel.bytes_per_s;
    return bound == RuntimeBound::Sum ? t_flops + t_bytes : std::fmax(t_flops, t_bytes);
}

double arithmetic_intensity(const Dims& dims, const PerfParams& params, double L) {
    if (L < 1.0) throw ParameterError("arithmetic_intensity: L must be >= 1");
    const double T = static_cast<double>(dims.T);
    const double flops = chunkwise_flops_model(Variant::Sig, T, L, static_cast<double>(dims.d_qk),
                                               static_cast<double>(dims.d_hv), params.f_causal);
    const double bytes = chunkwise_bytes_model(Variant::Sig, T, L, static_cast<double>(dims.d_qk),
                                               static_cast<double>(dims.d_hv), params);
    return flops / bytes;
}

double accelerator_intensity(const AcceleratorSpec& accel) {
    if (accel.bytes_per_s <= 0.0) throw ParameterError("accelerator bandwidth must be positive");
    return accel.flops_per_s / accel.bytes_per_s;
}

double roofline(const AcceleratorSpec& accel, double intensity) {
    if (intensity < 0.0) throw ParameterError("roofline: intensity must be >= 0");
    return std::fmin(accel.bytes_per_s * intensity, accel.flops_per_s);
}

const std::vector<AcceleratorSpec>& accelerator_registry() {
    static const std::vector<AcceleratorSpec> presets = {
        {"V100 SXM2", 120e12, 0.9e12},
        {"A100 SXM", 312e12, 1.935e12},
        {"H100 SXM", 989e12, 3.35e12},
        {"B200 HGX", 2250e12, 7.7e12},
    };
    return presets;
}

std::vector<AcceleratorSpec> load_accelerator_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParameterError("cannot open accelerator file: " + path);
    nlohmann::json j;
    in >> j;
    if (!j.is_array()) throw ParameterError("accelerator file must hold a JSON array");
    std::vector<AcceleratorSpec> out;
    for (const auto& e : j) {
        AcceleratorSpec spec;
        spec.name = e.at("name").get<std::string>();
        spec.flops_per_s = e.at("flops_per_s").get<double>();
        spec.bytes_per_s = e.at("bytes_per_s").get<double>();
        if (spec.flops_per_s <= 0.0 || spec.bytes_per_s <= 0.0)
            throw ParameterError("accelerator rates must be positive: " + spec.name);
        out.push_back(std::move(spec));
    }
    return out;
}

AcceleratorSpec find_accelerator(const std::string& name,
                                 const std::vector<AcceleratorSpec>& extra) {
    for (const auto& a : extra)
        if (a.name == name) return a;
    for (const auto& a : accelerator_registry())
        if (a.name == name) return a;
    throw ParameterError("unknown accelerator: " + name);
}

std::vector<long> chunk_size_candidates(long lo, long hi, long T) {
    if (lo < 1 || hi < lo) throw ParameterError("invalid chunk-size range");
    std::vector<long> out;
    if (T > 0) {
        for (long l = lo; l <= std::min(hi, T); ++l)
            if (T % l == 0) out.push_back(l);
    } else {
        out.reserve(static_cast<size_t>(hi - lo + 1));
        for (long l = lo; l <= hi; ++l) out.push_back(l);
    }
    if (out.empty()) throw ParameterError("no chunk-size candidates in range");
    return out;
}

namespace {
template <class Fn>
long argmin_over(const std::vector<long>& candidates, Fn&& fn) {
    long best = candidates.front();
    double best_val = std::numeric_limits<double>::infinity();
    for (long l : candidates) {
        const double v = fn(l);
        if (v < best_val) {
            best_val = v;
            best = l;
        }
    }
    return best;
}
}  // namespace

long flop_argmin_chunk_size(double d_hv, double p_qk, double f_causal,
                            const std::vector<long>& candidates) {
    const double d_qk = p_qk * d_hv;
    return argmin_over(candidates, [&](long l) {
        // The T factor is a positive constant; 8192 keeps values well scaled.
        return chunkwise_flops_model(Variant::Sig, 8192.0, static_cast<double>(l), d_qk, d_hv,
                                     f_causal);
    });
}

long runtime_argmin_chunk_size(double d_hv, double p_qk, double f_causal, double bytes_cmn,
                               const AcceleratorSpec& accel, const std::vector<long>& candidates) {
    PerfParams params;
    params.f_causal = f_causal;
    params.bytes_cmn = bytes_cmn;
    const double d_qk = p_qk * d_hv;
    return argmin_over(candidates, [&](long l) {
        const double L = static_cast<double>(l);
        const double flops = chunkwise_flops_model(Variant::Sig, 8192.0, L, d_qk, d_hv, f_causal);
        const double bytes = chunkwise_bytes_model(Variant::Sig, 8192.0, L, d_qk, d_hv, params);
        return flops / accel.flops_per_s + bytes / accel.bytes_per_s;
    });
}

}  // namespace mlstm
