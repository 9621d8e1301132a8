// Command-line surface for the mLSTM formulation engine: numerical
// equivalence checks, gradient checks, transfer-behavior scans, the
// analytical performance model, and a CPU benchmark. Emits CSV or JSON.
//
// Exit codes: 0 pass, 1 check failure, 2 usage/config error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "mlstm/bench.hpp"
#include "mlstm/gates.hpp"
#include "mlstm/gradcheck.hpp"
#include "mlstm/parallel.hpp"
#include "mlstm/perfmodel.hpp"
#include "mlstm/recurrent.hpp"
#include "mlstm/transfer.hpp"

namespace {

using nlohmann::json;

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_output(const std::string& path, const std::string& content) {
    if (path.empty()) {
        std::cout << content;
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw mlstm::ParameterError("cannot write output file: " + path);
    out << content;
    if (!out) throw mlstm::ParameterError("error while writing output file: " + path);
}

// "16,32,64" or geometric "16:256:*2" or arithmetic "16:256:+16".
std::vector<long> parse_chunk_list(const std::string& s) {
    std::vector<long> out;
    if (s.find(':') != std::string::npos) {
        long lo = 0, hi = 0, step = 0;
        char op = 0;
        std::istringstream is(s);
        char c1 = 0, c2 = 0;
        if (!(is >> lo >> c1 >> hi >> c2 >> op >> step) || c1 != ':' || c2 != ':' ||
            (op != '*' && op != '+') || step <= (op == '*' ? 1 : 0))
            throw mlstm::ParameterError("bad range syntax (expect lo:hi:*k or lo:hi:+k): " + s);
        for (long l = lo; l <= hi; l = (op == '*') ? l * step : l + step) out.push_back(l);
    } else {
        std::istringstream is(s);
        std::string tok;
        while (std::getline(is, tok, ',')) {
            if (tok.empty()) continue;
            out.push_back(std::stol(tok));
        }
    }
    if (out.empty()) throw mlstm::ParameterError("empty chunk-size list: " + s);
    for (long l : out)
        if (l < 1) throw mlstm::ParameterError("chunk sizes must be >= 1");
    return out;
}

struct DimFlags {
    long T = 128, L = 16, d_qk = 32, d_hv = 64, heads = 1, batch = 1;

    void attach(CLI::App* cmd) {
        cmd->add_option("--T", T, "sequence length");
        cmd->add_option("--L", L, "chunk size");
        cmd->add_option("--dqk", d_qk, "query/key head dim");
        cmd->add_option("--dhv", d_hv, "value head dim");
        cmd->add_option("--heads", heads, "head count");
        cmd->add_option("--batch", batch, "batch count");
    }

    mlstm::Dims dims() const {
        mlstm::Dims d;
        d.T = T;
        d.L = L;
        d.d_qk = d_qk;
        d.d_hv = d_hv;
        d.n_head = heads;
        d.n_batch = batch;
        return d;
    }
};

struct BlockFlags {
    long b_lhq = 0, b_lkv = 0, b_dqk = 0, b_dhv = 0;

    void attach(CLI::App* cmd) {
        cmd->add_option("--blhq", b_lhq, "tile size along the query sequence axis (0 = auto)");
        cmd->add_option("--blkv", b_lkv, "tile size along the key/value sequence axis (0 = auto)");
        cmd->add_option("--bdqk", b_dqk, "tile size along d_qk (0 = auto)");
        cmd->add_option("--bdhv", b_dhv, "tile size along d_hv (0 = auto)");
    }

    mlstm::BlockConfig blocks(const mlstm::Dims& dims) const {
        if (b_lhq == 0 && b_lkv == 0 && b_dqk == 0 && b_dhv == 0)
            return mlstm::BlockConfig::pick_default(dims);
        mlstm::BlockConfig cfg{b_lhq, b_lkv, b_dqk, b_dhv};
        cfg.validate(dims);
        return cfg;
    }
};

json dims_json(const mlstm::Dims& d) {
    return json{{"T", d.T},         {"L", d.L},           {"d_qk", d.d_qk},
                {"d_hv", d.d_hv},   {"heads", d.n_head},  {"batch", d.n_batch}};
}

json blocks_json(const mlstm::BlockConfig& b) {
    return json{{"b_lhq", b.b_lhq}, {"b_lkv", b.b_lkv}, {"b_dqk", b.b_dqk}, {"b_dhv", b.b_dhv}};
}

// ---------------------------------------------------------------------------

int cmd_verify(const DimFlags& df, const BlockFlags& bf, const std::string& variant_str,
               std::uint64_t seed, double tol, double gate_cap, const std::string& out_path) {
    using namespace mlstm;
    const Variant variant = variant_from_string(variant_str);
    Dims dims = df.dims();
    dims.validate_chunked();
    BlockConfig blocks = bf.blocks(dims);

    stab::reset();
    Rng rng(seed);
    SequenceInputs in = make_inputs(dims, rng, 1.0, 1.0);
    if (gate_cap > 0.0) in = apply_gate_softcap(in, gate_cap);

    RecurrentTrace rec = run_recurrent(in, dims, variant);
    Tensor par = variant == Variant::Exp ? parallel_forward_exp(in, dims)
                                         : parallel_forward_sig(in, dims);
    ChunkwiseForward cw = chunkwise_forward(in, dims, variant);
    ChunkwiseForward tf = tfla_forward(in, dims, blocks, variant);

    json metrics;
    metrics["recurrent_vs_parallel"] = max_abs_diff(rec.h_tilde, par);
    metrics["recurrent_vs_chunkwise"] = max_abs_diff(rec.h_tilde, cw.h_tilde);
    metrics["recurrent_vs_tiled"] = max_abs_diff(rec.h_tilde, tf.h_tilde);
    metrics["parallel_vs_chunkwise"] = max_abs_diff(par, cw.h_tilde);
    metrics["parallel_vs_tiled"] = max_abs_diff(par, tf.h_tilde);
    metrics["chunkwise_vs_tiled"] = max_abs_diff(cw.h_tilde, tf.h_tilde);

    bool pass = true;
    for (const auto& [name, value] : metrics.items()) {
        (void)name;
        if (!(value.get<double>() < tol)) pass = false;
    }

    json report;
    report["command"] = "verify";
    report["config"] = {{"variant", variant_str}, {"dims", dims_json(dims)},
                        {"blocks", blocks_json(blocks)}, {"seed", seed},
                        {"gate_softcap", gate_cap}};
    report["metrics"] = metrics;
    report["tolerance"] = tol;
    report["pass"] = pass;
    report["instrumentation"] = {{"stab_checks", stab::checks()},
                                 {"stab_violations", stab::violations()}};
    write_output(out_path, report.dump(2) + "\n");
    return pass ? 0 : 1;
}

int cmd_gradcheck(const DimFlags& df, const BlockFlags& bf, const std::string& variant_str,
                  std::uint64_t seed, double fd_step, double tol, const std::string& out_path) {
    using namespace mlstm;
    const Variant variant = variant_from_string(variant_str);
    Dims dims = df.dims();
    dims.validate_chunked();
    if (dims.T > 32)
        throw ParameterError("gradcheck limited to T<=32 (finite differences scale with inputs)");
    BlockConfig blocks = bf.blocks(dims);

    Rng rng(seed);
    SequenceInputs in = make_inputs(dims, rng, 1.0, 1.0);
    Tensor w({dims.n_batch, dims.n_head, dims.T, dims.d_hv});
    rng.fill_normal(w, 1.0);

    GradcheckReport cw = gradcheck_chunkwise(in, dims, variant, w, fd_step);
    GradcheckReport tf = gradcheck_tiled(in, dims, blocks, variant, w, fd_step);

    json metrics;
    metrics["chunkwise_dq"] = cw.dq;
    metrics["chunkwise_dk"] = cw.dk;
    metrics["chunkwise_dv"] = cw.dv;
    metrics["chunkwise_dfpre"] = cw.d_fpre;
    metrics["chunkwise_dipre"] = cw.d_ipre;
    metrics["tiled_dq"] = tf.dq;
    metrics["tiled_dk"] = tf.dk;
    metrics["tiled_dv"] = tf.dv;
    metrics["tiled_dfpre"] = tf.d_fpre;
    metrics["tiled_dipre"] = tf.d_ipre;

    const bool pass = cw.pass(tol) && tf.pass(tol);

    json report;
    report["command"] = "gradcheck";
    report["config"] = {{"variant", variant_str}, {"dims", dims_json(dims)},
                        {"blocks", blocks_json(blocks)}, {"seed", seed}, {"fd_step", fd_step}};
    report["metrics"] = metrics;
    report["tolerance"] = tol;
    report["pass"] = pass;
    write_output(out_path, report.dump(2) + "\n");
    return pass ? 0 : 1;
}

int cmd_transfer(const std::string& variant_str, const std::string& normalizer_str, double eps,
                 const mlstm::TransferGridSpec& grid, long T, long d_qk, long d_hv,
                 std::uint64_t seed, const std::string& out_path) {
    using namespace mlstm;
    const Variant variant = variant_from_string(variant_str);
    const Normalizer normalizer = normalizer_from_string(normalizer_str);
    if (!normalizer_valid_for(variant, normalizer))
        throw ParameterError("normalizer '" + normalizer_str + "' not defined for variant '" +
                             variant_str + "'");

    Dims dims = transfer_default_dims();
    dims.T = T;
    dims.L = T;
    dims.d_qk = d_qk;
    dims.d_hv = d_hv;

    Rng rng(seed);
    GainGrid g = transfer_scan(variant, normalizer, eps, grid, dims, rng);

    std::ostringstream csv;
    csv << "i_pre,f_pre,gain_before,gain_after\n";
    for (long a = 0; a < g.g_before.dim(0); ++a)
        for (long c = 0; c < g.g_before.dim(1); ++c)
            csv << fmt17(g.i_values[static_cast<size_t>(a)]) << ','
                << fmt17(g.f_values[static_cast<size_t>(c)]) << ',' << fmt17(g.g_before(a, c))
                << ',' << fmt17(g.g_after(a, c)) << '\n';
    write_output(out_path, csv.str());
    return 0;
}

// --------------------------- perf subcommands ------------------------------

mlstm::AcceleratorSpec resolve_accel(const std::string& name, const std::string& accel_file) {
    std::vector<mlstm::AcceleratorSpec> extra;
    if (!accel_file.empty()) extra = mlstm::load_accelerator_file(accel_file);
    return mlstm::find_accelerator(name, extra);
}

int cmd_perf_flops(const DimFlags& df, const std::string& formulation_str,
                   const std::string& variant_str, const std::string& mode_str, double f_causal,
                   const std::string& l_list, const std::string& out_path) {
    using namespace mlstm;
    const Formulation f = formulation_from_string(formulation_str);
    const Variant variant = variant_from_string(variant_str);
    const CountMode mode = mode_str == "exact" ? CountMode::Exact : CountMode::Simplified;
    PerfParams params;
    params.f_causal = f_causal;

    std::vector<long> ls = l_list.empty() ? std::vector<long>{df.L} : parse_chunk_list(l_list);

    std::ostringstream csv;
    bool header = false;
    for (long L : ls) {
        DimFlags dfl = df;
        dfl.L = L;
        Dims dims = dfl.dims();
        CostBreakdown cb = f == Formulation::Chunkwise  ? flops_chunkwise(dims, params, variant, mode)
                           : f == Formulation::Parallel ? flops_parallel(dims, params, variant, mode)
                                                        : flops_recurrent(dims, params, variant, mode);
        if (!header) {
            csv << "formulation,variant,mode,T,L,d_qk,d_hv,heads,batch,f_causal";
            for (const auto& it : cb.items) csv << ',' << it.first;
            csv << ",total\n";
            header = true;
        }
        csv << formulation_str << ',' << variant_str << ','
            << (mode == CountMode::Exact ? "exact" : "simplified") << ',' << dims.T << ',' << dims.L
            << ',' << dims.d_qk << ',' << dims.d_hv << ',' << dims.n_head << ',' << dims.n_batch
            << ',' << fmt17(f_causal);
        for (const auto& it : cb.items) csv << ',' << fmt17(it.second);
        csv << ',' << fmt17(cb.total()) << '\n';
    }
    write_output(out_path, csv.str());
    return 0;
}

int cmd_perf_memops(const DimFlags& df, const std::string& formulation_str,
                    const std::string& variant_str, double bytes_qkv, double bytes_if,
                    double bytes_cmn, const std::string& l_list, const std::string& out_path) {
    using namespace mlstm;
    const Formulation f = formulation_from_string(formulation_str);
    const Variant variant = variant_from_string(variant_str);
    PerfParams params;
    params.bytes_qkv = bytes_qkv;
    params.bytes_if = bytes_if;
    params.bytes_cmn = bytes_cmn;

    std::vector<long> ls = l_list.empty() ? std::vector<long>{df.L} : parse_chunk_list(l_list);

    std::ostringstream csv;
    csv << "formulation,variant,T,L,d_qk,d_hv,heads,batch,bytes_loaded,bytes_stored,bytes_total\n";
    for (long L : ls) {
        DimFlags dfl = df;
        dfl.L = L;
        Dims dims = dfl.dims();
        MemopCounts mc = memops(dims, params, variant, f);
        csv << formulation_str << ',' << variant_str << ',' << dims.T << ',' << dims.L << ','
            << dims.d_qk << ',' << dims.d_hv << ',' << dims.n_head << ',' << dims.n_batch << ','
            << fmt17(mc.loaded) << ',' << fmt17(mc.stored) << ',' << fmt17(mc.total()) << '\n';
    }
    write_output(out_path, csv.str());
    return 0;
}

int cmd_perf_runtime(const DimFlags& df, const std::string& variant_str, double f_causal,
                     double bytes_cmn, const std::string& accel_name,
                     const std::string& accel_file, const std::string& l_list,
                     const std::string& out_path) {
    using namespace mlstm;
    const Variant variant = variant_from_string(variant_str);
    const AcceleratorSpec accel = resolve_accel(accel_name, accel_file);
    PerfParams params;
    params.f_causal = f_causal;
    params.bytes_cmn = bytes_cmn;
    Dims dims = df.dims();

    std::vector<long> ls =
        l_list.empty() ? std::vector<long>{df.L} : parse_chunk_list(l_list);

    std::ostringstream csv;
    csv << "accelerator,L,seconds_flops_only,seconds_bytes_only,seconds_sum,seconds_max\n";
    for (long L : ls) {
        const double sum =
            theoretical_runtime(dims, params, variant, accel, static_cast<double>(L),
                                RuntimeBound::Sum);
        const double mx =
            theoretical_runtime(dims, params, variant, accel, static_cast<double>(L),
                                RuntimeBound::Max);
        const double scale = static_cast<double>(dims.n_batch * dims.n_head);
        const double flops =
            scale * chunkwise_flops_model(variant, static_cast<double>(dims.T),
                                          static_cast<double>(L),
                                          static_cast<double>(dims.d_qk),
                                          static_cast<double>(dims.d_hv), f_causal);
        const double bytes =
            scale * chunkwise_bytes_model(variant, static_cast<double>(dims.T),
                                          static_cast<double>(L),
                                          static_cast<double>(dims.d_qk),
                                          static_cast<double>(dims.d_hv), params);
        csv << accel.name << ',' << L << ',' << fmt17(flops / accel.flops_per_s) << ','
            << fmt17(bytes / accel.bytes_per_s) << ',' << fmt17(sum) << ',' << fmt17(mx) << '\n';
    }
    write_output(out_path, csv.str());
    return 0;
}

int cmd_perf_intensity(const DimFlags& df, double f_causal, double bytes_cmn,
                       const std::string& accel_name, const std::string& accel_file,
                       const std::string& l_list, const std::string& out_path) {
    using namespace mlstm;
    const AcceleratorSpec accel = resolve_accel(accel_name, accel_file);
    PerfParams params;
    params.f_causal = f_causal;
    params.bytes_cmn = bytes_cmn;
    Dims dims = df.dims();

    std::vector<long> ls = l_list.empty() ? std::vector<long>{df.L} : parse_chunk_list(l_list);

    std::ostringstream csv;
    csv << "accelerator,accelerator_intensity=" << fmt17(accelerator_intensity(accel)) << '\n';
    csv << "L,algorithm_intensity,accelerator_intensity\n";
    for (long L : ls)
        csv << L << ',' << fmt17(arithmetic_intensity(dims, params, static_cast<double>(L))) << ','
            << fmt17(accelerator_intensity(accel)) << '\n';
    write_output(out_path, csv.str());
    return 0;
}

int cmd_perf_roofline(const DimFlags& df, double f_causal, double bytes_cmn,
                      const std::string& accel_name, const std::string& accel_file,
                      const std::string& l_list, const std::string& out_path) {
    using namespace mlstm;
    const AcceleratorSpec accel = resolve_accel(accel_name, accel_file);
    PerfParams params;
    params.f_causal = f_causal;
    params.bytes_cmn = bytes_cmn;
    Dims dims = df.dims();

    std::vector<long> ls = l_list.empty() ? std::vector<long>{df.L} : parse_chunk_list(l_list);

    std::ostringstream csv;
    csv << "accelerator,L,algorithm_intensity,attainable_flops_per_s,peak_flops_per_s\n";
    for (long L : ls) {
        const double inten = arithmetic_intensity(dims, params, static_cast<double>(L));
        csv << accel.name << ',' << L << ',' << fmt17(inten) << ','
            << fmt17(roofline(accel, inten)) << ',' << fmt17(accel.flops_per_s) << '\n';
    }
    write_output(out_path, csv.str());
    return 0;
}

int cmd_perf_optimal_chunk(double d_hv, double p_qk, double f_causal, double bytes_cmn,
                           const std::string& accel_name, const std::string& accel_file,
                           const std::string& mode, long l_min, long l_max, long T,
                           const std::string& out_path) {
    using namespace mlstm;
    json report;
    report["command"] = "perf optimal-chunk";
    report["config"] = {{"d_hv", d_hv},   {"p_qk", p_qk}, {"f_causal", f_causal},
                        {"bytes_cmn", bytes_cmn}, {"l_min", l_min}, {"l_max", l_max},
                        {"T", T},         {"mode", mode}};

    const std::vector<long> cands = chunk_size_candidates(l_min, l_max, T);
    if (mode == "flop" || mode == "both") {
        report["flop_optimal"] = {
            {"closed_form", flop_optimal_chunk_size(d_hv, p_qk, f_causal)},
            {"brute_force", flop_argmin_chunk_size(d_hv, p_qk, f_causal, cands)}};
    }
    if (mode == "runtime" || mode == "both") {
        const AcceleratorSpec accel = resolve_accel(accel_name, accel_file);
        const double i_acc = accelerator_intensity(accel);
        report["runtime_optimal"] = {
            {"accelerator", accel.name},
            {"accelerator_intensity", i_acc},
            {"closed_form", runtime_optimal_chunk_size(d_hv, p_qk, f_causal, bytes_cmn, i_acc)},
            {"brute_force",
             runtime_argmin_chunk_size(d_hv, p_qk, f_causal, bytes_cmn, accel, cands)}};
    }
    if (mode != "flop" && mode != "runtime" && mode != "both")
        throw ParameterError("optimal-chunk mode must be flop, runtime, or both");
    write_output(out_path, report.dump(2) + "\n");
    return 0;
}

int cmd_bench(const DimFlags& df, const std::string& impl_str, const std::string& variant_str,
              const std::string& l_list, long repeats, long warmup,
              const std::string& precision_str, std::uint64_t seed, const std::string& out_path) {
    using namespace mlstm;
    BenchConfig cfg;
    if (impl_str == "chunkwise")
        cfg.impl = BenchImpl::Chunkwise;
    else if (impl_str == "tiled")
        cfg.impl = BenchImpl::Tiled;
    else
        throw ParameterError("impl must be chunkwise or tiled");
    cfg.variant = variant_from_string(variant_str);
    cfg.dims = df.dims();
    cfg.chunk_sizes = parse_chunk_list(l_list);
    cfg.repeats = repeats;
    cfg.warmup = warmup;
    if (precision_str == "f64")
        cfg.precision = {PrecisionMode::F64, StateMode::Same};
    else if (precision_str == "f32")
        cfg.precision = {PrecisionMode::F32, StateMode::Same};
    else if (precision_str == "f32-wide")
        cfg.precision = {PrecisionMode::F32, StateMode::Wider};
    else
        throw ParameterError("precision must be f64, f32, or f32-wide");
    cfg.seed = seed;

    std::vector<BenchRow> rows = run_bench(cfg);
    std::ostringstream csv;
    csv << "impl,L,median_seconds,peak_bytes_estimate\n";
    for (const auto& r : rows)
        csv << r.impl << ',' << r.chunk_size << ',' << fmt17(r.median_seconds) << ','
            << fmt17(r.peak_bytes_estimate) << '\n';
    write_output(out_path, csv.str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mLSTM linear-RNN formulation engine"};
    app.require_subcommand(1);

    // verify
    auto* verify = app.add_subcommand("verify", "cross-formulation equivalence check");
    DimFlags vd;
    BlockFlags vb;
    std::string v_variant = "sig", v_out;
    std::uint64_t v_seed = 7;
    double v_tol = 1e-8, v_gate_cap = 0.0;
    vd.attach(verify);
    vb.attach(verify);
    verify->add_option("--variant", v_variant, "exp or sig");
    verify->add_option("--seed", v_seed, "input seed");
    verify->add_option("--tol", v_tol, "max allowed pairwise difference");
    verify->add_option("--gate-softcap", v_gate_cap,
                       "cap gate pre-activations with c*tanh(x/c) before running (0 = off)");
    verify->add_option("--out", v_out, "output path (default stdout)");

    // gradcheck
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
    DimFlags gd;
    gd.T = 16;
    gd.L = 4;
    gd.d_qk = 4;
    gd.d_hv = 4;
    BlockFlags gb;
    std::string g_variant = "sig", g_out;
    std::uint64_t g_seed = 7;
    double g_step = 1e-6, g_tol = 1e-5;
    gd.attach(gradcheck);
    gb.attach(gradcheck);
    gradcheck->add_option("--variant", g_variant, "exp or sig");
    gradcheck->add_option("--seed", g_seed, "input seed");
    gradcheck->add_option("--fd-step", g_step, "central difference step");
    gradcheck->add_option("--tol", g_tol, "max allowed relative error");
    gradcheck->add_option("--out", g_out, "output path (default stdout)");

    // transfer
    auto* transfer = app.add_subcommand("transfer", "gain scan over gate pre-activations");
    std::string t_variant = "exp", t_normalizer = "default", t_out;
    double t_eps = 1e-6;
    mlstm::TransferGridSpec t_grid;
    long t_steps = 50, t_T = 512, t_dqk = 128, t_dhv = 128;
    std::uint64_t t_seed = 7;
    transfer->add_option("--variant", t_variant, "exp or sig");
    transfer->add_option("--normalizer", t_normalizer,
                         "default | max_abs_one | abs_sum | raw_sum | ones");
    transfer->add_option("--eps", t_eps, "norm layer epsilon");
    transfer->add_option("--imin", t_grid.i_min, "input gate range start");
    transfer->add_option("--imax", t_grid.i_max, "input gate range end");
    transfer->add_option("--fmin", t_grid.f_min, "forget gate range start");
    transfer->add_option("--fmax", t_grid.f_max, "forget gate range end");
    transfer->add_option("--steps", t_steps, "grid resolution per axis");
    transfer->add_option("--T", t_T, "sequence length");
    transfer->add_option("--dqk", t_dqk, "query/key head dim");
    transfer->add_option("--dhv", t_dhv, "value head dim");
    transfer->add_option("--seed", t_seed, "input seed");
    transfer->add_option("--out", t_out, "output CSV path (default stdout)");

    // perf
    auto* perf = app.add_subcommand("perf", "analytical cost model");
    perf->require_subcommand(1);
    DimFlags pd;
    pd.T = 8192;
    pd.L = 64;
    pd.d_qk = 256;
    pd.d_hv = 512;
    std::string p_formulation = "chunkwise", p_variant = "sig", p_mode = "simplified";
    std::string p_accel = "H100 SXM", p_accel_file, p_lrange, p_out;
    double p_fcausal = 0.5, p_bqkv = 2, p_bif = 2, p_bcmn = 4;

    auto* pf = perf->add_subcommand("flops", "FLOP count tables");
    pd.attach(pf);
    pf->add_option("--formulation", p_formulation, "recurrent | parallel | chunkwise");
    pf->add_option("--variant", p_variant, "exp or sig");
    pf->add_option("--mode", p_mode, "exact or simplified");
    pf->add_option("--fcausal", p_fcausal, "causal work fraction in [0.5, 1]");
    pf->add_option("--L-range", p_lrange, "chunk sizes: list a,b,c or lo:hi:*k / lo:hi:+k");
    pf->add_option("--out", p_out, "output CSV path");

    auto* pm = perf->add_subcommand("memops", "memory traffic tables");
    DimFlags pmd = pd;
    pmd.attach(pm);
    std::string pm_formulation = "chunkwise", pm_variant = "sig", pm_lrange, pm_out;
    pm->add_option("--formulation", pm_formulation, "recurrent | parallel | chunkwise");
    pm->add_option("--variant", pm_variant, "exp or sig");
    pm->add_option("--bytes-qkv", p_bqkv, "bytes per q/k/v element");
    pm->add_option("--bytes-if", p_bif, "bytes per gate element");
    pm->add_option("--bytes-cmn", p_bcmn, "bytes per state element");
    pm->add_option("--L-range", pm_lrange, "chunk sizes");
    pm->add_option("--out", pm_out, "output CSV path");

    auto* pr = perf->add_subcommand("runtime", "modeled forward runtime over chunk size");
    DimFlags prd = pd;
    prd.attach(pr);
    std::string pr_variant = "sig", pr_accel = "H100 SXM", pr_accel_file, pr_lrange, pr_out;
    double pr_fcausal = 0.5, pr_bcmn = 4;
    pr->add_option("--variant", pr_variant, "exp or sig");
    pr->add_option("--accel", pr_accel, "accelerator name");
    pr->add_option("--accel-file", pr_accel_file, "JSON registry extension");
    pr->add_option("--fcausal", pr_fcausal, "causal work fraction");
    pr->add_option("--bytes-cmn", pr_bcmn, "bytes per state element");
    pr->add_option("--L-range", pr_lrange, "chunk sizes");
    pr->add_option("--out", pr_out, "output CSV path");

    auto* pi = perf->add_subcommand("intensity", "arithmetic intensity over chunk size");
    DimFlags pid = pd;
    pid.attach(pi);
    std::string pi_accel = "H100 SXM", pi_accel_file, pi_lrange, pi_out;
    double pi_fcausal = 0.5, pi_bcmn = 4;
    pi->add_option("--accel", pi_accel, "accelerator name");
    pi->add_option("--accel-file", pi_accel_file, "JSON registry extension");
    pi->add_option("--fcausal", pi_fcausal, "causal work fraction");
    pi->add_option("--bytes-cmn", pi_bcmn, "bytes per state element");
    pi->add_option("--L-range", pi_lrange, "chunk sizes");
    pi->add_option("--out", pi_out, "output CSV path");

    auto* po = perf->add_subcommand("roofline", "attainable FLOPs/s over chunk size");
    DimFlags pod = pd;
    pod.attach(po);
    std::string po_accel = "H100 SXM", po_accel_file, po_lrange, po_out;
    double po_fcausal = 0.5, po_bcmn = 4;
    po->add_option("--accel", po_accel, "accelerator name");
    po->add_option("--accel-file", po_accel_file, "JSON registry extension");
    po->add_option("--fcausal", po_fcausal, "causal work fraction");
    po->add_option("--bytes-cmn", po_bcmn, "bytes per state element");
    po->add_option("--L-range", po_lrange, "chunk sizes");
    po->add_option("--out", po_out, "output CSV path");

    auto* pc = perf->add_subcommand("optimal-chunk", "closed forms vs brute-force argmin");
    double pc_dhv = 512, pc_pqk = 0.5, pc_fcausal = 0.5, pc_bcmn = 4;
    std::string pc_accel = "H100 SXM", pc_accel_file, pc_mode = "both", pc_out;
    long pc_lmin = 1, pc_lmax = 8192, pc_T = 0;
    pc->add_option("--dhv", pc_dhv, "value head dim");
    pc->add_option("--pqk", pc_pqk, "query/key projection factor");
    pc->add_option("--fcausal", pc_fcausal, "causal work fraction");
    pc->add_option("--bytes-cmn", pc_bcmn, "bytes per state element");
    pc->add_option("--accel", pc_accel, "accelerator name (runtime mode)");
    pc->add_option("--accel-file", pc_accel_file, "JSON registry extension");
    pc->add_option("--mode", pc_mode, "flop | runtime | both");
    pc->add_option("--lmin", pc_lmin, "search range start");
    pc->add_option("--lmax", pc_lmax, "search range end");
    pc->add_option("--T", pc_T, "restrict candidates to divisors of T (0 = all integers)");
    pc->add_option("--out", pc_out, "output JSON path");

    // bench
    auto* bench = app.add_subcommand("bench", "CPU forward timing sweep");
    DimFlags bd;
    bd.T = 512;
    bd.d_qk = 32;
    bd.d_hv = 64;
    std::string b_impl = "tiled", b_variant = "sig", b_llist = "16,32,64", b_precision = "f64",
                b_out;
    long b_repeats = 30, b_warmup = 10;
    std::uint64_t b_seed = 7;
    bd.attach(bench);
    bench->add_option("--impl", b_impl, "chunkwise or tiled");
    bench->add_option("--variant", b_variant, "exp or sig");
    bench->add_option("--L-list", b_llist, "chunk sizes: list a,b,c or lo:hi:*k");
    bench->add_option("--repeats", b_repeats, "timed iterations (>= 3)");
    bench->add_option("--warmup", b_warmup, "warmup iterations");
    bench->add_option("--precision", b_precision, "f64 | f32 | f32-wide");
    bench->add_option("--seed", b_seed, "input seed");
    bench->add_option("--out", b_out, "output CSV path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*verify) return cmd_verify(vd, vb, v_variant, v_seed, v_tol, v_gate_cap, v_out);
        if (*gradcheck) return cmd_gradcheck(gd, gb, g_variant, g_seed, g_step, g_tol, g_out);
        if (*transfer) {
            mlstm::TransferGridSpec grid = t_grid;
            grid.n_i = t_steps;
            grid.n_f = t_steps;
            return cmd_transfer(t_variant, t_normalizer, t_eps, grid, t_T, t_dqk, t_dhv, t_seed,
                                t_out);
        }
        if (*pf)
            return cmd_perf_flops(pd, p_formulation, p_variant, p_mode, p_fcausal, p_lrange, p_out);
        if (*pm)
            return cmd_perf_memops(pmd, pm_formulation, pm_variant, p_bqkv, p_bif, p_bcmn,
                                   pm_lrange, pm_out);
        if (*pr)
            return cmd_perf_runtime(prd, pr_variant, pr_fcausal, pr_bcmn, pr_accel, pr_accel_file,
                                    pr_lrange, pr_out);
        if (*pi)
            return cmd_perf_intensity(pid, pi_fcausal, pi_bcmn, pi_accel, pi_accel_file, pi_lrange,
                                      pi_out);
        if (*po)
            return cmd_perf_roofline(pod, po_fcausal, po_bcmn, po_accel, po_accel_file, po_lrange,
                                     po_out);
        if (*pc)
            return cmd_perf_optimal_chunk(pc_dhv, pc_pqk, pc_fcausal, pc_bcmn, pc_accel,
                                          pc_accel_file, pc_mode, pc_lmin, pc_lmax, pc_T, pc_out);
        if (*bench)
            return cmd_bench(bd, b_impl, b_variant, b_llist, b_repeats, b_warmup, b_precision,
                             b_seed, b_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
