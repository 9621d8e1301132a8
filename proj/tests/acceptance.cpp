// Acceptance suite: runs every contract criterion at its stated tolerance
// and prints one PASS/FAIL line each. Exits non-zero if any criterion fails.
// The CLI binary path arrives as argv[1] for the command-line contract.

#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mlstm/bench.hpp"
#include "mlstm/gradcheck.hpp"
#include "mlstm/parallel.hpp"
#include "mlstm/perfmodel.hpp"
#include "mlstm/recurrent.hpp"
#include "mlstm/transfer.hpp"

using namespace mlstm;

namespace {

int g_failures = 0;

void report(int criterion, const std::string& name, bool pass, const std::string& detail) {
    std::printf("[%s] criterion %d: %s (%s)\n", pass ? "PASS" : "FAIL", criterion, name.c_str(),
                detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    return buf;
}

Dims make_dims(long T, long L, long d_qk, long d_hv, long heads = 1, long batch = 1) {
    Dims d;
    d.T = T;
    d.L = L;
    d.d_qk = d_qk;
    d.d_hv = d_hv;
    d.n_head = heads;
    d.n_batch = batch;
    return d;
}

// ---------------------------------------------------------------------------

void criterion_1_equivalence() {
    double worst = 0.0;
    for (Variant variant : {Variant::Exp, Variant::Sig}) {
        Dims dims = make_dims(128, 8, 32, 64, 2, 1);
        Rng rng(1001);
        SequenceInputs in = make_inputs(dims, rng, 1.0, 1.0);

        RecurrentTrace rec = run_recurrent(in, dims, variant);
        Tensor par = variant == Variant::Exp ? parallel_forward_exp(in, dims)
                                             : parallel_forward_sig(in, dims);
        worst = std::fmax(worst, max_abs_diff(rec.h_tilde, par));

        for (long L : {8L, 16L, 32L, 64L}) {
            Dims d = dims;
            d.L = L;
            BlockConfig blocks{std::max(L / 2, 1L), std::max(L / 4, 1L), 16, 32};
            Tensor cw = chunkwise_forward(in, d, variant).h_tilde;
            Tensor tf = tfla_forward(in, d, blocks, variant).h_tilde;
            worst = std::fmax(worst, max_abs_diff(rec.h_tilde, cw));
            worst = std::fmax(worst, max_abs_diff(rec.h_tilde, tf));
            worst = std::fmax(worst, max_abs_diff(par, cw));
            worst = std::fmax(worst, max_abs_diff(par, tf));
            worst = std::fmax(worst, max_abs_diff(cw, tf));
        }
    }
    report(1, "cross-formulation equivalence", worst < 1e-8,
           "worst pairwise diff " + fmt(worst) + " < 1e-8");
}

void criterion_2_gradients() {
    Dims dims = make_dims(16, 4, 4, 4);
    BlockConfig blocks{2, 2, 2, 2};
    double worst = 0.0;
    for (Variant variant : {Variant::Sig, Variant::Exp}) {
        Rng rng(2002);
        SequenceInputs in = make_inputs(dims, rng, 1.0, 1.0);
        Tensor w({1, 1, 16, 4});
        rng.fill_normal(w, 1.0);
        worst = std::fmax(worst, gradcheck_chunkwise(in, dims, variant, w, 1e-6).worst());
        worst = std::fmax(worst, gradcheck_tiled(in, dims, blocks, variant, w, 1e-6).worst());
    }
    report(2, "gradient correctness vs finite differences", worst < 1e-5,
           "worst relative error " + fmt(worst) + " < 1e-5");
}

void criterion_3_invariance() {
    Dims dims = make_dims(64, 16, 16, 32);
    Rng rng(3003);
    SequenceInputs in = make_inputs(dims, rng, 1.0, 1.0);
    Tensor w({1, 1, 64, 32});
    rng.fill_normal(w, 1.0);

    double worst = 0.0;
    const std::vector<BlockConfig> configs = {{16, 16, 16, 32},
                                              {8, 8, 16, 32},
                                              {8, 4, 8, 16},
                                              {4, 4, 4, 8},
                                              {16, 8, 8, 32}};
    for (Variant variant : {Variant::Exp, Variant::Sig}) {
        Tensor h_ref;
        Gradients g_ref;
        for (size_t i = 0; i < configs.size(); ++i) {
            ChunkwiseForward fwd = tfla_forward(in, dims, configs[i], variant);
            Gradients g = tfla_backward(in, dims, configs[i], variant, w, fwd.states, fwd.stats);
            if (i == 0) {
                h_ref = fwd.h_tilde;
                g_ref = std::move(g);
                continue;
            }
            worst = std::fmax(worst, max_abs_diff(h_ref, fwd.h_tilde));
            worst = std::fmax(worst, max_abs_diff(g_ref.dq, g.dq));
            worst = std::fmax(worst, max_abs_diff(g_ref.dk, g.dk));
            worst = std::fmax(worst, max_abs_diff(g_ref.dv, g.dv));
            worst = std::fmax(worst, max_abs_diff(g_ref.d_fpre, g.d_fpre));
            worst = std::fmax(worst, max_abs_diff(g_ref.d_ipre, g.d_ipre));
        }

        Tensor h_l;
        Gradients g_l;
        bool first = true;
        for (long L : {8L, 16L, 32L}) {
            Dims d = dims;
            d.L = L;
            ChunkwiseForward fwd = chunkwise_forward(in, d, variant);
            Gradients g = chunkwise_backward(in, d, variant, w, fwd.states, fwd.stats);
            if (first) {
                h_l = fwd.h_tilde;
                g_l = std::move(g);
                first = false;
                continue;
            }
            worst = std::fmax(worst, max_abs_diff(h_l, fwd.h_tilde));
            worst = std::fmax(worst, max_abs_diff(g_l.dq, g.dq));
            worst = std::fmax(worst, max_abs_diff(g_l.dk, g.dk));
            worst = std::fmax(worst, max_abs_diff(g_l.dv, g.dv));
            worst = std::fmax(worst, max_abs_diff(g_l.d_fpre, g.d_fpre));
            worst = std::fmax(worst, max_abs_diff(g_l.d_ipre, g.d_ipre));
        }
    }
    report(3, "block and chunk-size invariance", worst < 1e-9,
           "worst diff " + fmt(worst) + " < 1e-9 over 5 block configs and 3 chunk sizes");
}

void criterion_4_stabilization(long long checks, long long violations) {
    report(4, "stabilized exponent arguments stay non-positive",
           violations == 0 && checks > 0,
           std::to_string(violations) + " violations over " + std::to_string(checks) +
               " guarded evaluations in suites 1-3");
}

void criterion_5_paper_numbers() {
    bool pass = true;
    std::ostringstream detail;

    const double expected[4] = {133.0, 161.0, 295.0, 292.0};
    const char* names[4] = {"V100 SXM2", "A100 SXM", "H100 SXM", "B200 HGX"};
    for (int i = 0; i < 4; ++i) {
        const double got = accelerator_intensity(find_accelerator(names[i]));
        if (std::fabs(got - expected[i]) > 1.0) pass = false;
    }
    detail << "intensities ok; ";

    const double l_opt = flop_optimal_chunk_size(512, 0.5, 0.66);
    if (!(l_opt >= 15.0 && l_opt <= 17.0)) pass = false;
    detail << "L_opt,FLOP(512,0.5,0.66)=" << fmt(l_opt) << "; ";

    PerfParams p;
    p.f_causal = 0.5;
    auto overhead = [&](long d) {
        Dims dims = make_dims(8192, 128, d, d);
        const double e = flops_chunkwise(dims, p, Variant::Exp, CountMode::Simplified).total();
        const double s = flops_chunkwise(dims, p, Variant::Sig, CountMode::Simplified).total();
        return (e - s) / s;
    };
    const double o64 = overhead(64);
    const double o512 = overhead(512);
    if (!(o64 < 0.02 && o512 < 0.005)) pass = false;
    detail << "exp-over-sig overhead " << fmt(o64) << " @ d=64, " << fmt(o512) << " @ d=512";

    report(5, "published performance-model numbers", pass, detail.str());
}

void criterion_6_closed_forms() {
    bool pass = true;
    std::ostringstream detail;
    const std::vector<long> cands = chunk_size_candidates(1, 8192, 0);
    const AcceleratorSpec h100 = find_accelerator("H100 SXM");
    double worst_gap = 0.0;
    for (double d_hv : {64.0, 128.0, 256.0, 512.0}) {
        for (double p_qk : {0.5, 1.0}) {
            const double cf = flop_optimal_chunk_size(d_hv, p_qk, 0.5);
            const long bf = flop_argmin_chunk_size(d_hv, p_qk, 0.5, cands);
            worst_gap = std::fmax(worst_gap, std::fabs(cf - static_cast<double>(bf)));
            const double cr =
                runtime_optimal_chunk_size(d_hv, p_qk, 0.5, 4.0, accelerator_intensity(h100));
            const long br = runtime_argmin_chunk_size(d_hv, p_qk, 0.5, 4.0, h100, cands);
            worst_gap = std::fmax(worst_gap, std::fabs(cr - static_cast<double>(br)));
        }
    }
    if (worst_gap > 2.0) pass = false;
    detail << "worst |closed-form - argmin| = " << fmt(worst_gap) << " <= 2";
    report(6, "closed forms vs brute-force argmin", pass, detail.str());
}

void criterion_7_curves() {
    PerfParams p;
    p.f_causal = 0.5;
    Dims dims = make_dims(8192, 64, 256, 512, 8, 8);

    auto argmin_runtime = [&](const AcceleratorSpec& accel) {
        long best_l = 1;
        double best = 1e300;
        for (long L = 1; L <= 8192; ++L) {
            const double v = theoretical_runtime(dims, p, Variant::Sig, accel,
                                                 static_cast<double>(L), RuntimeBound::Sum);
            if (v < best) {
                best = v;
                best_l = L;
            }
        }
        return best_l;
    };

    const AcceleratorSpec h100 = find_accelerator("H100 SXM");
    const AcceleratorSpec b200 = find_accelerator("B200 HGX");
    const long h100_argmin = argmin_runtime(h100);
    const bool interior = h100_argmin > 1 && h100_argmin < 8192;

    bool monotone = true;
    double prev = 0.0;
    for (long L = 16; L <= 4096; ++L) {
        const double i = arithmetic_intensity(dims, p, static_cast<double>(L));
        if (L > 16 && i <= prev) monotone = false;
        prev = i;
    }

    const long b200_argmin = argmin_runtime(b200);
    const bool ordering = b200_argmin > h100_argmin;

    report(7, "qualitative curve properties", interior && monotone && ordering,
           "H100 argmin L=" + std::to_string(h100_argmin) + (interior ? " interior" : " boundary") +
               "; intensity " + (monotone ? "monotone" : "NOT monotone") +
               "; B200 argmin L=" + std::to_string(b200_argmin) +
               (ordering ? " > H100" : " NOT > H100"));
}

void criterion_8_transfer() {
    const double eps = 1e-6;
    Dims dims = transfer_default_dims();

    // Probe points exactly at the stated coordinates.
    TransferGridSpec probes;
    probes.i_min = -12.0;
    probes.i_max = 4.0;
    probes.n_i = 2;
    probes.f_min = 0.0;
    probes.f_max = 8.0;
    probes.n_f = 2;

    Rng r1(8008);
    GainGrid exp_probe = transfer_scan(Variant::Exp, Normalizer::Default, eps, probes, dims, r1);
    Rng r2(8008);
    GainGrid sig_probe = transfer_scan(Variant::Sig, Normalizer::Ones, eps, probes, dims, r2);

    const bool suppress =
        exp_probe.g_after(0, 0) < 0.1 && sig_probe.g_after(0, 0) < 0.1;
    const bool passing = exp_probe.g_after(1, 1) > 0.5 && exp_probe.g_after(1, 1) < 1.5 &&
                         sig_probe.g_after(1, 1) > 0.5 && sig_probe.g_after(1, 1) < 1.5;

    // Full 25x25 grids for the inter-variant comparison.
    TransferGridSpec grid;
    grid.n_i = 25;
    grid.n_f = 25;
    Rng r3(8008);
    GainGrid exp_grid = transfer_scan(Variant::Exp, Normalizer::Default, eps, grid, dims, r3);
    Rng r4(8008);
    GainGrid sig_grid = transfer_scan(Variant::Sig, Normalizer::Ones, eps, grid, dims, r4);
    double mad = 0.0;
    for (long i = 0; i < exp_grid.g_after.numel(); ++i)
        mad += std::fabs(exp_grid.g_after[i] - sig_grid.g_after[i]);
    mad /= static_cast<double>(exp_grid.g_after.numel());

    report(8, "transfer behavior of both variants",
           suppress && passing && mad < 0.1,
           "suppressing G=" + fmt(exp_probe.g_after(0, 0)) + "/" + fmt(sig_probe.g_after(0, 0)) +
               " < 0.1; passing G=" + fmt(exp_probe.g_after(1, 1)) + "/" +
               fmt(sig_probe.g_after(1, 1)) + " in [0.5,1.5]; mean |exp-sig| = " + fmt(mad) +
               " < 0.1");
}

int run_cli(const std::string& cli, const std::string& args, std::string* output = nullptr) {
    const std::string out_file = "/tmp/mlstm_acceptance_cli.txt";
    const int status = std::system((cli + " " + args + " > " + out_file + " 2>&1").c_str());
    if (output) {
        std::ifstream in(out_file, std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        *output = ss.str();
    }
    return WEXITSTATUS(status);
}

void criterion_9_cli(const std::string& cli) {
    bool pass = true;
    std::ostringstream detail;

    if (run_cli(cli, "verify --variant sig --T 128 --L 16 --dqk 32 --dhv 64 --heads 2 --seed 7 "
                     "--tol 1e-8") != 0) {
        pass = false;
        detail << "verify exit != 0; ";
    }
    if (run_cli(cli, "gradcheck --variant sig --T 16 --L 4 --dqk 4 --dhv 4 --fd-step 1e-6 "
                     "--tol 1e-5") != 0) {
        pass = false;
        detail << "gradcheck exit != 0; ";
    }
    if (run_cli(cli, "perf optimal-chunk --dhv 512 --pqk 0.5 --fcausal 0.66 --mode flop") != 0) {
        pass = false;
        detail << "perf optimal-chunk exit != 0; ";
    }
    if (run_cli(cli, "transfer --variant exp --normalizer default --steps 5 --T 128 --dqk 32 "
                     "--dhv 32 --seed 5 --out /tmp/mlstm_acc_t1.csv") != 0) {
        pass = false;
        detail << "transfer exit != 0; ";
    }

    if (run_cli(cli, "verify --T 100 --L 16") != 2) {
        pass = false;
        detail << "verify bad geometry not exit 2; ";
    }
    if (run_cli(cli, "gradcheck --T 64 --L 4 --dqk 4 --dhv 4") != 2) {
        pass = false;
        detail << "gradcheck guard not exit 2; ";
    }
    if (run_cli(cli, "transfer --normalizer raw_sum --variant exp --steps 2 --T 16 --dqk 4 "
                     "--dhv 4") != 2) {
        pass = false;
        detail << "invalid transfer combo not exit 2; ";
    }

    // CSV byte stability across two identically seeded runs.
    if (run_cli(cli, "transfer --variant exp --normalizer default --steps 5 --T 128 --dqk 32 "
                     "--dhv 32 --seed 5 --out /tmp/mlstm_acc_t2.csv") != 0) {
        pass = false;
        detail << "transfer rerun exit != 0; ";
    } else {
        std::ifstream a("/tmp/mlstm_acc_t1.csv", std::ios::binary);
        std::ifstream b("/tmp/mlstm_acc_t2.csv", std::ios::binary);
        std::ostringstream sa, sb;
        sa << a.rdbuf();
        sb << b.rdbuf();
        if (sa.str().empty() || sa.str() != sb.str()) {
            pass = false;
            detail << "transfer CSV not byte-stable; ";
        }
    }
    std::remove("/tmp/mlstm_acc_t1.csv");
    std::remove("/tmp/mlstm_acc_t2.csv");

    if (pass) detail << "exit codes and snapshots as documented";
    report(9, "command-line contract", pass, detail.str());
}

}  // namespace

int main(int argc, char** argv) {
    const std::string cli = argc > 1 ? argv[1] : "";

    stab::reset();
    criterion_1_equivalence();
    criterion_2_gradients();
    criterion_3_invariance();
    criterion_4_stabilization(stab::checks(), stab::violations());
    criterion_5_paper_numbers();
    criterion_6_closed_forms();
    criterion_7_curves();
    criterion_8_transfer();
    if (!cli.empty()) {
        criterion_9_cli(cli);
    } else {
        report(9, "command-line contract", false, "no CLI binary path supplied");
    }

    if (g_failures == 0) {
        std::printf("all acceptance criteria passed\n");
        return 0;
    }
    std::printf("%d acceptance criterion(s) failed\n", g_failures);
    return 1;
}
