#include <catch2/catch_amalgamated.hpp>
#include <kmsuq/sensitivity.hpp>

#include "test_helpers.hpp"

using namespace kmsuq;
using namespace testutil;

namespace {

SensitivityState random_state(const VelocityGrid& g, int r, double z, std::uint64_t seed) {
    SensitivityState st(r, 2, g.size(), z);
    for (int n = 0; n <= r; ++n) st.derivs[n] = random_field(g, 2, seed + 17 * n);
    return st;
}

// synthetic cubic-in-z family for finite-difference oracles
SpeciesField family_at(const VelocityGrid& g, double z, std::uint64_t seed) {
    SpeciesField a = random_field(g, 2, seed), b = random_field(g, 2, seed + 1);
    SpeciesField c = random_field(g, 2, seed + 2), d = random_field(g, 2, seed + 3);
    SpeciesField f = a;
    f.axpy(z, b);
    f.axpy(z * z, c);
    f.axpy(z * z * z, d);
    return f;
}

SensitivityState family_state(const VelocityGrid& g, int r, double z, std::uint64_t seed) {
    SensitivityState st(r, 2, g.size(), z);
    SpeciesField b = random_field(g, 2, seed + 1), c = random_field(g, 2, seed + 2),
                 d = random_field(g, 2, seed + 3);
    st.derivs[0] = family_at(g, z, seed);
    if (r >= 1) {
        st.derivs[1] = b;
        st.derivs[1].axpy(2.0 * z, c);
        st.derivs[1].axpy(3.0 * z * z, d);
    }
    if (r >= 2) {
        st.derivs[2] = c;
        st.derivs[2] *= 2.0;
        st.derivs[2].axpy(6.0 * z, d);
    }
    if (r >= 3) {
        st.derivs[3] = d;
        st.derivs[3] *= 6.0;
    }
    return st;
}

}  // namespace

TEST_CASE("leibniz expansion of the collision operator", "[sensitivity]") {
    VelocityGrid g = build_grid(2, 6, 2.5, 4);
    CollisionWorkspace ws(g, 1);
    KernelModel m = kernel_linear();
    SECTION("base case collapses to the nonlinear operator") {
        SensitivityState st = random_state(g, 2, 0.2, 101);
        SpeciesField lq = leibniz_Q(ws, m, st, 0);
        SpeciesField qt = q_total(ws, m, st.derivs[0], 0.2);
        REQUIRE(field_linf_diff(lq, qt) < 1e-14 * (1.0 + field_linf(qt)));
    }
    SECTION("grouped form equals the flat combinatorial oracle") {
        SensitivityState st = random_state(g, 3, -0.3, 102);
        for (int n : {1, 2, 3}) {
            SpeciesField grouped = leibniz_Q(ws, m, st, n);
            SpeciesField flat = oracles::leibniz_q_flat(ws, m, st.derivs, st.z, n);
            const double scale = field_linf(flat) + 1e-30;
            INFO("order " << n);
            REQUIRE(field_linf_diff(grouped, flat) < 1e-13 * scale);
        }
    }
    SECTION("n = 2 with vanishing second derivative keeps only cross terms") {
        SensitivityState st = random_state(g, 2, 0.1, 103);
        for (auto& x : st.derivs[2].data) x = 0.0;
        SpeciesField grouped = leibniz_Q(ws, m, st, 2);
        SpeciesField flat = oracles::leibniz_q_flat(ws, m, st.derivs, st.z, 2);
        REQUIRE(field_linf_diff(grouped, flat) < 1e-13 * (field_linf(flat) + 1e-30));
    }
    SECTION("first derivative matches the centered z difference at second order") {
        const double z0 = 0.15;
        double prev_err = 1e300;
        for (double dz : {0.2, 0.1, 0.05}) {
            SensitivityState stp(0, 2, g.size(), z0 + dz), stm(0, 2, g.size(), z0 - dz);
            stp.derivs[0] = family_at(g, z0 + dz, 200);
            stm.derivs[0] = family_at(g, z0 - dz, 200);
            SpeciesField qp = q_total(ws, m, stp.derivs[0], z0 + dz);
            SpeciesField qm = q_total(ws, m, stm.derivs[0], z0 - dz);
            SensitivityState st = family_state(g, 1, z0, 200);
            SpeciesField d1 = leibniz_Q(ws, m, st, 1);
            double err = 0.0;
            for (std::size_t k = 0; k < d1.data.size(); ++k)
                err = std::max(err, std::abs((qp.data[k] - qm.data[k]) / (2.0 * dz) - d1.data[k]));
            // Richardson: halving dz cuts the error by about 4
            if (prev_err < 1e300) {
                const double slope = std::log2(prev_err / err);
                REQUIRE(slope == Catch::Approx(2.0).margin(0.1));
            }
            prev_err = err;
        }
    }
}

TEST_CASE("pairing identity of the derivative hierarchy", "[sensitivity]") {
    VelocityGrid g = build_grid(2, 6, 2.5, 4);
    CollisionWorkspace ws(g, 1);
    KernelModel m = kernel_linear();
    SECTION("n = 2 collapse") {
        SensitivityState st = random_state(g, 2, 0.0, 104);
        REQUIRE(check_q_eqn_identity(ws, m, st, 2) < 1e-13);
    }
    SECTION("odd and even cases on random field tuples") {
        for (int n : {3, 4, 5}) {
            for (int trial = 0; trial < 3; ++trial) {
                SensitivityState st = random_state(g, n, 0.1 * trial, 300 + 10 * n + trial);
                INFO("n = " << n << " trial " << trial);
                REQUIRE(check_q_eqn_identity(ws, m, st, n) < 1e-12);
            }
        }
    }
}

TEST_CASE("leibniz expansion of the linear part", "[sensitivity]") {
    VelocityGrid g = build_grid(2, 6, 2.5, 4);
    CollisionWorkspace ws(g, 1);
    KernelModel m = kernel_linear();
    SpeciesSet s({1.0, 1.3});
    SECTION("base case equals the assembled linearized operator") {
        SensitivityState st = random_state(g, 1, 0.2, 105);
        SensitivitySystem sys = build_sensitivity_system(ws, m, s, 0.2, 1);
        SpeciesField lg = leibniz_G(sys, st.derivs, 0);
        AssembledOperator L = assemble_L_plain(ws, m, s, 0.2);
        SpeciesField ref = L.apply(st.derivs[0]);
        REQUIRE(field_linf_diff(lg, ref) < 1e-10 * (1.0 + field_linf(ref)));
    }
    SECTION("derivative terms beyond the affine order vanish") {
        SensitivitySystem sys = build_sensitivity_system(ws, m, s, 0.0, 3);
        REQUIRE_FALSE(sys.bk_nonzero[1]);
        REQUIRE_FALSE(sys.bk_nonzero[2]);
    }
    SECTION("first derivative matches the centered z difference of the action") {
        const double z0 = -0.1;
        double prev_err = 1e300;
        for (double dz : {0.2, 0.1}) {
            SensitivityState stz = family_state(g, 1, z0, 400);
            SensitivitySystem sys = build_sensitivity_system(ws, m, s, z0, 1);
            // d/dz [G(z) f(z)] = G'(f) + G(f'), realized by leibniz_G at n = 1
            SpeciesField d1 = leibniz_G(sys, stz.derivs, 1);
            // subtract G(d f) to isolate the operator derivative plus chain rule:
            // compare the full composite against finite differences instead
            SensitivitySystem sysp = build_sensitivity_system(ws, m, s, z0 + dz, 0);
            SensitivitySystem sysm = build_sensitivity_system(ws, m, s, z0 - dz, 0);
            SpeciesField fp = family_at(g, z0 + dz, 400), fm = family_at(g, z0 - dz, 400);
            SpeciesField gp = leibniz_G(sysp, {fp}, 0);
            SpeciesField gm = leibniz_G(sysm, {fm}, 0);
            double err = 0.0;
            for (std::size_t k = 0; k < d1.data.size(); ++k)
                err = std::max(err, std::abs((gp.data[k] - gm.data[k]) / (2.0 * dz) - d1.data[k]));
            if (prev_err < 1e300) REQUIRE(std::log2(prev_err / err) == Catch::Approx(2.0).margin(0.1));
            prev_err = err;
        }
    }
}

TEST_CASE("sensitivity hierarchy evolution", "[sensitivity]") {
    VelocityGrid g = build_grid(2, 6, 3.0, 4);
    CollisionWorkspace ws(g, 1);
    KernelModel m = kernel_linear();
    SpeciesSet s({1.0, 1.3});
    SECTION("zero data stays zero") {
        SensitivityState st(1, 2, g.size(), 0.0);
        SensitivityRun run = evolve_sensitivities(ws, m, s, st, 0.05, 0.5, TimeScheme::rk4);
        REQUIRE(run.norms[0].back() == 0.0);
        REQUIRE(run.norms[1].back() == 0.0);
    }
    SECTION("no kernel uncertainty and zero derivative data keeps the derivative at zero") {
        KernelModel m0 = kernel_linear(2, 0.0, 1.0, 0.0, 0.0, 0.0);  // b1 = 0
        SensitivityState st(1, 2, g.size(), 0.0);
        st.derivs[0] = random_field(g, 2, 106);
        st.derivs[0] *= 1e-3;
        SensitivityRun run = evolve_sensitivities(ws, m0, s, st, 0.05, 0.5, TimeScheme::rk4);
        REQUIRE(run.norms[0].back() > 0.0);
        REQUIRE(run.norms[1].back() == 0.0);
    }
    SECTION("triangular causality is bitwise") {
        SensitivityOptions opts;
        opts.project_initial = false;
        SensitivityState st = random_state(g, 2, 0.1, 107);
        for (auto& f : st.derivs) f *= 1e-3;
        SensitivityRun a = evolve_sensitivities(ws, m, s, st, 0.05, 0.25, TimeScheme::rk4, opts);
        SensitivityState st2 = st;
        st2.derivs[2] = random_field(g, 2, 999);
        st2.derivs[2] *= 1e-3;
        SensitivityRun b = evolve_sensitivities(ws, m, s, st2, 0.05, 0.25, TimeScheme::rk4, opts);
        for (std::size_t step = 0; step < a.states.size(); ++step)
            for (int n = 0; n <= 1; ++n)
                REQUIRE(std::memcmp(a.states[step][n].data.data(), b.states[step][n].data.data(),
                                    a.states[step][n].data.size() * sizeof(double)) == 0);
    }
    SECTION("conservation of the base moments with correction enabled") {
        SensitivityState st(0, 2, g.size(), 0.0);
        st.derivs[0] = random_field(g, 2, 108);
        st.derivs[0] *= 1e-2;
        SensitivityOptions opts;
        opts.project_initial = false;
        SensitivityRun run = evolve_sensitivities(ws, m, s, st, 0.05, 1.0, TimeScheme::rk4, opts);
        MomentReport m0 = moments(g, run.states.front()[0]);
        MomentReport m1 = moments(g, run.states.back()[0]);
        REQUIRE(std::abs(m1.mass[0] - m0.mass[0]) < 1e-13);
        REQUIRE(std::abs(m1.momentum[0] - m0.momentum[0]) < 1e-13);
        REQUIRE(std::abs(m1.energy - m0.energy) < 1e-13);
    }
    SECTION("euler_exp scheme stays consistent with rk4 at first order") {
        SensitivityState st(0, 2, g.size(), 0.0);
        st.derivs[0] = random_field(g, 2, 109);
        st.derivs[0] *= 1e-3;
        SensitivityRun a = evolve_sensitivities(ws, m, s, st, 0.01, 0.2, TimeScheme::rk4);
        SensitivityRun b = evolve_sensitivities(ws, m, s, st, 0.01, 0.2, TimeScheme::euler_exp);
        REQUIRE(field_linf_diff(a.states.back()[0], b.states.back()[0]) <
                0.05 * (field_linf(a.states.back()[0]) + 1e-30));
    }
    SECTION("first-order trajectory matches collocation finite differences") {
        const double z0 = 0.0, t_end = 0.4;
        SensitivityState st(1, 2, g.size(), z0);
        st.derivs[0] = random_field(g, 2, 110);
        st.derivs[0] *= 1e-2;
        st.derivs[1] = random_field(g, 2, 111);
        st.derivs[1] *= 1e-2;
        SensitivityOptions opts;
        opts.project_initial = false;
        opts.conservative = false;
        SensitivityRun direct = evolve_sensitivities(ws, m, s, st, 0.005, t_end, TimeScheme::rk4, opts);
        double prev_err = 1e300;
        for (double dz : {0.08, 0.04, 0.02}) {
            // collocation runs at z0 +- dz with the chain-rule initial data
            SensitivityRun runs[2];
            int idx = 0;
            for (double sgn : {1.0, -1.0}) {
                SensitivityState stc(0, 2, g.size(), z0 + sgn * dz);
                stc.derivs[0] = st.derivs[0];
                stc.derivs[0].axpy(sgn * dz, st.derivs[1]);
                runs[idx++] = evolve_sensitivities(ws, m, s, stc, 0.005, t_end, TimeScheme::rk4, opts);
            }
            SpeciesField fd = runs[0].states.back()[0];
            fd -= runs[1].states.back()[0];
            fd *= 1.0 / (2.0 * dz);
            const double err = field_linf_diff(fd, direct.states.back()[1]);
            if (prev_err < 1e300) REQUIRE(std::log2(prev_err / err) == Catch::Approx(2.0).margin(0.15));
            prev_err = err;
        }
    }
}

TEST_CASE("factorization decomposition recombines exactly", "[sensitivity]") {
    VelocityGrid g = build_grid(2, 6, 3.0, 4);
    CollisionWorkspace ws(g, 1);
    KernelModel m = kernel_linear();
    SpeciesSet s({1.0, 1.3});
    TruncationParams tp{0.15};
    for (int n : {0, 1}) {
        SensitivityState st(n, 2, g.size(), 0.1);
        for (int k = 0; k <= n; ++k) {
            st.derivs[k] = random_field(g, 2, 120 + k);
            st.derivs[k] *= 2e-3;
        }
        DecomposeResult res = decompose_g1_g2(ws, m, s, tp, st, 0.02, 0.4);
        INFO("order " << n);
        REQUIRE(res.residual.front() == 0.0);  // g1 = g0, g2 = 0 at t = 0
        for (double r : res.residual) REQUIRE(r < 1e-12);
        REQUIRE(field_linf(res.g2.front()) == 0.0);
    }
    SECTION("zero initial data keeps both parts at zero") {
        SensitivityState st(0, 2, g.size(), 0.0);
        DecomposeResult res = decompose_g1_g2(ws, m, s, tp, st, 0.02, 0.2);
        REQUIRE(field_linf(res.g1.back()) == 0.0);
        REQUIRE(field_linf(res.g2.back()) == 0.0);
    }
}

TEST_CASE("duhamel picard iteration", "[sensitivity]") {
    VelocityGrid g = build_grid(2, 6, 3.0, 4);
    CollisionWorkspace ws(g, 1);
    KernelModel m = kernel_linear();
    SpeciesSet s({1.0, 1.3});
    TruncationParams tp{0.15};
    const double dt = 0.004, t_end = 0.6;
    const int nt = static_cast<int>(std::round(t_end / dt)) + 1;

    SECTION("zero data and zero sources give identically zero iterates") {
        std::vector<SpeciesField> zero(nt, SpeciesField(2, g.size()));
        SpeciesField g0(2, g.size());
        PicardResult res = duhamel_picard(ws, m, s, tp, g0, zero, zero, zero, 0.0, dt, 4, 2.0);
        for (const auto& f : res.fixed_point) REQUIRE(field_linf(f) == 0.0);
        REQUIRE(res.tau1 == 0.0);
    }
    SECTION("small data contracts and matches the decomposed g1 trajectory") {
        SensitivityState st(1, 2, g.size(), 0.1);
        st.derivs[0] = random_field(g, 2, 130);
        st.derivs[0] *= 2e-3;
        st.derivs[1] = random_field(g, 2, 131);
        st.derivs[1] *= 2e-3;
        SensitivityOptions opts;
        opts.conservative = false;  // picard map has no stage projection
        DecomposeResult dec = decompose_g1_g2(ws, m, s, tp, st, dt, t_end, opts);
        // rebuild the sources of the g1 equation along the stored hierarchy
        InvariantProjector pig(g, s, Variables::ps);
        std::vector<SpeciesField> y0 = st.derivs;
        for (auto& f : y0) pig.remove_invariants(f);
        SensitivityRun hier;
        {
            SensitivityState st0 = st;
            hier = evolve_sensitivities(ws, m, s, st0, dt, t_end, TimeScheme::rk4, opts);
        }
        SensitivitySystem sys = build_sensitivity_system(ws, m, s, 0.1, 1);
        auto [Aop, Bop] = split_AB(ws, m, s, tp, 0.1, 1);
        std::vector<SpeciesField> f_traj, h_traj, src;
        for (int mstep = 0; mstep < nt; ++mstep) {
            f_traj.push_back(hier.states[mstep][0]);
            h_traj.push_back(dec.g2[mstep]);
            SpeciesField u(2, g.size());
            detail::matvec_field(Bop.A, hier.states[mstep][0], u, 1.0, false);  // B_{b^1}(d^0 f), n = 1
            const auto& nu1 = sys.nu_k[1];
            for (int i = 0; i < 2; ++i)
                for (std::size_t p = 0; p < g.size(); ++p)
                    u(i, p) -= nu1(i, p) * hier.states[mstep][0](i, p);
            SpeciesField star = leibniz_term_star(ws, m, hier.states[mstep], 0.1, 1);
            u += star;
            src.push_back(u);
        }
        SpeciesField g0 = dec.g1.front();
        PicardResult res = duhamel_picard(ws, m, s, tp, g0, f_traj, h_traj, src, 0.1, dt, 20, 2.0);
        REQUIRE(res.rho.size() >= 2);
        for (std::size_t pidx = 1; pidx < res.rho.size(); ++pidx) REQUIRE(res.rho[pidx] < 1.0);
        // fixed point against the time-stepped g1
        double err = 0.0, scale = 0.0;
        for (int mstep = 0; mstep < nt; ++mstep) {
            err = std::max(err, field_linf_diff(res.fixed_point[mstep], dec.g1[mstep]));
            scale = std::max(scale, field_linf(dec.g1[mstep]));
        }
        REQUIRE(err < 1e-6 * std::max(1.0, scale));
    }
}

TEST_CASE("decay envelope fitting", "[sensitivity]") {
    SECTION("exact exponential is recovered to near machine precision") {
        std::vector<double> t, n;
        for (int k = 0; k <= 40; ++k) {
            t.push_back(0.25 * k);
            n.push_back(3.0 * std::exp(-0.7 * 0.25 * k));
        }
        DecayFit fit = fit_decay(t, n);
        REQUIRE(fit.lambda_hat == Catch::Approx(0.7).epsilon(1e-10));
        REQUIRE(fit.c_hat == Catch::Approx(3.0).epsilon(1e-9));
        REQUIRE(fit.r_squared > 1.0 - 1e-12);
    }
    SECTION("multiplicative noise keeps the rate within two percent") {
        std::mt19937_64 rng(140);
        std::normal_distribution<double> gauss;
        std::vector<double> t, n;
        for (int k = 0; k <= 200; ++k) {
            t.push_back(0.05 * k);
            n.push_back(2.0 * std::exp(-1.3 * 0.05 * k) * (1.0 + 0.01 * gauss(rng)));
        }
        DecayFit fit = fit_decay(t, n);
        REQUIRE(fit.lambda_hat == Catch::Approx(1.3).epsilon(0.02));
    }
    SECTION("constant series flags a vanishing rate") {
        std::vector<double> t, n;
        for (int k = 0; k <= 20; ++k) {
            t.push_back(0.1 * k);
            n.push_back(5.0);
        }
        DecayFit fit = fit_decay(t, n);
        REQUIRE(std::abs(fit.lambda_hat) < 1e-12);
    }
    SECTION("non-positive tail samples are skipped and flagged") {
        std::vector<double> t, n;
        for (int k = 0; k <= 20; ++k) {
            t.push_back(0.1 * k);
            n.push_back(k % 7 == 3 ? 0.0 : std::exp(-0.5 * 0.1 * k));
        }
        DecayFit fit = fit_decay(t, n);
        REQUIRE(fit.flagged_nonpositive);
        REQUIRE(fit.lambda_hat == Catch::Approx(0.5).epsilon(1e-6));
    }
}
