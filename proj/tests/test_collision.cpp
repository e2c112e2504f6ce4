#include <catch2/catch_amalgamated.hpp>
#include <kmsuq/collision.hpp>
#include <kmsuq/oracles.hpp>

#include "test_helpers.hpp"

using namespace kmsuq;
using namespace testutil;

TEST_CASE("workspace post-collision geometry invariants", "[collision]") {
    VelocityGrid g = build_grid(2, 6, 2.0, 6);
    CollisionWorkspace ws(g, 1);
    for (std::size_t p = 0; p < g.size(); ++p)
        for (std::size_t q = 0; q < g.size(); ++q) {
            if (q == p) continue;
            for (std::size_t a = 0; a < g.angular_nodes.size(); ++a) {
                auto t = ws.triple(p, q, a);
                const Vec3 sum_pre = g.points[p] + g.points[q];
                const Vec3 sum_post = t.vprime + t.vprime_star;
                REQUIRE(norm(sum_post - sum_pre) < 1e-14 * (1.0 + norm(sum_pre)));
                const double e_pre = norm2(g.points[p]) + norm2(g.points[q]);
                const double e_post = norm2(t.vprime) + norm2(t.vprime_star);
                REQUIRE(e_post == Catch::Approx(e_pre).epsilon(1e-12));
            }
        }
}

TEST_CASE("q_pair annihilates the equilibrium to machine precision", "[collision]") {
    VelocityGrid g = build_grid(2, 10, 5.0, 8);
    SpeciesSet s({1.0, 1.3});
    KernelModel m = kernel_linear();
    SpeciesField M = maxwellian(g, s);
    for (int order : {1, 3}) {
        CollisionWorkspace ws(g, order);
        SpeciesField Q = q_total(ws, m, M, 0.3);
        const double nrm = weighted_norm(g, Q, NormKind::L1v_poly, 0.0);
        INFO("interp order " << order);
        REQUIRE(nrm < 1e-13);
    }
}

TEST_CASE("derivative kernels of linear models vanish at order two", "[collision]") {
    VelocityGrid g = build_grid(2, 6, 2.0, 4);
    CollisionWorkspace ws(g, 1);
    KernelModel m = kernel_linear();
    SpeciesField f = random_field(g, 2, 1), h = random_field(g, 2, 2);
    SpeciesField Q = q_pair(ws, m, 0, 1, f.species(0), h.species(1), 0.2, 2);
    REQUIRE(field_linf(Q) == 0.0);
}

TEST_CASE("q_pair matches the independent brute-force quadrature", "[collision][oracle]") {
    VelocityGrid g = build_grid(2, 6, 2.0, 6);
    SpeciesSet s({1.0, 1.0});
    KernelModel m = kernel_linear(2, 0.5);
    SpeciesField f = random_field(g, 2, 3), h = random_field(g, 2, 4);
    for (int order : {1, 3}) {
        CollisionWorkspace ws(g, order);
        for (int deriv : {0, 1}) {
            SpeciesField Q = q_pair(ws, m, 0, 1, f.species(0), h.species(1), 0.4, deriv);
            auto ref = oracles::brute_force_q_pair(g, m, 0, 1, f.species(0), h.species(1), 0.4, deriv, order);
            double scale = field_linf(Q) + 1e-30;
            for (std::size_t p = 0; p < g.size(); ++p) {
                INFO("order " << order << " deriv " << deriv << " point " << p);
                REQUIRE(std::abs(Q(0, p) - ref[p]) < 1e-12 * scale);
            }
        }
    }
}

TEST_CASE("bilinearity of q_pair", "[collision]") {
    VelocityGrid g = build_grid(2, 6, 2.0, 4);
    CollisionWorkspace ws(g, 1);
    KernelModel m = kernel_linear();
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> uni(-2.0, 2.0);
    for (int trial = 0; trial < 5; ++trial) {
        SpeciesField f1 = random_field(g, 2, 100 + trial), f2 = random_field(g, 2, 200 + trial);
        SpeciesField h = random_field(g, 2, 300 + trial);
        const double a = uni(rng), b = uni(rng);
        SpeciesField combo(2, g.size());
        for (std::size_t k = 0; k < combo.data.size(); ++k)
            combo.data[k] = a * f1.data[k] + b * f2.data[k];
        SpeciesField lhs = q_pair(ws, m, 0, 1, combo.species(0), h.species(1), 0.1);
        SpeciesField q1 = q_pair(ws, m, 0, 1, f1.species(0), h.species(1), 0.1);
        SpeciesField q2 = q_pair(ws, m, 0, 1, f2.species(0), h.species(1), 0.1);
        double scale = field_linf(lhs) + 1.0;
        for (std::size_t p = 0; p < g.size(); ++p)
            REQUIRE(std::abs(lhs(0, p) - a * q1(0, p) - b * q2(0, p)) < 1e-12 * scale);
    }
}

TEST_CASE("q_total structure under a vanishing species", "[collision]") {
    VelocityGrid g = build_grid(2, 6, 2.0, 4);
    CollisionWorkspace ws(g, 1);
    KernelModel m = kernel_linear();
    SpeciesField F = random_field(g, 2, 6);
    for (std::size_t p = 0; p < g.size(); ++p) F(1, p) = 0.0;
    SpeciesField Q = q_total(ws, m, F, 0.0);
    SpeciesField q11 = q_pair(ws, m, 0, 0, F.species(0), F.species(0), 0.0);
    for (std::size_t p = 0; p < g.size(); ++p) {
        REQUIRE(Q(1, p) == 0.0);  // bilinear in the vanishing slot
        REQUIRE(Q(0, p) == Catch::Approx(q11(0, p)).margin(1e-14 * (1.0 + std::abs(q11(0, p)))));
    }
}

TEST_CASE("collision frequency: closed form, positivity and equivalence", "[collision]") {
    SECTION("maxwell molecules with constant angular part") {
        VelocityGrid g = build_grid(2, 26, 6.5, 8);
        CollisionWorkspace ws(g, 1);
        SpeciesSet s({1.0, 1.0});
        KernelModel m = kernel_linear(2, 0.0, 0.5, 0.0, 0.0, 0.0);
        m.c_phi.assign(4, 1.0);
        SpeciesField nu = collision_frequency(ws, m, s, 0.0, NuConvention::paper, 0, NuQuadrature::full);
        const double expect = 2.0 * 1.0 * 0.5 * 2.0 * std::numbers::pi * 1.0;  // N C b0 |S^1| mass
        for (int i = 0; i < 2; ++i)
            for (std::size_t p = 0; p < g.size(); ++p) REQUIRE(nu(i, p) == Catch::Approx(expect).epsilon(1e-8));
    }
    SECTION("positivity: full quadrature everywhere, operator set on the core") {
        VelocityGrid g = build_grid(2, 10, 5.0, 8);
        CollisionWorkspace ws(g, 1);
        SpeciesSet s({1.0, 1.3});
        KernelModel m = kernel_linear();
        SpeciesField nu_full = collision_frequency(ws, m, s, 0.2, NuConvention::paper, 0, NuQuadrature::full);
        double nu0 = 1e300;
        for (double x : nu_full.data) nu0 = std::min(nu0, x);
        REQUIRE(nu0 > 0.0);
        // the operator-consistent frequency is nonnegative and positive away
        // from the extreme corners, where no admissible collision geometry
        // exists on the truncated lattice
        SpeciesField nu_op =
            collision_frequency(ws, m, s, 0.2, NuConvention::paper, 0, NuQuadrature::operator_consistent);
        for (int i = 0; i < 2; ++i)
            for (std::size_t p = 0; p < g.size(); ++p) {
                REQUIRE(nu_op(i, p) >= 0.0);
                const Vec3& v = g.points[p];
                if (std::max(std::abs(v[0]), std::abs(v[1])) <= g.radius - 2.0 * g.h)
                    REQUIRE(nu_op(i, p) > 0.0);
            }
    }
    SECTION("hard potentials: nu is equivalent to <v>") {
        VelocityGrid g = build_grid(2, 12, 5.0, 8);
        CollisionWorkspace ws(g, 1);
        SpeciesSet s({1.0, 1.0});
        KernelModel m = kernel_linear(2, 1.0);
        SpeciesField nu = collision_frequency(ws, m, s, 0.0, NuConvention::paper, 0, NuQuadrature::full);
        double lo = 1e300, hi = 0.0;
        for (int i = 0; i < 2; ++i)
            for (std::size_t p = 0; p < g.size(); ++p) {
                const double ratio = nu(i, p) / bracket(g.points[p]);
                lo = std::min(lo, ratio);
                hi = std::max(hi, ratio);
            }
        REQUIRE(lo > 0.0);
        REQUIRE(hi / lo < 10.0);
    }
    SECTION("conventions coincide for equal masses and differ otherwise") {
        VelocityGrid g = build_grid(2, 8, 4.0, 6);
        CollisionWorkspace ws(g, 1);
        KernelModel m = kernel_linear();
        SpeciesSet seq({1.0, 1.0});
        SpeciesField a = collision_frequency(ws, m, seq, 0.0, NuConvention::paper);
        SpeciesField b = collision_frequency(ws, m, seq, 0.0, NuConvention::standard);
        REQUIRE(field_linf_diff(a, b) < 1e-14);
        SpeciesSet sneq({1.0, 2.0});
        SpeciesField c = collision_frequency(ws, m, sneq, 0.0, NuConvention::paper);
        SpeciesField d = collision_frequency(ws, m, sneq, 0.0, NuConvention::standard);
        REQUIRE(field_linf_diff(c, d) > 1e-3);
    }
}

TEST_CASE("conservative correction", "[collision]") {
    VelocityGrid g = build_grid(2, 8, 4.0, 6);
    SpeciesSet s({1.0, 1.3});
    SECTION("random input is driven to exactly conserved moments") {
        SpeciesField Q = random_field(g, 2, 7);
        SpeciesField C = conservative_correction(g, s, Q);
        MomentReport r = moments(g, C);
        REQUIRE(std::abs(r.mass[0]) < 1e-13);
        REQUIRE(std::abs(r.mass[1]) < 1e-13);
        REQUIRE(std::abs(r.momentum[0]) < 1e-13);
        REQUIRE(std::abs(r.momentum[1]) < 1e-13);
        REQUIRE(std::abs(r.energy) < 1e-13);
        // idempotent
        SpeciesField C2 = conservative_correction(g, s, C);
        REQUIRE(field_linf_diff(C, C2) < 1e-13 * (1.0 + field_linf(C)));
    }
    SECTION("an invariant is sent to zero") {
        SpeciesField M = maxwellian(g, s);
        SpeciesField inv(2, g.size());
        for (int i = 0; i < 2; ++i)
            for (std::size_t p = 0; p < g.size(); ++p) inv(i, p) = M(i, p) * (2.0 + g.points[p][0]);
        SpeciesField C = conservative_correction(g, s, inv);
        REQUIRE(field_linf(C) < 1e-12 * field_linf(inv));
    }
    SECTION("already corrected input returns unchanged") {
        SpeciesField Q = random_field(g, 2, 8);
        SpeciesField C = conservative_correction(g, s, Q);
        SpeciesField C2 = conservative_correction(g, s, C);
        REQUIRE(field_linf_diff(C, C2) < 1e-13 * (1.0 + field_linf(C)));
    }
}

TEST_CASE("q_tilde symmetrization", "[collision]") {
    VelocityGrid g = build_grid(2, 6, 2.5, 4);
    CollisionWorkspace ws(g, 1);
    KernelModel m = kernel_linear();
    SpeciesField f = random_field(g, 2, 9), h = random_field(g, 2, 10);
    SECTION("diagonal collapse to the full operator") {
        SpeciesField qt = q_tilde(ws, m, f, f, 0.1);
        SpeciesField qtot = q_total(ws, m, f, 0.1);
        REQUIRE(field_linf_diff(qt, qtot) < 1e-14 * (1.0 + field_linf(qtot)));
    }
    SECTION("symmetry in the two arguments") {
        SpeciesField ab = q_tilde(ws, m, f, h, 0.1);
        SpeciesField ba = q_tilde(ws, m, h, f, 0.1);
        REQUIRE(field_linf_diff(ab, ba) < 1e-13 * (1.0 + field_linf(ab)));
    }
}

TEST_CASE("kernel-derivative consistency with z finite differences", "[collision]") {
    VelocityGrid g = build_grid(2, 6, 2.5, 4);
    CollisionWorkspace ws(g, 1);
    KernelModel m = kernel_linear();
    SpeciesField f = random_field(g, 2, 11), h = random_field(g, 2, 12);
    const double z = 0.1;
    for (double dz : {0.4, 0.1}) {
        SpeciesField qp = q_pair(ws, m, 0, 1, f.species(0), h.species(1), z + dz, 0);
        SpeciesField qm = q_pair(ws, m, 0, 1, f.species(0), h.species(1), z - dz, 0);
        SpeciesField qd = q_pair(ws, m, 0, 1, f.species(0), h.species(1), z, 1);
        for (std::size_t p = 0; p < g.size(); ++p) {
            const double fd = (qp(0, p) - qm(0, p)) / (2.0 * dz);
            REQUIRE(fd == Catch::Approx(qd(0, p)).margin(1e-12 * (1.0 + std::abs(qd(0, p)))));
        }
    }
}

TEST_CASE("weak H-theorem sign for positive perturbed states", "[collision]") {
    VelocityGrid g = build_grid(2, 10, 5.0, 8);
    CollisionWorkspace ws(g, 1);
    SpeciesSet s({1.0, 1.3});
    KernelModel m = kernel_linear();
    SpeciesField M = maxwellian(g, s);
    std::mt19937_64 rng(13);
    std::normal_distribution<double> gauss;
    for (int trial = 0; trial < 3; ++trial) {
        SpeciesField F = M;
        for (int i = 0; i < 2; ++i)
            for (std::size_t p = 0; p < g.size(); ++p) {
                const Vec3 c{0.5 + 0.3 * trial, -0.4, 0.0};
                F(i, p) += 0.2 * std::exp(-norm2(g.points[p] - c)) * M(i, p) * (1.0 + 0.1 * gauss(rng));
            }
        SpeciesField Q = q_total(ws, m, F, 0.2);
        double diss = 0.0;
        for (int i = 0; i < 2; ++i)
            for (std::size_t p = 0; p < g.size(); ++p)
                diss += g.weight * Q(i, p) * std::log(F(i, p) / M(i, p));
        INFO("entropy production " << diss);
        REQUIRE(diss < 1e-10);
    }
}
