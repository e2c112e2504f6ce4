#pragma once

#include <functional>

#include "linop.hpp"
#include "oracles.hpp"

namespace kmsuq {

// d^n_z f at a fixed z, orders 0..r on one grid.
struct SensitivityState {
    double z = 0.0;
    double t = 0.0;
    int order = 0;
    std::vector<SpeciesField> derivs;  // size order+1

    SensitivityState() = default;
    SensitivityState(int r, int n_species, std::size_t np, double z_) : z(z_), order(r) {
        for (int n = 0; n <= r; ++n) derivs.emplace_back(n_species, np, "deriv_" + std::to_string(n));
    }
};

inline double binom(int n, int k) { return oracles::binomial(n, k); }

// Term-star of the Leibniz expansion: every contribution to d^n Q that
// involves only z-derivative orders 0..n-1 of f (plus derivative kernels).
inline SpeciesField leibniz_term_star(const CollisionWorkspace& ws, const KernelModel& model,
                                      const std::vector<SpeciesField>& derivs, double z, int n) {
    const int N = derivs[0].n_species;
    SpeciesField out(N, ws.grid.size(), "term_star");
    const bool linear = model.angular.kind == AngularModel::Kind::linear_in_z;
    for (int l = 0; l <= n - 1; ++l) {
        const int kd = n - l;  // kernel derivative order >= 1
        if (linear && kd >= 2) continue;
        for (int m = 0; m <= l; ++m) {
            const double coef = binom(n, l) * binom(l, m);
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < N; ++j)
                    q_pair_into(ws, model, i, j, derivs[m].species(i), derivs[l - m].species(j), z, kd,
                                out.species(i), coef, true);
        }
    }
    for (int m = 1; m <= n - 1; ++m) {
        const double coef = binom(n, m);
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < N; ++j)
                q_pair_into(ws, model, i, j, derivs[m].species(i), derivs[n - m].species(j), z, 0,
                            out.species(i), coef, true);
    }
    return out;
}

// d^n_z Q_i(f) assembled in the grouped form Term-star + 2 Qt(d^n f, f);
// n = 0 is the plain nonlinear operator.
inline SpeciesField leibniz_Q(const CollisionWorkspace& ws, const KernelModel& model,
                              const SensitivityState& state, int n) {
    if (n > state.order) throw std::invalid_argument("leibniz_Q: n exceeds the state order");
    if (n == 0) return q_total(ws, model, state.derivs[0], state.z);
    SpeciesField out = leibniz_term_star(ws, model, state.derivs, state.z, n);
    SpeciesField cross = q_tilde(ws, model, state.derivs[n], state.derivs[0], state.z);
    out.axpy(2.0, cross);
    return out;
}

// Relative L1 residual of the pairing identity
//   sum_j sum_{m=1}^{n-1} C(n,m) Q_ij(d^m f_i, d^{n-m} f_j)
//     = 2 sum_{m=1}^{floor((n-1)/2)} C(n,m) Qt_i(d^m f, d^{n-m} f)
//       + chi_n C(n, n/2) Qt_i(d^{n/2} f, d^{n/2} f),
// with both sides assembled independently.
inline double check_q_eqn_identity(const CollisionWorkspace& ws, const KernelModel& model,
                                   const SensitivityState& state, int n) {
    if (n < 2) throw std::invalid_argument("check_q_eqn_identity: n must be >= 2");
    const int N = state.derivs[0].n_species;
    SpeciesField lhs(N, ws.grid.size());
    for (int m = 1; m <= n - 1; ++m)
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < N; ++j)
                q_pair_into(ws, model, i, j, state.derivs[m].species(i), state.derivs[n - m].species(j),
                            state.z, 0, lhs.species(i), binom(n, m), true);
    SpeciesField rhs(N, ws.grid.size());
    for (int m = 1; m <= (n - 1) / 2; ++m) {
        SpeciesField qt = q_tilde(ws, model, state.derivs[m], state.derivs[n - m], state.z);
        rhs.axpy(2.0 * binom(n, m), qt);
    }
    if (n % 2 == 0) {
        SpeciesField qt = q_tilde(ws, model, state.derivs[n / 2], state.derivs[n / 2], state.z);
        rhs.axpy(binom(n, n / 2), qt);
    }
    rhs -= lhs;
    const double denom = weighted_norm(ws.grid, lhs, NormKind::L1v_poly, 0.0);
    const double num = weighted_norm(ws.grid, rhs, NormKind::L1v_poly, 0.0);
    return denom > 0.0 ? num / denom : num;
}

// Assembled pieces of the derivative hierarchy at a fixed z, shared by the
// evolution routines: G = A + B - nu (homogeneous) plus the derivative-kernel
// blocks M_bk = A_{b^k} + B_{b^k} and the fields d^k nu.
struct SensitivitySystem {
    double z = 0.0;
    int order = 0;
    Eigen::MatrixXd G;
    std::vector<Eigen::MatrixXd> m_bk;     // index k-1 for k = 1..r
    std::vector<bool> bk_nonzero;          // same indexing
    std::vector<SpeciesField> nu_k;        // k = 0..r
    int n_species = 0;
    std::size_t n_points = 0;
};

inline SensitivitySystem build_sensitivity_system(const CollisionWorkspace& ws, const KernelModel& model,
                                                  const SpeciesSet& species, double z, int r) {
    SensitivitySystem sys;
    sys.z = z;
    sys.order = r;
    sys.n_species = species.n_species;
    sys.n_points = ws.grid.size();
    sys.G = assemble_L_plain(ws, model, species, z).A;
    const bool linear = model.angular.kind == AngularModel::Kind::linear_in_z;
    for (int k = 0; k <= r; ++k)
        sys.nu_k.push_back(collision_frequency(ws, model, species, z, NuConvention::standard, k,
                                               NuQuadrature::operator_consistent));
    for (int k = 1; k <= r; ++k) {
        if (linear && k >= 2) {
            sys.m_bk.emplace_back();
            sys.bk_nonzero.push_back(false);
            continue;
        }
        sys.m_bk.push_back(detail::assemble_gain3(ws, model, species, z, k, GainWeight::full, nullptr).A);
        sys.bk_nonzero.push_back(true);
    }
    return sys;
}

namespace detail {

inline void matvec_field(const Eigen::MatrixXd& A, const SpeciesField& x, SpeciesField& y, double scale,
                         bool accumulate) {
    Eigen::Map<const Eigen::VectorXd> xv(x.data.data(), x.data.size());
    Eigen::Map<Eigen::VectorXd> yv(y.data.data(), y.data.size());
    if (accumulate)
        yv += scale * (A * xv);
    else
        yv = scale * (A * xv);
}

}  // namespace detail

// d^n G_i(f) action (homogeneous): G(d^n f) + sum_k C(n,k)[M_bk(d^{n-k} f)
// - d^k nu . d^{n-k} f].
inline SpeciesField leibniz_G(const SensitivitySystem& sys, const std::vector<SpeciesField>& derivs, int n) {
    if (n > sys.order) throw std::invalid_argument("leibniz_G: n exceeds the assembled order");
    SpeciesField out(sys.n_species, sys.n_points, "leibniz_G");
    detail::matvec_field(sys.G, derivs[n], out, 1.0, false);
    for (int k = 1; k <= n; ++k) {
        const double c = binom(n, k);
        if (sys.bk_nonzero[k - 1]) detail::matvec_field(sys.m_bk[k - 1], derivs[n - k], out, c, true);
        const auto& nuk = sys.nu_k[k];
        for (int i = 0; i < sys.n_species; ++i)
            for (std::size_t p = 0; p < sys.n_points; ++p) out(i, p) -= c * nuk(i, p) * derivs[n - k](i, p);
    }
    return out;
}

// Convenience overload assembling the system on the fly.
inline SpeciesField leibniz_G(const CollisionWorkspace& ws, const KernelModel& model, const SpeciesSet& species,
                              const SensitivityState& state, int n) {
    SensitivitySystem sys = build_sensitivity_system(ws, model, species, state.z, n);
    return leibniz_G(sys, state.derivs, n);
}

enum class TimeScheme { rk4, euler_exp };

struct SensitivityOptions {
    double k_weight = 2.0;       // <v>^k exponent of the reported norms
    bool project_initial = true; // enforce Pi_G(d^n f_0) = 0
    bool conservative = true;    // conservative correction per stage
    int record_stride = 1;
    double blowup_factor = 1e6;
};

struct SensitivityRun {
    std::vector<double> times;
    std::vector<std::vector<double>> norms;        // [order][sample]
    std::vector<std::vector<SpeciesField>> states; // [sample][order]
    std::vector<double> projected_mass;            // removed invariant content per order at t=0
};

namespace detail {

// Right-hand side of the full hierarchy; orders ascend so lower orders never
// see higher ones (triangular causality).
inline void hierarchy_rhs(const SensitivitySystem& sys, const CollisionWorkspace& ws, const KernelModel& model,
                          const std::vector<SpeciesField>& y, double z, int r,
                          const ConservativeProjector* proj, std::vector<SpeciesField>& out) {
    for (int n = 0; n <= r; ++n) {
        out[n] = leibniz_G(sys, y, n);
        if (n == 0) {
            SpeciesField q = q_tilde(ws, model, y[0], y[0], z);
            out[0] += q;
        } else {
            SpeciesField cross = q_tilde(ws, model, y[n], y[0], z);
            out[n].axpy(2.0, cross);
            SpeciesField star = leibniz_term_star(ws, model, y, z, n);
            out[n] += star;
        }
        if (proj) proj->apply(out[n]);
    }
}

inline double run_norm(const VelocityGrid& g, const SpeciesField& f, double k) {
    return weighted_norm(g, f, NormKind::L1v_poly, k);
}

}  // namespace detail

// Evolves the sensitivity hierarchy d_t(d^n f) = d^n G(f) + d^n Q(f) for
// n = 0..r at a fixed z (homogeneous mode).
inline SensitivityRun evolve_sensitivities(const CollisionWorkspace& ws, const KernelModel& model,
                                           const SpeciesSet& species, const SensitivityState& state0, double dt,
                                           double t_end, TimeScheme scheme,
                                           const SensitivityOptions& opts = {}) {
    const int r = state0.order;
    const double z = state0.z;
    SensitivitySystem sys = build_sensitivity_system(ws, model, species, z, r);
    ConservativeProjector proj(ws.grid, species);
    InvariantProjector pig(ws.grid, species, Variables::ps);

    std::vector<SpeciesField> y = state0.derivs;
    SensitivityRun run;
    for (int n = 0; n <= r; ++n) {
        double before = detail::run_norm(ws.grid, y[n], opts.k_weight);
        if (opts.project_initial) pig.remove_invariants(y[n]);
        double after = detail::run_norm(ws.grid, y[n], opts.k_weight);
        run.projected_mass.push_back(before - after);
    }

    const int steps = static_cast<int>(std::round(t_end / dt));
    std::vector<double> init_norm(r + 1);
    for (int n = 0; n <= r; ++n) init_norm[n] = detail::run_norm(ws.grid, y[n], opts.k_weight);

    auto record = [&](double t) {
        run.times.push_back(t);
        run.states.push_back(y);
        if (run.norms.empty()) run.norms.assign(r + 1, {});
        for (int n = 0; n <= r; ++n) run.norms[n].push_back(detail::run_norm(ws.grid, y[n], opts.k_weight));
    };
    record(0.0);

    std::vector<SpeciesField> k1(r + 1), k2(r + 1), k3(r + 1), k4(r + 1);
    std::vector<SpeciesField> tmp = y;
    const ConservativeProjector* pp = opts.conservative ? &proj : nullptr;

    for (int s = 0; s < steps; ++s) {
        if (scheme == TimeScheme::rk4) {
            detail::hierarchy_rhs(sys, ws, model, y, z, r, pp, k1);
            for (int n = 0; n <= r; ++n) {
                tmp[n] = y[n];
                tmp[n].axpy(0.5 * dt, k1[n]);
            }
            detail::hierarchy_rhs(sys, ws, model, tmp, z, r, pp, k2);
            for (int n = 0; n <= r; ++n) {
                tmp[n] = y[n];
                tmp[n].axpy(0.5 * dt, k2[n]);
            }
            detail::hierarchy_rhs(sys, ws, model, tmp, z, r, pp, k3);
            for (int n = 0; n <= r; ++n) {
                tmp[n] = y[n];
                tmp[n].axpy(dt, k3[n]);
            }
            detail::hierarchy_rhs(sys, ws, model, tmp, z, r, pp, k4);
            for (int n = 0; n <= r; ++n) {
                y[n].axpy(dt / 6.0, k1[n]);
                y[n].axpy(dt / 3.0, k2[n]);
                y[n].axpy(dt / 3.0, k3[n]);
                y[n].axpy(dt / 6.0, k4[n]);
            }
        } else {
            // exponential Euler: exact integrating factor on -nu, explicit on
            // the remainder R = rhs + nu.y
            detail::hierarchy_rhs(sys, ws, model, y, z, r, pp, k1);
            const auto& nu0 = sys.nu_k[0];
            for (int n = 0; n <= r; ++n) {
                for (int i = 0; i < sys.n_species; ++i)
                    for (std::size_t p = 0; p < sys.n_points; ++p) {
                        const double nu = nu0(i, p);
                        const double e = std::exp(-nu * dt);
                        const double phi1 = nu * dt > 1e-8 ? (1.0 - e) / (nu * dt) : 1.0 - 0.5 * nu * dt;
                        const double R = k1[n](i, p) + nu * y[n](i, p);
                        y[n](i, p) = e * y[n](i, p) + dt * phi1 * R;
                    }
            }
        }
        const double t = (s + 1) * dt;
        for (int n = 0; n <= r; ++n) {
            const double nn = detail::run_norm(ws.grid, y[n], opts.k_weight);
            if (init_norm[n] > 0.0 && nn > opts.blowup_factor * init_norm[n])
                throw std::runtime_error("evolve_sensitivities: norm blow-up at order " + std::to_string(n) +
                                         ", t = " + std::to_string(t));
        }
        if ((s + 1) % opts.record_stride == 0 || s + 1 == steps) record(t);
    }
    return run;
}

struct DecomposeResult {
    std::vector<double> times;
    std::vector<SpeciesField> g1, g2, direct;  // trajectories of order n
    std::vector<double> residual;              // ||g1+g2 - d^n f|| / ||d^n f(0)||
};

// Co-evolves the (g1, g2) system of the factorization decomposition next to
// the directly evolved hierarchy and reports the recombination residual.
inline DecomposeResult decompose_g1_g2(const CollisionWorkspace& ws, const KernelModel& model,
                                       const SpeciesSet& species, const TruncationParams& tp,
                                       const SensitivityState& state0, int n, double dt, double t_end,
                                       const SensitivityOptions& opts = {}) {
    if (n > state0.order) throw std::invalid_argument("decompose_g1_g2: n exceeds the state order");
    const double z = state0.z;
    const int r = state0.order;
    SensitivitySystem sys = build_sensitivity_system(ws, model, species, z, r);
    ConservativeProjector proj(ws.grid, species);
    InvariantProjector pig(ws.grid, species, Variables::ps);
    const ConservativeProjector* pp = opts.conservative ? &proj : nullptr;

    // split pieces
    auto [Aop, Bop] = split_AB(ws, model, species, tp, z, 0);
    std::vector<Eigen::MatrixXd> Abk, Bbk;
    std::vector<bool> bk_nz;
    const bool linear = model.angular.kind == AngularModel::Kind::linear_in_z;
    for (int k = 1; k <= n; ++k) {
        if (linear && k >= 2) {
            Abk.emplace_back();
            Bbk.emplace_back();
            bk_nz.push_back(false);
            continue;
        }
        auto [ak, bk] = split_AB(ws, model, species, tp, z, k);
        Abk.push_back(std::move(ak.A));
        Bbk.push_back(std::move(bk.A));
        bk_nz.push_back(true);
    }
    const auto& nu0 = sys.nu_k[0];

    std::vector<SpeciesField> y = state0.derivs;
    if (opts.project_initial)
        for (auto& f : y) pig.remove_invariants(f);
    SpeciesField g1 = y[n];
    SpeciesField g2(species.n_species, ws.grid.size(), "g2");

    const double init = detail::run_norm(ws.grid, y[n], opts.k_weight);
    const int steps = static_cast<int>(std::round(t_end / dt));

    DecomposeResult res;
    auto record = [&](double t) {
        res.times.push_back(t);
        res.g1.push_back(g1);
        res.g2.push_back(g2);
        res.direct.push_back(y[n]);
        SpeciesField diff = g1;
        diff += g2;
        diff -= y[n];
        res.residual.push_back(detail::run_norm(ws.grid, diff, opts.k_weight) / (init > 0.0 ? init : 1.0));
    };

    // rhs of the coupled (hierarchy, g1, g2) system
    auto coupled_rhs = [&](const std::vector<SpeciesField>& yy, const SpeciesField& gg1,
                           const SpeciesField& gg2, std::vector<SpeciesField>& dy, SpeciesField& dg1,
                           SpeciesField& dg2) {
        detail::hierarchy_rhs(sys, ws, model, yy, z, r, pp, dy);
        // g1: G1(g1) + sum C(n,k)[B_bk(d^{n-k} f) - d^k nu d^{n-k} f]
        //     + (n=0 ? Qt(g, g) : 2 Qt(g1+g2, f) + Term-star)
        detail::matvec_field(Bop.A, gg1, dg1, 1.0, false);
        for (int i = 0; i < species.n_species; ++i)
            for (std::size_t p = 0; p < ws.grid.size(); ++p) dg1(i, p) -= nu0(i, p) * gg1(i, p);
        for (int k = 1; k <= n; ++k) {
            const double c = binom(n, k);
            if (bk_nz[k - 1]) detail::matvec_field(Bbk[k - 1], yy[n - k], dg1, c, true);
            const auto& nuk = sys.nu_k[k];
            for (int i = 0; i < species.n_species; ++i)
                for (std::size_t p = 0; p < ws.grid.size(); ++p) dg1(i, p) -= c * nuk(i, p) * yy[n - k](i, p);
        }
        SpeciesField gsum = gg1;
        gsum += gg2;
        if (n == 0) {
            SpeciesField q = q_tilde(ws, model, gsum, gsum, z);
            dg1 += q;
        } else {
            SpeciesField cross = q_tilde(ws, model, gsum, yy[0], z);
            dg1.axpy(2.0, cross);
            SpeciesField star = leibniz_term_star(ws, model, yy, z, n);
            dg1 += star;
        }
        // g2: G(g2) + A(g1) + sum C(n,k) A_bk(d^{n-k} f)
        dg2 = leibniz_G(sys, std::vector<SpeciesField>{gg2}, 0);
        detail::matvec_field(Aop.A, gg1, dg2, 1.0, true);
        for (int k = 1; k <= n; ++k)
            if (bk_nz[k - 1]) detail::matvec_field(Abk[k - 1], yy[n - k], dg2, binom(n, k), true);
        if (pp) {
            pp->apply(dg1);
            pp->apply(dg2);
        }
    };

    record(0.0);
    std::vector<SpeciesField> dy1(r + 1), dy2(r + 1), dy3(r + 1), dy4(r + 1), ty(r + 1);
    SpeciesField d1g1(species.n_species, ws.grid.size()), d2g1 = d1g1, d3g1 = d1g1, d4g1 = d1g1;
    SpeciesField d1g2 = d1g1, d2g2 = d1g1, d3g2 = d1g1, d4g2 = d1g1;
    SpeciesField tg1 = g1, tg2 = g2;

    for (int s = 0; s < steps; ++s) {
        coupled_rhs(y, g1, g2, dy1, d1g1, d1g2);
        ty = y;
        tg1 = g1;
        tg2 = g2;
        for (int m = 0; m <= r; ++m) ty[m].axpy(0.5 * dt, dy1[m]);
        tg1.axpy(0.5 * dt, d1g1);
        tg2.axpy(0.5 * dt, d1g2);
        coupled_rhs(ty, tg1, tg2, dy2, d2g1, d2g2);
        ty = y;
        tg1 = g1;
        tg2 = g2;
        for (int m = 0; m <= r; ++m) ty[m].axpy(0.5 * dt, dy2[m]);
        tg1.axpy(0.5 * dt, d2g1);
        tg2.axpy(0.5 * dt, d2g2);
        coupled_rhs(ty, tg1, tg2, dy3, d3g1, d3g2);
        ty = y;
        tg1 = g1;
        tg2 = g2;
        for (int m = 0; m <= r; ++m) ty[m].axpy(dt, dy3[m]);
        tg1.axpy(dt, d3g1);
        tg2.axpy(dt, d3g2);
        coupled_rhs(ty, tg1, tg2, dy4, d4g1, d4g2);
        for (int m = 0; m <= r; ++m) {
            y[m].axpy(dt / 6.0, dy1[m]);
            y[m].axpy(dt / 3.0, dy2[m]);
            y[m].axpy(dt / 3.0, dy3[m]);
            y[m].axpy(dt / 6.0, dy4[m]);
        }
        g1.axpy(dt / 6.0, d1g1);
        g1.axpy(dt / 3.0, d2g1);
        g1.axpy(dt / 3.0, d3g1);
        g1.axpy(dt / 6.0, d4g1);
        g2.axpy(dt / 6.0, d1g2);
        g2.axpy(dt / 3.0, d2g2);
        g2.axpy(dt / 3.0, d3g2);
        g2.axpy(dt / 6.0, d4g2);
        record((s + 1) * dt);
    }
    return res;
}

struct PicardResult {
    std::vector<double> times;
    std::vector<double> rho;             // contraction ratios per iterate
    std::vector<double> sup_diff;        // sup_t L1 norm of iterate differences
    std::vector<SpeciesField> fixed_point;
    double tau1 = 0.0, tau2 = 0.0;       // measured smallness constants of f
    double contraction_proxy = 0.0;      // max{4 C_Q tau1, 2(C_B + 2 C_Q tau2)}
    bool contracted = false;
};

// Duhamel/Picard iteration for the g1 equation along the integrating factor
// e^{-nu t}: g^{(p+1)}(t) = e^{-nu t} g0 + int_0^t e^{-nu(t-s)} {B g^{(p)} +
// 2 Qt(g^{(p)} + h, f) + sources}(s) ds, with fixed source and h
// trajectories sampled on the output time grid.
inline PicardResult duhamel_picard(const CollisionWorkspace& ws, const KernelModel& model,
                                   const SpeciesSet& species, const TruncationParams& tp,
                                   const SpeciesField& g0, const std::vector<SpeciesField>& f_traj,
                                   const std::vector<SpeciesField>& h_traj,
                                   const std::vector<SpeciesField>& source_traj, double z, double dt,
                                   int n_iters, double k_weight, double c_b_hat = 0.0, double c_q_hat = 0.0) {
    const std::size_t nt = f_traj.size();
    if (h_traj.size() != nt || source_traj.size() != nt)
        throw std::invalid_argument("duhamel_picard: trajectory length mismatch");
    const int N = species.n_species;
    const std::size_t np = ws.grid.size();

    auto [Aop, Bop] = split_AB(ws, model, species, tp, z, 0);
    (void)Aop;
    SpeciesField nu0 =
        collision_frequency(ws, model, species, z, NuConvention::standard, 0, NuQuadrature::operator_consistent);

    PicardResult res;
    for (std::size_t m = 0; m < nt; ++m) res.times.push_back(m * dt);

    // smallness constants of the background trajectory, measured in the
    // Lemma norms (continuum collision frequency weight)
    SpeciesField nu_norm =
        collision_frequency(ws, model, species, z, NuConvention::standard, 0, NuQuadrature::full);
    for (std::size_t m = 0; m < nt; ++m) {
        const double wtrap = (m == 0 || m + 1 == nt) ? 0.5 * dt : dt;
        res.tau1 += wtrap * weighted_norm(ws.grid, f_traj[m], NormKind::L1v_poly_nu, k_weight, 0.0, &nu_norm);
        res.tau2 = std::max(res.tau2, weighted_norm(ws.grid, f_traj[m], NormKind::L1v_poly, k_weight));
    }
    res.contraction_proxy =
        std::max(4.0 * c_q_hat * res.tau1, 2.0 * (c_b_hat + 2.0 * c_q_hat * res.tau2));

    std::vector<SpeciesField> g(nt, SpeciesField(N, np)), gnext = g;
    std::vector<SpeciesField> integrand(nt, SpeciesField(N, np));
    std::vector<SpeciesField> prev_diff;

    for (int p = 0; p < n_iters; ++p) {
        // integrand u(t_m) = B g + 2 Qt(g + h, f) + S, with the e^{+nu s}
        // growth folded in for the cumulative quadrature
        for (std::size_t m = 0; m < nt; ++m) {
            SpeciesField u(N, np);
            detail::matvec_field(Bop.A, g[m], u, 1.0, false);
            SpeciesField gh = g[m];
            gh += h_traj[m];
            SpeciesField cross = q_tilde(ws, model, gh, f_traj[m], z);
            u.axpy(2.0, cross);
            u += source_traj[m];
            const double s = m * dt;
            for (int i = 0; i < N; ++i)
                for (std::size_t pt = 0; pt < np; ++pt) integrand[m](i, pt) = u(i, pt) * std::exp(nu0(i, pt) * s);
        }
        // cumulative integral by sliding parabola (local O(dt^4))
        SpeciesField I(N, np);
        for (std::size_t m = 0; m < nt; ++m) {
            if (m == 0) {
                I = SpeciesField(N, np);
            } else if (m == 1 && nt >= 3) {
                for (int i = 0; i < N; ++i)
                    for (std::size_t pt = 0; pt < np; ++pt)
                        I(i, pt) += dt / 12.0 * (5.0 * integrand[0](i, pt) + 8.0 * integrand[1](i, pt) -
                                                 integrand[2](i, pt));
            } else if (m == 1) {
                for (int i = 0; i < N; ++i)
                    for (std::size_t pt = 0; pt < np; ++pt)
                        I(i, pt) += 0.5 * dt * (integrand[0](i, pt) + integrand[1](i, pt));
            } else {
                for (int i = 0; i < N; ++i)
                    for (std::size_t pt = 0; pt < np; ++pt)
                        I(i, pt) += dt / 12.0 * (-integrand[m - 2](i, pt) + 8.0 * integrand[m - 1](i, pt) +
                                                 5.0 * integrand[m](i, pt));
            }
            const double t = m * dt;
            for (int i = 0; i < N; ++i)
                for (std::size_t pt = 0; pt < np; ++pt)
                    gnext[m](i, pt) = std::exp(-nu0(i, pt) * t) * (g0(i, pt) + I(i, pt));
        }
        // contraction diagnostics
        std::vector<SpeciesField> diff(nt, SpeciesField(N, np));
        double sup = 0.0;
        for (std::size_t m = 0; m < nt; ++m) {
            diff[m] = gnext[m];
            diff[m] -= g[m];
            sup = std::max(sup, weighted_norm(ws.grid, diff[m], NormKind::L1v_poly, k_weight));
        }
        res.sup_diff.push_back(sup);
        if (!prev_diff.empty() && res.sup_diff[res.sup_diff.size() - 2] > 0.0)
            res.rho.push_back(sup / res.sup_diff[res.sup_diff.size() - 2]);
        prev_diff = std::move(diff);
        g = gnext;
    }
    res.fixed_point = g;
    res.contracted = !res.rho.empty();
    for (std::size_t i = 1; i < res.rho.size(); ++i)
        if (res.rho[i] >= 1.0) res.contracted = false;
    return res;
}

struct DecayFit {
    double c_hat = 0.0;
    double lambda_hat = 0.0;
    double r_squared = 0.0;
    int n_used = 0;
    bool flagged_nonpositive = false;
};

// Least-squares fit of log(norm) ~ log(C) - lambda t over the tail half of
// the series; non-positive samples are skipped and flagged.
inline DecayFit fit_decay(const std::vector<double>& t, const std::vector<double>& norms) {
    if (t.size() != norms.size() || t.size() < 10)
        throw std::invalid_argument("fit_decay: need at least 10 samples");
    DecayFit fit;
    const double t_half = t.front() + 0.5 * (t.back() - t.front());
    std::vector<double> xs, ys;
    for (std::size_t m = 0; m < t.size(); ++m) {
        if (t[m] < t_half) continue;
        if (!(norms[m] > 0.0)) {
            fit.flagged_nonpositive = true;
            continue;
        }
        xs.push_back(t[m]);
        ys.push_back(std::log(norms[m]));
    }
    fit.n_used = static_cast<int>(xs.size());
    if (fit.n_used < 3) return fit;
    double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
    for (int m = 0; m < fit.n_used; ++m) {
        sx += xs[m];
        sy += ys[m];
        sxx += xs[m] * xs[m];
        sxy += xs[m] * ys[m];
        syy += ys[m] * ys[m];
    }
    const double nn = fit.n_used;
    const double denom = nn * sxx - sx * sx;
    const double slope = (nn * sxy - sx * sy) / denom;
    const double inter = (sy - slope * sx) / nn;
    fit.lambda_hat = -slope;
    fit.c_hat = std::exp(inter);
    const double sst = syy - sy * sy / nn;
    double sse = 0.0;
    for (int m = 0; m < fit.n_used; ++m) {
        const double e = ys[m] - (inter + slope * xs[m]);
        sse += e * e;
    }
    fit.r_squared = sst > 0.0 ? 1.0 - sse / sst : 1.0;
    return fit;
}

// Probe estimate of the bilinear constant C_Q in the Lemma pairing.
inline double estimate_cq(const CollisionWorkspace& ws, const KernelModel& model, const SpeciesSet& species,
                          double z, double k_weight, int probes = 20, std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    SpeciesField nu0 =
        collision_frequency(ws, model, species, z, NuConvention::standard, 0, NuQuadrature::operator_consistent);
    double cq = 0.0;
    for (int t = 0; t < probes; ++t) {
        SpeciesField f(species.n_species, ws.grid.size()), g = f;
        for (int i = 0; i < species.n_species; ++i)
            for (std::size_t p = 0; p < ws.grid.size(); ++p) {
                const double m = std::exp(-0.5 * norm2(ws.grid.points[p]));
                f(i, p) = gauss(rng) * m;
                g(i, p) = gauss(rng) * m;
            }
        SpeciesField qt = q_tilde(ws, model, f, g, z);
        const double num = weighted_norm(ws.grid, qt, NormKind::L1v_poly, k_weight);
        const double den =
            weighted_norm(ws.grid, f, NormKind::L1v_poly, k_weight) *
                weighted_norm(ws.grid, g, NormKind::L1v_poly_nu, k_weight, 0.0, &nu0) +
            weighted_norm(ws.grid, f, NormKind::L1v_poly_nu, k_weight, 0.0, &nu0) *
                weighted_norm(ws.grid, g, NormKind::L1v_poly, k_weight);
        if (den > 0.0) cq = std::max(cq, num / den);
    }
    return cq;
}

}  // namespace kmsuq
