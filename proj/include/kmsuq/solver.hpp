#pragma once

#include <complex>

#include "gpc.hpp"
#include "sensitivity.hpp"

namespace kmsuq {

struct PerturbationSpec {
    enum class Kind { gaussian_bump, hermite_bump };
    Kind kind = Kind::gaussian_bump;
    std::vector<double> amplitude;  // per species
    Vec3 center{1.0, 0.0, 0.0};
    double width = 1.0;
    double z_amp = 0.0;  // optional linear z-dependence of the initial data
};

inline SpeciesField make_perturbation(const VelocityGrid& g, const SpeciesSet& s, const PerturbationSpec& ps,
                                      double z = 0.0) {
    SpeciesField f(s.n_species, g.size(), "perturbation");
    const double zfac = 1.0 + ps.z_amp * z;
    for (int i = 0; i < s.n_species; ++i) {
        const double amp = (i < static_cast<int>(ps.amplitude.size()) ? ps.amplitude[i] : 0.0) * zfac;
        for (std::size_t p = 0; p < g.size(); ++p) {
            const Vec3 d = g.points[p] - ps.center;
            if (ps.kind == PerturbationSpec::Kind::gaussian_bump) {
                f(i, p) = amp * std::exp(-0.5 * norm2(d) / (ps.width * ps.width));
            } else {
                const double x = g.points[p][0];
                f(i, p) = amp * x * (x * x - 3.0) * std::exp(-0.5 * norm2(g.points[p]));
            }
        }
    }
    return f;
}

struct SimConfig {
    enum class Mode { homogeneous, torus1d };
    enum class Unknown { deterministic, collocation, sg };
    enum class Linearization { nonlinear, sqrtm };

    Mode mode = Mode::homogeneous;
    Unknown unknown = Unknown::deterministic;
    Linearization lin = Linearization::nonlinear;
    double z = 0.0;
    double dt = 0.02;
    double t_end = 4.0;
    int output_stride = 1;
    double k_weight = 2.0;
    TimeScheme scheme = TimeScheme::rk4;
    bool conservative = true;
    bool project_initial = true;
    int nx = 32;
    double x_period = 1.0;
    int K = 4;
    int q = 1;
    PerturbationSpec pert;

    void validate() const {
        if (!(dt > 0.0)) throw std::invalid_argument("SimConfig: dt must be positive");
        if (t_end < dt) throw std::invalid_argument("SimConfig: t_end must be >= dt");
        if (mode == Mode::torus1d && nx < 8) throw std::invalid_argument("SimConfig: torus1d needs nx >= 8");
        if (unknown == Unknown::sg && K < 1) throw std::invalid_argument("SimConfig: sg needs K >= 1");
    }
};

struct RunReport {
    std::vector<double> times;
    std::vector<double> norm_total;   // L1v_poly(<v>^k)
    std::vector<double> norm_micro;   // same norm of (I - Pi_G) f
    std::vector<double> entropy;      // 1/2 sum_i int f_i^2
    std::vector<MomentReport> moment_series;
    DecayFit micro_fit;
    SpeciesField final_state;
    GpcField final_gpc;
    double min_F = 0.0;  // positivity watch for perturbative runs
    bool entropy_monotone = true;
};

namespace detail {

inline double entropy_of(const VelocityGrid& g, const SpeciesField& f) {
    double acc = 0.0;
    for (double x : f.data) acc += x * x;
    return 0.5 * g.weight * acc;
}

inline void fill_diagnostics(const VelocityGrid& g, const SpeciesSet& s, const InvariantProjector& pig,
                             const std::vector<double>& times, const std::vector<SpeciesField>& states,
                             double k_weight, RunReport& rep) {
    for (std::size_t m = 0; m < states.size(); ++m) {
        rep.times.push_back(times[m]);
        rep.norm_total.push_back(weighted_norm(g, states[m], NormKind::L1v_poly, k_weight));
        SpeciesField micro = states[m];
        pig.remove_invariants(micro);
        rep.norm_micro.push_back(weighted_norm(g, micro, NormKind::L1v_poly, k_weight));
        rep.entropy.push_back(entropy_of(g, states[m]));
        rep.moment_series.push_back(moments(g, states[m]));
    }
    for (std::size_t m = 1; m < rep.entropy.size(); ++m)
        if (rep.entropy[m] > rep.entropy[m - 1] * (1.0 + 1e-12) + 1e-300) rep.entropy_monotone = false;
    if (rep.times.size() >= 10) {
        bool pos = true;
        for (double nrm : rep.norm_micro)
            if (!(nrm > 0.0)) pos = false;
        if (pos) rep.micro_fit = fit_decay(rep.times, rep.norm_micro);
    }
}

// Generic dense linear evolution d_t x = A x with rk4, recording states.
inline void evolve_linear(const Eigen::MatrixXd& A, Eigen::VectorXd& x, double dt, int steps, int stride,
                          const std::function<void(double, const Eigen::VectorXd&)>& record) {
    record(0.0, x);
    Eigen::VectorXd k1, k2, k3, k4;
    for (int s = 0; s < steps; ++s) {
        k1 = A * x;
        k2 = A * (x + 0.5 * dt * k1);
        k3 = A * (x + 0.5 * dt * k2);
        k4 = A * (x + dt * k3);
        x += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if ((s + 1) % stride == 0 || s + 1 == steps) record((s + 1) * dt, x);
    }
}

}  // namespace detail

// Space-homogeneous run. Nonlinear PS runs reuse the sensitivity stepper at
// order r = 0 (identical code path); sqrtm runs evolve the weak-form
// linearized operator.
inline RunReport run_homogeneous(const CollisionWorkspace& ws, const CollisionWorkspace& ws_spectral,
                                 const KernelModel& model, const SpeciesSet& species, const SimConfig& cfg) {
    cfg.validate();
    RunReport rep;
    const VelocityGrid& g = ws.grid;
    if (cfg.lin == SimConfig::Linearization::nonlinear) {
        SensitivityState st(0, species.n_species, g.size(), cfg.z);
        st.derivs[0] = make_perturbation(g, species, cfg.pert, cfg.z);
        SensitivityOptions opts;
        opts.k_weight = cfg.k_weight;
        opts.project_initial = cfg.project_initial;
        opts.conservative = cfg.conservative;
        opts.record_stride = cfg.output_stride;
        SensitivityRun run = evolve_sensitivities(ws, model, species, st, cfg.dt, cfg.t_end,
                                                  cfg.scheme, opts);
        InvariantProjector pig(g, species, Variables::ps);
        std::vector<SpeciesField> states;
        states.reserve(run.states.size());
        for (auto& s : run.states) states.push_back(s[0]);
        detail::fill_diagnostics(g, species, pig, run.times, states, cfg.k_weight, rep);
        rep.final_state = states.back();
        SpeciesField M = maxwellian(g, species);
        rep.min_F = std::numeric_limits<double>::max();
        for (int i = 0; i < species.n_species; ++i)
            for (std::size_t p = 0; p < g.size(); ++p)
                rep.min_F = std::min(rep.min_F, M(i, p) + rep.final_state(i, p));
    } else {
        AssembledOperator L = assemble_L_sqrtM(ws_spectral, model, species, cfg.z);
        SpeciesField f0 = make_perturbation(g, species, cfg.pert, cfg.z);
        InvariantProjector pig(g, species, Variables::sqrtm);
        if (cfg.project_initial) pig.remove_invariants(f0);
        Eigen::Map<Eigen::VectorXd> x0(f0.data.data(), f0.data.size());
        Eigen::VectorXd x = x0;
        std::vector<double> times;
        std::vector<SpeciesField> states;
        const int steps = static_cast<int>(std::round(cfg.t_end / cfg.dt));
        detail::evolve_linear(L.A, x, cfg.dt, steps, cfg.output_stride,
                              [&](double t, const Eigen::VectorXd& xv) {
                                  times.push_back(t);
                                  SpeciesField s(species.n_species, g.size());
                                  std::copy(xv.data(), xv.data() + xv.size(), s.data.begin());
                                  states.push_back(std::move(s));
                              });
        detail::fill_diagnostics(g, species, pig, times, states, cfg.k_weight, rep);
        rep.final_state = states.back();
    }
    return rep;
}

// Deterministic reference runs at each z node (collocation oracle for the
// gPC error studies).
inline std::vector<RunReport> collocation_reference(const CollisionWorkspace& ws,
                                                    const CollisionWorkspace& ws_spectral,
                                                    const KernelModel& model, const SpeciesSet& species,
                                                    SimConfig cfg, const std::vector<double>& z_nodes) {
    std::vector<RunReport> out;
    cfg.unknown = SimConfig::Unknown::deterministic;
    for (double zn : z_nodes) {
        cfg.z = zn;
        out.push_back(run_homogeneous(ws, ws_spectral, model, species, cfg));
    }
    return out;
}

struct SgRunReport {
    std::vector<double> times;
    std::vector<std::vector<double>> mode_norms;  // [k][sample] L2v over species
    GpcField final_state;
};

// Linearized gPC-SG evolution d_t f_{i,k} = <L_i(f^K), psi_k>.
inline SgRunReport run_sg(const SgOperator& sg, const GpcBasis& basis, const VelocityGrid& g,
                          const SpeciesSet& species, const SimConfig& cfg) {
    cfg.validate();
    GpcField f(species.n_species, basis.K, g.size());
    // z-dependent initial data projected mode by mode (exact for the linear
    // z-profile of the perturbation spec)
    std::vector<double> psi;
    for (std::size_t m = 0; m < basis.quad_nodes.size(); ++m) {
        basis.eval(basis.quad_nodes[m], psi);
        SpeciesField fz = make_perturbation(g, species, cfg.pert, basis.quad_nodes[m]);
        for (int i = 0; i < species.n_species; ++i)
            for (int k = 0; k < basis.K; ++k) {
                auto mode = f.mode(i, k);
                const double wpsi = basis.quad_weights[m] * psi[k];
                for (std::size_t p = 0; p < g.size(); ++p) mode[p] += wpsi * fz(i, p);
            }
    }
    if (cfg.project_initial) {
        InvariantProjector pig(g, species, Variables::sqrtm);
        detail::project_modes_microscopic(pig, f);
    }

    SgRunReport rep;
    rep.mode_norms.assign(basis.K, {});
    const int steps = static_cast<int>(std::round(cfg.t_end / cfg.dt));
    auto record = [&](double t) {
        rep.times.push_back(t);
        for (int k = 0; k < basis.K; ++k) {
            double acc = 0.0;
            for (int i = 0; i < species.n_species; ++i) {
                auto m = f.mode(i, k);
                for (std::size_t p = 0; p < g.size(); ++p) acc += m[p] * m[p];
            }
            rep.mode_norms[k].push_back(std::sqrt(g.weight * acc));
        }
    };
    record(0.0);
    GpcField k1 = f, k2 = f, k3 = f, k4 = f, tmp = f;
    auto axpy = [](GpcField& ya, double a, const GpcField& xa) {
        for (std::size_t m = 0; m < ya.data.size(); ++m) ya.data[m] += a * xa.data[m];
    };
    for (int s = 0; s < steps; ++s) {
        k1 = sg.apply(f);
        tmp = f;
        axpy(tmp, 0.5 * cfg.dt, k1);
        k2 = sg.apply(tmp);
        tmp = f;
        axpy(tmp, 0.5 * cfg.dt, k2);
        k3 = sg.apply(tmp);
        tmp = f;
        axpy(tmp, cfg.dt, k3);
        k4 = sg.apply(tmp);
        axpy(f, cfg.dt / 6.0, k1);
        axpy(f, cfg.dt / 3.0, k2);
        axpy(f, cfg.dt / 3.0, k3);
        axpy(f, cfg.dt / 6.0, k4);
        if ((s + 1) % cfg.output_stride == 0 || s + 1 == steps) record((s + 1) * cfg.dt);
    }
    rep.final_state = f;
    return rep;
}

// 1D torus state: one unknown per x slice.
struct TorusState {
    int nx = 0;
    double x_period = 1.0;
    std::vector<SpeciesField> slices;
};

namespace detail {

// Exact advection for a transport half/full step by spectral phase shift in
// x, independently per (species, velocity point).
inline void transport_shift(TorusState& st, const VelocityGrid& g, double dt) {
    const int nx = st.nx;
    const double L = st.x_period;
    const int N = st.slices[0].n_species;
    std::vector<std::complex<double>> in(nx), freq(nx);
    const std::complex<double> I(0.0, 1.0);
    for (int i = 0; i < N; ++i) {
        for (std::size_t p = 0; p < g.size(); ++p) {
            const double v1 = g.points[p][0];
            if (v1 == 0.0) continue;
            for (int jx = 0; jx < nx; ++jx) in[jx] = st.slices[jx](i, p);
            // forward DFT
            for (int m = 0; m < nx; ++m) {
                std::complex<double> acc(0.0, 0.0);
                for (int jx = 0; jx < nx; ++jx)
                    acc += in[jx] * std::exp(-2.0 * std::numbers::pi * I * double(m * jx) / double(nx));
                freq[m] = acc / double(nx);
            }
            // phase shift and inverse DFT
            for (int jx = 0; jx < nx; ++jx) {
                std::complex<double> acc(0.0, 0.0);
                for (int m = 0; m < nx; ++m) {
                    const int mm = m <= nx / 2 ? m : m - nx;  // signed frequency
                    const std::complex<double> phase =
                        std::exp(-2.0 * std::numbers::pi * I * double(mm) * v1 * dt / L);
                    acc += freq[m] * phase *
                           std::exp(2.0 * std::numbers::pi * I * double(m * jx) / double(nx));
                }
                st.slices[jx](i, p) = acc.real();
            }
        }
    }
}

}  // namespace detail

struct TorusRunReport {
    std::vector<double> times;
    std::vector<double> norm_total;  // L1 over (x,v)
    TorusState final_state;
};

// Strang splitting on the 1D torus: transport half step, collision full
// step per slice, transport half step. collision_off disables the collision
// stage (free transport).
inline TorusRunReport run_torus1d(const CollisionWorkspace& ws, const KernelModel& model,
                                  const SpeciesSet& species, const SimConfig& cfg, TorusState state,
                                  bool collision_off = false) {
    cfg.validate();
    SensitivitySystem sys = build_sensitivity_system(ws, model, species, cfg.z, 0);
    ConservativeProjector proj(ws.grid, species);
    const ConservativeProjector* pp = cfg.conservative ? &proj : nullptr;
    const int steps = static_cast<int>(std::round(cfg.t_end / cfg.dt));
    TorusRunReport rep;
    auto record = [&](double t) {
        rep.times.push_back(t);
        double acc = 0.0;
        for (const auto& s : state.slices) acc += weighted_norm(ws.grid, s, NormKind::L1v_poly, 0.0);
        rep.norm_total.push_back(acc * state.x_period / state.nx);
    };
    record(0.0);
    std::vector<SpeciesField> y(1), kk(1);
    for (int s = 0; s < steps; ++s) {
        detail::transport_shift(state, ws.grid, 0.5 * cfg.dt);
        if (!collision_off) {
            for (auto& slice : state.slices) {
                // rk4 collision step on this slice
                y[0] = slice;
                std::vector<SpeciesField> k1(1), k2(1), k3(1), k4(1), tmp(1);
                detail::hierarchy_rhs(sys, ws, model, y, cfg.z, 0, pp, k1);
                tmp[0] = y[0];
                tmp[0].axpy(0.5 * cfg.dt, k1[0]);
                detail::hierarchy_rhs(sys, ws, model, tmp, cfg.z, 0, pp, k2);
                tmp[0] = y[0];
                tmp[0].axpy(0.5 * cfg.dt, k2[0]);
                detail::hierarchy_rhs(sys, ws, model, tmp, cfg.z, 0, pp, k3);
                tmp[0] = y[0];
                tmp[0].axpy(cfg.dt, k3[0]);
                detail::hierarchy_rhs(sys, ws, model, tmp, cfg.z, 0, pp, k4);
                y[0].axpy(cfg.dt / 6.0, k1[0]);
                y[0].axpy(cfg.dt / 3.0, k2[0]);
                y[0].axpy(cfg.dt / 3.0, k3[0]);
                y[0].axpy(cfg.dt / 6.0, k4[0]);
                slice = y[0];
            }
        }
        detail::transport_shift(state, ws.grid, 0.5 * cfg.dt);
        record((s + 1) * cfg.dt);
    }
    rep.final_state = std::move(state);
    return rep;
}

}  // namespace kmsuq
