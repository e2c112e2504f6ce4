#pragma once

#include <Eigen/Dense>
#include <optional>
#include <random>

#include "collision.hpp"

namespace kmsuq {

enum class InnerProduct { L2v, L2v_invM };

// Dense matrix representation of a linear(ized) operator on the discrete
// (species x gPC-mode x velocity) space, DOF index = (i*K + k)*n_points + p.
// `metric` holds the diagonal weights of the inner product in which symmetry
// of the bilinear form is asserted.
struct AssembledOperator {
    Eigen::MatrixXd A;
    int n_species = 0;
    std::size_t n_points = 0;
    int K = 1;
    InnerProduct ip = InnerProduct::L2v;
    Eigen::VectorXd metric;

    std::size_t dofs() const { return static_cast<std::size_t>(n_species) * K * n_points; }

    Eigen::VectorXd apply(const Eigen::VectorXd& x) const { return A * x; }

    SpeciesField apply(const SpeciesField& f) const {
        SpeciesField out(f.n_species, f.n_points, f.label);
        Eigen::Map<const Eigen::VectorXd> x(f.data.data(), f.data.size());
        Eigen::Map<Eigen::VectorXd> y(out.data.data(), out.data.size());
        y = A * x;
        return out;
    }
};

struct TruncationParams {
    double delta = 0.1;  // in (0,1)
};

namespace detail {

// C^2 quintic smoothstep on [0,1].
inline double smoothstep5(double t) {
    if (t <= 0.0) return 0.0;
    if (t >= 1.0) return 1.0;
    return t * t * t * (10.0 + t * (-15.0 + 6.0 * t));
}

inline double window_fall(double x, double a, double b) { return 1.0 - smoothstep5((x - a) / (b - a)); }
inline double window_rise(double x, double a, double b) { return smoothstep5((x - a) / (b - a)); }

}  // namespace detail

// Smooth truncation Theta_delta(v, v*, sigma): equals 1 on
//   {|v| <= 1/d, 2d <= |v-v*| <= 1/d, |cos theta| <= 1-2d}
// and vanishes outside
//   {|v| <= 2/d, d <= |v-v*| <= 2/d, |cos theta| <= 1-d},
// realized as a product of quintic smoothstep windows.
inline double theta_delta(const TruncationParams& tp, const Vec3& v, const Vec3& v_star, const Vec3& sigma) {
    const double d = tp.delta;
    if (!(d > 0.0 && d < 1.0)) throw std::invalid_argument("theta_delta: delta must lie in (0,1)");
    const Vec3 rel = v - v_star;
    const double s = norm(rel);
    const double u = s > 0.0 ? std::abs(dot(sigma, rel)) / s : 0.0;
    double w = detail::window_fall(norm(v), 1.0 / d, 2.0 / d);
    w *= detail::window_rise(s, d, 2.0 * d) * detail::window_fall(s, 1.0 / d, 2.0 / d);
    w *= detail::window_fall(std::min(u, 1.0), 1.0 - 2.0 * d, 1.0 - d);
    return w;
}

enum class GainWeight { full, truncated, complement };  // 1, Theta_delta, 1 - Theta_delta

namespace detail {

// Strong-form scatter assembly of the three-term gain integrand
//   sum_l C_il int W (M'*_l f'_i + M'_i f'*_l - M_i f*_l) d^k b_il Phi dsigma dv*
// in the PS (f = M + f) variables. With W = 1 and the standard collision
// frequency subtracted this is exactly the linearized operator L.
inline AssembledOperator assemble_gain3(const CollisionWorkspace& ws, const KernelModel& model,
                                        const SpeciesSet& species, double z, int deriv_order, GainWeight gw,
                                        const TruncationParams* tp) {
    check_deriv(model, deriv_order);
    const int N = species.n_species;
    const std::size_t np = ws.grid.size();
    AssembledOperator op;
    op.n_species = N;
    op.n_points = np;
    op.ip = InnerProduct::L2v_invM;
    op.A = Eigen::MatrixXd::Zero(N * np, N * np);
    SpeciesField M = maxwellian(ws.grid, species);
    op.metric = Eigen::VectorXd(N * np);
    for (int i = 0; i < N; ++i)
        for (std::size_t p = 0; p < np; ++p) op.metric[i * np + p] = ws.grid.weight / M(i, p);
    if (linear_vanishes(model, deriv_order)) return op;

    const double pref = std::pow(2.0 * std::numbers::pi, -0.5 * ws.grid.dim);
    std::vector<double> ctilde(N);
    for (int i = 0; i < N; ++i) ctilde[i] = species.c_inf[i] * pref;
    const std::size_t na = ws.grid.angular_nodes.size();

    parallel_for(np, [&](std::size_t p) {
        InterpStencil sa, sb;
        const Vec3 vp = ws.grid.points[p];
        const double mref_p = ws.mref[p];
        for (std::size_t q = 0; q < np; ++q) {
            if (q == p) continue;
            const Vec3 vq = ws.grid.points[q];
            const Vec3 rel = vp - vq;
            const double s = norm(rel);
            const Vec3 mid = 0.5 * (vp + vq);
            const double rad = 0.5 * s;
            const double mu = mref_p * ws.mref[q];
            for (std::size_t a = 0; a < na; ++a) {
                const Vec3& sg = ws.grid.angular_nodes[a];
                const Vec3 vpr = mid + rad * sg;
                const Vec3 vps = mid - rad * sg;
                if (!ws.stencil(vpr, sa) || !ws.stencil(vps, sb)) continue;
                double w = 1.0;
                if (gw != GainWeight::full) {
                    const double th = theta_delta(*tp, vp, vq, sg);
                    w = gw == GainWeight::truncated ? th : 1.0 - th;
                    if (w == 0.0) continue;
                }
                const double u = std::clamp(dot(sg, rel) / s, -1.0, 1.0);
                const double wgeo = ws.grid.weight * ws.grid.angular_weights[a] * w;
                for (int i = 0; i < N; ++i) {
                    const std::size_t row = i * np + p;
                    for (int l = 0; l < N; ++l) {
                        const double phis = model.gamma == 0.0
                                                ? model.phi_coef(i, l)
                                                : model.phi_coef(i, l) * std::pow(s, model.gamma);
                        const double coeff =
                            wgeo * phis * model.angular.eval(i, l, u, z, deriv_order);
                        if (coeff == 0.0) continue;
                        // M'*_l f'_i : interpolate ratio of species i at v'
                        const double t1 = coeff * ctilde[l] * mu;
                        for (int c = 0; c < sa.npts; ++c)
                            op.A(row, i * np + sa.idx[c]) += t1 * sa.w[c] * ws.inv_mref[sa.idx[c]];
                        // M'_i f'*_l : ratio of species l at v'*
                        const double t2 = coeff * ctilde[i] * mu;
                        for (int c = 0; c < sb.npts; ++c)
                            op.A(row, l * np + sb.idx[c]) += t2 * sb.w[c] * ws.inv_mref[sb.idx[c]];
                        // - M_i f*_l
                        op.A(row, l * np + q) -= coeff * ctilde[i] * mref_p;
                    }
                }
            }
        }
    });
    return op;
}

}  // namespace detail

// Diagonal collision-frequency operator (standard convention: the splitting
// identity A + B - nu = L holds exactly only with the M_j(v*) weight).
inline AssembledOperator assemble_nu(const CollisionWorkspace& ws, const KernelModel& model,
                                     const SpeciesSet& species, double z, int deriv_order = 0,
                                     NuConvention conv = NuConvention::standard) {
    SpeciesField nu =
        collision_frequency(ws, model, species, z, conv, deriv_order, NuQuadrature::operator_consistent);
    const int N = species.n_species;
    const std::size_t np = ws.grid.size();
    AssembledOperator op;
    op.n_species = N;
    op.n_points = np;
    op.ip = InnerProduct::L2v_invM;
    op.A = Eigen::MatrixXd::Zero(N * np, N * np);
    SpeciesField M = maxwellian(ws.grid, species);
    op.metric = Eigen::VectorXd(N * np);
    for (int i = 0; i < N; ++i)
        for (std::size_t p = 0; p < np; ++p) {
            op.A(i * np + p, i * np + p) = nu(i, p);
            op.metric[i * np + p] = ws.grid.weight / M(i, p);
        }
    return op;
}

// L in the unsymmetrized (PS) linearization: L_ij(f_i,f_j) = Q_ij(M_i,f_j) + Q_ij(f_i,M_j),
// assembled so that its action matches the collision-route evaluation to roundoff.
inline AssembledOperator assemble_L_plain(const CollisionWorkspace& ws, const KernelModel& model,
                                          const SpeciesSet& species, double z) {
    AssembledOperator op = detail::assemble_gain3(ws, model, species, z, 0, GainWeight::full, nullptr);
    AssembledOperator nu = assemble_nu(ws, model, species, z, 0, NuConvention::standard);
    op.A -= nu.A;
    return op;
}

// A^(delta), B^(delta) (and their d^k b variants) of the hypodissipative
// splitting G = A + B - nu.
inline std::pair<AssembledOperator, AssembledOperator> split_AB(const CollisionWorkspace& ws,
                                                                const KernelModel& model,
                                                                const SpeciesSet& species,
                                                                const TruncationParams& tp, double z,
                                                                int deriv_order = 0) {
    auto A = detail::assemble_gain3(ws, model, species, z, deriv_order, GainWeight::truncated, &tp);
    auto B = detail::assemble_gain3(ws, model, species, z, deriv_order, GainWeight::complement, &tp);
    return {std::move(A), std::move(B)};
}

// Weak-form (Dirichlet) assembly of the symmetrized linearization
//   <L f, g> = -1/4 sum_il int B_il M_i M*_l Theta_il[h_f] Theta_il[h_g],
// h = M^{-1/2} f. Symmetric and negative semidefinite by construction; with
// cubic stencils the discrete collision invariants lie exactly in the kernel,
// so the workspace must carry interp_order == 3. The optional angular
// override assembles the same form with a different angular profile (used by
// the gPC module for the b0/b1 building blocks).
inline AssembledOperator assemble_L_sqrtM(const CollisionWorkspace& ws, const KernelModel& model,
                                          const SpeciesSet& species, double z,
                                          const std::vector<AngularShape>* angular_override = nullptr) {
    if (ws.interp_order != 3)
        throw std::invalid_argument("assemble_L_sqrtM: weak-form assembly requires a cubic workspace");
    const int N = species.n_species;
    const std::size_t np = ws.grid.size();
    AssembledOperator op;
    op.n_species = N;
    op.n_points = np;
    op.ip = InnerProduct::L2v;
    op.A = Eigen::MatrixXd::Zero(N * np, N * np);
    op.metric = Eigen::VectorXd::Constant(N * np, ws.grid.weight);

    SpeciesField M = maxwellian(ws.grid, species);
    std::vector<double> inv_sqrt_m(static_cast<std::size_t>(N) * np);
    for (int i = 0; i < N; ++i)
        for (std::size_t p = 0; p < np; ++p) inv_sqrt_m[i * np + p] = 1.0 / std::sqrt(M(i, p));

    const std::size_t na = ws.grid.angular_nodes.size();
    const double quarter = 0.25 / ws.grid.weight;  // matrix = -(1/4w) sum kappa theta theta^T
    struct Entry {
        std::uint32_t idx;
        double val;
    };
    std::vector<Entry> theta;
    theta.reserve(2 * 64 + 2);
    InterpStencil sa, sb;

    for (std::size_t p = 0; p < np; ++p) {
        const Vec3 vp = ws.grid.points[p];
        for (std::size_t q = 0; q < np; ++q) {
            if (q == p) continue;
            const Vec3 vq = ws.grid.points[q];
            const Vec3 rel = vp - vq;
            const double s = norm(rel);
            const Vec3 mid = 0.5 * (vp + vq);
            const double rad = 0.5 * s;
            for (std::size_t a = 0; a < na; ++a) {
                const Vec3& sg = ws.grid.angular_nodes[a];
                if (!ws.stencil(mid + rad * sg, sa) || !ws.stencil(mid - rad * sg, sb)) continue;
                const double u = std::clamp(dot(sg, rel) / s, -1.0, 1.0);
                const double wgeo = ws.grid.weight * ws.grid.weight * ws.grid.angular_weights[a];
                for (int i = 0; i < N; ++i) {
                    for (int l = 0; l < N; ++l) {
                        const double phis = model.gamma == 0.0
                                                ? model.phi_coef(i, l)
                                                : model.phi_coef(i, l) * std::pow(s, model.gamma);
                        double bval;
                        if (angular_override)
                            bval = (*angular_override)[static_cast<std::size_t>(i) * N + l](u);
                        else
                            bval = model.angular.eval(i, l, u, z, 0);
                        const double kappa = wgeo * phis * bval * M(i, p) * M(l, q);
                        if (kappa == 0.0) continue;
                        theta.clear();
                        for (int c = 0; c < sa.npts; ++c)
                            theta.push_back({static_cast<std::uint32_t>(i * np + sa.idx[c]),
                                             sa.w[c] * inv_sqrt_m[i * np + sa.idx[c]]});
                        for (int c = 0; c < sb.npts; ++c)
                            theta.push_back({static_cast<std::uint32_t>(l * np + sb.idx[c]),
                                             sb.w[c] * inv_sqrt_m[l * np + sb.idx[c]]});
                        theta.push_back({static_cast<std::uint32_t>(i * np + p), -inv_sqrt_m[i * np + p]});
                        theta.push_back({static_cast<std::uint32_t>(l * np + q), -inv_sqrt_m[l * np + q]});
                        const double fac = quarter * kappa;
                        for (const auto& er : theta) {
                            const double fv = fac * er.val;
                            for (const auto& ec : theta) op.A(er.idx, ec.idx) -= fv * ec.val;
                        }
                    }
                }
            }
        }
    }
    return op;
}

enum class ProjectorMode { homogeneous, with_transport };
enum class Variables { ps, sqrtm };

// Orthogonal projector onto the span of the discrete collision invariants
// (dimension N + dim + 1) in the inner product matching the chosen variables.
class InvariantProjector {
  public:
    InvariantProjector(const VelocityGrid& g, const SpeciesSet& s, Variables vars) : vars_(vars) {
        const int N = s.n_species;
        const int dim = g.dim;
        n_inv_ = N + dim + 1;
        np_ = g.size();
        n_species_ = N;
        weight_ = g.weight;
        SpeciesField M = maxwellian(g, s);
        U_.resize(static_cast<std::size_t>(N) * np_, n_inv_);
        auto fill = [&](int col, auto&& phi) {
            for (int i = 0; i < N; ++i)
                for (std::size_t p = 0; p < np_; ++p) {
                    double base = vars == Variables::sqrtm ? std::sqrt(M(i, p)) : M(i, p);
                    U_(i * np_ + p, col) = base * phi(i, p);
                }
        };
        int col = 0;
        for (int a = 0; a < N; ++a) fill(col++, [&](int i, std::size_t) { return i == a ? 1.0 : 0.0; });
        for (int d = 0; d < dim; ++d) fill(col++, [&, d](int, std::size_t p) { return g.points[p][d]; });
        fill(col++, [&](int, std::size_t p) { return norm2(g.points[p]); });

        // metric of the inner product per DOF
        metric_ = Eigen::VectorXd(static_cast<std::size_t>(N) * np_);
        for (int i = 0; i < N; ++i)
            for (std::size_t p = 0; p < np_; ++p)
                metric_[i * np_ + p] = vars == Variables::sqrtm ? weight_ : weight_ / M(i, p);

        Eigen::MatrixXd G = U_.transpose() * metric_.asDiagonal() * U_;
        Eigen::FullPivLU<Eigen::MatrixXd> lu(G);
        if (!lu.isInvertible()) throw std::runtime_error("projector_PiG: singular invariant Gram matrix");
        Ginv_ = lu.inverse();
    }

    int rank() const { return n_inv_; }
    Variables variables() const { return vars_; }

    Eigen::VectorXd project(const Eigen::VectorXd& x) const {
        return U_ * (Ginv_ * (U_.transpose() * (metric_.asDiagonal() * x)));
    }

    void remove_invariants(SpeciesField& f) const {
        Eigen::Map<Eigen::VectorXd> x(f.data.data(), f.data.size());
        x -= project(x);
    }

    Eigen::MatrixXd matrix() const {
        return U_ * Ginv_ * U_.transpose() * metric_.asDiagonal();
    }

    const Eigen::VectorXd& metric() const { return metric_; }

  private:
    Variables vars_;
    int n_inv_ = 0, n_species_ = 0;
    std::size_t np_ = 0;
    double weight_ = 0.0;
    Eigen::MatrixXd U_, Ginv_;
    Eigen::VectorXd metric_;
};

inline AssembledOperator projector_PiG(const VelocityGrid& g, const SpeciesSet& s,
                                       ProjectorMode mode = ProjectorMode::homogeneous,
                                       Variables vars = Variables::sqrtm) {
    // with_transport keeps the same x-constant invariants; the x-average is
    // taken by the solver before applying this velocity-space projector.
    (void)mode;
    InvariantProjector pi(g, s, vars);
    AssembledOperator op;
    op.n_species = s.n_species;
    op.n_points = g.size();
    op.ip = vars == Variables::sqrtm ? InnerProduct::L2v : InnerProduct::L2v_invM;
    op.A = pi.matrix();
    op.metric = pi.metric();
    return op;
}

struct SpectrumReport {
    std::vector<double> eigenvalues;  // descending
    int zero_multiplicity = 0;
    double gap = 0.0;
    double symmetry_defect = 0.0;
    double tol_zero = 0.0;
};

// Dense symmetric eigenanalysis in the operator's own inner-product
// geometry; the operator is symmetrized defensively and the defect reported.
// Kernel detection uses tol_zero = 1e-8 * max |eigenvalue|.
inline SpectrumReport spectral_analysis(const AssembledOperator& op, double tol_zero_factor = 1e-8) {
    const std::size_t n = op.A.rows();
    Eigen::VectorXd d = op.metric.array().sqrt();
    Eigen::VectorXd dinv = d.cwiseInverse();
    Eigen::MatrixXd S = d.asDiagonal() * op.A * dinv.asDiagonal();
    SpectrumReport rep;
    const double nrm = S.norm();
    rep.symmetry_defect = nrm > 0.0 ? (S - S.transpose()).norm() / nrm : 0.0;
    Eigen::MatrixXd Ssym = 0.5 * (S + S.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Ssym, Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) throw std::runtime_error("spectral_analysis: eigensolver failed");
    rep.eigenvalues.assign(es.eigenvalues().data(), es.eigenvalues().data() + n);
    std::sort(rep.eigenvalues.begin(), rep.eigenvalues.end(), std::greater<double>());
    double amax = 0.0;
    for (double ev : rep.eigenvalues) amax = std::max(amax, std::abs(ev));
    rep.tol_zero = tol_zero_factor * amax;
    double gap_candidate = 0.0;
    for (double ev : rep.eigenvalues) {
        if (std::abs(ev) <= rep.tol_zero) {
            ++rep.zero_multiplicity;
        } else if (ev < 0.0) {
            if (gap_candidate == 0.0) gap_candidate = -ev;
            gap_candidate = std::min(gap_candidate, -ev);
        }
    }
    rep.gap = gap_candidate;
    return rep;
}

// P_perp * A * P_perp: pins the invariant directions to exact zero so kernel
// multiplicity and gap detection are robust against O(h^2) leakage of the
// strong-form discretization.
inline AssembledOperator restrict_microscopic(const AssembledOperator& op, const InvariantProjector& pi) {
    Eigen::MatrixXd P = Eigen::MatrixXd::Identity(op.A.rows(), op.A.cols()) - pi.matrix();
    AssembledOperator out = op;
    out.A = P * op.A * P;
    return out;
}

struct ConstantsReport {
    double beta = 0.0;
    std::vector<double> k_values;
    std::vector<double> c_b_hat;  // per k
    std::vector<double> c_a_hat;  // per k
    int k0_hat = -1;              // first k with C_B < 1, -1 if none
};

// Probe-based estimates of the Lemma constants: C_B in the
// L1_v(<v>^k nu) -> L1_v(<v>^k) pairing and C_A into L^inf(<v>^beta M^{-1/2}).
inline ConstantsReport estimate_operator_constants(const AssembledOperator& A_op, const AssembledOperator& B_op,
                                                   const VelocityGrid& g, const SpeciesSet& species,
                                                   const SpeciesField& nu, const std::vector<double>& k_values,
                                                   double beta, int probes, std::uint64_t seed = 2024) {
    if (probes < 100) throw std::invalid_argument("estimate_operator_constants: need at least 100 probes");
    ConstantsReport rep;
    rep.beta = beta;
    rep.k_values = k_values;
    rep.c_b_hat.assign(k_values.size(), 0.0);
    rep.c_a_hat.assign(k_values.size(), 0.0);
    SpeciesField M = maxwellian(g, species);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const int N = species.n_species;
    for (int t = 0; t < probes; ++t) {
        SpeciesField f(N, g.size(), "probe");
        for (int i = 0; i < N; ++i)
            for (std::size_t p = 0; p < g.size(); ++p)
                f(i, p) = gauss(rng) * std::exp(-0.25 * norm2(g.points[p]));
        SpeciesField Bf = B_op.apply(f);
        SpeciesField Af = A_op.apply(f);
        for (std::size_t ik = 0; ik < k_values.size(); ++ik) {
            const double k = k_values[ik];
            const double num = weighted_norm(g, Bf, NormKind::L1v_poly, k);
            const double den = weighted_norm(g, f, NormKind::L1v_poly_nu, k, 0.0, &nu);
            if (den > 0.0) rep.c_b_hat[ik] = std::max(rep.c_b_hat[ik], num / den);
            double sup = 0.0;
            for (int i = 0; i < N; ++i)
                for (std::size_t p = 0; p < g.size(); ++p)
                    sup = std::max(sup, std::abs(Af(i, p)) * std::pow(bracket(g.points[p]), beta) /
                                            std::sqrt(M(i, p)));
            const double denA = weighted_norm(g, f, NormKind::L1v_poly, k);
            if (denA > 0.0) rep.c_a_hat[ik] = std::max(rep.c_a_hat[ik], sup / denA);
        }
    }
    for (std::size_t ik = 0; ik < k_values.size(); ++ik)
        if (rep.c_b_hat[ik] < 1.0) {
            rep.k0_hat = static_cast<int>(k_values[ik]);
            break;
        }
    return rep;
}

}  // namespace kmsuq
