#pragma once

#include <Eigen/Dense>
#include <functional>

#include "linop.hpp"

namespace kmsuq {

// Probability measure pi(z) dz with compact support [-c_z, c_z]. A null
// weight function means uniform; custom weights are normalized internally.
struct GpcMeasure {
    double c_z = 1.0;
    std::function<double(double)> weight;  // un-normalized density, may be null
    std::string name = "uniform";
};

// Orthonormal polynomial basis for pi stored as a three-term recurrence
//   z psi_k = sqrt(b_{k+1}) psi_{k+1} + a_k psi_k + sqrt(b_k) psi_{k-1},
// with psi_1 = 1 (paper indexing k = 1..K). The Jacobi matrix of the
// recurrence is the z-multiplication operator, tridiagonal by construction.
struct GpcBasis {
    int K = 0;
    GpcMeasure measure;
    std::vector<double> alpha;  // recurrence alpha_0..alpha_{m-1}
    std::vector<double> beta;   // beta_0 = 1 (normalized), beta_1..beta_{m-1}
    std::vector<double> quad_nodes;
    std::vector<double> quad_weights;

    // psi_1..psi_K at z (0-based storage: out[k] = psi_{k+1})
    void eval(double z, std::vector<double>& out) const {
        out.resize(K);
        double pm1 = 0.0, p = 1.0;
        out[0] = p;
        for (int k = 1; k < K; ++k) {
            double pn = ((z - alpha[k - 1]) * p - (k >= 2 ? std::sqrt(beta[k - 1]) : 0.0) * pm1) /
                        std::sqrt(beta[k]);
            pm1 = p;
            p = pn;
            out[k] = p;
        }
    }

    // K x K Jacobi matrix J_{kj} = int z psi_k psi_j dpi
    Eigen::MatrixXd jacobi() const {
        Eigen::MatrixXd J = Eigen::MatrixXd::Zero(K, K);
        for (int k = 0; k < K; ++k) {
            J(k, k) = alpha[k];
            if (k + 1 < K) J(k, k + 1) = J(k + 1, k) = std::sqrt(beta[k + 1]);
        }
        return J;
    }
};

namespace detail {

// Discrete Stieltjes on a fine quadrature of the measure.
inline void stieltjes(const std::vector<double>& x, const std::vector<double>& w, int m,
                      std::vector<double>& alpha, std::vector<double>& beta) {
    const std::size_t n = x.size();
    std::vector<double> pm1(n, 0.0), p(n, 1.0);
    alpha.assign(m, 0.0);
    beta.assign(m, 0.0);
    beta[0] = 1.0;
    for (int k = 0; k < m; ++k) {
        double a = 0.0;
        for (std::size_t s = 0; s < n; ++s) a += w[s] * x[s] * p[s] * p[s];
        alpha[k] = a;
        if (k + 1 == m) break;
        std::vector<double> pn(n);
        double nrm2 = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
            pn[s] = (x[s] - a) * p[s] - (k >= 1 ? std::sqrt(beta[k]) : 0.0) * pm1[s];
            nrm2 += w[s] * pn[s] * pn[s];
        }
        beta[k + 1] = nrm2;
        const double inv = 1.0 / std::sqrt(nrm2);
        for (std::size_t s = 0; s < n; ++s) {
            pm1[s] = p[s];
            p[s] = pn[s] * inv;
        }
    }
}

}  // namespace detail

// Gauss rule for the basis measure via Golub-Welsch on the recurrence.
inline void gauss_rule(const std::vector<double>& alpha, const std::vector<double>& beta, int n,
                       std::vector<double>& nodes, std::vector<double>& weights) {
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
    for (int k = 0; k < n; ++k) {
        J(k, k) = alpha[k];
        if (k + 1 < n) J(k, k + 1) = J(k + 1, k) = std::sqrt(beta[k + 1]);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    nodes.resize(n);
    weights.resize(n);
    for (int k = 0; k < n; ++k) {
        nodes[k] = es.eigenvalues()[k];
        const double v0 = es.eigenvectors()(0, k);
        weights[k] = v0 * v0;  // beta_0 = 1 for a probability measure
    }
}

// Builds the orthonormal basis; the Gauss rule carries 2K+4 points so every
// triple product of total degree <= 2K+1 is integrated exactly.
inline GpcBasis build_basis(const GpcMeasure& measure, int K) {
    if (K < 1) throw std::invalid_argument("build_basis: K must be >= 1");
    if (!(measure.c_z > 0.0)) throw std::invalid_argument("build_basis: measure support must be positive");
    GpcBasis b;
    b.K = K;
    b.measure = measure;
    const int m = std::max(2 * K + 6, K + 2);
    if (!measure.weight) {
        // uniform on [-c_z, c_z]: scaled Legendre recurrence
        b.alpha.assign(m, 0.0);
        b.beta.assign(m, 0.0);
        b.beta[0] = 1.0;
        for (int k = 1; k < m; ++k) {
            const double kk = static_cast<double>(k);
            b.beta[k] = measure.c_z * measure.c_z * kk * kk / (4.0 * kk * kk - 1.0);
        }
    } else {
        // fine composite Gauss-Legendre discretization of the weight
        const int panels = 200, per = 8;
        std::vector<double> gx, gw;
        detail::gauss_legendre(per, gx, gw);
        std::vector<double> x, w;
        double mass = 0.0;
        for (int s = 0; s < panels; ++s) {
            const double a = -measure.c_z + 2.0 * measure.c_z * s / panels;
            const double hb = 2.0 * measure.c_z / panels;
            for (int t = 0; t < per; ++t) {
                const double zz = a + 0.5 * hb * (gx[t] + 1.0);
                const double ww = 0.5 * hb * gw[t] * measure.weight(zz);
                if (ww < 0.0) throw std::invalid_argument("build_basis: measure weight must be nonnegative");
                x.push_back(zz);
                w.push_back(ww);
                mass += ww;
            }
        }
        if (!(mass > 0.0)) throw std::invalid_argument("build_basis: degenerate measure");
        for (double& ww : w) ww /= mass;
        detail::stieltjes(x, w, m, b.alpha, b.beta);
    }
    gauss_rule(b.alpha, b.beta, 2 * K + 4, b.quad_nodes, b.quad_weights);
    for (double zn : b.quad_nodes)
        if (std::abs(zn) > measure.c_z * (1.0 + 1e-12))
            throw std::runtime_error("build_basis: quadrature node escapes the compact support");
    return b;
}

// Galerkin projection of z-samples taken at the basis quadrature nodes.
inline std::vector<double> project_function(const GpcBasis& b, const std::vector<double>& samples) {
    if (samples.size() != b.quad_nodes.size())
        throw std::invalid_argument("project_function: sample/node count mismatch");
    std::vector<double> c(b.K, 0.0), psi;
    for (std::size_t m = 0; m < samples.size(); ++m) {
        b.eval(b.quad_nodes[m], psi);
        for (int k = 0; k < b.K; ++k) c[k] += b.quad_weights[m] * samples[m] * psi[k];
    }
    return c;
}

inline double reconstruct(const GpcBasis& b, const std::vector<double>& coeffs, double z) {
    std::vector<double> psi;
    b.eval(z, psi);
    double acc = 0.0;
    for (int k = 0; k < b.K; ++k) acc += coeffs[k] * psi[k];
    return acc;
}

// gPC coefficient fields f_{i,k}(v), DOF layout (i*K + k)*n_points + p.
struct GpcField {
    int n_species = 0;
    int K = 0;
    std::size_t n_points = 0;
    std::vector<double> data;

    GpcField() = default;
    GpcField(int ns, int k, std::size_t np)
        : n_species(ns), K(k), n_points(np), data(static_cast<std::size_t>(ns) * k * np, 0.0) {}

    double& operator()(int i, int k, std::size_t p) {
        return data[(static_cast<std::size_t>(i) * K + k) * n_points + p];
    }
    double operator()(int i, int k, std::size_t p) const {
        return data[(static_cast<std::size_t>(i) * K + k) * n_points + p];
    }
    std::span<double> mode(int i, int k) {
        return {data.data() + (static_cast<std::size_t>(i) * K + k) * n_points, n_points};
    }
    std::span<const double> mode(int i, int k) const {
        return {data.data() + (static_cast<std::size_t>(i) * K + k) * n_points, n_points};
    }

    // f^K(z) as a species field
    SpeciesField at_z(const GpcBasis& b, double z) const {
        std::vector<double> psi;
        b.eval(z, psi);
        SpeciesField f(n_species, n_points, "gpc_reconstruction");
        for (int i = 0; i < n_species; ++i)
            for (int k = 0; k < K; ++k) {
                auto m = mode(i, k);
                for (std::size_t p = 0; p < n_points; ++p) f(i, p) += psi[k] * m[p];
            }
        return f;
    }
};

// Angular coefficient structure S~_{i,l,k,j}(u): for each separable term of
// the angular model a shape factor times a K x K z-coupling matrix, computed
// structurally (identity / Jacobi) for polynomial z-factors of degree <= 1
// and by Gauss quadrature otherwise.
struct STensor {
    int K = 0;
    bool tridiagonal = false;  // true for linear-in-z kernels
    Eigen::MatrixXd J;
    std::vector<Eigen::MatrixXd> couplings;  // one per angular term

    double entry(const AngularModel& ang, int i, int l, double u, int k, int j) const {
        double acc = 0.0;
        for (std::size_t m = 0; m < ang.terms.size(); ++m)
            acc += ang.shape(ang.terms[m], i, l)(u) * couplings[m](k, j);
        return acc;
    }
};

inline STensor assemble_S_tensor(const GpcBasis& b, const KernelModel& model) {
    if (model.angular.n_species != model.n_species)
        throw std::invalid_argument("assemble_S_tensor: species count mismatch");
    STensor st;
    st.K = b.K;
    st.J = b.jacobi();
    st.tridiagonal = model.angular.kind == AngularModel::Kind::linear_in_z;
    std::vector<double> psi;
    for (const auto& term : model.angular.terms) {
        Eigen::MatrixXd G;
        if (term.zf.kind == ZFactor::Kind::poly && term.zf.degree == 0) {
            G = Eigen::MatrixXd::Identity(b.K, b.K);
        } else if (term.zf.kind == ZFactor::Kind::poly && term.zf.degree == 1) {
            G = st.J;
        } else {
            G = Eigen::MatrixXd::Zero(b.K, b.K);
            for (std::size_t m = 0; m < b.quad_nodes.size(); ++m) {
                b.eval(b.quad_nodes[m], psi);
                const double g = term.zf.eval(b.quad_nodes[m], 0);
                for (int k = 0; k < b.K; ++k)
                    for (int j = 0; j < b.K; ++j) G(k, j) += b.quad_weights[m] * g * psi[k] * psi[j];
            }
        }
        st.couplings.push_back(std::move(G));
    }
    return st;
}

// Linearized gPC-SG operator on coefficient fields: block (k,j) couples
// through the z-coupling of each angular term; for linear-in-z kernels only
// |k - j| <= 1 blocks are ever written, so the tridiagonal structure is
// exact. Base blocks are weak-form symmetric operators, hence the whole SG
// operator is symmetric and negative semidefinite.
struct SgOperator {
    int n_species = 0;
    int K = 0;
    std::size_t n_points = 0;
    STensor st;
    std::vector<Eigen::MatrixXd> base;  // one (N np)^2 matrix per angular term
    double quad_weight = 0.0;

    GpcField apply(const GpcField& f) const {
        GpcField out(f.n_species, K, f.n_points);
        const std::size_t nb = static_cast<std::size_t>(n_species) * n_points;
        Eigen::VectorXd xj(nb), yk(nb);
        for (int j = 0; j < K; ++j) {
            for (int i = 0; i < n_species; ++i) {
                auto m = f.mode(i, j);
                for (std::size_t p = 0; p < n_points; ++p) xj[i * n_points + p] = m[p];
            }
            for (std::size_t t = 0; t < base.size(); ++t) {
                for (int k = 0; k < K; ++k) {
                    const double g = st.couplings[t](k, j);
                    if (g == 0.0) continue;
                    yk = g * (base[t] * xj);
                    for (int i = 0; i < n_species; ++i) {
                        auto m = out.mode(i, k);
                        for (std::size_t p = 0; p < n_points; ++p) m[p] += yk[i * n_points + p];
                    }
                }
            }
        }
        return out;
    }

    AssembledOperator dense(std::size_t dense_limit = 12000) const {
        const std::size_t dofs = static_cast<std::size_t>(n_species) * K * n_points;
        if (dofs > dense_limit)
            throw std::runtime_error("assemble_sg_operator: size exceeds the dense limit; use the matrix-free apply");
        AssembledOperator op;
        op.n_species = n_species;
        op.n_points = n_points;
        op.K = K;
        op.ip = InnerProduct::L2v;
        op.A = Eigen::MatrixXd::Zero(dofs, dofs);
        op.metric = Eigen::VectorXd::Constant(dofs, quad_weight);
        for (std::size_t t = 0; t < base.size(); ++t)
            for (int k = 0; k < K; ++k)
                for (int j = 0; j < K; ++j) {
                    const double g = st.couplings[t](k, j);
                    if (g == 0.0) continue;
                    for (int i = 0; i < n_species; ++i)
                        for (int l = 0; l < n_species; ++l)
                            op.A.block((static_cast<std::size_t>(i) * K + k) * n_points,
                                       (static_cast<std::size_t>(l) * K + j) * n_points, n_points, n_points) +=
                                g * base[t].block(i * n_points, l * n_points, n_points, n_points);
                }
        return op;
    }
};

inline SgOperator build_sg_operator(const CollisionWorkspace& ws, const KernelModel& model,
                                    const GpcBasis& basis, const SpeciesSet& species) {
    SgOperator sg;
    sg.n_species = species.n_species;
    sg.K = basis.K;
    sg.n_points = ws.grid.size();
    sg.st = assemble_S_tensor(basis, model);
    sg.quad_weight = ws.grid.weight;
    for (const auto& term : model.angular.terms) {
        AssembledOperator Lb = assemble_L_sqrtM(ws, model, species, 0.0, &term.shape);
        sg.base.push_back(std::move(Lb.A));
    }
    return sg;
}

inline AssembledOperator assemble_sg_operator(const CollisionWorkspace& ws, const KernelModel& model,
                                              const GpcBasis& basis, const SpeciesSet& species) {
    return build_sg_operator(ws, model, basis, species).dense();
}

struct TermIReport {
    double value = 0.0;
    double lambda_weighted_norm = 0.0;
    double ratio = 0.0;
    bool ratio_defined = false;
};

namespace detail {

inline void project_modes_microscopic(const InvariantProjector& pi, GpcField& f) {
    SpeciesField slice(f.n_species, f.n_points);
    for (int k = 0; k < f.K; ++k) {
        for (int i = 0; i < f.n_species; ++i) {
            auto m = f.mode(i, k);
            std::copy(m.begin(), m.end(), slice.species(i).begin());
        }
        pi.remove_invariants(slice);
        for (int i = 0; i < f.n_species; ++i) {
            auto m = f.mode(i, k);
            auto s = slice.species(i);
            std::copy(s.begin(), s.end(), m.begin());
        }
    }
}

}  // namespace detail

// Term I = sum_{i,k} k^{2q} <(SG f)_{i,k}, f_{i,k}>_{L2v} on the microscopic
// part of f, together with the weighted Lambda-norm sum_{i,k} k^{2q}
// ||f_{i,k}||_Lambda^2 and the empirical gap constant ratio = -value / norm.
inline TermIReport term_I(const SgOperator& sg, const CollisionWorkspace& ws, const KernelModel& model,
                          const SpeciesSet& species, GpcField f, int q) {
    if (q < 0) throw std::invalid_argument("term_I: q must be >= 0");
    InvariantProjector pi(ws.grid, species, Variables::sqrtm);
    detail::project_modes_microscopic(pi, f);
    GpcField y = sg.apply(f);
    TermIReport rep;
    const double w = ws.grid.weight;
    for (int i = 0; i < f.n_species; ++i)
        for (int k = 0; k < f.K; ++k) {
            const double kw = std::pow(static_cast<double>(k + 1), 2 * q);
            auto fm = f.mode(i, k);
            auto ym = y.mode(i, k);
            double dotv = 0.0, lam = 0.0;
            for (std::size_t p = 0; p < f.n_points; ++p) {
                dotv += ym[p] * fm[p];
                lam += fm[p] * fm[p] * std::pow(bracket(ws.grid.points[p]), model.gamma);
            }
            rep.value += kw * w * dotv;
            rep.lambda_weighted_norm += kw * w * lam;
        }
    if (rep.lambda_weighted_norm > 0.0) {
        rep.ratio = -rep.value / rep.lambda_weighted_norm;
        rep.ratio_defined = true;
    }
    return rep;
}

// Term I through the symmetrized route
//   -1/4 sum_{i,l,k,j} k^{2q} int Phi_il S~_{i,l,k,j}(u) M_i M*_l
//        Theta_il[h_j] Theta_il[h_k],
// evaluated by direct summation over admissible triples. Matching the direct
// route is the executable content of the three change-of-variable steps.
inline double symmetrize_term_I(const GpcBasis& basis, const CollisionWorkspace& ws, const KernelModel& model,
                                const SpeciesSet& species, GpcField f, int q) {
    if (ws.interp_order != 3)
        throw std::invalid_argument("symmetrize_term_I: requires the cubic spectral workspace");
    InvariantProjector pi(ws.grid, species, Variables::sqrtm);
    detail::project_modes_microscopic(pi, f);
    STensor st = assemble_S_tensor(basis, model);

    const int N = species.n_species;
    const int K = basis.K;
    const std::size_t np = ws.grid.size();
    SpeciesField M = maxwellian(ws.grid, species);
    // h_{i,k} = M_i^{-1/2} f_{i,k}
    GpcField h = f;
    for (int i = 0; i < N; ++i)
        for (int k = 0; k < K; ++k) {
            auto m = h.mode(i, k);
            for (std::size_t p = 0; p < np; ++p) m[p] /= std::sqrt(M(i, p));
        }

    std::vector<double> kw(K);
    for (int k = 0; k < K; ++k) kw[k] = std::pow(static_cast<double>(k + 1), 2 * q);

    const std::size_t na = ws.grid.angular_nodes.size();
    std::vector<double> partial(np, 0.0);
    parallel_for(np, [&](std::size_t p) {
        InterpStencil sa, sb;
        std::vector<double> thi(K);
        double acc = 0.0;
        const Vec3 vp = ws.grid.points[p];
        for (std::size_t qq = 0; qq < np; ++qq) {
            if (qq == p) continue;
            const Vec3 vq = ws.grid.points[qq];
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
                        const double kgeo = wgeo * phis * M(i, p) * M(l, qq);
                        // Theta_il[h_j] for all modes j
                        for (int j = 0; j < K; ++j) {
                            double t = -h(i, j, p) - h(l, j, qq);
                            auto hi = h.mode(i, j);
                            auto hl = h.mode(l, j);
                            for (int c = 0; c < sa.npts; ++c) t += sa.w[c] * hi[sa.idx[c]];
                            for (int c = 0; c < sb.npts; ++c) t += sb.w[c] * hl[sb.idx[c]];
                            thi[j] = t;
                        }
                        double quad = 0.0;
                        for (std::size_t m = 0; m < st.couplings.size(); ++m) {
                            const double shape = model.angular.shape(model.angular.terms[m], i, l)(u);
                            if (shape == 0.0) continue;
                            double qsum = 0.0;
                            for (int k = 0; k < K; ++k)
                                for (int j = 0; j < K; ++j) {
                                    const double g = st.couplings[m](k, j);
                                    if (g != 0.0) qsum += kw[k] * g * thi[j] * thi[k];
                                }
                            quad += shape * qsum;
                        }
                        acc += kgeo * quad;
                    }
                }
            }
        }
        partial[p] = acc;
    });
    double total = 0.0;
    for (double x : partial) total += x;
    return -0.25 * total;
}

// Dissipation bound through the D-operator route: replaces the z-coupled
// angular structure by the (B2) slack profile D_il(u) = b0 - (2^q+2)|b1| C_z,
//   T_D = -1/4 sum_{i,l,k} k^{2q} int Phi_il D_il M_i M*_l Theta_il[h_k]^2.
// Under (B2) this lies between Term I and zero. Linear-in-z kernels only.
inline double term_I_dissipation_bound(const GpcBasis& basis, const CollisionWorkspace& ws,
                                       const KernelModel& model, const SpeciesSet& species, GpcField f,
                                       int q) {
    if (model.angular.kind != AngularModel::Kind::linear_in_z)
        throw std::invalid_argument("term_I_dissipation_bound: needs a linear-in-z kernel");
    if (ws.interp_order != 3)
        throw std::invalid_argument("term_I_dissipation_bound: requires the cubic spectral workspace");
    InvariantProjector pi(ws.grid, species, Variables::sqrtm);
    detail::project_modes_microscopic(pi, f);

    const int N = species.n_species;
    const int K = basis.K;
    const std::size_t np = ws.grid.size();
    const double c_z = basis.measure.c_z;
    const double dq = std::pow(2.0, q) + 2.0;
    SpeciesField M = maxwellian(ws.grid, species);
    GpcField h = f;
    for (int i = 0; i < N; ++i)
        for (int k = 0; k < K; ++k) {
            auto m = h.mode(i, k);
            for (std::size_t p = 0; p < np; ++p) m[p] /= std::sqrt(M(i, p));
        }
    std::vector<double> kw(K);
    for (int k = 0; k < K; ++k) kw[k] = std::pow(static_cast<double>(k + 1), 2 * q);

    const std::size_t na = ws.grid.angular_nodes.size();
    std::vector<double> partial(np, 0.0);
    parallel_for(np, [&](std::size_t p) {
        InterpStencil sa, sb;
        double acc = 0.0;
        const Vec3 vp = ws.grid.points[p];
        for (std::size_t qq = 0; qq < np; ++qq) {
            if (qq == p) continue;
            const Vec3 vq = ws.grid.points[qq];
            const Vec3 rel = vp - vq;
            const double s = norm(rel);
            const Vec3 mid = 0.5 * (vp + vq);
            const double rad = 0.5 * s;
            for (std::size_t a = 0; a < na; ++a) {
                const Vec3& sg = ws.grid.angular_nodes[a];
                if (!ws.stencil(mid + rad * sg, sa) || !ws.stencil(mid - rad * sg, sb)) continue;
                const double u = std::clamp(dot(sg, rel) / s, -1.0, 1.0);
                const double wgeo = ws.grid.weight * ws.grid.weight * ws.grid.angular_weights[a];
                for (int i = 0; i < N; ++i)
                    for (int l = 0; l < N; ++l) {
                        const double phis = model.gamma == 0.0
                                                ? model.phi_coef(i, l)
                                                : model.phi_coef(i, l) * std::pow(s, model.gamma);
                        const double b0 = model.angular.shape(model.angular.terms[0], i, l)(u);
                        const double b1 = model.angular.shape(model.angular.terms[1], i, l)(u);
                        const double dil = b0 - dq * std::abs(b1) * c_z;
                        const double kgeo = wgeo * phis * dil * M(i, p) * M(l, qq);
                        double qsum = 0.0;
                        for (int k = 0; k < K; ++k) {
                            double t = -h(i, k, p) - h(l, k, qq);
                            auto hi = h.mode(i, k);
                            auto hl = h.mode(l, k);
                            for (int c = 0; c < sa.npts; ++c) t += sa.w[c] * hi[sa.idx[c]];
                            for (int c = 0; c < sb.npts; ++c) t += sb.w[c] * hl[sb.idx[c]];
                            qsum += kw[k] * t * t;
                        }
                        acc += kgeo * qsum;
                    }
            }
        }
        partial[p] = acc;
    });
    double total = 0.0;
    for (double x : partial) total += x;
    return -0.25 * total;
}

struct GpcErrorReport {
    std::vector<double> per_sample;  // L2_v error at each z sample
    double l2_pi = 0.0;              // pi-weighted L2 error over the samples
    double max_err = 0.0;
};

// Reconstruction error of f^K against per-sample reference fields; sample
// weights should be a quadrature rule for pi (Gauss nodes work).
inline GpcErrorReport reconstruct_and_error(const GpcBasis& b, const GpcField& f,
                                            const std::vector<double>& z_samples,
                                            const std::vector<double>& sample_weights,
                                            const std::vector<SpeciesField>& reference,
                                            const VelocityGrid& grid) {
    if (z_samples.size() != reference.size() || z_samples.size() != sample_weights.size())
        throw std::invalid_argument("reconstruct_and_error: sample count mismatch");
    GpcErrorReport rep;
    double acc = 0.0;
    for (std::size_t s = 0; s < z_samples.size(); ++s) {
        SpeciesField rec = f.at_z(b, z_samples[s]);
        rec -= reference[s];
        const double err = weighted_norm(grid, rec, NormKind::L2v, 0.0);
        rep.per_sample.push_back(err);
        rep.max_err = std::max(rep.max_err, err);
        acc += sample_weights[s] * err * err;
    }
    rep.l2_pi = std::sqrt(std::max(0.0, acc));
    return rep;
}

}  // namespace kmsuq
