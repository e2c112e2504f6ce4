#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <span>

#include "kernel.hpp"

namespace kmsuq {

// Tensor-product Lagrange stencil for one off-grid point; order 1
// (multilinear) or 3 (cubic, reproduces |v|^2 exactly). A stencil is only
// valid when every corner lies inside the truncation box.
struct InterpStencil {
    int npts = 0;
    std::uint32_t idx[64];
    double w[64];
};

namespace detail {

inline void lagrange_weights(int order, double t, double* w) {
    if (order == 1) {
        w[0] = 1.0 - t;
        w[1] = t;
    } else {
        w[0] = -t * (t - 1.0) * (t - 2.0) / 6.0;
        w[1] = (t * t - 1.0) * (t - 2.0) / 2.0;
        w[2] = -t * (t + 1.0) * (t - 2.0) / 2.0;
        w[3] = t * (t * t - 1.0) / 6.0;
    }
}

}  // namespace detail

// Precomputed discretization context shared across species pairs and
// z-values: grid geometry, interpolation order and the reference Gaussian
// used to evaluate distribution fields off-grid.
struct CollisionWorkspace {
    VelocityGrid grid;
    int interp_order = 1;  // 1 or 3
    std::vector<double> mref;      // exp(-|v|^2/2) at grid points
    std::vector<double> inv_mref;

    CollisionWorkspace() = default;
    CollisionWorkspace(VelocityGrid g, int order = 1) : grid(std::move(g)), interp_order(order) {
        if (order != 1 && order != 3) throw std::invalid_argument("CollisionWorkspace: interp order must be 1 or 3");
        mref.resize(grid.size());
        inv_mref.resize(grid.size());
        for (std::size_t p = 0; p < grid.size(); ++p) {
            mref[p] = std::exp(-0.5 * norm2(grid.points[p]));
            inv_mref[p] = 1.0 / mref[p];
        }
    }

    struct Triple {
        Vec3 vprime, vprime_star;
        double speed = 0.0;
        double cos_theta = 0.0;
    };

    Triple triple(std::size_t p, std::size_t q, std::size_t a) const {
        const Vec3& vp = grid.points[p];
        const Vec3& vq = grid.points[q];
        const Vec3 rel = vp - vq;
        Triple t;
        t.speed = norm(rel);
        const Vec3 mid = 0.5 * (vp + vq);
        const Vec3& sg = grid.angular_nodes[a];
        t.vprime = mid + (0.5 * t.speed) * sg;
        t.vprime_star = mid - (0.5 * t.speed) * sg;
        t.cos_theta = t.speed > 0.0 ? std::clamp(dot(sg, rel) / t.speed, -1.0, 1.0) : 0.0;
        return t;
    }

    // Fills the stencil for x; returns false when any corner would leave the
    // box (the triple is then inadmissible and skipped entirely).
    bool stencil(const Vec3& x, InterpStencil& st) const {
        const int n = grid.n_per_axis;
        const int reach = interp_order == 1 ? 0 : 1;
        int base[3] = {0, 0, 0};
        double wax[3][4];
        for (int d = 0; d < grid.dim; ++d) {
            const double t = (x[d] + grid.radius) / grid.h - 0.5;
            double fl = std::floor(t);
            int i0 = static_cast<int>(fl);
            double frac = t - fl;
            if (i0 - reach < 0 || i0 + 1 + reach > n - 1) return false;
            base[d] = i0 - reach;
            detail::lagrange_weights(interp_order, frac, wax[d]);
        }
        const int m = interp_order + 1;
        int k = 0;
        if (grid.dim == 2) {
            for (int ix = 0; ix < m; ++ix)
                for (int iy = 0; iy < m; ++iy) {
                    st.idx[k] = static_cast<std::uint32_t>((base[0] + ix) * n + (base[1] + iy));
                    st.w[k] = wax[0][ix] * wax[1][iy];
                    ++k;
                }
        } else {
            for (int ix = 0; ix < m; ++ix)
                for (int iy = 0; iy < m; ++iy)
                    for (int iz = 0; iz < m; ++iz) {
                        st.idx[k] = static_cast<std::uint32_t>(((base[0] + ix) * n + (base[1] + iy)) * n +
                                                               (base[2] + iz));
                        st.w[k] = wax[0][ix] * wax[1][iy] * wax[2][iz];
                        ++k;
                    }
        }
        st.npts = k;
        return true;
    }

    double interpolate(const InterpStencil& st, std::span<const double> values) const {
        double acc = 0.0;
        for (int k = 0; k < st.npts; ++k) acc += st.w[k] * values[st.idx[k]];
        return acc;
    }
};

namespace detail {

inline void check_field(const CollisionWorkspace& ws, std::span<const double> f) {
    if (f.size() != ws.grid.size()) throw std::invalid_argument("collision: field does not live on the workspace grid");
}

inline void check_deriv(const KernelModel& m, int l) {
    if (l < 0 || l > m.angular.max_deriv)
        throw std::invalid_argument("collision: kernel derivative order exceeds model regularity r");
}

inline bool linear_vanishes(const KernelModel& m, int l) {
    return m.angular.kind == AngularModel::Kind::linear_in_z && l >= 2;
}

}  // namespace detail

// Discrete Q^{b^l}_ij(f_i, g_j). Off-grid values are evaluated through the
// Maxwellian-ratio rule f(v') ~= Mref(v') * I[f/Mref](v'), which makes the
// Gaussian microreversibility M'_i M'*_j = M_i M*_j hold exactly on every
// admissible triple. The v = v* node contributes zero (gain equals loss).
inline void q_pair_into(const CollisionWorkspace& ws, const KernelModel& model, int i, int j,
                        std::span<const double> f_i, std::span<const double> g_j, double z, int deriv_order,
                        std::span<double> out, double scale = 1.0, bool accumulate = false) {
    detail::check_field(ws, f_i);
    detail::check_field(ws, g_j);
    detail::check_deriv(model, deriv_order);
    const std::size_t np = ws.grid.size();
    if (!accumulate)
        for (std::size_t p = 0; p < np; ++p) out[p] = 0.0;
    if (detail::linear_vanishes(model, deriv_order)) return;

    std::vector<double> rf(np), rg(np);
    for (std::size_t p = 0; p < np; ++p) {
        rf[p] = f_i[p] * ws.inv_mref[p];
        rg[p] = g_j[p] * ws.inv_mref[p];
    }
    const double cphi = model.phi_coef(i, j);
    const double gamma = model.gamma;
    const std::size_t na = ws.grid.angular_nodes.size();
    const double wq = ws.grid.weight;

    parallel_for(np, [&](std::size_t p) {
        InterpStencil sa, sb;
        double acc = 0.0;
        const Vec3 vp = ws.grid.points[p];
        const double mref_p = ws.mref[p];
        const double rfp = rf[p];
        for (std::size_t q = 0; q < np; ++q) {
            if (q == p) continue;
            const Vec3 vq = ws.grid.points[q];
            const Vec3 rel = vp - vq;
            const double s = norm(rel);
            const Vec3 mid = 0.5 * (vp + vq);
            const double rad = 0.5 * s;
            const double phis = gamma == 0.0 ? cphi : cphi * std::pow(s, gamma);
            const double mu = mref_p * ws.mref[q];
            const double loss_r = rfp * rg[q];
            double inner = 0.0;
            for (std::size_t a = 0; a < na; ++a) {
                const Vec3& sg = ws.grid.angular_nodes[a];
                if (!ws.stencil(mid + rad * sg, sa) || !ws.stencil(mid - rad * sg, sb)) continue;
                const double u = std::clamp(dot(sg, rel) / s, -1.0, 1.0);
                const double b = model.angular.eval(i, j, u, z, deriv_order);
                inner += ws.grid.angular_weights[a] * b *
                         (ws.interpolate(sa, rf) * ws.interpolate(sb, rg) - loss_r);
            }
            acc += phis * mu * inner;
        }
        const double val = scale * wq * acc;
        if (accumulate)
            out[p] += val;
        else
            out[p] = val;
    });
}

inline SpeciesField q_pair(const CollisionWorkspace& ws, const KernelModel& model, int i, int j,
                           std::span<const double> f_i, std::span<const double> g_j, double z,
                           int deriv_order = 0) {
    SpeciesField outf(1, ws.grid.size(), "q_pair");
    q_pair_into(ws, model, i, j, f_i, g_j, z, deriv_order, outf.species(0));
    return outf;
}

// Q_i(F) = sum_j Q_ij(F_i, F_j)
inline SpeciesField q_total(const CollisionWorkspace& ws, const KernelModel& model, const SpeciesField& F,
                            double z, int deriv_order = 0) {
    const int N = F.n_species;
    SpeciesField out(N, ws.grid.size(), "q_total");
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j)
            q_pair_into(ws, model, i, j, F.species(i), F.species(j), z, deriv_order, out.species(i), 1.0, true);
    return out;
}

// Symmetrized bilinear form Qt_i(f,g) = 1/2 sum_j [Q_ij(f_i,g_j) + Q_ij(g_i,f_j)].
inline SpeciesField q_tilde(const CollisionWorkspace& ws, const KernelModel& model, const SpeciesField& f,
                            const SpeciesField& g, double z, int deriv_order = 0) {
    const int N = f.n_species;
    SpeciesField out(N, ws.grid.size(), "q_tilde");
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j) {
            q_pair_into(ws, model, i, j, f.species(i), g.species(j), z, deriv_order, out.species(i), 0.5, true);
            q_pair_into(ws, model, i, j, g.species(i), f.species(j), z, deriv_order, out.species(i), 0.5, true);
        }
    return out;
}

enum class NuConvention { paper, standard };
enum class NuQuadrature { full, operator_consistent };

// nu_ij(v,z) = C_ij int b_ij |v - v*|^gamma M(v*) dsigma dv*. The paper
// convention weights by M_i(v*), the standard one by M_j(v*); they coincide
// for equal c_inf. `full` integrates over every (v*, sigma) node (the v = v*
// node uses a fixed direction convention for cos theta, a removable point);
// `operator_consistent` restricts to the admissible triple set of the gain
// terms, which is the frequency appearing in the exact splitting identity
// A + B - nu = L. deriv_order >= 1 gives d^k_z nu.
inline SpeciesField collision_frequency(const CollisionWorkspace& ws, const KernelModel& model,
                                        const SpeciesSet& species, double z,
                                        NuConvention conv = NuConvention::paper, int deriv_order = 0,
                                        NuQuadrature quad = NuQuadrature::full) {
    detail::check_deriv(model, deriv_order);
    const int N = species.n_species;
    const std::size_t np = ws.grid.size();
    SpeciesField M = maxwellian(ws.grid, species);
    SpeciesField nu(N, np, "collision_frequency");
    if (detail::linear_vanishes(model, deriv_order)) return nu;
    const std::size_t na = ws.grid.angular_nodes.size();
    const bool trim = quad == NuQuadrature::operator_consistent;

    parallel_for(np, [&](std::size_t p) {
        InterpStencil sa, sb;
        std::vector<double> uvals(na);
        std::vector<char> ok(na);
        const Vec3 vp = ws.grid.points[p];
        for (int i = 0; i < N; ++i) {
            double acc = 0.0;
            for (std::size_t q = 0; q < np; ++q) {
                if (q == p && trim) continue;
                const Vec3 vq = ws.grid.points[q];
                const Vec3 rel = vp - vq;
                const double s = norm(rel);
                const Vec3 mid = 0.5 * (vp + vq);
                const double rad = 0.5 * s;
                for (std::size_t a = 0; a < na; ++a) {
                    const Vec3& sg = ws.grid.angular_nodes[a];
                    if (trim) {
                        ok[a] = ws.stencil(mid + rad * sg, sa) && ws.stencil(mid - rad * sg, sb);
                    } else {
                        ok[a] = 1;
                    }
                    if (ok[a]) uvals[a] = s > 0.0 ? std::clamp(dot(sg, rel) / s, -1.0, 1.0) : sg[0];
                }
                for (int j = 0; j < N; ++j) {
                    const double phis = model.gamma == 0.0 ? model.phi_coef(i, j)
                                                           : model.phi_coef(i, j) * std::pow(s, model.gamma);
                    if (phis == 0.0) continue;
                    const double mweight = conv == NuConvention::paper ? M(i, q) : M(j, q);
                    double inner = 0.0;
                    for (std::size_t a = 0; a < na; ++a)
                        if (ok[a])
                            inner += ws.grid.angular_weights[a] *
                                     model.angular.eval(i, j, uvals[a], z, deriv_order);
                    acc += phis * mweight * inner;
                }
            }
            nu(i, p) = ws.grid.weight * acc;
        }
    });
    return nu;
}

// Removes the component of Q along the discrete collision invariants
// {e_i, v, |v|^2} via M-weighted orthogonal projection, so the corrected
// field has exactly zero per-species mass, total momentum and total energy.
class ConservativeProjector {
  public:
    ConservativeProjector(const VelocityGrid& g, const SpeciesSet& s) : grid_(&g), n_species_(s.n_species) {
        const int N = s.n_species;
        const int dim = g.dim;
        n_inv_ = N + dim + 1;
        M_ = maxwellian(g, s);
        basis_.reserve(n_inv_);
        // test functions phi_alpha as species fields
        for (int a = 0; a < N; ++a) {
            SpeciesField phi(N, g.size());
            for (std::size_t p = 0; p < g.size(); ++p) phi(a, p) = 1.0;
            basis_.push_back(std::move(phi));
        }
        for (int d = 0; d < dim; ++d) {
            SpeciesField phi(N, g.size());
            for (int i = 0; i < N; ++i)
                for (std::size_t p = 0; p < g.size(); ++p) phi(i, p) = g.points[p][d];
            basis_.push_back(std::move(phi));
        }
        {
            SpeciesField phi(N, g.size());
            for (int i = 0; i < N; ++i)
                for (std::size_t p = 0; p < g.size(); ++p) phi(i, p) = norm2(g.points[p]);
            basis_.push_back(std::move(phi));
        }
        Eigen::MatrixXd G(n_inv_, n_inv_);
        for (int a = 0; a < n_inv_; ++a)
            for (int b = 0; b < n_inv_; ++b) {
                double acc = 0.0;
                for (int i = 0; i < N; ++i)
                    for (std::size_t p = 0; p < g.size(); ++p)
                        acc += M_(i, p) * basis_[a](i, p) * basis_[b](i, p);
                G(a, b) = g.weight * acc;
            }
        Eigen::FullPivLU<Eigen::MatrixXd> lu(G);
        if (!lu.isInvertible()) throw std::runtime_error("conservative_correction: singular invariant Gram matrix");
        ginv_ = lu.inverse();
    }

    void apply(SpeciesField& Q) const {
        const auto& g = *grid_;
        Eigen::VectorXd b(n_inv_);
        for (int a = 0; a < n_inv_; ++a) {
            double acc = 0.0;
            for (int i = 0; i < n_species_; ++i)
                for (std::size_t p = 0; p < g.size(); ++p) acc += Q(i, p) * basis_[a](i, p);
            b(a) = g.weight * acc;
        }
        Eigen::VectorXd c = ginv_ * b;
        for (int a = 0; a < n_inv_; ++a)
            for (int i = 0; i < n_species_; ++i)
                for (std::size_t p = 0; p < g.size(); ++p) Q(i, p) -= c(a) * M_(i, p) * basis_[a](i, p);
    }

  private:
    const VelocityGrid* grid_;
    int n_species_;
    int n_inv_;
    SpeciesField M_;
    std::vector<SpeciesField> basis_;
    Eigen::MatrixXd ginv_;
};

inline SpeciesField conservative_correction(const VelocityGrid& g, const SpeciesSet& s, const SpeciesField& Q) {
    ConservativeProjector proj(g, s);
    SpeciesField out = Q;
    proj.apply(out);
    out.label = "conservative_correction";
    return out;
}

}  // namespace kmsuq
