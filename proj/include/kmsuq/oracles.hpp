#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "collision.hpp"

// Independent brute-force re-derivations of the quantities computed by the
// optimized paths. These deliberately share no geometry caches or stencil
// code with the main implementation; interpolation is done through Neville's
// algorithm on independently reconstructed axis nodes.

namespace kmsuq::oracles {

namespace detail {

// Neville interpolation through `m` points of a 1D table.
inline double neville(const double* xs, const double* ys, int m, double x) {
    double p[4];
    for (int k = 0; k < m; ++k) p[k] = ys[k];
    for (int lvl = 1; lvl < m; ++lvl)
        for (int k = 0; k < m - lvl; ++k)
            p[k] = ((x - xs[k + lvl]) * p[k] + (xs[k] - x) * p[k + 1]) / (xs[k] - xs[k + lvl]);
    return p[0];
}

struct AxisNodes {
    int base = 0;
    bool ok = false;
    double xs[4];
};

inline AxisNodes axis_nodes(double x, double R, double h, int n, int order) {
    AxisNodes an;
    const int m = order + 1;
    double t = (x + R) / h - 0.5;
    int i0 = static_cast<int>(std::floor(t));
    int lo = order == 1 ? i0 : i0 - 1;
    if (lo < 0 || lo + m - 1 > n - 1) return an;
    an.base = lo;
    an.ok = true;
    for (int k = 0; k < m; ++k) an.xs[k] = -R + (lo + k + 0.5) * h;
    return an;
}

}  // namespace detail

// Evaluates a grid field divided by the reference Gaussian at an off-grid
// point, or reports that the tensor stencil leaves the box.
inline bool ratio_interp(const VelocityGrid& g, std::span<const double> field, const Vec3& x, int order,
                         double& out) {
    const int m = order + 1;
    detail::AxisNodes ax[3];
    for (int d = 0; d < g.dim; ++d) {
        ax[d] = detail::axis_nodes(x[d], g.radius, g.h, g.n_per_axis, order);
        if (!ax[d].ok) return false;
    }
    // interpolate axis by axis (2D: rows in y then x; 3D adds z innermost)
    auto ratio_at = [&](int ix, int iy, int iz) {
        std::size_t p;
        if (g.dim == 2)
            p = static_cast<std::size_t>(ix) * g.n_per_axis + iy;
        else
            p = (static_cast<std::size_t>(ix) * g.n_per_axis + iy) * g.n_per_axis + iz;
        return field[p] * std::exp(0.5 * norm2(g.points[p]));
    };
    double valx[4];
    for (int i = 0; i < m; ++i) {
        double valy[4];
        for (int j = 0; j < m; ++j) {
            if (g.dim == 2) {
                valy[j] = ratio_at(ax[0].base + i, ax[1].base + j, 0);
            } else {
                double valz[4];
                for (int k = 0; k < m; ++k) valz[k] = ratio_at(ax[0].base + i, ax[1].base + j, ax[2].base + k);
                valy[j] = detail::neville(ax[2].xs, valz, m, x[2]);
            }
        }
        valx[i] = detail::neville(ax[1].xs, valy, m, x[1]);
    }
    out = detail::neville(ax[0].xs, valx, m, x[0]);
    return true;
}

// Triple-loop discrete Q^{b^l}_ij(f,g); same mathematical definition as
// q_pair, separately coded.
inline std::vector<double> brute_force_q_pair(const VelocityGrid& g, const KernelModel& model, int i, int j,
                                              std::span<const double> f, std::span<const double> gfield,
                                              double z, int deriv_order, int order) {
    const std::size_t np = g.size();
    std::vector<double> out(np, 0.0);
    for (std::size_t p = 0; p < np; ++p) {
        double acc = 0.0;
        for (std::size_t q = 0; q < np; ++q) {
            if (q == p) continue;
            Vec3 rel = g.points[p] - g.points[q];
            double s = norm(rel);
            double phis = eval_phi(model, i, j, s);
            for (std::size_t a = 0; a < g.angular_nodes.size(); ++a) {
                Vec3 sg = g.angular_nodes[a];
                Vec3 vp = 0.5 * (g.points[p] + g.points[q]) + (0.5 * s) * sg;
                Vec3 vps = 0.5 * (g.points[p] + g.points[q]) - (0.5 * s) * sg;
                double rf, rg;
                if (!ratio_interp(g, f, vp, order, rf)) continue;
                if (!ratio_interp(g, gfield, vps, order, rg)) continue;
                double u = std::clamp(dot(sg, rel) / s, -1.0, 1.0);
                double b = eval_b(model, i, j, u, z, deriv_order);
                double mu = std::exp(-0.5 * (norm2(g.points[p]) + norm2(g.points[q])));
                double gain = mu * rf * rg;
                double loss = f[p] * gfield[q];
                acc += g.weight * g.angular_weights[a] * phis * b * (gain - loss);
            }
        }
        out[p] = acc;
    }
    return out;
}

// Cyclic Jacobi eigensolver for symmetric matrices; returns eigenvalues in
// descending order.
inline std::vector<double> jacobi_eigenvalues(Eigen::MatrixXd A, int max_sweeps = 64) {
    const int n = static_cast<int>(A.rows());
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += A(p, q) * A(p, q);
        if (off < 1e-26 * std::max(1.0, A.squaredNorm())) break;
        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                if (A(p, q) == 0.0) continue;
                const double theta = (A(q, q) - A(p, p)) / (2.0 * A(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = A(k, p), akq = A(k, q);
                    A(k, p) = c * akp - s * akq;
                    A(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = A(p, k), aqk = A(q, k);
                    A(p, k) = c * apk - s * aqk;
                    A(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> ev(n);
    for (int k = 0; k < n; ++k) ev[k] = A(k, k);
    std::sort(ev.begin(), ev.end(), std::greater<double>());
    return ev;
}

// Composite Simpson rule (n even panels).
inline double simpson(const std::function<double(double)>& f, double a, double b, int n) {
    if (n % 2) ++n;
    const double h = (b - a) / n;
    double acc = f(a) + f(b);
    for (int k = 1; k < n; ++k) acc += f(a + k * h) * (k % 2 ? 4.0 : 2.0);
    return acc * h / 3.0;
}

inline double binomial(int n, int k) {
    double r = 1.0;
    for (int m = 1; m <= k; ++m) r = r * (n - k + m) / m;
    return r;
}

// Flat double-binomial Leibniz sum for d^n_z Q_i, expanded term by term;
// the main implementation uses the grouped (Term-star + 2*Qtilde) form.
inline SpeciesField leibniz_q_flat(const CollisionWorkspace& ws, const KernelModel& model,
                                   const std::vector<SpeciesField>& derivs, double z, int n) {
    const int N = derivs[0].n_species;
    SpeciesField out(N, ws.grid.size(), "oracle_leibniz");
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j)
            for (int l = 0; l <= n; ++l)
                for (int m = 0; m <= l; ++m) {
                    const double coef = binomial(n, l) * binomial(l, m);
                    q_pair_into(ws, model, i, j, derivs[m].species(i), derivs[l - m].species(j), z, n - l,
                                out.species(i), coef, true);
                }
    return out;
}

}  // namespace kmsuq::oracles
