#pragma once

#include <cmath>
#include <numbers>
#include <ostream>
#include <vector>

#include "core.hpp"

namespace kmsuq {

// Truncated uniform velocity lattice [-R, R]^dim with midpoint quadrature
// plus an angular rule on S^{dim-1}. Points sit at cell centers, so the
// point set is closed under v -> -v for any n_per_axis.
struct VelocityGrid {
    int dim = 2;
    int n_per_axis = 0;
    double radius = 0.0;
    double h = 0.0;       // lattice spacing 2R / n
    double weight = 0.0;  // uniform quadrature weight h^dim

    std::vector<Vec3> points;
    std::vector<Vec3> angular_nodes;
    std::vector<double> angular_weights;

    std::size_t size() const { return points.size(); }

    double axis_coord(int idx) const { return -radius + (idx + 0.5) * h; }

    std::size_t flat_index(int ix, int iy, int iz) const {
        std::size_t p = static_cast<std::size_t>(ix) * n_per_axis + iy;
        if (dim == 3) p = p * n_per_axis + iz;
        return p;
    }

    // Index of -v for lattice point p.
    std::size_t negation_index(std::size_t p) const {
        int n = n_per_axis;
        int iz = 0;
        std::size_t q = p;
        if (dim == 3) {
            iz = static_cast<int>(q % n);
            q /= n;
        }
        int iy = static_cast<int>(q % n);
        int ix = static_cast<int>(q / n);
        return flat_index(n - 1 - ix, n - 1 - iy, dim == 3 ? n - 1 - iz : 0);
    }

    double weight_sum() const { return weight * static_cast<double>(size()); }
    double angular_weight_sum() const {
        double s = 0.0;
        for (double w : angular_weights) s += w;
        return s;
    }
};

namespace detail {

// Gauss-Legendre nodes/weights on [-1, 1] by Newton iteration on the
// recurrence; standard construction, accurate to machine precision.
inline void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w) {
    x.assign(n, 0.0);
    w.assign(n, 0.0);
    const int m = (n + 1) / 2;
    for (int i = 0; i < m; ++i) {
        double z = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
        double pp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p1 = 1.0, p2 = 0.0;
            for (int j = 1; j <= n; ++j) {
                double p3 = p2;
                p2 = p1;
                p1 = ((2.0 * j - 1.0) * z * p2 - (j - 1.0) * p3) / j;
            }
            pp = n * (z * p1 - p2) / (z * z - 1.0);
            double dz = -p1 / pp;
            z += dz;
            if (std::abs(dz) < 1e-15) break;
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = w[n - 1 - i] = 2.0 / ((1.0 - z * z) * pp * pp);
    }
}

}  // namespace detail

// dim in {2,3}; angular_resolution controls the S^{dim-1} rule:
//  dim=2: `ang` equally spaced directions (rounded up to even so the node
//         set is closed under sigma -> -sigma),
//  dim=3: product rule with `ang` Gauss-Legendre nodes in cos(polar) and
//         2*ang uniform azimuthal angles.
inline VelocityGrid build_grid(int dim, int n_per_axis, double radius, int angular_resolution) {
    if (dim != 2 && dim != 3) throw std::invalid_argument("build_grid: dim must be 2 or 3");
    if (n_per_axis < 4) throw std::invalid_argument("build_grid: n_per_axis must be >= 4");
    if (!(radius > 0.0)) throw std::invalid_argument("build_grid: radius must be positive");
    if (angular_resolution < 2) throw std::invalid_argument("build_grid: angular_resolution must be >= 2");

    VelocityGrid g;
    g.dim = dim;
    g.n_per_axis = n_per_axis;
    g.radius = radius;
    g.h = 2.0 * radius / n_per_axis;
    g.weight = std::pow(g.h, dim);

    const int n = n_per_axis;
    if (dim == 2) {
        g.points.reserve(static_cast<std::size_t>(n) * n);
        for (int ix = 0; ix < n; ++ix)
            for (int iy = 0; iy < n; ++iy) g.points.push_back({g.axis_coord(ix), g.axis_coord(iy), 0.0});
    } else {
        g.points.reserve(static_cast<std::size_t>(n) * n * n);
        for (int ix = 0; ix < n; ++ix)
            for (int iy = 0; iy < n; ++iy)
                for (int iz = 0; iz < n; ++iz)
                    g.points.push_back({g.axis_coord(ix), g.axis_coord(iy), g.axis_coord(iz)});
    }

    if (dim == 2) {
        int na = angular_resolution + (angular_resolution % 2);
        const double dw = 2.0 * std::numbers::pi / na;
        for (int a = 0; a < na; ++a) {
            double th = dw * (a + 0.5);
            g.angular_nodes.push_back({std::cos(th), std::sin(th), 0.0});
            g.angular_weights.push_back(dw);
        }
    } else {
        std::vector<double> xc, wc;
        detail::gauss_legendre(angular_resolution, xc, wc);
        int nphi = 2 * angular_resolution;
        const double dphi = 2.0 * std::numbers::pi / nphi;
        for (int ic = 0; ic < angular_resolution; ++ic) {
            double c = xc[ic], s = std::sqrt(std::max(0.0, 1.0 - c * c));
            for (int ip = 0; ip < nphi; ++ip) {
                double phi = dphi * (ip + 0.5);
                g.angular_nodes.push_back({s * std::cos(phi), s * std::sin(phi), c});
                g.angular_weights.push_back(wc[ic] * dphi);
            }
        }
    }
    return g;
}

struct SpeciesSet {
    int n_species = 0;
    std::vector<double> c_inf;  // equilibrium masses, all > 0

    SpeciesSet() = default;
    SpeciesSet(std::vector<double> c) : n_species(static_cast<int>(c.size())), c_inf(std::move(c)) {
        if (n_species < 2) throw std::invalid_argument("SpeciesSet: need N >= 2 species");
        for (double ci : c_inf)
            if (!(ci > 0.0)) throw std::invalid_argument("SpeciesSet: c_inf entries must be positive");
    }
};

// M_i(v) = c_i (2 pi)^{-dim/2} exp(-|v|^2 / 2)
inline SpeciesField maxwellian(const VelocityGrid& g, const SpeciesSet& s) {
    SpeciesField M(s.n_species, g.size(), "maxwellian");
    const double pref = std::pow(2.0 * std::numbers::pi, -0.5 * g.dim);
    for (int i = 0; i < s.n_species; ++i) {
        const double ci = s.c_inf[i] * pref;
        for (std::size_t p = 0; p < g.size(); ++p) M(i, p) = ci * std::exp(-0.5 * norm2(g.points[p]));
    }
    return M;
}

struct MomentReport {
    std::vector<double> mass;  // per species
    Vec3 momentum{0, 0, 0};   // summed over species
    double energy = 0.0;      // 1/2 sum_i int |v|^2 f_i
};

inline MomentReport moments(const VelocityGrid& g, const SpeciesField& f) {
    MomentReport r;
    r.mass.assign(f.n_species, 0.0);
    for (int i = 0; i < f.n_species; ++i) {
        double m = 0.0, e = 0.0;
        Vec3 mom{0, 0, 0};
        for (std::size_t p = 0; p < g.size(); ++p) {
            const double fv = f(i, p);
            m += fv;
            e += norm2(g.points[p]) * fv;
            mom[0] += g.points[p][0] * fv;
            mom[1] += g.points[p][1] * fv;
            mom[2] += g.points[p][2] * fv;
        }
        r.mass[i] = g.weight * m;
        r.energy += 0.5 * g.weight * e;
        r.momentum[0] += g.weight * mom[0];
        r.momentum[1] += g.weight * mom[1];
        r.momentum[2] += g.weight * mom[2];
    }
    return r;
}

enum class NormKind { L1v_poly, L2v, L2v_lambda, L2v_invM, L1v_poly_nu };

// Discrete weighted norms. `k` is the polynomial weight exponent <v>^k.
// L2v_lambda additionally weights by <v>^gamma (the Lambda norm),
// L2v_invM by M^{-1/2} (aux = Maxwellian field), L1v_poly_nu by the
// collision frequency (aux = nu field).
inline double weighted_norm(const VelocityGrid& g, const SpeciesField& f, NormKind kind, double k,
                            double gamma = 0.0, const SpeciesField* aux = nullptr) {
    if (k < 0.0) throw std::invalid_argument("weighted_norm: weight exponent k must be >= 0");
    if (kind == NormKind::L1v_poly_nu && aux == nullptr)
        throw std::invalid_argument("weighted_norm: L1v_poly_nu requires a collision-frequency field");
    if (kind == NormKind::L2v_invM && aux == nullptr)
        throw std::invalid_argument("weighted_norm: L2v_invM requires the Maxwellian field");

    double acc = 0.0;
    for (int i = 0; i < f.n_species; ++i) {
        for (std::size_t p = 0; p < g.size(); ++p) {
            const double fv = f(i, p);
            const double br = bracket(g.points[p]);
            const double poly = k == 0.0 ? 1.0 : std::pow(br, k);
            switch (kind) {
                case NormKind::L1v_poly: acc += std::abs(fv) * poly; break;
                case NormKind::L1v_poly_nu: acc += std::abs(fv) * poly * (*aux)(i, p); break;
                case NormKind::L2v: acc += fv * fv * poly * poly; break;
                case NormKind::L2v_lambda: acc += fv * fv * poly * poly * std::pow(br, gamma); break;
                case NormKind::L2v_invM: acc += fv * fv * poly * poly / (*aux)(i, p); break;
            }
        }
    }
    acc *= g.weight;
    switch (kind) {
        case NormKind::L1v_poly:
        case NormKind::L1v_poly_nu: return acc;
        default: return std::sqrt(acc);
    }
}

// CSV layout: species,point_index,vx,vy[,vz],value
inline void write_field_csv(std::ostream& os, const VelocityGrid& g, const SpeciesField& f) {
    os << "species,point_index,vx,vy";
    if (g.dim == 3) os << ",vz";
    os << ",value\n";
    os.precision(17);
    for (int i = 0; i < f.n_species; ++i) {
        for (std::size_t p = 0; p < g.size(); ++p) {
            os << i << ',' << p << ',' << g.points[p][0] << ',' << g.points[p][1];
            if (g.dim == 3) os << ',' << g.points[p][2];
            os << ',' << f(i, p) << '\n';
        }
    }
}

}  // namespace kmsuq
