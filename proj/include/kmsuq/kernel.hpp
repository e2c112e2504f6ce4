#pragma once

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "grid.hpp"

namespace kmsuq {

// Angular profile c + a*|sin(theta)||cos(theta)| as a function of u = cos(theta).
struct AngularShape {
    double c = 0.0;
    double a = 0.0;
    double operator()(double u) const {
        const double s = std::sqrt(std::max(0.0, 1.0 - u * u));
        return c + a * s * std::abs(u);
    }
};

// z-dependence of one separable angular term: either z^degree or exp(eps*z).
struct ZFactor {
    enum class Kind { poly, expz };
    Kind kind = Kind::poly;
    int degree = 0;   // for poly
    double eps = 0.0; // for expz

    // d^k/dz^k of the factor
    double eval(double z, int k) const {
        if (kind == Kind::poly) {
            if (k > degree) return 0.0;
            double c = 1.0;
            for (int m = 0; m < k; ++m) c *= (degree - m);
            return c * std::pow(z, degree - k);
        }
        return std::pow(eps, k) * std::exp(eps * z);
    }
};

// b_ij(cos t, z) = sum_m shape_m[i][j](cos t) * g_m(z). linear_in_z models
// carry exactly the terms {g=1, g=z}; general_smooth models may carry
// exponential z-factors with analytic derivatives up to order r.
struct AngularModel {
    enum class Kind { linear_in_z, general_smooth };
    Kind kind = Kind::linear_in_z;
    int n_species = 0;
    int max_deriv = 6;  // r; enforced for general_smooth only

    struct Term {
        std::vector<AngularShape> shape;  // N*N, symmetric
        ZFactor zf;
    };
    std::vector<Term> terms;

    const AngularShape& shape(const Term& t, int i, int j) const {
        return t.shape[static_cast<std::size_t>(i) * n_species + j];
    }

    double eval(int i, int j, double u, double z, int k) const {
        if (k < 0) throw std::invalid_argument("eval_b: derivative order must be >= 0");
        if (kind == Kind::general_smooth && k > max_deriv)
            throw std::invalid_argument("eval_b: derivative order exceeds model regularity r");
        double acc = 0.0;
        for (const auto& t : terms) acc += shape(t, i, j)(u) * t.zf.eval(z, k);
        return acc;
    }
};

// Builds the linear-in-z model b = b0 + b1*z from per-pair profile tables.
inline AngularModel make_linear_angular(int n_species, std::vector<AngularShape> b0,
                                        std::vector<AngularShape> b1) {
    AngularModel m;
    m.kind = AngularModel::Kind::linear_in_z;
    m.n_species = n_species;
    m.terms.resize(2);
    m.terms[0].shape = std::move(b0);
    m.terms[0].zf = {ZFactor::Kind::poly, 0, 0.0};
    m.terms[1].shape = std::move(b1);
    m.terms[1].zf = {ZFactor::Kind::poly, 1, 0.0};
    return m;
}

inline AngularModel make_uniform_linear_angular(int n_species, AngularShape b0, AngularShape b1) {
    std::vector<AngularShape> t0(static_cast<std::size_t>(n_species) * n_species, b0);
    std::vector<AngularShape> t1(static_cast<std::size_t>(n_species) * n_species, b1);
    return make_linear_angular(n_species, std::move(t0), std::move(t1));
}

// b = shape(u) * exp(eps*z); smooth in z with exact derivatives of all orders.
inline AngularModel make_exp_angular(int n_species, AngularShape shape, double eps, int r) {
    AngularModel m;
    m.kind = AngularModel::Kind::general_smooth;
    m.n_species = n_species;
    m.max_deriv = r;
    m.terms.resize(1);
    m.terms[0].shape.assign(static_cast<std::size_t>(n_species) * n_species, shape);
    m.terms[0].zf = {ZFactor::Kind::expz, 0, eps};
    return m;
}

struct KernelModel {
    int n_species = 0;
    double gamma = 0.0;               // hard potentials (0,1] or Maxwell molecules (0)
    std::vector<double> c_phi;        // N*N symmetric, positive entries
    AngularModel angular;
    double c_b = 0.0;                 // (H4)/(H5) upper bound
    double c_b1 = 0.0;                // theta-derivative bound

    double phi_coef(int i, int j) const { return c_phi[static_cast<std::size_t>(i) * n_species + j]; }

    void validate_fields() const {
        if (gamma < 0.0 || gamma > 1.0) throw std::invalid_argument("KernelModel: gamma must lie in [0,1]");
        for (int i = 0; i < n_species; ++i)
            for (int j = 0; j < n_species; ++j) {
                if (!(phi_coef(i, j) > 0.0)) throw std::invalid_argument("KernelModel: c_phi entries must be positive");
                if (std::abs(phi_coef(i, j) - phi_coef(j, i)) > 0.0)
                    throw std::invalid_argument("KernelModel: c_phi must be symmetric");
            }
    }
};

// Phi_ij(s) = C^Phi_ij s^gamma; gamma = 0 gives the Maxwell-molecule constant.
inline double eval_phi(const KernelModel& m, int i, int j, double relative_speed) {
    if (relative_speed < 0.0) throw std::invalid_argument("eval_phi: relative speed must be >= 0");
    if (m.gamma == 0.0) return m.phi_coef(i, j);
    return m.phi_coef(i, j) * std::pow(relative_speed, m.gamma);
}

inline double eval_b(const KernelModel& m, int i, int j, double cos_theta, double z, int deriv_order) {
    if (std::abs(cos_theta) > 1.0 + 1e-12) throw std::invalid_argument("eval_b: |cos theta| must be <= 1");
    return m.angular.eval(i, j, std::clamp(cos_theta, -1.0, 1.0), z, deriv_order);
}

struct AssumptionReport {
    struct Pair {
        int i = 0, j = 0;
        double symmetry_residual = 0.0;  // max_u,z |b_ij - b_ji|
        double b_max = 0.0;              // max_u,z b_ij
        bool positive = true;            // min_u,z b_ij > 0
        bool upper_bound_ok = true;      // b <= C_b
        bool strict_form_applicable = false;
        bool strict_form_ok = false;     // b <= C_b |sin||cos| (only if shape permits)
        std::vector<double> deriv_max;   // k = 0..r, max |d^k_z b|
        bool deriv_bounds_ok = true;     // all <= C_b
        double d_min = 0.0;              // min over u of D_ij = b0 - (2^q+2)|b1| C_z
        bool d_positive = false;
        double d_max = 0.0;
    };
    std::vector<Pair> pairs;
    double h4_lower_bound = 0.0;  // sampled min_i inf_{s1,s2} of the min-integral
    bool h4_ok = false;
    bool all_ok = false;
};

namespace detail {

inline double sample_b0_b1(const KernelModel& m, int i, int j, double u, bool first, double z_probe = 0.0) {
    // For linear models b0/b1 are exact; for general models use b(.,0) and
    // a centered difference as the effective linear split at z = z_probe.
    if (m.angular.kind == AngularModel::Kind::linear_in_z) {
        const auto& t = m.angular.terms[first ? 0 : 1];
        return m.angular.shape(t, i, j)(u);
    }
    if (first) return eval_b(m, i, j, u, z_probe, 0);
    return eval_b(m, i, j, u, z_probe, 1);
}

}  // namespace detail

// Samples (H1)-(H5) and the gPC-side conditions (B2)-(B3). Report only; the
// driver decides pass/fail. theta is sampled on 2048 points and z on 64
// points across [-C_z, C_z].
inline AssumptionReport validate_assumptions(const KernelModel& m, int dim, int q, double C_z, int r) {
    if (q < 0) throw std::invalid_argument("validate_assumptions: q must be >= 0");
    if (!(C_z > 0.0)) throw std::invalid_argument("validate_assumptions: C_z must be positive");

    constexpr int NU = 2048;
    constexpr int NZ = 64;
    AssumptionReport rep;
    const double dq = std::pow(2.0, q) + 2.0;

    bool ok = true;
    for (int i = 0; i < m.n_species; ++i) {
        for (int j = 0; j < m.n_species; ++j) {
            AssumptionReport::Pair pr;
            pr.i = i;
            pr.j = j;
            pr.deriv_max.assign(r + 1, 0.0);
            double b_min = std::numeric_limits<double>::max();
            double d_min = std::numeric_limits<double>::max(), d_max = -std::numeric_limits<double>::max();
            bool strict_ok = true;
            for (int iu = 0; iu < NU; ++iu) {
                const double u = -1.0 + (2.0 * iu + 1.0) / NU;
                const double s = std::sqrt(std::max(0.0, 1.0 - u * u)) * std::abs(u);
                for (int iz = 0; iz < NZ; ++iz) {
                    const double z = -C_z + C_z * (2.0 * iz + 1.0) / NZ;
                    const double bij = eval_b(m, i, j, u, z, 0);
                    const double bji = eval_b(m, j, i, u, z, 0);
                    pr.symmetry_residual = std::max(pr.symmetry_residual, std::abs(bij - bji));
                    pr.b_max = std::max(pr.b_max, bij);
                    b_min = std::min(b_min, bij);
                    if (bij > m.c_b * s) strict_ok = false;
                    for (int k = 0; k <= r; ++k)
                        pr.deriv_max[k] = std::max(pr.deriv_max[k], std::abs(eval_b(m, i, j, u, z, k)));
                }
                const double b0 = detail::sample_b0_b1(m, i, j, u, true);
                const double b1 = detail::sample_b0_b1(m, i, j, u, false);
                const double d = b0 - dq * std::abs(b1) * C_z;
                d_min = std::min(d_min, d);
                d_max = std::max(d_max, d);
            }
            pr.positive = b_min > 0.0;
            pr.upper_bound_ok = pr.b_max <= m.c_b * (1.0 + 1e-12);
            // The strict Grad form vanishes at cos(theta) in {0, +-1}; it can
            // only hold when the constant part of the profile is zero.
            pr.strict_form_applicable = true;
            for (const auto& t : m.angular.terms)
                if (m.angular.shape(t, i, j).c != 0.0) pr.strict_form_applicable = false;
            pr.strict_form_ok = pr.strict_form_applicable && strict_ok;
            for (double dk : pr.deriv_max)
                if (dk > m.c_b * (1.0 + 1e-12)) pr.deriv_bounds_ok = false;
            pr.d_min = d_min;
            pr.d_max = d_max;
            pr.d_positive = d_min > 0.0;
            ok = ok && pr.positive && pr.upper_bound_ok && pr.deriv_bounds_ok && pr.d_positive &&
                 pr.symmetry_residual <= 1e-12 && pr.d_max <= m.c_b * (1.0 + 1e-12);
            rep.pairs.push_back(std::move(pr));
        }
    }

    // (H4) lower bound: min_i inf_{s1,s2} int min{b_ii(s1.s3), b_ii(s2.s3)} ds3,
    // sampled over direction pairs and z.
    VelocityGrid ang = build_grid(dim, 4, 1.0, dim == 2 ? 64 : 12);
    double h4 = std::numeric_limits<double>::max();
    std::mt19937_64 rng(12345);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const int NPAIRS = 64;
    for (int i = 0; i < m.n_species; ++i) {
        for (int t = 0; t < NPAIRS; ++t) {
            Vec3 s1{gauss(rng), gauss(rng), dim == 3 ? gauss(rng) : 0.0};
            Vec3 s2{gauss(rng), gauss(rng), dim == 3 ? gauss(rng) : 0.0};
            if (norm(s1) < 1e-8 || norm(s2) < 1e-8) continue;
            s1 = (1.0 / norm(s1)) * s1;
            s2 = (1.0 / norm(s2)) * s2;
            for (int iz = 0; iz < 8; ++iz) {
                const double z = -C_z + C_z * (2.0 * iz + 1.0) / 8.0;
                double integ = 0.0;
                for (std::size_t a = 0; a < ang.angular_nodes.size(); ++a) {
                    const Vec3& s3 = ang.angular_nodes[a];
                    integ += ang.angular_weights[a] *
                             std::min(eval_b(m, i, i, std::clamp(dot(s1, s3), -1.0, 1.0), z, 0),
                                      eval_b(m, i, i, std::clamp(dot(s2, s3), -1.0, 1.0), z, 0));
                }
                h4 = std::min(h4, integ);
            }
        }
    }
    rep.h4_lower_bound = h4;
    rep.h4_ok = h4 > 0.0;
    rep.all_ok = ok && rep.h4_ok;
    return rep;
}

inline void write_assumption_csv(std::ostream& os, const AssumptionReport& rep) {
    os << "i,j,symmetry_residual,b_max,positive,upper_bound_ok,strict_form_applicable,strict_form_ok,"
          "deriv_bounds_ok,d_min,d_max,d_positive\n";
    os.precision(17);
    for (const auto& p : rep.pairs) {
        os << p.i << ',' << p.j << ',' << p.symmetry_residual << ',' << p.b_max << ',' << p.positive << ','
           << p.upper_bound_ok << ',' << p.strict_form_applicable << ',' << p.strict_form_ok << ','
           << p.deriv_bounds_ok << ',' << p.d_min << ',' << p.d_max << ',' << p.d_positive << '\n';
    }
    os << "# h4_lower_bound," << rep.h4_lower_bound << ",h4_ok," << rep.h4_ok << ",all_ok," << rep.all_ok
       << '\n';
}

}  // namespace kmsuq
