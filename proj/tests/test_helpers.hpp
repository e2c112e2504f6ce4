#pragma once

#include <kmsuq/solver.hpp>

#include <random>

// Shared fixtures for the unit suites: a small two-species desk setup.
namespace testutil {

using namespace kmsuq;

inline KernelModel kernel_linear(int N = 2, double gamma = 0.0, double b0c = 1.0, double b0a = 0.0,
                                 double b1c = 0.05, double b1a = 0.03) {
    KernelModel m;
    m.n_species = N;
    m.gamma = gamma;
    m.c_phi.assign(static_cast<std::size_t>(N) * N, 1.0);
    if (N == 2) m.c_phi = {1.0, 0.8, 0.8, 1.2};
    m.angular = make_uniform_linear_angular(N, {b0c, b0a}, {b1c, b1a});
    m.c_b = 2.0;
    m.c_b1 = 2.0;
    return m;
}

inline KernelModel kernel_exp(int N = 2, double gamma = 0.0, double eps = 0.5, int r = 4) {
    KernelModel m;
    m.n_species = N;
    m.gamma = gamma;
    m.c_phi.assign(static_cast<std::size_t>(N) * N, 1.0);
    m.angular = make_exp_angular(N, {1.0, 0.3}, eps, r);
    m.c_b = 4.0;
    m.c_b1 = 4.0;
    return m;
}

inline SpeciesField random_field(const VelocityGrid& g, int N, std::uint64_t seed, bool gaussian_scaled = true) {
    SpeciesField f(N, g.size(), "random");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss;
    for (int i = 0; i < N; ++i)
        for (std::size_t p = 0; p < g.size(); ++p)
            f(i, p) = gauss(rng) * (gaussian_scaled ? std::exp(-0.5 * norm2(g.points[p])) : 1.0);
    return f;
}

inline double field_linf(const SpeciesField& a) {
    double m = 0.0;
    for (double x : a.data) m = std::max(m, std::abs(x));
    return m;
}

inline double field_linf_diff(const SpeciesField& a, const SpeciesField& b) {
    double m = 0.0;
    for (std::size_t k = 0; k < a.data.size(); ++k) m = std::max(m, std::abs(a.data[k] - b.data[k]));
    return m;
}

}  // namespace testutil
