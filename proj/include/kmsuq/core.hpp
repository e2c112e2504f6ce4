#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace kmsuq {

// Velocity vectors are stored with fixed capacity 3; unused components stay 0
// so dot products and norms are dimension-agnostic.
using Vec3 = std::array<double, 3>;

inline double dot(const Vec3& a, const Vec3& b) {
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

inline double norm2(const Vec3& a) { return dot(a, a); }
inline double norm(const Vec3& a) { return std::sqrt(norm2(a)); }

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }

// <v> = sqrt(1 + |v|^2)
inline double bracket(const Vec3& v) { return std::sqrt(1.0 + norm2(v)); }

namespace detail {
inline int& thread_count_ref() {
    static int n = [] {
        if (const char* env = std::getenv("KMSUQ_THREADS")) {
            int k = std::atoi(env);
            if (k >= 1) return k;
        }
        return 1;
    }();
    return n;
}
}  // namespace detail

inline int thread_count() { return detail::thread_count_ref(); }
inline void set_thread_count(int n) { detail::thread_count_ref() = n < 1 ? 1 : n; }

// Chunked parallel map over [0, n). Each index is processed by exactly one
// thread with a fixed per-index summation order, so results do not depend on
// the thread count.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const int nt = thread_count();
    if (nt <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const std::size_t workers = std::min<std::size_t>(nt, n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([=, &fn] {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

// Distribution values for all species on one velocity grid. One instance
// holds a single z-slice, gPC coefficient, or sensitivity order.
struct SpeciesField {
    int n_species = 0;
    std::size_t n_points = 0;
    std::vector<double> data;
    std::string label;

    SpeciesField() = default;
    SpeciesField(int ns, std::size_t np, std::string lab = {})
        : n_species(ns), n_points(np), data(static_cast<std::size_t>(ns) * np, 0.0), label(std::move(lab)) {}

    double& operator()(int i, std::size_t p) { return data[static_cast<std::size_t>(i) * n_points + p]; }
    double operator()(int i, std::size_t p) const { return data[static_cast<std::size_t>(i) * n_points + p]; }

    std::span<double> species(int i) { return {data.data() + static_cast<std::size_t>(i) * n_points, n_points}; }
    std::span<const double> species(int i) const {
        return {data.data() + static_cast<std::size_t>(i) * n_points, n_points};
    }

    bool finite() const {
        for (double x : data)
            if (!std::isfinite(x)) return false;
        return true;
    }

    SpeciesField& operator+=(const SpeciesField& o) {
        for (std::size_t k = 0; k < data.size(); ++k) data[k] += o.data[k];
        return *this;
    }
    SpeciesField& operator-=(const SpeciesField& o) {
        for (std::size_t k = 0; k < data.size(); ++k) data[k] -= o.data[k];
        return *this;
    }
    SpeciesField& operator*=(double s) {
        for (double& x : data) x *= s;
        return *this;
    }
    void axpy(double a, const SpeciesField& o) {
        for (std::size_t k = 0; k < data.size(); ++k) data[k] += a * o.data[k];
    }
};

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace kmsuq
