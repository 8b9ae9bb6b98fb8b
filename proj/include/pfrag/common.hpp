#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pfrag {

using Vec = std::vector<double>;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public Error {
public:
    ParseError(const std::string& msg, std::size_t line)
        : Error("line " + std::to_string(line) + ": " + msg), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

inline void require(bool ok, const char* msg) {
    if (!ok) throw std::invalid_argument(msg);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), "dot: dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline Vec normalized(std::span<const double> a) {
    double n = norm(a);
    require(n > 0.0 && std::isfinite(n), "normalized: zero or non-finite vector");
    Vec out(a.begin(), a.end());
    for (auto& x : out) x /= n;
    return out;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
    double na = norm(a), nb = norm(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

inline bool all_finite(std::span<const double> a) {
    for (double x : a)
        if (!std::isfinite(x)) return false;
    return true;
}

inline bool is_unit(std::span<const double> a, double tol = 1e-6) {
    return std::abs(norm(a) - 1.0) <= tol;
}

inline double clip01(double x) { return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x); }

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

constexpr double kPi = 3.14159265358979323846;
inline double bce(double p, bool y) {
    const double eps = 1e-15;
    return y ? -std::log(std::max(p, eps)) : -std::log(std::max(1.0 - p, eps));
}

inline double deg2rad(double d) { return d * kPi / 180.0; }

// splitmix64 finalizer, used to derive independent sub-seeds
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    return mix64(mix64(seed ^ mix64(a)) ^ mix64(b + 0x51ed2701ULL));
}

// mt19937_64 output is fixed by the standard; the transforms below are ours
// so draws are identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next() { return eng_(); }
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    std::size_t index(std::size_t n) {
        require(n > 0, "Rng::index: empty range");
        return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * kPi * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * kPi * u2);
    }
    double normal(double mean, double sd) { return mean + sd * normal(); }

    double exponential(double mean) {
        double u = 0.0;
        while (u <= 0.0) u = uniform();
        return -mean * std::log(u);
    }

    Vec unit_vector(std::size_t d) {
        Vec v(d);
        double n = 0.0;
        while (n < 1e-12) {
            for (auto& x : v) x = normal();
            n = norm(v);
        }
        for (auto& x : v) x /= n;
        return v;
    }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// component of v orthogonal to unit u, normalized; falls back to a fixed axis
inline Vec orthogonal_unit(std::span<const double> v, std::span<const double> u) {
    Vec w(v.begin(), v.end());
    double c = dot(w, u);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= c * u[i];
    double n = norm(w);
    if (n < 1e-9) {
        for (std::size_t axis = 0; axis < w.size(); ++axis) {
            std::fill(w.begin(), w.end(), 0.0);
            w[axis] = 1.0;
            double cc = u[axis];
            for (std::size_t i = 0; i < w.size(); ++i) w[i] -= cc * u[i];
            n = norm(w);
            if (n > 1e-6) break;
        }
    }
    for (auto& x : w) x /= n;
    return w;
}

// unit vector at `angle` radians from unit `toward`, in the plane spanned with `other`
inline Vec rotate_from(std::span<const double> toward, std::span<const double> other, double angle) {
    Vec o = orthogonal_unit(other, toward);
    Vec out(toward.size());
    double c = std::cos(angle), s = std::sin(angle);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * toward[i] + s * o[i];
    return normalized(out);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace pfrag
