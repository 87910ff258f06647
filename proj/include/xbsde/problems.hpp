#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "xbsde/tape.hpp"

namespace xbsde {

/// One semilinear parabolic PDE/BSDE instance.
///
/// The drift and diffusion act on plain rows (used by the forward
/// simulation, which runs outside the tape); the generator and the
/// sigma^T action also come in taped batch form for the rollout.
/// sigma is exposed as a vector action, never materialized as a d x d
/// matrix; both bundled diffusions are diagonal, so sigma^T acts the
/// same way as sigma.
struct ProblemSpec {
    std::string name;
    std::size_t dim = 0;
    double horizon = 0.0;            // T
    std::vector<double> start;       // xi

    std::function<void(double t, std::span<const double> x, std::span<double> out)> mu;
    std::function<void(double t, std::span<const double> x, std::span<const double> v,
                       std::span<double> out)>
        sigma_apply;
    std::function<void(double t, std::span<const double> x, std::span<const double> v,
                       std::span<double> out)>
        sigma_transpose_apply;

    /// Terminal condition g.
    std::function<double(std::span<const double> x)> terminal;

    /// Generator f(t, x, y, z) on plain scalars/rows.
    std::function<double(double t, std::span<const double> x, double y,
                         std::span<const double> z)>
        generator_scalar;

    /// Taped batch generator: x is the [M x d] state (constant node),
    /// y is [M], z is [M x d]; returns [M].
    std::function<ValueId(Tape&, double t, ValueId x, ValueId y, ValueId z)> generator;

    /// Taped batch action z = sigma^T(t, x) g, shapes [M x d] -> [M x d].
    std::function<ValueId(Tape&, double t, ValueId x, ValueId g)> sigma_t;

    std::optional<double> reference; // known u(0, xi), when available
    std::pair<double, double> y0_init_range{0.0, 1.0};
    double input_scale = 1.0;        // continuous-mode spatial normalization
};

/// u_t + Lap u + u - u^3 = 0 with g(x) = 1 / (2 + 2/5 |x|^2), T = 0.3,
/// xi = 0. sigma = sqrt(2) I makes (1/2) Tr(sigma sigma^T Hess) the
/// plain Laplacian. Reference value is known at d = 100.
inline ProblemSpec allen_cahn(std::size_t d) {
    if (d < 1) throw std::invalid_argument("allen_cahn: d must be >= 1");
    const double root2 = std::sqrt(2.0);
    ProblemSpec p;
    p.name = "allen_cahn";
    p.dim = d;
    p.horizon = 0.3;
    p.start.assign(d, 0.0);
    p.mu = [](double, std::span<const double>, std::span<double> out) {
        std::fill(out.begin(), out.end(), 0.0);
    };
    p.sigma_apply = [root2](double, std::span<const double>, std::span<const double> v,
                            std::span<double> out) {
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = root2 * v[i];
    };
    p.sigma_transpose_apply = p.sigma_apply;
    p.terminal = [](std::span<const double> x) {
        double sq = 0.0;
        for (double xi : x) sq += xi * xi;
        return 1.0 / (2.0 + 0.4 * sq);
    };
    p.generator_scalar = [](double, std::span<const double>, double y, std::span<const double>) {
        return y - y * y * y;
    };
    p.generator = [](Tape& tape, double, ValueId, ValueId y, ValueId) {
        return tape.sub(y, tape.mul(y, tape.square(y)));
    };
    p.sigma_t = [root2](Tape& tape, double, ValueId, ValueId g) { return tape.scale(g, root2); };
    if (d == 100) p.reference = 0.052802;
    p.y0_init_range = {0.0, 0.2};
    p.input_scale = 1.0;
    return p;
}

namespace pricing {
constexpr double kMuBar = 0.06;
constexpr double kSigmaBar = 0.2;
constexpr double kRateLend = 0.04;
constexpr double kRateBorrow = 0.06;
} // namespace pricing

/// Nonlinear Black-Scholes pricing with different borrowing and lending
/// rates: mu = 0.06 x, sigma = 0.2 diag(x), T = 0.5, xi = (100, ..., 100).
/// g is a call-spread on the best-performing asset; f is piecewise
/// linear with a kink where the hedge switches to borrowing.
inline ProblemSpec pricing_diffrate(std::size_t d) {
    using namespace pricing;
    if (d < 1) throw std::invalid_argument("pricing_diffrate: d must be >= 1");
    ProblemSpec p;
    p.name = "pricing_diffrate";
    p.dim = d;
    p.horizon = 0.5;
    p.start.assign(d, 100.0);
    p.mu = [](double, std::span<const double> x, std::span<double> out) {
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = kMuBar * x[i];
    };
    p.sigma_apply = [](double, std::span<const double> x, std::span<const double> v,
                       std::span<double> out) {
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = kSigmaBar * x[i] * v[i];
    };
    p.sigma_transpose_apply = p.sigma_apply;
    p.terminal = [](std::span<const double> x) {
        double best = x[0];
        for (double xi : x) best = std::max(best, xi);
        return std::max(best - 120.0, 0.0) - 2.0 * std::max(best - 150.0, 0.0);
    };
    p.generator_scalar = [](double, std::span<const double>, double y,
                            std::span<const double> z) {
        double zsum = 0.0;
        for (double zi : z) zsum += zi;
        const double shortfall = zsum / kSigmaBar - y;
        return -kRateLend * y - (kMuBar - kRateLend) / kSigmaBar * zsum +
               (kRateBorrow - kRateLend) * std::max(0.0, shortfall);
    };
    p.generator = [](Tape& tape, double, ValueId, ValueId y, ValueId z) {
        const ValueId zsum = tape.sum_rows(z);  // [M]
        const ValueId lend = tape.scale(y, -kRateLend);
        const ValueId carry = tape.scale(zsum, -(kMuBar - kRateLend) / kSigmaBar);
        const ValueId shortfall = tape.sub(tape.scale(zsum, 1.0 / kSigmaBar), y);
        const ValueId borrow = tape.scale(tape.relu(shortfall), kRateBorrow - kRateLend);
        return tape.add(tape.add(lend, carry), borrow);
    };
    p.sigma_t = [](Tape& tape, double, ValueId x, ValueId g) {
        return tape.scale(tape.mul(x, g), kSigmaBar);
    };
    if (d == 100) p.reference = 21.299;
    p.y0_init_range = {15.0, 25.0};
    p.input_scale = 100.0;
    return p;
}

/// Sanity problem with a closed form: u_t + Lap u = 0, g(x) = |x|^2,
/// so u(t, x) = |x|^2 + 2 d (T - t) and u(0, xi) = |xi|^2 + 2 d T.
inline ProblemSpec linear_quadratic(std::size_t d) {
    if (d < 1) throw std::invalid_argument("linear_quadratic: d must be >= 1");
    const double root2 = std::sqrt(2.0);
    ProblemSpec p;
    p.name = "linear_quadratic";
    p.dim = d;
    p.horizon = 0.3;
    p.start.assign(d, 0.0);
    p.mu = [](double, std::span<const double>, std::span<double> out) {
        std::fill(out.begin(), out.end(), 0.0);
    };
    p.sigma_apply = [root2](double, std::span<const double>, std::span<const double> v,
                            std::span<double> out) {
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = root2 * v[i];
    };
    p.sigma_transpose_apply = p.sigma_apply;
    p.terminal = [](std::span<const double> x) {
        double sq = 0.0;
        for (double xi : x) sq += xi * xi;
        return sq;
    };
    p.generator_scalar = [](double, std::span<const double>, double, std::span<const double>) {
        return 0.0;
    };
    p.generator = [](Tape& tape, double, ValueId, ValueId y, ValueId) {
        return tape.scale(y, 0.0);
    };
    p.sigma_t = [root2](Tape& tape, double, ValueId, ValueId g) { return tape.scale(g, root2); };
    double sq = 0.0;
    for (double xi : p.start) sq += xi * xi;
    p.reference = sq + 2.0 * static_cast<double>(d) * p.horizon;
    p.y0_init_range = {0.0, 10.0};
    p.input_scale = 1.0;
    return p;
}

inline ProblemSpec problem_by_name(std::string_view name, std::size_t d) {
    if (name == "allen_cahn") return allen_cahn(d);
    if (name == "pricing_diffrate") return pricing_diffrate(d);
    if (name == "linear_quadratic") return linear_quadratic(d);
    throw std::invalid_argument("unknown problem: " + std::string(name));
}

} // namespace xbsde
