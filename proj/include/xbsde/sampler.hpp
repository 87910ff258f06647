#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "xbsde/problems.hpp"
#include "xbsde/rng.hpp"
#include "xbsde/tensor.hpp"

namespace xbsde {

/// Uniform partition 0 = t_0 < ... < t_N = T with dt = T / N.
struct TimeGrid {
    std::size_t steps = 1;
    double horizon = 1.0;

    TimeGrid(std::size_t n, double T) : steps(n), horizon(T) {
        if (n < 1) throw std::invalid_argument("TimeGrid: need at least one step");
        if (T <= 0.0) throw std::invalid_argument("TimeGrid: horizon must be positive");
    }

    double dt() const { return horizon / static_cast<double>(steps); }
    double t(std::size_t n) const { return dt() * static_cast<double>(n); }
};

/// Brownian increments and the induced Euler forward trajectories.
struct PathBatch {
    Tensor dw; // [M x N x d], entries ~ Normal(0, dt)
    Tensor x;  // [M x (N+1) x d], x[., 0, .] = xi

    std::size_t paths() const { return dw.extent(0); }
    std::size_t steps() const { return dw.extent(1); }
    std::size_t dim() const { return dw.extent(2); }

    std::span<const double> state(std::size_t m, std::size_t n) const {
        const std::size_t d = dim();
        return {x.data() + (m * (steps() + 1) + n) * d, d};
    }
    std::span<const double> increment(std::size_t m, std::size_t n) const {
        const std::size_t d = dim();
        return {dw.data() + (m * steps() + n) * d, d};
    }
};

/// i.i.d. Normal(0, dt) increments, deterministic given the rng stream.
inline Tensor sample_increments(std::size_t paths, const TimeGrid& grid, std::size_t d,
                                RngState& rng) {
    if (paths < 1 || d < 1)
        throw std::invalid_argument("sample_increments: paths and d must be >= 1");
    Tensor out({paths, grid.steps, d});
    rng.fill_normal(out.values(), std::sqrt(grid.dt()));
    return out;
}

/// X_{n+1} = X_n + mu(t_n, X_n) dt + sigma(t_n, X_n) dW_n, X_0 = xi.
inline PathBatch euler_forward(const ProblemSpec& problem, const TimeGrid& grid, Tensor dw) {
    if (dw.rank() != 3) throw std::invalid_argument("euler_forward: dW must be [M x N x d]");
    const std::size_t paths = dw.extent(0), steps = dw.extent(1), d = dw.extent(2);
    if (steps != grid.steps || d != problem.dim)
        throw std::invalid_argument("euler_forward: dW shape does not match grid/problem");

    PathBatch out;
    out.x = Tensor({paths, steps + 1, d});
    const double dt = grid.dt();
    std::vector<double> drift(d), diffusion(d);
    for (std::size_t m = 0; m < paths; ++m) {
        double* row = out.x.data() + m * (steps + 1) * d;
        for (std::size_t j = 0; j < d; ++j) row[j] = problem.start[j];
        for (std::size_t n = 0; n < steps; ++n) {
            const double* cur = row + n * d;
            double* next = row + (n + 1) * d;
            const std::span<const double> x_cur(cur, d);
            const std::span<const double> dw_n(dw.data() + (m * steps + n) * d, d);
            problem.mu(grid.t(n), x_cur, drift);
            problem.sigma_apply(grid.t(n), x_cur, dw_n, diffusion);
            bool finite = true;
            for (std::size_t j = 0; j < d; ++j) {
                next[j] = cur[j] + drift[j] * dt + diffusion[j];
                finite = finite && std::isfinite(next[j]);
            }
            if (!finite)
                throw std::runtime_error("euler_forward: non-finite state at step " +
                                         std::to_string(n + 1) + " (path " + std::to_string(m) +
                                         ")");
        }
    }
    out.dw = std::move(dw);
    return out;
}

struct WeakErrorPoint {
    std::size_t steps = 0;
    double bias = 0.0;      // mean g(X_T) minus the closed-form reference
    double std_error = 0.0;
};

/// Discretization probe against a problem with a known u(0, xi):
/// simulates mean g(X_T) on each grid and reports the bias. For
/// constant-coefficient problems the Euler scheme is exact in
/// distribution, so the bias is pure Monte Carlo noise.
inline std::vector<WeakErrorPoint> weak_error_probe(const ProblemSpec& problem,
                                                    std::span<const std::size_t> step_counts,
                                                    std::size_t paths, RngState& rng) {
    if (!problem.reference)
        throw std::invalid_argument("weak_error_probe: problem has no reference value");
    if (paths == 0) throw std::invalid_argument("weak_error_probe: need at least one path");
    std::vector<WeakErrorPoint> out;
    for (std::size_t n : step_counts) {
        const TimeGrid grid(n, problem.horizon);
        const PathBatch batch =
            euler_forward(problem, grid, sample_increments(paths, grid, problem.dim, rng));
        double sum = 0.0, sumsq = 0.0;
        for (std::size_t m = 0; m < paths; ++m) {
            const double v = problem.terminal(batch.state(m, n));
            sum += v;
            sumsq += v * v;
        }
        const double mean = sum / static_cast<double>(paths);
        const double var =
            std::max(0.0, sumsq / static_cast<double>(paths) - mean * mean);
        WeakErrorPoint pt;
        pt.steps = n;
        pt.bias = mean - *problem.reference;
        pt.std_error = std::sqrt(var / static_cast<double>(paths));
        out.push_back(pt);
    }
    return out;
}

} // namespace xbsde
