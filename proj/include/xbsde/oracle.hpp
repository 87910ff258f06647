#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "xbsde/parallel.hpp"
#include "xbsde/problems.hpp"
#include "xbsde/rng.hpp"

namespace xbsde {

/// Branching-diffusion Monte Carlo configuration for generators that
/// are polynomial in y: f(y) = sum_k poly[k] * y^k.
struct BranchingConfig {
    std::map<int, double> poly;            // power -> coefficient a_k
    std::map<int, double> offspring_probs; // power -> p_k; empty = uniform on poly support
    double branch_rate = 1.0;              // beta, exponential lifetime rate
    std::size_t samples = 1'000'000;
    std::size_t max_particles = 10'000;    // per-tree safety cap
};

struct OracleEstimate {
    double mean = 0.0;
    double std_error = 0.0;
    double ci99_halfwidth = 0.0; // 2.576 * std_error
    std::size_t samples = 0;

    bool contains(double v) const { return std::abs(v - mean) <= ci99_halfwidth; }
};

namespace detail {

constexpr double kZNormal99 = 2.576;
constexpr std::size_t kOracleChunk = 4096;

inline double positive_uniform(RngState& rng) {
    return 1.0 - rng.next_uniform(); // in (0, 1]
}

/// Verifies mu == 0 and extracts the constant diagonal of sigma;
/// throws if the problem does not have that shape.
inline std::vector<double> constant_diagonal_sigma(const ProblemSpec& problem) {
    const std::size_t d = problem.dim;
    std::vector<double> probe(d), out(d), diag(d), unit(d, 1.0);
    const double times[] = {0.0, 0.5 * problem.horizon};
    for (double t : times) {
        problem.mu(t, problem.start, probe);
        for (double v : probe)
            if (v != 0.0)
                throw std::invalid_argument("oracle: drift must vanish for this estimator");
    }
    problem.sigma_apply(0.0, problem.start, unit, diag);
    // Same action at a shifted state and time means sigma is constant;
    // acting diagonally on a non-uniform vector pins the structure.
    std::vector<double> shifted(problem.start.begin(), problem.start.end());
    for (double& v : shifted) v += 0.7;
    std::vector<double> ramp(d);
    for (std::size_t j = 0; j < d; ++j) ramp[j] = 0.25 + static_cast<double>(j % 7);
    problem.sigma_apply(problem.horizon * 0.5, shifted, ramp, out);
    for (std::size_t j = 0; j < d; ++j)
        if (std::abs(out[j] - diag[j] * ramp[j]) > 1e-12 * (1.0 + std::abs(out[j])))
            throw std::invalid_argument("oracle: sigma must be a constant diagonal");
    return diag;
}

inline void check_polynomial_generator(const ProblemSpec& problem,
                                       const std::map<int, double>& poly) {
    RngState rng(0xC0FFEE, 17);
    std::vector<double> z(problem.dim);
    for (int trial = 0; trial < 8; ++trial) {
        const double y = 4.0 * rng.next_uniform() - 2.0;
        rng.fill_normal(z, 1.0);
        double expect = 0.0;
        for (const auto& [k, a] : poly) expect += a * std::pow(y, k);
        const double got = problem.generator_scalar(0.1, problem.start, y, z);
        if (std::abs(got - expect) > 1e-10 * (1.0 + std::abs(expect)))
            throw std::invalid_argument(
                "oracle: generator does not match the configured polynomial "
                "(or depends on z)");
    }
}

struct ChunkStat {
    double sum = 0.0, sumsq = 0.0;
    std::size_t count = 0;
};

inline OracleEstimate merge_chunks(const std::vector<ChunkStat>& chunks) {
    double sum = 0.0, sumsq = 0.0;
    std::size_t n = 0;
    for (const ChunkStat& c : chunks) {
        sum += c.sum;
        sumsq += c.sumsq;
        n += c.count;
    }
    OracleEstimate est;
    est.samples = n;
    est.mean = sum / static_cast<double>(n);
    const double var =
        n > 1 ? std::max(0.0, (sumsq - static_cast<double>(n) * est.mean * est.mean) /
                                  static_cast<double>(n - 1))
              : 0.0;
    est.std_error = std::sqrt(var / static_cast<double>(n));
    est.ci99_halfwidth = kZNormal99 * est.std_error;
    return est;
}

} // namespace detail

/// Unbiased branching-diffusion estimate of u(0, xi) for problems with
/// mu = 0, constant diagonal sigma and a polynomial-in-y generator.
///
/// Each sample grows a tree from (0, xi). A particle born at time b
/// draws a lifetime tau ~ Exp(beta); if b + tau >= T it becomes a leaf
/// contributing g(X_T) * exp(beta (T - b)), otherwise it branches into
/// k offspring with probability p_k, contributing a_k / (p_k beta) *
/// exp(beta tau). Particles move by exact Gaussian transitions.
/// Every tree uses its own counter-based stream derived from the
/// sample index, so the result does not depend on the worker count.
inline OracleEstimate branching_estimate(const ProblemSpec& problem,
                                         const BranchingConfig& cfg, std::uint64_t seed,
                                         std::size_t workers = 0) {
    using namespace detail;
    if (cfg.samples == 0) throw std::invalid_argument("branching_estimate: samples must be > 0");
    if (cfg.branch_rate <= 0.0)
        throw std::invalid_argument("branching_estimate: branch rate must be positive");
    const std::vector<double> diag = constant_diagonal_sigma(problem);
    check_polynomial_generator(problem, cfg.poly);

    std::map<int, double> probs = cfg.offspring_probs;
    if (probs.empty() && !cfg.poly.empty()) {
        const double p = 1.0 / static_cast<double>(cfg.poly.size());
        for (const auto& [k, a] : cfg.poly) probs.emplace(k, p);
    }
    double total_p = 0.0;
    for (const auto& [k, p] : probs) {
        if (p <= 0.0) throw std::invalid_argument("branching_estimate: offspring probs must be positive");
        if (!cfg.poly.count(k))
            throw std::invalid_argument("branching_estimate: offspring power not in polynomial");
        total_p += p;
    }
    for (const auto& [k, a] : cfg.poly)
        if (a != 0.0 && !probs.count(k))
            throw std::invalid_argument("branching_estimate: polynomial power has no offspring probability");
    if (!cfg.poly.empty() && std::abs(total_p - 1.0) > 1e-12)
        throw std::invalid_argument("branching_estimate: offspring probs must sum to 1");

    // Flattened offspring table for inverse-CDF sampling.
    std::vector<int> powers;
    std::vector<double> pvals, weights; // weights: a_k / p_k
    for (const auto& [k, p] : probs) {
        powers.push_back(k);
        pvals.push_back(p);
        weights.push_back(cfg.poly.at(k) / p);
    }

    const std::size_t d = problem.dim;
    const double T = problem.horizon;
    const double beta = cfg.branch_rate;
    const bool pure_linear = cfg.poly.empty();

    struct Particle {
        double birth;
        std::vector<double> pos;
    };

    const std::size_t n_chunks = (cfg.samples + kOracleChunk - 1) / kOracleChunk;
    std::vector<ChunkStat> chunks(n_chunks);

    parallel_for(n_chunks, [&](std::size_t chunk) {
        const std::size_t begin = chunk * kOracleChunk;
        const std::size_t end = std::min(cfg.samples, begin + kOracleChunk);
        ChunkStat stat;
        std::vector<Particle> stack;
        for (std::size_t s = begin; s < end; ++s) {
            RngState rng(seed, rng_stream::kOracleBase + s);
            double value = 1.0;
            std::size_t born = 1;
            stack.clear();
            stack.push_back({0.0, problem.start});
            while (!stack.empty()) {
                Particle p = std::move(stack.back());
                stack.pop_back();
                const double remaining = T - p.birth;
                const double tau =
                    pure_linear ? remaining
                                : -std::log(positive_uniform(rng)) / beta;
                if (pure_linear || tau >= remaining) {
                    // Leaf: survives to T. No survival correction in the
                    // degenerate f == 0 case (it cancels exactly).
                    const double step = std::sqrt(remaining);
                    for (std::size_t j = 0; j < d; ++j)
                        p.pos[j] += diag[j] * step * rng.next_normal();
                    value *= problem.terminal(p.pos);
                    if (!pure_linear) value *= std::exp(beta * remaining);
                } else {
                    const double step = std::sqrt(tau);
                    for (std::size_t j = 0; j < d; ++j)
                        p.pos[j] += diag[j] * step * rng.next_normal();
                    double u = rng.next_uniform();
                    std::size_t pick = 0;
                    while (pick + 1 < pvals.size() && u >= pvals[pick]) {
                        u -= pvals[pick];
                        ++pick;
                    }
                    value *= std::exp(beta * tau) * weights[pick];
                    const int offspring = powers[pick];
                    born += static_cast<std::size_t>(offspring);
                    if (born > cfg.max_particles)
                        throw std::runtime_error(
                            "branching_estimate: particle cap exceeded at sample " +
                            std::to_string(s));
                    const double birth = p.birth + tau;
                    for (int child = 0; child < offspring; ++child)
                        stack.push_back({birth, p.pos});
                }
            }
            stat.sum += value;
            stat.sumsq += value * value;
            ++stat.count;
        }
        chunks[chunk] = stat;
    }, workers);

    return detail::merge_chunks(chunks);
}

/// Plain Monte Carlo mean of g(X_T) for problems with f == 0. Exact
/// terminal sampling when mu = 0 and sigma is constant diagonal,
/// otherwise Euler simulation with `euler_steps` steps.
inline OracleEstimate feynman_kac_linear(const ProblemSpec& problem, std::size_t samples,
                                         std::uint64_t seed, std::size_t euler_steps = 100,
                                         std::size_t workers = 0) {
    using namespace detail;
    if (samples == 0) throw std::invalid_argument("feynman_kac_linear: samples must be > 0");
    {
        RngState rng(0xFEED, 23);
        std::vector<double> z(problem.dim);
        for (int trial = 0; trial < 4; ++trial) {
            rng.fill_normal(z, 1.0);
            if (problem.generator_scalar(0.2, problem.start, rng.next_normal(), z) != 0.0)
                throw std::invalid_argument("feynman_kac_linear: generator must be zero");
        }
    }

    bool exact = true;
    std::vector<double> diag;
    try {
        diag = constant_diagonal_sigma(problem);
    } catch (const std::invalid_argument&) {
        exact = false;
    }

    const std::size_t d = problem.dim;
    const double T = problem.horizon;
    const std::size_t n_chunks = (samples + kOracleChunk - 1) / kOracleChunk;
    std::vector<ChunkStat> chunks(n_chunks);

    parallel_for(n_chunks, [&](std::size_t chunk) {
        const std::size_t begin = chunk * kOracleChunk;
        const std::size_t end = std::min(samples, begin + kOracleChunk);
        ChunkStat stat;
        std::vector<double> x(d), drift(d), diffusion(d), dw(d);
        for (std::size_t s = begin; s < end; ++s) {
            RngState rng(seed, rng_stream::kOracleBase + s);
            x.assign(problem.start.begin(), problem.start.end());
            if (exact) {
                const double step = std::sqrt(T);
                for (std::size_t j = 0; j < d; ++j) x[j] += diag[j] * step * rng.next_normal();
            } else {
                const double dt = T / static_cast<double>(euler_steps);
                const double sqrt_dt = std::sqrt(dt);
                for (std::size_t n = 0; n < euler_steps; ++n) {
                    const double t = dt * static_cast<double>(n);
                    rng.fill_normal(dw, sqrt_dt);
                    problem.mu(t, x, drift);
                    problem.sigma_apply(t, x, dw, diffusion);
                    for (std::size_t j = 0; j < d; ++j) x[j] += drift[j] * dt + diffusion[j];
                }
            }
            const double v = problem.terminal(x);
            stat.sum += v;
            stat.sumsq += v * v;
            ++stat.count;
        }
        chunks[chunk] = stat;
    }, workers);

    return detail::merge_chunks(chunks);
}

/// u(0, xi) = |xi|^2 + 2 d T for the quadratic sanity problem.
inline double closed_form_quadratic(std::size_t d, double horizon,
                                    std::span<const double> xi) {
    double sq = 0.0;
    for (double v : xi) sq += v * v;
    return sq + 2.0 * static_cast<double>(d) * horizon;
}

} // namespace xbsde
