#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "xbsde/networks.hpp"
#include "xbsde/param_store.hpp"
#include "xbsde/problems.hpp"
#include "xbsde/rng.hpp"
#include "xbsde/sampler.hpp"
#include "xbsde/tape.hpp"

namespace xbsde {

/// Piecewise-constant learning rate: (start iteration, rate) stages.
struct LrSchedule {
    std::vector<std::pair<long, double>> stages{{0, 5e-3}, {3000, 5e-4}};

    static LrSchedule constant(double rate) { return {{{0, rate}}}; }

    double at(long iteration) const {
        if (stages.empty() || stages.front().first != 0)
            throw std::invalid_argument("LrSchedule: first stage must start at iteration 0");
        double rate = stages.front().second;
        for (const auto& [start, r] : stages)
            if (iteration >= start) rate = r;
        return rate;
    }
};

struct SolverConfig {
    TimeMode mode = TimeMode::discrete;
    NetworkConfig net;
    std::size_t steps = 20;       // N
    std::size_t batch = 64;       // M
    long iterations = 10000;
    LrSchedule lr;
    AdamConfig adam;
    /// Averaging window [lo, hi) over recorded theta_u0; negative lo
    /// means "second half of training" (5000..10000 at the default
    /// iteration count).
    std::pair<long, long> window{-1, -1};
    int runs = 5;
    std::uint64_t seed = 0;
    double grad_clip = 10.0;

    std::pair<long, long> effective_window() const {
        if (window.first >= 0) return window;
        return {iterations / 2, iterations};
    }
};

/// theta_u0, theta_grad_u0 and the gradient sub-networks: one per
/// interior time step in discrete mode (step 0 is covered by the two
/// explicit parameters), a single (t, x) network in continuous mode.
struct SolverState {
    ParamStore store;
    ParamId y0;                    // theta_u0, shape [1]
    ParamId z0;                    // theta_grad_u0, shape [d]
    std::vector<NetHandles> nets;
    TimeMode mode = TimeMode::discrete;
    std::size_t dim = 0;
    std::size_t steps = 0;

    SolverState(const SolverConfig& cfg, const ProblemSpec& problem, std::uint64_t seed) {
        if (cfg.steps < 1) throw std::invalid_argument("SolverState: steps must be >= 1");
        if (cfg.batch < 1) throw std::invalid_argument("SolverState: batch must be >= 1");
        mode = cfg.mode;
        dim = problem.dim;
        steps = cfg.steps;

        RngState param_rng(seed, rng_stream::kParamInit);
        const auto [lo, hi] = problem.y0_init_range;
        Tensor y0_init = Tensor::scalar(lo + (hi - lo) * param_rng.next_uniform());
        y0 = store.add("y0", std::move(y0_init));
        z0 = store.add("z0", Tensor({dim}));

        RngState net_rng(seed, rng_stream::kNetworkInit);
        const std::size_t d_in = mode == TimeMode::discrete ? dim : dim + 1;
        if (mode == TimeMode::discrete) {
            for (std::size_t n = 1; n < cfg.steps; ++n) {
                char prefix[16];
                std::snprintf(prefix, sizeof(prefix), "n%03zu.", n);
                nets.push_back(init_net(store, prefix, cfg.net, d_in, dim, dim, net_rng));
            }
        } else {
            nets.push_back(init_net(store, "", cfg.net, d_in, dim, dim, net_rng));
        }
    }

    const NetHandles& net_for_step(std::size_t n) const {
        return mode == TimeMode::discrete ? nets[n - 1] : nets[0];
    }
};

/// Continuous-mode network input: first column t / T, then (x - xi) / scale.
inline Tensor continuous_input(const ProblemSpec& problem, const PathBatch& batch,
                               std::size_t n, double t) {
    const std::size_t paths = batch.paths(), d = batch.dim();
    Tensor in({paths, d + 1});
    const double tn = t / problem.horizon;
    const double inv_scale = 1.0 / problem.input_scale;
    for (std::size_t m = 0; m < paths; ++m) {
        auto x = batch.state(m, n);
        double* row = in.data() + m * (d + 1);
        row[0] = tn;
        for (std::size_t j = 0; j < d; ++j) row[j + 1] = (x[j] - problem.start[j]) * inv_scale;
    }
    return in;
}

inline Tensor state_slice(const PathBatch& batch, std::size_t n) {
    const std::size_t paths = batch.paths(), d = batch.dim();
    Tensor out({paths, d});
    for (std::size_t m = 0; m < paths; ++m) {
        auto x = batch.state(m, n);
        std::copy(x.begin(), x.end(), out.data() + m * d);
    }
    return out;
}

inline Tensor increment_slice(const PathBatch& batch, std::size_t n) {
    const std::size_t paths = batch.paths(), d = batch.dim();
    Tensor out({paths, d});
    for (std::size_t m = 0; m < paths; ++m) {
        auto w = batch.increment(m, n);
        std::copy(w.begin(), w.end(), out.data() + m * d);
    }
    return out;
}

/// The Deep BSDE rollout: Y_0 = theta_u0, the step-0 gradient input is
/// theta_grad_u0, later steps query the sub-network (or the single
/// continuous network); each step applies
///   Y_{n+1} = Y_n - f(t_n, X_n, Y_n, z_n) dt + z_n . dW_n,
/// with z_n = sigma^T(t_n, X_n) G_n, and the loss is the batch mean of
/// the squared terminal mismatch against g(X_T).
inline ValueId rollout_loss(Tape& tape, SolverState& state, const PathBatch& batch,
                            const ProblemSpec& problem, const TimeGrid& grid) {
    const std::size_t paths = batch.paths(), n_steps = batch.steps();
    if (n_steps != state.steps || n_steps != grid.steps)
        throw std::invalid_argument("rollout_loss: batch does not match grid/state");
    const double dt = grid.dt();

    Tensor terminal({paths});
    for (std::size_t m = 0; m < paths; ++m)
        terminal[m] = problem.terminal(batch.state(m, n_steps));

    ValueId y = tape.broadcast_scalar(tape.param(state.store, state.y0), paths);
    for (std::size_t n = 0; n < n_steps; ++n) {
        try {
            const double t = grid.t(n);
            const ValueId x_n = tape.constant(state_slice(batch, n));
            ValueId g;
            if (n == 0) {
                g = tape.broadcast_row(tape.param(state.store, state.z0), paths);
            } else if (state.mode == TimeMode::discrete) {
                g = net_forward(tape, state.store, state.net_for_step(n), x_n);
            } else {
                const ValueId in = tape.constant(continuous_input(problem, batch, n, t));
                g = net_forward(tape, state.store, state.net_for_step(n), in);
            }
            const ValueId z = problem.sigma_t(tape, t, x_n, g);
            const ValueId f_val = problem.generator(tape, t, x_n, y, z);
            const ValueId diffusion =
                tape.sum_rows(tape.mul(z, tape.constant(increment_slice(batch, n))));
            y = tape.add(tape.sub(y, tape.scale(f_val, dt)), diffusion);
        } catch (const std::exception& err) {
            throw std::runtime_error("rollout_loss: step " + std::to_string(n) + ": " +
                                     err.what());
        }
    }
    return tape.reduce_mean(tape.square(tape.sub(tape.constant(std::move(terminal)), y)));
}

struct TrainingTrace {
    std::vector<double> loss;      // per iteration
    std::vector<double> theta_u0;  // per iteration, recorded after the update
    double runtime_s = 0.0;        // training loop only
    double value = 0.0;            // extracted value function
    std::uint64_t seed = 0;
};

/// Mean of theta_u0 over iterations [lo, hi).
inline double extract_value(const TrainingTrace& trace, long lo, long hi) {
    if (lo < 0 || hi > static_cast<long>(trace.theta_u0.size()) || lo >= hi)
        throw std::invalid_argument("extract_value: empty or out-of-range window");
    double sum = 0.0;
    for (long i = lo; i < hi; ++i) sum += trace.theta_u0[static_cast<std::size_t>(i)];
    return sum / static_cast<double>(hi - lo);
}

/// One full training run on a prepared state. Fresh increments are
/// sampled every iteration; gradients are clipped at a global norm
/// before the Adam update. Deterministic given the seed.
inline TrainingTrace train_state(SolverState& state, const SolverConfig& cfg,
                                 const ProblemSpec& problem, std::uint64_t seed) {
    const TimeGrid grid(cfg.steps, problem.horizon);
    RngState path_rng(seed, rng_stream::kIncrements);
    TrainingTrace trace;
    trace.seed = seed;
    trace.loss.reserve(static_cast<std::size_t>(cfg.iterations));
    trace.theta_u0.reserve(static_cast<std::size_t>(cfg.iterations));

    if (cfg.iterations == 0) {
        trace.value = state.store.value(state.y0)[0];
        return trace;
    }

    Tape tape;
    const auto start = std::chrono::steady_clock::now();
    for (long it = 0; it < cfg.iterations; ++it) {
        PathBatch batch;
        try {
            batch = euler_forward(problem, grid,
                                  sample_increments(cfg.batch, grid, problem.dim, path_rng));
            tape.clear();
            state.store.zero_grads();
            const ValueId loss = rollout_loss(tape, state, batch, problem, grid);
            trace.loss.push_back(tape.val(loss)[0]);
            tape.backward(loss, state.store);
        } catch (const std::exception& err) {
            throw std::runtime_error("train: iteration " + std::to_string(it) + ": " +
                                     err.what());
        }
        const double norm = state.store.grad_norm();
        if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip)
            state.store.scale_grads(cfg.grad_clip / norm);
        adam_step(state.store, cfg.lr.at(it), cfg.adam, it + 1);
        trace.theta_u0.push_back(state.store.value(state.y0)[0]);
    }
    trace.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
                          .count();

    const auto [lo, hi] = cfg.effective_window();
    trace.value = extract_value(trace, lo, hi);
    return trace;
}

inline TrainingTrace train(const SolverConfig& cfg, const ProblemSpec& problem) {
    SolverState state(cfg, problem, cfg.seed);
    return train_state(state, cfg, problem, cfg.seed);
}

} // namespace xbsde
