#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <variant>

#include "xbsde/param_store.hpp"
#include "xbsde/rng.hpp"
#include "xbsde/tape.hpp"

namespace xbsde {

enum class Arch { xnet, two_layer };
enum class TimeMode { discrete, continuous };
enum class Activation { relu, tanh };

struct NetworkConfig {
    Arch arch = Arch::xnet;
    std::size_t basis = 0; // L for xnet; 0 means "use the problem dimension"
    Activation activation = Activation::relu; // two_layer only
};

/// Cauchy-kernel basis network. Each of the L basis functions is the
/// real/imaginary pair of 1 / (a_k . x + c_k + i e_k); every output
/// coordinate takes its own linear combination (alpha, beta) of the
/// shared pool.
struct XNetHandles {
    ParamId a;      // [L x d_in] pole direction coefficients
    ParamId c;      // [L] real offsets
    ParamId e;      // [L] imaginary offsets
    ParamId alpha;  // [d_out x L] real residue weights
    ParamId beta;   // [d_out x L] imaginary residue weights
    std::size_t basis = 0, d_in = 0, d_out = 0;
};

/// Feedforward baseline: two hidden layers of width d_in + 10, linear output.
struct FnnHandles {
    ParamId w1, b1, w2, b2, w3, b3;
    Activation activation = Activation::relu;
    std::size_t d_in = 0, hidden = 0, d_out = 0;
};

using NetHandles = std::variant<XNetHandles, FnnHandles>;

constexpr std::size_t xnet_param_count(std::size_t L, std::size_t d_in, std::size_t d_out) {
    return L * (d_in + 2) + 2 * d_out * L;
}

constexpr std::size_t fnn_param_count(std::size_t d_in, std::size_t d_out) {
    const std::size_t h = d_in + 10;
    return d_in * h + h + h * h + h + h * d_out + d_out;
}

/// Minimum |e_k| guaranteed at initialization (draws are U(0.5, 1.5));
/// e is unconstrained afterwards, the reciprocal ridge handles poles.
constexpr double kXNetEMin = 0.5;

inline Tensor normal_tensor(std::vector<std::size_t> shape, double variance, RngState& rng) {
    Tensor t(std::move(shape));
    rng.fill_normal(t.values(), std::sqrt(variance));
    return t;
}

/// Draw order: a, c, e, alpha, beta.
inline XNetHandles init_xnet(ParamStore& store, const std::string& prefix, std::size_t L,
                             std::size_t d_in, std::size_t d_out, RngState& rng) {
    if (L < 1) throw std::invalid_argument("init_xnet: basis count must be >= 1");
    XNetHandles h;
    h.basis = L;
    h.d_in = d_in;
    h.d_out = d_out;
    h.a = store.add(prefix + "a", normal_tensor({L, d_in}, 1.0 / static_cast<double>(d_in), rng));
    Tensor c({L});
    rng.fill_uniform(c.values(), -1.0, 1.0);
    h.c = store.add(prefix + "c", std::move(c));
    Tensor e({L});
    rng.fill_uniform(e.values(), kXNetEMin, 1.5);
    h.e = store.add(prefix + "e", std::move(e));
    const double wvar = 1.0 / static_cast<double>(L);
    h.alpha = store.add(prefix + "alpha", normal_tensor({d_out, L}, wvar, rng));
    h.beta = store.add(prefix + "beta", normal_tensor({d_out, L}, wvar, rng));
    return h;
}

/// He-style init for relu, Xavier-style for tanh; biases zero.
/// Draw order: W1, W2, W3.
inline FnnHandles init_fnn(ParamStore& store, const std::string& prefix, std::size_t d_in,
                           std::size_t d_out, Activation act, RngState& rng) {
    FnnHandles h;
    h.activation = act;
    h.d_in = d_in;
    h.hidden = d_in + 10;
    h.d_out = d_out;
    const double gain = act == Activation::relu ? 2.0 : 1.0;
    h.w1 = store.add(prefix + "W1",
                     normal_tensor({h.hidden, d_in}, gain / static_cast<double>(d_in), rng));
    h.w2 = store.add(prefix + "W2",
                     normal_tensor({h.hidden, h.hidden}, gain / static_cast<double>(h.hidden), rng));
    h.w3 = store.add(prefix + "W3",
                     normal_tensor({d_out, h.hidden}, gain / static_cast<double>(h.hidden), rng));
    h.b1 = store.add(prefix + "b1", Tensor({h.hidden}));
    h.b2 = store.add(prefix + "b2", Tensor({h.hidden}));
    h.b3 = store.add(prefix + "b3", Tensor({d_out}));
    return h;
}

/// Forward pass of the Cauchy basis network, recorded on the tape.
/// s_k = a_k . x + c_k, denom_k = s_k^2 + e_k^2 (ridge in reciprocal),
/// output_o = sum_k alpha[o,k] s_k/denom_k + beta[o,k] e_k/denom_k.
inline ValueId xnet_forward(Tape& tape, const ParamStore& store, const XNetHandles& h,
                            ValueId x) {
    const Tensor& xv = tape.val(x);
    const std::size_t rows = xv.rank() == 2 ? xv.extent(0) : 1;
    const ValueId a = tape.param(store, h.a);
    const ValueId c = tape.param(store, h.c);
    const ValueId e = tape.param(store, h.e);
    const ValueId alpha = tape.param(store, h.alpha);
    const ValueId beta = tape.param(store, h.beta);

    const ValueId s = tape.affine(x, a, c);                       // [B x L]
    const ValueId e_rows = tape.broadcast_row(e, rows);           // [B x L]
    const ValueId denom = tape.add(tape.square(s), tape.square(e_rows));
    const ValueId inv = tape.reciprocal(denom);
    const ValueId real_basis = tape.mul(s, inv);
    const ValueId imag_basis = tape.mul(e_rows, inv);
    return tape.add(tape.affine(real_basis, alpha), tape.affine(imag_basis, beta));
}

/// Two hidden affine+activation layers, then a linear output layer.
inline ValueId fnn_forward(Tape& tape, const ParamStore& store, const FnnHandles& h,
                           ValueId x) {
    const auto act = [&](ValueId v) {
        return h.activation == Activation::relu ? tape.relu(v) : tape.tanh(v);
    };
    const ValueId h1 = act(tape.affine(x, tape.param(store, h.w1), tape.param(store, h.b1)));
    const ValueId h2 = act(tape.affine(h1, tape.param(store, h.w2), tape.param(store, h.b2)));
    return tape.affine(h2, tape.param(store, h.w3), tape.param(store, h.b3));
}

inline ValueId net_forward(Tape& tape, const ParamStore& store, const NetHandles& net,
                           ValueId x) {
    if (const auto* xh = std::get_if<XNetHandles>(&net))
        return xnet_forward(tape, store, *xh, x);
    return fnn_forward(tape, store, std::get<FnnHandles>(net), x);
}

inline NetHandles init_net(ParamStore& store, const std::string& prefix,
                           const NetworkConfig& cfg, std::size_t d_in, std::size_t d_out,
                           std::size_t default_basis, RngState& rng) {
    if (cfg.arch == Arch::xnet) {
        const std::size_t L = cfg.basis > 0 ? cfg.basis : default_basis;
        return init_xnet(store, prefix, L, d_in, d_out, rng);
    }
    return init_fnn(store, prefix, d_in, d_out, cfg.activation, rng);
}

} // namespace xbsde
