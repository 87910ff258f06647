#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "xbsde/param_store.hpp"
#include "xbsde/tensor.hpp"

namespace xbsde {

struct ValueId {
    std::uint32_t index = UINT32_MAX;
    bool valid() const { return index != UINT32_MAX; }
};

/// Ridge added to every recorded reciprocal denominator. Keeps the
/// Cauchy-basis division finite even when a pole crosses the data.
constexpr double kEpsDiv = 1e-12;

/// Tape-based reverse-mode differentiation over dense tensors.
///
/// Nodes are appended in topological order (parents always precede
/// children), so one reverse sweep visits each node exactly once.
/// Operations are batched: one node covers a whole path batch, which
/// keeps the tape size proportional to the network evaluation count
/// rather than the scalar count. Every recorded value is checked
/// finite on entry; violations throw.
class Tape {
public:
    using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MatMap = Eigen::Map<Matrix>;
    using CMatMap = Eigen::Map<const Matrix>;
    using VecMap = Eigen::Map<Eigen::VectorXd>;
    using CVecMap = Eigen::Map<const Eigen::VectorXd>;

    enum class Op : std::uint8_t {
        Constant,
        Param,
        Affine,
        Relu,
        Tanh,
        Square,
        Recip,
        Add,
        Sub,
        Mul,
        Scale,
        BroadcastRow,
        BroadcastScalar,
        ReduceSum,
        ReduceMean,
    };

    static constexpr int kAxisAll = -1;

    // ---- leaves ----

    ValueId constant(Tensor t) {
        Node n;
        n.op = Op::Constant;
        n.value = std::move(t);
        return push(std::move(n), "constant");
    }

    /// Records the current value of a parameter; backward routes the
    /// gradient into the owning store.
    ValueId param(const ParamStore& store, ParamId p) {
        Node n;
        n.op = Op::Param;
        n.param = p;
        n.value = store.value(p);
        return push(std::move(n), "param");
    }

    // ---- affine map: y = x W^T (+ b), W is [d_out x d_in] ----

    ValueId affine(ValueId x, ValueId w, ValueId b = ValueId{}) {
        const Tensor& xv = val(x);
        const Tensor& wv = val(w);
        if (wv.rank() != 2) throw std::invalid_argument("affine: W must be rank 2");
        const std::size_t d_out = wv.extent(0), d_in = wv.extent(1);
        const bool batched = xv.rank() == 2;
        if ((batched ? xv.extent(1) : xv.size()) != d_in)
            throw std::invalid_argument("affine: x/W shape mismatch " + xv.shape_str() +
                                        " vs " + wv.shape_str());
        const std::size_t rows = batched ? xv.extent(0) : 1;
        if (b.valid()) {
            const Tensor& bv = val(b);
            if (bv.rank() != 1 || bv.extent(0) != d_out)
                throw std::invalid_argument("affine: bias shape mismatch");
        }

        Tensor out(batched ? std::vector<std::size_t>{rows, d_out}
                           : std::vector<std::size_t>{d_out});
        CMatMap xm(xv.data(), rows, d_in);
        CMatMap wm(wv.data(), d_out, d_in);
        MatMap om(out.data(), rows, d_out);
        om.noalias() = xm * wm.transpose();
        if (b.valid()) {
            CVecMap bm(val(b).data(), static_cast<Eigen::Index>(d_out));
            om.rowwise() += bm.transpose();
        }

        Node n;
        n.op = Op::Affine;
        n.a = x;
        n.b = w;
        n.c = b;
        n.value = std::move(out);
        return push(std::move(n), "affine");
    }

    // ---- elementwise ----

    ValueId relu(ValueId x) { return unary(Op::Relu, x, "relu"); }
    ValueId tanh(ValueId x) { return unary(Op::Tanh, x, "tanh"); }
    ValueId square(ValueId x) { return unary(Op::Square, x, "square"); }
    /// 1 / (x + eps_div)
    ValueId reciprocal(ValueId x) { return unary(Op::Recip, x, "reciprocal"); }

    ValueId add(ValueId a, ValueId b) { return binary(Op::Add, a, b, "add"); }
    ValueId sub(ValueId a, ValueId b) { return binary(Op::Sub, a, b, "sub"); }
    ValueId mul(ValueId a, ValueId b) { return binary(Op::Mul, a, b, "mul"); }

    ValueId scale(ValueId x, double k) {
        const Tensor& xv = val(x);
        Tensor out(xv.shape());
        const double* src = xv.data();
        double* dst = out.data();
        for (std::size_t i = 0; i < xv.size(); ++i) dst[i] = k * src[i];
        Node n;
        n.op = Op::Scale;
        n.a = x;
        n.k = k;
        n.value = std::move(out);
        return push(std::move(n), "scale");
    }

    // ---- broadcasts ----

    /// v[d] -> [rows x d]; backward sums over rows.
    ValueId broadcast_row(ValueId v, std::size_t rows) {
        const Tensor& vv = val(v);
        if (vv.rank() != 1) throw std::invalid_argument("broadcast_row: expects rank-1 input");
        if (rows == 0) throw std::invalid_argument("broadcast_row: rows must be positive");
        const std::size_t d = vv.extent(0);
        Tensor out({rows, d});
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < d; ++j) out.at(i, j) = vv[j];
        Node n;
        n.op = Op::BroadcastRow;
        n.a = v;
        n.value = std::move(out);
        return push(std::move(n), "broadcast_row");
    }

    /// s[1] -> [rows]; backward sums.
    ValueId broadcast_scalar(ValueId s, std::size_t rows) {
        const Tensor& sv = val(s);
        if (sv.size() != 1) throw std::invalid_argument("broadcast_scalar: expects one element");
        if (rows == 0) throw std::invalid_argument("broadcast_scalar: rows must be positive");
        Tensor out = Tensor::full({rows}, sv[0]);
        Node n;
        n.op = Op::BroadcastScalar;
        n.a = s;
        n.value = std::move(out);
        return push(std::move(n), "broadcast_scalar");
    }

    // ---- reductions ----

    ValueId reduce_sum(ValueId x, int axis = kAxisAll) { return reduce(Op::ReduceSum, x, axis); }
    ValueId reduce_mean(ValueId x, int axis = kAxisAll) { return reduce(Op::ReduceMean, x, axis); }
    /// Row sums of a [B x d] tensor -> [B].
    ValueId sum_rows(ValueId x) { return reduce_sum(x, 1); }

    // ---- access ----

    const Tensor& val(ValueId id) const {
        if (!id.valid() || id.index >= nodes_.size())
            throw std::out_of_range("Tape: bad value id");
        return nodes_[id.index].value;
    }

    std::size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    /// Smallest distance of any recorded relu input to its kink or of
    /// any reciprocal input to its pole. Finite-difference checks use
    /// this to reject configurations where a probe step could cross a
    /// non-smooth point.
    double nonsmooth_margin() const {
        double margin = std::numeric_limits<double>::infinity();
        for (const Node& n : nodes_) {
            if (n.op != Op::Relu && n.op != Op::Recip) continue;
            for (double v : nodes_[n.a.index].value.values())
                margin = std::min(margin, std::abs(v));
        }
        return margin;
    }

    /// Reverse sweep from a scalar loss node. Accumulates d loss / d p
    /// into the store's gradients (so parameters not reached keep
    /// whatever is there, typically zero). Internal gradient scratch is
    /// released afterwards; the recorded nodes stay so the tape can be
    /// swept again or cleared for the next rollout.
    void backward(ValueId loss, ParamStore& store, double seed = 1.0) {
        if (!loss.valid() || loss.index >= nodes_.size())
            throw std::invalid_argument("backward: bad loss id");
        if (nodes_[loss.index].value.size() != 1)
            throw std::invalid_argument("backward: loss node must be scalar, got " +
                                        nodes_[loss.index].value.shape_str());

        std::vector<Tensor> grads(nodes_.size());
        grads[loss.index] = Tensor::full(nodes_[loss.index].value.shape(), seed);

        for (std::size_t i = loss.index + 1; i-- > 0;) {
            if (grads[i].empty()) continue;
            propagate(nodes_[i], grads[i], grads, store);
        }
    }

private:
    struct Node {
        Op op = Op::Constant;
        ValueId a, b, c;
        ParamId param;
        double k = 0.0;
        int axis = kAxisAll;
        Tensor value;
    };

    ValueId push(Node n, const char* what) {
        if (!n.value.all_finite())
            throw std::runtime_error(std::string("Tape: non-finite values from op '") + what +
                                     "' with shape " + n.value.shape_str());
        nodes_.push_back(std::move(n));
        return ValueId{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    ValueId unary(Op op, ValueId x, const char* what) {
        const Tensor& xv = val(x);
        Tensor out(xv.shape());
        const double* src = xv.data();
        double* dst = out.data();
        const std::size_t count = xv.size();
        switch (op) {
            case Op::Relu:
                for (std::size_t i = 0; i < count; ++i) dst[i] = src[i] > 0.0 ? src[i] : 0.0;
                break;
            case Op::Tanh:
                for (std::size_t i = 0; i < count; ++i) dst[i] = std::tanh(src[i]);
                break;
            case Op::Square:
                for (std::size_t i = 0; i < count; ++i) dst[i] = src[i] * src[i];
                break;
            case Op::Recip:
                for (std::size_t i = 0; i < count; ++i) dst[i] = 1.0 / (src[i] + kEpsDiv);
                break;
            default:
                throw std::logic_error("unary: bad op");
        }
        Node n;
        n.op = op;
        n.a = x;
        n.value = std::move(out);
        return push(std::move(n), what);
    }

    ValueId binary(Op op, ValueId a, ValueId b, const char* what) {
        const Tensor& av = val(a);
        const Tensor& bv = val(b);
        if (!av.same_shape(bv))
            throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                        av.shape_str() + " vs " + bv.shape_str());
        Tensor out(av.shape());
        const double* pa = av.data();
        const double* pb = bv.data();
        double* dst = out.data();
        const std::size_t count = av.size();
        switch (op) {
            case Op::Add:
                for (std::size_t i = 0; i < count; ++i) dst[i] = pa[i] + pb[i];
                break;
            case Op::Sub:
                for (std::size_t i = 0; i < count; ++i) dst[i] = pa[i] - pb[i];
                break;
            case Op::Mul:
                for (std::size_t i = 0; i < count; ++i) dst[i] = pa[i] * pb[i];
                break;
            default:
                throw std::logic_error("binary: bad op");
        }
        Node n;
        n.op = op;
        n.a = a;
        n.b = b;
        n.value = std::move(out);
        return push(std::move(n), what);
    }

    ValueId reduce(Op op, ValueId x, int axis) {
        const Tensor& xv = val(x);
        const bool mean = op == Op::ReduceMean;
        Tensor out;
        if (axis == kAxisAll || xv.rank() == 1) {
            if (axis != kAxisAll && axis != 0)
                throw std::invalid_argument("reduce: invalid axis for rank-1 tensor");
            double s = 0.0;
            for (double v : xv.values()) s += v;
            out = Tensor::scalar(mean ? s / static_cast<double>(xv.size()) : s);
            axis = kAxisAll;
        } else if (xv.rank() == 2 && (axis == 0 || axis == 1)) {
            const std::size_t rows = xv.extent(0), cols = xv.extent(1);
            if (axis == 1) {
                out = Tensor({rows});
                for (std::size_t i = 0; i < rows; ++i) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) s += xv.at(i, j);
                    out[i] = mean ? s / static_cast<double>(cols) : s;
                }
            } else {
                out = Tensor({cols});
                for (std::size_t j = 0; j < cols; ++j) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < rows; ++i) s += xv.at(i, j);
                    out[j] = mean ? s / static_cast<double>(rows) : s;
                }
            }
        } else {
            throw std::invalid_argument("reduce: invalid axis " + std::to_string(axis) +
                                        " for tensor " + xv.shape_str());
        }
        Node n;
        n.op = op;
        n.a = x;
        n.axis = axis;
        n.value = std::move(out);
        return push(std::move(n), mean ? "mean" : "sum");
    }

    Tensor& grad_slot(std::vector<Tensor>& grads, ValueId id) {
        Tensor& g = grads[id.index];
        if (g.empty()) g = Tensor(nodes_[id.index].value.shape());
        return g;
    }

    void propagate(const Node& n, const Tensor& dy, std::vector<Tensor>& grads,
                   ParamStore& store) {
        switch (n.op) {
            case Op::Constant:
                break;
            case Op::Param: {
                Tensor& g = store.grad(n.param);
                if (!g.same_shape(dy)) throw std::logic_error("backward: param grad shape");
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
                break;
            }
            case Op::Affine: {
                const Tensor& xv = nodes_[n.a.index].value;
                const Tensor& wv = nodes_[n.b.index].value;
                const std::size_t d_out = wv.extent(0), d_in = wv.extent(1);
                const std::size_t rows = xv.rank() == 2 ? xv.extent(0) : 1;
                CMatMap dym(dy.data(), rows, d_out);
                CMatMap xm(xv.data(), rows, d_in);
                CMatMap wm(wv.data(), d_out, d_in);
                {
                    MatMap dxm(grad_slot(grads, n.a).data(), rows, d_in);
                    dxm.noalias() += dym * wm;
                }
                {
                    MatMap dwm(grad_slot(grads, n.b).data(), d_out, d_in);
                    dwm.noalias() += dym.transpose() * xm;
                }
                if (n.c.valid()) {
                    VecMap dbm(grad_slot(grads, n.c).data(), static_cast<Eigen::Index>(d_out));
                    dbm.noalias() += dym.colwise().sum().transpose();
                }
                break;
            }
            case Op::Relu: {
                const Tensor& xv = nodes_[n.a.index].value;
                Tensor& dx = grad_slot(grads, n.a);
                for (std::size_t i = 0; i < dx.size(); ++i)
                    if (xv[i] > 0.0) dx[i] += dy[i];
                break;
            }
            case Op::Tanh: {
                const Tensor& yv = n.value;
                Tensor& dx = grad_slot(grads, n.a);
                for (std::size_t i = 0; i < dx.size(); ++i)
                    dx[i] += (1.0 - yv[i] * yv[i]) * dy[i];
                break;
            }
            case Op::Square: {
                const Tensor& xv = nodes_[n.a.index].value;
                Tensor& dx = grad_slot(grads, n.a);
                for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += 2.0 * xv[i] * dy[i];
                break;
            }
            case Op::Recip: {
                const Tensor& yv = n.value;
                Tensor& dx = grad_slot(grads, n.a);
                for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += -yv[i] * yv[i] * dy[i];
                break;
            }
            case Op::Add: {
                Tensor& da = grad_slot(grads, n.a);
                for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i];
                Tensor& db = grad_slot(grads, n.b);
                for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[i];
                break;
            }
            case Op::Sub: {
                Tensor& da = grad_slot(grads, n.a);
                for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i];
                Tensor& db = grad_slot(grads, n.b);
                for (std::size_t i = 0; i < db.size(); ++i) db[i] -= dy[i];
                break;
            }
            case Op::Mul: {
                const Tensor& av = nodes_[n.a.index].value;
                const Tensor& bv = nodes_[n.b.index].value;
                Tensor& da = grad_slot(grads, n.a);
                for (std::size_t i = 0; i < da.size(); ++i) da[i] += bv[i] * dy[i];
                Tensor& db = grad_slot(grads, n.b);
                for (std::size_t i = 0; i < db.size(); ++i) db[i] += av[i] * dy[i];
                break;
            }
            case Op::Scale: {
                Tensor& dx = grad_slot(grads, n.a);
                for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += n.k * dy[i];
                break;
            }
            case Op::BroadcastRow: {
                Tensor& dv = grad_slot(grads, n.a);
                const std::size_t rows = n.value.extent(0), d = n.value.extent(1);
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < d; ++j) dv[j] += dy.at(i, j);
                break;
            }
            case Op::BroadcastScalar: {
                Tensor& ds = grad_slot(grads, n.a);
                for (double v : dy.values()) ds[0] += v;
                break;
            }
            case Op::ReduceSum:
            case Op::ReduceMean: {
                const Tensor& xv = nodes_[n.a.index].value;
                Tensor& dx = grad_slot(grads, n.a);
                if (n.axis == kAxisAll) {
                    const double w = n.op == Op::ReduceMean
                                         ? dy[0] / static_cast<double>(xv.size())
                                         : dy[0];
                    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += w;
                } else {
                    const std::size_t rows = xv.extent(0), cols = xv.extent(1);
                    if (n.axis == 1) {
                        const double div = n.op == Op::ReduceMean ? static_cast<double>(cols) : 1.0;
                        for (std::size_t i = 0; i < rows; ++i) {
                            const double w = dy[i] / div;
                            for (std::size_t j = 0; j < cols; ++j) dx.at(i, j) += w;
                        }
                    } else {
                        const double div = n.op == Op::ReduceMean ? static_cast<double>(rows) : 1.0;
                        for (std::size_t i = 0; i < rows; ++i)
                            for (std::size_t j = 0; j < cols; ++j) dx.at(i, j) += dy[j] / div;
                    }
                }
                break;
            }
        }
    }

    std::vector<Node> nodes_;
};

} // namespace xbsde
