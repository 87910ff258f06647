#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "xbsde/tensor.hpp"

namespace xbsde {

struct ParamId {
    std::uint32_t index = UINT32_MAX;
    bool valid() const { return index != UINT32_MAX; }
};

/// Named parameter tensors with matching gradient and Adam moment
/// tensors. Insertion order is the iteration order everywhere, which
/// keeps updates and archives deterministic.
class ParamStore {
public:
    ParamId add(std::string name, Tensor init) {
        if (index_.count(name))
            throw std::invalid_argument("ParamStore: duplicate parameter name " + name);
        if (!init.all_finite())
            throw std::invalid_argument("ParamStore: non-finite init for " + name);
        Entry e;
        e.name = std::move(name);
        e.grad = Tensor(init.shape());
        e.m = Tensor(init.shape());
        e.v = Tensor(init.shape());
        e.value = std::move(init);
        entries_.push_back(std::move(e));
        const ParamId id{static_cast<std::uint32_t>(entries_.size() - 1)};
        index_.emplace(entries_.back().name, id.index);
        return id;
    }

    bool has(std::string_view name) const { return index_.count(std::string(name)) > 0; }

    ParamId id(std::string_view name) const {
        auto it = index_.find(std::string(name));
        if (it == index_.end())
            throw std::out_of_range("ParamStore: unknown parameter " + std::string(name));
        return ParamId{it->second};
    }

    std::size_t count() const { return entries_.size(); }

    /// Total number of scalar parameters.
    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.value.size();
        return n;
    }

    const std::string& name(ParamId p) const { return entry(p).name; }
    Tensor& value(ParamId p) { return entry(p).value; }
    const Tensor& value(ParamId p) const { return entry(p).value; }
    Tensor& grad(ParamId p) { return entry(p).grad; }
    const Tensor& grad(ParamId p) const { return entry(p).grad; }
    Tensor& moment1(ParamId p) { return entry(p).m; }
    Tensor& moment2(ParamId p) { return entry(p).v; }

    void zero_grads() {
        for (auto& e : entries_)
            for (double& g : e.grad.values()) g = 0.0;
    }

    double grad_norm() const {
        double sq = 0.0;
        for (const auto& e : entries_)
            for (double g : e.grad.values()) sq += g * g;
        return std::sqrt(sq);
    }

    void scale_grads(double factor) {
        for (auto& e : entries_)
            for (double& g : e.grad.values()) g *= factor;
    }

    template <class F>
    void for_each(F&& fn) {
        for (std::size_t i = 0; i < entries_.size(); ++i)
            fn(ParamId{static_cast<std::uint32_t>(i)}, entries_[i].name);
    }
    template <class F>
    void for_each(F&& fn) const {
        for (std::size_t i = 0; i < entries_.size(); ++i)
            fn(ParamId{static_cast<std::uint32_t>(i)}, entries_[i].name);
    }

    /// Binary key->tensor archive, little-endian throughout:
    /// magic "XBSDEPS1", u64 entry count, then per entry
    /// u32 name length, name bytes, u32 rank, u64 extents, f64 values.
    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("ParamStore: cannot open " + path);
        out.write(kMagic, 8);
        write_u64(out, entries_.size());
        for (const auto& e : entries_) {
            write_u32(out, static_cast<std::uint32_t>(e.name.size()));
            out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
            write_u32(out, static_cast<std::uint32_t>(e.value.rank()));
            for (std::size_t ext : e.value.shape()) write_u64(out, ext);
            out.write(reinterpret_cast<const char*>(e.value.data()),
                      static_cast<std::streamsize>(e.value.size() * sizeof(double)));
        }
        if (!out) throw std::runtime_error("ParamStore: write failed for " + path);
    }

    /// Loads an archive into an empty store. Moments start at zero.
    static ParamStore load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("ParamStore: cannot open " + path);
        char magic[8];
        in.read(magic, 8);
        if (!in || std::string_view(magic, 8) != kMagic)
            throw std::runtime_error("ParamStore: bad archive magic in " + path);
        const std::uint64_t n = read_u64(in);
        ParamStore store;
        for (std::uint64_t i = 0; i < n; ++i) {
            const std::uint32_t name_len = read_u32(in);
            std::string name(name_len, '\0');
            in.read(name.data(), name_len);
            const std::uint32_t rank = read_u32(in);
            std::vector<std::size_t> shape(rank);
            for (auto& ext : shape) ext = read_u64(in);
            Tensor t(shape);
            in.read(reinterpret_cast<char*>(t.data()),
                    static_cast<std::streamsize>(t.size() * sizeof(double)));
            if (!in) throw std::runtime_error("ParamStore: truncated archive " + path);
            store.add(std::move(name), std::move(t));
        }
        return store;
    }

private:
    struct Entry {
        std::string name;
        Tensor value, grad, m, v;
    };

    Entry& entry(ParamId p) {
        if (!p.valid() || p.index >= entries_.size())
            throw std::out_of_range("ParamStore: bad parameter id");
        return entries_[p.index];
    }
    const Entry& entry(ParamId p) const {
        if (!p.valid() || p.index >= entries_.size())
            throw std::out_of_range("ParamStore: bad parameter id");
        return entries_[p.index];
    }

    static constexpr const char* kMagic = "XBSDEPS1";

    static void write_u32(std::ofstream& out, std::uint32_t v) {
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        out.write(reinterpret_cast<const char*>(b), 4);
    }
    static void write_u64(std::ofstream& out, std::uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        out.write(reinterpret_cast<const char*>(b), 8);
    }
    static std::uint32_t read_u32(std::ifstream& in) {
        unsigned char b[4];
        in.read(reinterpret_cast<char*>(b), 4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }
    static std::uint64_t read_u64(std::ifstream& in) {
        unsigned char b[8];
        in.read(reinterpret_cast<char*>(b), 8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    }

    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::uint32_t> index_;
};

/// Adam hyperparameters. t is 1-based in the bias correction.
struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// One Adam update over every parameter in the store; moments are
/// updated in place and gradients cleared afterwards.
inline void adam_step(ParamStore& store, double lr, const AdamConfig& cfg, long t) {
    if (t < 1) throw std::invalid_argument("adam_step: t must be >= 1");
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    store.for_each([&](ParamId p, const std::string&) {
        auto val = store.value(p).values();
        auto grd = store.grad(p).values();
        auto m = store.moment1(p).values();
        auto v = store.moment2(p).values();
        for (std::size_t i = 0; i < val.size(); ++i) {
            const double g = grd[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            val[i] -= lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
            grd[i] = 0.0;
        }
    });
}

} // namespace xbsde
