#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "gradmem/common.hpp"
#include "gradmem/rng.hpp"

namespace gradmem {

// Allocator that feeds the global byte counters; lets the double-backward
// bench report honest peak allocation including fused-kernel scratch.
template <class T>
struct TrackingAlloc {
    using value_type = T;
    TrackingAlloc() = default;
    template <class U>
    TrackingAlloc(const TrackingAlloc<U>&) {}

    T* allocate(std::size_t n) {
        membytes::on_alloc(static_cast<int64_t>(n * sizeof(T)));
        return static_cast<T*>(::operator new(n * sizeof(T)));
    }
    void deallocate(T* p, std::size_t n) {
        membytes::on_free(static_cast<int64_t>(n * sizeof(T)));
        ::operator delete(p);
    }
    bool operator==(const TrackingAlloc&) const { return true; }
    bool operator!=(const TrackingAlloc&) const { return false; }
};

using Dims = std::vector<int64_t>;

inline int64_t dims_numel(const Dims& d) {
    int64_t n = 1;
    for (int64_t v : d) n *= v;
    return n;
}

inline std::string dims_str(const Dims& d) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < d.size(); ++i) os << (i ? "," : "") << d[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor. Rank 0 is a scalar (numel 1). Ops that care about
// a 2-D view treat the last dim as columns and everything before as rows.
template <class Real>
struct Tensor {
    Dims dims;
    std::vector<Real, TrackingAlloc<Real>> data;

    Tensor() = default;
    explicit Tensor(Dims d) : dims(std::move(d)), data(static_cast<size_t>(dims_numel(dims)), Real(0)) {}
    Tensor(Dims d, Real fill) : dims(std::move(d)), data(static_cast<size_t>(dims_numel(dims)), fill) {}

    static Tensor scalar(Real v) {
        Tensor t{Dims{}};
        t.data[0] = v;
        return t;
    }
    static Tensor zeros(Dims d) { return Tensor(std::move(d)); }
    static Tensor full(Dims d, Real v) { return Tensor(std::move(d), v); }
    static Tensor from(Dims d, std::initializer_list<Real> vals) {
        Tensor t{std::move(d)};
        if (static_cast<int64_t>(vals.size()) != t.numel())
            throw TapeError("Tensor::from: value count does not match dims");
        std::copy(vals.begin(), vals.end(), t.data.begin());
        return t;
    }
    static Tensor identity(int64_t n) {
        Tensor t{Dims{n, n}};
        for (int64_t i = 0; i < n; ++i) t.data[static_cast<size_t>(i * n + i)] = Real(1);
        return t;
    }
    static Tensor randn(Dims d, Rng& rng, Real std_dev) {
        Tensor t{std::move(d)};
        for (auto& v : t.data) v = static_cast<Real>(rng.normal() * static_cast<double>(std_dev));
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t rank() const { return static_cast<int64_t>(dims.size()); }
    int64_t cols() const { return dims.empty() ? 1 : dims.back(); }
    int64_t rows() const { return dims.empty() ? 1 : numel() / cols(); }

    Real& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
    Real at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }

    bool same_shape(const Tensor& o) const { return dims == o.dims; }

    bool all_finite() const {
        // branchless fast path: a NaN or Inf element poisons the sum. The sum
        // itself cannot overflow for data that is anywhere near trainable.
        double s0 = 0, s1 = 0;
        const size_t n = data.size();
        size_t i = 0;
        for (; i + 1 < n; i += 2) {
            s0 += static_cast<double>(data[i]);
            s1 += static_cast<double>(data[i + 1]);
        }
        if (i < n) s0 += static_cast<double>(data[i]);
        return std::isfinite(s0 + s1);
    }

    template <class Other>
    Tensor<Other> cast() const {
        Tensor<Other> t{dims};
        for (size_t i = 0; i < data.size(); ++i) t.data[i] = static_cast<Other>(data[i]);
        return t;
    }

    double norm2() const {
        double s = 0;
        for (Real v : data) s += static_cast<double>(v) * static_cast<double>(v);
        return std::sqrt(s);
    }

    double max_abs_diff(const Tensor& o) const {
        double m = 0;
        for (size_t i = 0; i < data.size(); ++i)
            m = std::max(m, std::abs(static_cast<double>(data[i]) - static_cast<double>(o.data[i])));
        return m;
    }
};

}  // namespace gradmem
