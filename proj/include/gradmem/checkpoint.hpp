#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gradmem/common.hpp"
#include "gradmem/tensor.hpp"

namespace gradmem {

// GMEM checkpoint container: magic "GMEM", u32 format version, then a
// sequence of named tensors until EOF. Each tensor: u32 name length, UTF-8
// name, u8 dtype code {0:f32, 1:f64}, u32 rank, u32 dims..., little-endian
// row-major payload.
struct NamedTensorFile {
    struct Entry {
        std::string name;
        uint8_t dtype = 0;  // 0: f32, 1: f64
        Dims dims;
        std::vector<float> f32;
        std::vector<double> f64;

        int64_t numel() const { return dims_numel(dims); }

        template <class Real>
        Tensor<Real> as() const {
            Tensor<Real> t{dims};
            if (dtype == 0) {
                for (size_t i = 0; i < f32.size(); ++i) t.data[i] = static_cast<Real>(f32[i]);
            } else {
                for (size_t i = 0; i < f64.size(); ++i) t.data[i] = static_cast<Real>(f64[i]);
            }
            return t;
        }

        template <class Real>
        static Entry make(std::string name, const Tensor<Real>& t) {
            Entry e;
            e.name = std::move(name);
            e.dims = t.dims;
            if constexpr (sizeof(Real) == 4) {
                e.dtype = 0;
                e.f32.assign(t.data.begin(), t.data.end());
            } else {
                e.dtype = 1;
                e.f64.assign(t.data.begin(), t.data.end());
            }
            return e;
        }
    };

    std::vector<Entry> entries;

    const Entry* find(const std::string& name) const;
    const Entry& require(const std::string& name) const;  // throws IoError
};

inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const NamedTensorFile& file);
NamedTensorFile load_checkpoint(const std::string& path);

}  // namespace gradmem
