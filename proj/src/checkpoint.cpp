#include "gradmem/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace gradmem {

namespace {

void write_u32(std::ofstream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }

bool read_u32(std::ifstream& f, uint32_t& v) {
    f.read(reinterpret_cast<char*>(&v), 4);
    return f.gcount() == 4;
}

}  // namespace

const NamedTensorFile::Entry* NamedTensorFile::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

const NamedTensorFile::Entry& NamedTensorFile::require(const std::string& name) const {
    const Entry* e = find(name);
    if (!e) throw IoError("checkpoint: missing tensor '" + name + "'");
    return *e;
}

void save_checkpoint(const std::string& path, const NamedTensorFile& file) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("checkpoint: cannot open for write: " + path);
    f.write("GMEM", 4);
    write_u32(f, kCheckpointVersion);
    for (const auto& e : file.entries) {
        write_u32(f, static_cast<uint32_t>(e.name.size()));
        f.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        f.put(static_cast<char>(e.dtype));
        write_u32(f, static_cast<uint32_t>(e.dims.size()));
        for (int64_t d : e.dims) write_u32(f, static_cast<uint32_t>(d));
        if (e.dtype == 0)
            f.write(reinterpret_cast<const char*>(e.f32.data()),
                    static_cast<std::streamsize>(e.f32.size() * sizeof(float)));
        else
            f.write(reinterpret_cast<const char*>(e.f64.data()),
                    static_cast<std::streamsize>(e.f64.size() * sizeof(double)));
    }
    if (!f) throw IoError("checkpoint: write failed: " + path);
}

NamedTensorFile load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open: " + path);
    char magic[4];
    f.read(magic, 4);
    if (f.gcount() != 4 || std::memcmp(magic, "GMEM", 4) != 0)
        throw IoError("checkpoint: bad magic in " + path);
    uint32_t version = 0;
    if (!read_u32(f, version) || version != kCheckpointVersion)
        throw IoError("checkpoint: unsupported format version in " + path);

    NamedTensorFile out;
    for (;;) {
        uint32_t name_len = 0;
        if (!read_u32(f, name_len)) break;  // clean EOF
        NamedTensorFile::Entry e;
        e.name.resize(name_len);
        f.read(e.name.data(), name_len);
        int dtype = f.get();
        if (dtype != 0 && dtype != 1) throw IoError("checkpoint: bad dtype code in " + path);
        e.dtype = static_cast<uint8_t>(dtype);
        uint32_t rank = 0;
        if (!read_u32(f, rank) || rank > 8) throw IoError("checkpoint: bad rank in " + path);
        e.dims.resize(rank);
        for (uint32_t i = 0; i < rank; ++i) {
            uint32_t d = 0;
            if (!read_u32(f, d)) throw IoError("checkpoint: truncated dims in " + path);
            e.dims[i] = d;
        }
        const int64_t n = e.numel();
        if (e.dtype == 0) {
            e.f32.resize(static_cast<size_t>(n));
            f.read(reinterpret_cast<char*>(e.f32.data()), n * static_cast<int64_t>(sizeof(float)));
        } else {
            e.f64.resize(static_cast<size_t>(n));
            f.read(reinterpret_cast<char*>(e.f64.data()), n * static_cast<int64_t>(sizeof(double)));
        }
        if (!f) throw IoError("checkpoint: truncated payload for '" + e.name + "' in " + path);
        out.entries.push_back(std::move(e));
    }
    return out;
}

}  // namespace gradmem
