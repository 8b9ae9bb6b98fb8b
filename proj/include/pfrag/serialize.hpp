#pragma once

// Parameter files: little-endian flat binary.
//
//   offset  size  field
//   0       4     magic "PFRG"
//   4       4     u32 format version (1)
//   8       4     u32 kind (1 predictor, 2 monitor, 3 policy)
//   12      4     u32 tensor count
//   then per tensor: u32 rows, u32 cols, rows*cols f64 values (row-major)

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "pfrag/common.hpp"

namespace pfrag {

struct Tensor {
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    Vec data;
    bool operator==(const Tensor&) const = default;
};

enum class ParamKind : std::uint32_t { Predictor = 1, Monitor = 2, Policy = 3 };

constexpr std::uint32_t kFormatVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<unsigned char, sizeof(T)> b;
    std::memcpy(b.data(), &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
    out.append(reinterpret_cast<const char*>(b.data()), sizeof(T));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw Error("parameter file truncated");
    std::array<unsigned char, sizeof(T)> b;
    std::memcpy(b.data(), in.data() + pos, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
    pos += sizeof(T);
    T v;
    std::memcpy(&v, b.data(), sizeof(T));
    return v;
}

}  // namespace detail

inline std::string encode_tensors(ParamKind kind, const std::vector<Tensor>& ts) {
    std::string out = "PFRG";
    detail::put_le<std::uint32_t>(out, kFormatVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(kind));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ts.size()));
    for (const auto& t : ts) {
        require(t.data.size() == static_cast<std::size_t>(t.rows) * t.cols, "tensor shape mismatch");
        detail::put_le(out, t.rows);
        detail::put_le(out, t.cols);
        for (double v : t.data) detail::put_le(out, v);
    }
    return out;
}

inline std::vector<Tensor> decode_tensors(ParamKind kind, const std::string& in) {
    if (in.size() < 16 || in.compare(0, 4, "PFRG") != 0) throw Error("not a parameter file");
    std::size_t pos = 4;
    if (detail::get_le<std::uint32_t>(in, pos) != kFormatVersion) throw Error("unsupported parameter file version");
    if (detail::get_le<std::uint32_t>(in, pos) != static_cast<std::uint32_t>(kind))
        throw Error("parameter file holds a different parameter kind");
    auto n = detail::get_le<std::uint32_t>(in, pos);
    std::vector<Tensor> ts(n);
    for (auto& t : ts) {
        t.rows = detail::get_le<std::uint32_t>(in, pos);
        t.cols = detail::get_le<std::uint32_t>(in, pos);
        t.data.resize(static_cast<std::size_t>(t.rows) * t.cols);
        for (auto& v : t.data) v = detail::get_le<double>(in, pos);
    }
    if (pos != in.size()) throw Error("trailing bytes in parameter file");
    return ts;
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace pfrag
