#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace oclapo {

// Binary tensor record: 64-byte header (magic "OCLA", dtype code, rank,
// dims), followed by the payload as little-endian row-major data.
//
//   bytes  0..3   magic "OCLA"
//   bytes  4..7   dtype code (u32): 0 = f32, 1 = i32, 2 = u8
//   bytes  8..11  rank (u32), at most 6
//   bytes 12..59  dims (u64 x 6, unused dims zero)
//   bytes 60..63  reserved (zero)

enum class Dtype : uint32_t { f32 = 0, i32 = 1, u8 = 2 };

inline size_t dtype_size(Dtype d) {
    switch (d) {
        case Dtype::f32: return 4;
        case Dtype::i32: return 4;
        case Dtype::u8: return 1;
    }
    throw std::runtime_error("bad dtype");
}

struct TensorRec {
    Dtype dtype = Dtype::f32;
    std::vector<int64_t> dims;
    std::vector<uint8_t> data;

    int64_t count() const {
        int64_t n = 1;
        for (int64_t d : dims) n *= d;
        return n;
    }
    int64_t dim(size_t i) const { return i < dims.size() ? dims[i] : 1; }

    const float* f32() const { return reinterpret_cast<const float*>(data.data()); }
    float* f32() { return reinterpret_cast<float*>(data.data()); }
    const int32_t* i32() const { return reinterpret_cast<const int32_t*>(data.data()); }
    int32_t* i32() { return reinterpret_cast<int32_t*>(data.data()); }
    const uint8_t* u8() const { return data.data(); }
    uint8_t* u8() { return data.data(); }

    static TensorRec zeros(Dtype t, std::vector<int64_t> shape) {
        TensorRec r;
        r.dtype = t;
        r.dims = std::move(shape);
        r.data.assign(static_cast<size_t>(r.count()) * dtype_size(t), 0);
        return r;
    }
};

void write_record(std::ostream& os, const TensorRec& rec);
TensorRec read_record(std::istream& is);

/// Multi-record file helpers. Records are identified by position; the
/// containing format documents the order.
void write_records(const std::filesystem::path& path, const std::vector<TensorRec>& recs);
std::vector<TensorRec> read_records(const std::filesystem::path& path);

/// Named records, used for model checkpoints: u32 name length + name bytes
/// precede each tensor record.
void write_named_records(const std::filesystem::path& path,
                         const std::vector<std::pair<std::string, TensorRec>>& recs);
std::vector<std::pair<std::string, TensorRec>> read_named_records(
    const std::filesystem::path& path);

/// Row-major copy between an f32 record and a (col-major) Eigen matrix.
template <typename Derived>
TensorRec to_record(const Eigen::MatrixBase<Derived>& m) {
    TensorRec r = TensorRec::zeros(Dtype::f32, {m.rows(), m.cols()});
    float* p = r.f32();
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) *p++ = static_cast<float>(m(i, j));
    return r;
}

inline Eigen::MatrixXf to_matrix(const TensorRec& r) {
    if (r.dtype != Dtype::f32 || r.dims.size() != 2)
        throw std::runtime_error("to_matrix: expected rank-2 f32 record");
    Eigen::MatrixXf m(r.dims[0], r.dims[1]);
    const float* p = r.f32();
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = *p++;
    return m;
}

}  // namespace oclapo
