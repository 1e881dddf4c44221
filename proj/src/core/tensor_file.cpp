#include "oclapo/core/tensor_file.hpp"

#include <cstring>
#include <fstream>

namespace oclapo {

namespace {
constexpr char kMagic[4] = {'O', 'C', 'L', 'A'};
constexpr size_t kHeaderSize = 64;
constexpr size_t kMaxRank = 6;
}  // namespace

void write_record(std::ostream& os, const TensorRec& rec) {
    if (rec.dims.size() > kMaxRank) throw std::runtime_error("tensor rank > 6");
    uint8_t header[kHeaderSize] = {0};
    std::memcpy(header, kMagic, 4);
    const auto dtype = static_cast<uint32_t>(rec.dtype);
    const auto rank = static_cast<uint32_t>(rec.dims.size());
    std::memcpy(header + 4, &dtype, 4);
    std::memcpy(header + 8, &rank, 4);
    for (size_t i = 0; i < rec.dims.size(); ++i) {
        const auto d = static_cast<uint64_t>(rec.dims[i]);
        std::memcpy(header + 12 + 8 * i, &d, 8);
    }
    os.write(reinterpret_cast<const char*>(header), kHeaderSize);
    os.write(reinterpret_cast<const char*>(rec.data.data()),
             static_cast<std::streamsize>(rec.data.size()));
    if (!os) throw std::runtime_error("tensor record write failed");
}

TensorRec read_record(std::istream& is) {
    uint8_t header[kHeaderSize];
    is.read(reinterpret_cast<char*>(header), kHeaderSize);
    if (!is) throw std::runtime_error("tensor record header read failed");
    if (std::memcmp(header, kMagic, 4) != 0) throw std::runtime_error("bad tensor magic");
    uint32_t dtype = 0, rank = 0;
    std::memcpy(&dtype, header + 4, 4);
    std::memcpy(&rank, header + 8, 4);
    if (dtype > 2 || rank > kMaxRank) throw std::runtime_error("bad tensor header");
    TensorRec rec;
    rec.dtype = static_cast<Dtype>(dtype);
    rec.dims.resize(rank);
    for (size_t i = 0; i < rank; ++i) {
        uint64_t d = 0;
        std::memcpy(&d, header + 12 + 8 * i, 8);
        rec.dims[i] = static_cast<int64_t>(d);
    }
    rec.data.resize(static_cast<size_t>(rec.count()) * dtype_size(rec.dtype));
    is.read(reinterpret_cast<char*>(rec.data.data()),
            static_cast<std::streamsize>(rec.data.size()));
    if (!is) throw std::runtime_error("tensor record payload read failed");
    return rec;
}

void write_records(const std::filesystem::path& path, const std::vector<TensorRec>& recs) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path.string());
    for (const auto& r : recs) write_record(os, r);
}

std::vector<TensorRec> read_records(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for read: " + path.string());
    std::vector<TensorRec> recs;
    while (is.peek() != std::char_traits<char>::eof()) recs.push_back(read_record(is));
    return recs;
}

void write_named_records(const std::filesystem::path& path,
                         const std::vector<std::pair<std::string, TensorRec>>& recs) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path.string());
    for (const auto& [name, rec] : recs) {
        const auto len = static_cast<uint32_t>(name.size());
        os.write(reinterpret_cast<const char*>(&len), 4);
        os.write(name.data(), len);
        write_record(os, rec);
    }
}

std::vector<std::pair<std::string, TensorRec>> read_named_records(
    const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for read: " + path.string());
    std::vector<std::pair<std::string, TensorRec>> recs;
    while (is.peek() != std::char_traits<char>::eof()) {
        uint32_t len = 0;
        is.read(reinterpret_cast<char*>(&len), 4);
        if (!is) break;
        std::string name(len, '\0');
        is.read(name.data(), len);
        recs.emplace_back(std::move(name), read_record(is));
    }
    return recs;
}

}  // namespace oclapo
