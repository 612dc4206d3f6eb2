#include "retrec/io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "retrec/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts unsupported");

namespace retrec::io {

namespace {

constexpr char kMagic[4] = {'R', 'T', 'F', '1'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError("truncated tensor file");
    return v;
}

struct DirEntry {
    std::string name;
    uint32_t rows = 0, cols = 0;
    uint64_t offset = 0;
};

std::vector<DirEntry> read_directory(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw DataError("bad tensor file magic");
    const uint32_t version = read_pod<uint32_t>(is);
    if (version != kVersion)
        throw DataError("unsupported tensor file version " + std::to_string(version));
    const uint32_t count = read_pod<uint32_t>(is);
    std::vector<DirEntry> dir(count);
    for (auto& e : dir) {
        const uint32_t name_len = read_pod<uint32_t>(is);
        if (name_len > 4096) throw DataError("corrupt tensor name length");
        e.name.resize(name_len);
        is.read(e.name.data(), name_len);
        e.rows = read_pod<uint32_t>(is);
        e.cols = read_pod<uint32_t>(is);
        e.offset = read_pod<uint64_t>(is);
    }
    if (!is) throw DataError("truncated tensor directory");
    return dir;
}

}  // namespace

void save_tensor_file(
    const std::string& path,
    const std::vector<std::pair<std::string, const Matrix*>>& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open for write: " + path);
    os.write(kMagic, 4);
    write_pod(os, kVersion);
    write_pod(os, static_cast<uint32_t>(tensors.size()));
    uint64_t offset = 0;
    for (const auto& [name, m] : tensors) {
        write_pod(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod(os, static_cast<uint32_t>(m->rows()));
        write_pod(os, static_cast<uint32_t>(m->cols()));
        write_pod(os, offset);
        offset += m->size() * sizeof(float);
    }
    write_pod(os, offset);
    for (const auto& [name, m] : tensors) {
        std::vector<float> buf(m->size());
        const double* src = m->data();
        for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(src[i]);
        os.write(reinterpret_cast<const char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!os) throw DataError("write failed: " + path);
}

void load_tensor_file(
    const std::string& path,
    const std::vector<std::pair<std::string, Matrix*>>& tensors) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path);
    const auto dir = read_directory(is);
    if (dir.size() != tensors.size())
        throw DataError(path + ": expected " + std::to_string(tensors.size()) +
                        " tensors, file has " + std::to_string(dir.size()));
    const uint64_t data_bytes = read_pod<uint64_t>(is);
    const std::streampos data_start = is.tellg();
    for (size_t t = 0; t < tensors.size(); ++t) {
        const auto& [name, m] = tensors[t];
        const auto& e = dir[t];
        if (e.name != name)
            throw DataError(path + ": tensor " + std::to_string(t) + " is '" +
                            e.name + "', expected '" + name + "'");
        if (static_cast<int>(e.rows) != m->rows() ||
            static_cast<int>(e.cols) != m->cols())
            throw DataError(path + ": shape mismatch for '" + name + "': file " +
                            std::to_string(e.rows) + "x" + std::to_string(e.cols) +
                            ", expected " + std::to_string(m->rows()) + "x" +
                            std::to_string(m->cols()));
        const uint64_t bytes = static_cast<uint64_t>(m->size()) * sizeof(float);
        if (e.offset + bytes > data_bytes)
            throw DataError(path + ": tensor '" + name + "' exceeds data block");
        is.seekg(data_start + static_cast<std::streamoff>(e.offset));
        std::vector<float> buf(m->size());
        is.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(bytes));
        if (!is) throw DataError("truncated tensor data in " + path);
        double* dst = m->data();
        for (size_t i = 0; i < buf.size(); ++i) dst[i] = static_cast<double>(buf[i]);
    }
}

std::vector<std::pair<std::string, std::pair<int, int>>> list_tensor_file(
    const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path);
    std::vector<std::pair<std::string, std::pair<int, int>>> out;
    for (const auto& e : read_directory(is))
        out.emplace_back(e.name, std::make_pair(static_cast<int>(e.rows),
                                                static_cast<int>(e.cols)));
    return out;
}

}  // namespace retrec::io
