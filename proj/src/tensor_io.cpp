#include "mindiff/tensor_io.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace mindiff {

namespace {

constexpr char kMagic[4] = {'M', 'D', 'T', 'N'};
constexpr uint32_t kVersion = 1;

uint8_t dtype_code(torch::ScalarType t) {
    switch (t) {
        case torch::kFloat32: return 0;
        case torch::kFloat64: return 1;
        case torch::kInt64: return 2;
        case torch::kUInt8: return 3;
        default: throw std::runtime_error("tensor_io: unsupported dtype");
    }
}

torch::ScalarType code_dtype(uint8_t c) {
    switch (c) {
        case 0: return torch::kFloat32;
        case 1: return torch::kFloat64;
        case 2: return torch::kInt64;
        case 3: return torch::kUInt8;
        default: throw std::runtime_error("tensor_io: bad dtype code");
    }
}

}  // namespace

void save_tensor(const std::filesystem::path& path, const torch::Tensor& t) {
    torch::Tensor c = t.detach().to(torch::kCPU).contiguous();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("tensor_io: cannot open for write: " + path.string());
    out.write(kMagic, 4);
    out.write(reinterpret_cast<const char*>(&kVersion), sizeof(kVersion));
    uint8_t code = dtype_code(c.scalar_type());
    uint8_t ndim = static_cast<uint8_t>(c.dim());
    out.write(reinterpret_cast<const char*>(&code), 1);
    out.write(reinterpret_cast<const char*>(&ndim), 1);
    for (int i = 0; i < c.dim(); ++i) {
        int64_t s = c.size(i);
        out.write(reinterpret_cast<const char*>(&s), sizeof(s));
    }
    out.write(static_cast<const char*>(c.data_ptr()), c.numel() * c.element_size());
    if (!out) throw std::runtime_error("tensor_io: write failed: " + path.string());
}

torch::Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("tensor_io: cannot open: " + path.string());
    char magic[4];
    uint32_t version = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (!in || std::memcmp(magic, kMagic, 4) != 0 || version != kVersion)
        throw std::runtime_error("tensor_io: bad header: " + path.string());
    uint8_t code = 0, ndim = 0;
    in.read(reinterpret_cast<char*>(&code), 1);
    in.read(reinterpret_cast<char*>(&ndim), 1);
    std::vector<int64_t> shape(ndim);
    for (auto& s : shape) in.read(reinterpret_cast<char*>(&s), sizeof(s));
    torch::Tensor t = torch::empty(shape, code_dtype(code));
    in.read(static_cast<char*>(t.data_ptr()), t.numel() * t.element_size());
    if (!in) throw std::runtime_error("tensor_io: truncated file: " + path.string());
    return t;
}

namespace {
uint64_t fnv1a(const unsigned char* data, size_t n, uint64_t h = 14695981039346656037ull) {
    for (size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 1099511628211ull;
    }
    return h;
}
}  // namespace

uint64_t tensor_checksum(const torch::Tensor& t) {
    torch::Tensor c = t.detach().to(torch::kCPU).contiguous();
    return fnv1a(static_cast<const unsigned char*>(c.data_ptr()),
                 static_cast<size_t>(c.numel() * c.element_size()));
}

uint64_t file_checksum(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checksum: cannot open: " + path.string());
    uint64_t h = 14695981039346656037ull;
    std::vector<unsigned char> buf(1 << 16);
    while (in) {
        in.read(reinterpret_cast<char*>(buf.data()), buf.size());
        h = fnv1a(buf.data(), static_cast<size_t>(in.gcount()), h);
    }
    return h;
}

std::string checksum_hex(uint64_t sum) {
    std::ostringstream os;
    os << std::hex << sum;
    return os.str();
}

}  // namespace mindiff
