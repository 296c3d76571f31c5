#include "quantcal/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <memory>

namespace quantcal {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void put_u32le(std::FILE* f, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    if (std::fwrite(b, 1, 4, f) != 4)
        throw std::runtime_error("tensor write failed");
}

bool get_u32le(std::FILE* f, std::uint32_t& v) {
    unsigned char b[4];
    if (std::fread(b, 1, 4, f) != 4) return false;
    v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
        (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    return true;
}

} // namespace

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
    if (shape_.empty())
        throw std::invalid_argument("tensor shape must be non-empty");
    std::size_t n = 1;
    for (std::size_t d : shape_) {
        if (d == 0)
            throw std::invalid_argument("tensor dims must be >= 1");
        if (d > std::numeric_limits<std::size_t>::max() / n)
            throw std::invalid_argument("tensor shape overflows");
        n *= d;
    }
    if (n != values_.size())
        throw std::invalid_argument("tensor has " + std::to_string(values_.size()) +
                                    " values but shape " + shape_to_string(shape_) +
                                    " needs " + std::to_string(n));
    for (double v : values_)
        if (!std::isfinite(v))
            throw std::invalid_argument("tensor values must be finite");
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_to_string(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor tensor_create(std::vector<std::size_t> shape, std::vector<double> values) {
    return Tensor(std::move(shape), std::move(values));
}

double reduce_abs_max(const Tensor& t) {
    double m = 0.0;
    for (double v : t.values())
        m = std::max(m, std::fabs(v));
    return m;
}

double mse(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("mse shape mismatch: " + shape_to_string(a.shape()) +
                                    " vs " + shape_to_string(b.shape()));
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

void save_tensor(const std::string& path, const Tensor& t) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f)
        throw std::runtime_error("cannot open " + path + " for writing");
    if (std::fwrite("QCT1", 1, 4, f.get()) != 4)
        throw std::runtime_error("tensor write failed: " + path);
    if (t.rank() > 0xffffffffu)
        throw std::runtime_error("tensor rank too large for file format");
    put_u32le(f.get(), static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) {
        if (d > 0xffffffffu)
            throw std::runtime_error("tensor dim too large for file format");
        put_u32le(f.get(), static_cast<std::uint32_t>(d));
    }
    for (double v : t.values()) {
        float fv = static_cast<float>(v);
        if (!std::isfinite(fv))
            throw std::runtime_error("value " + std::to_string(v) +
                                     " does not fit in f32: " + path);
        std::uint32_t bits;
        std::memcpy(&bits, &fv, 4);
        put_u32le(f.get(), bits);
    }
    if (std::fflush(f.get()) != 0)
        throw std::runtime_error("tensor write failed: " + path);
}

Tensor load_tensor(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f)
        throw std::runtime_error("cannot open tensor file " + path);
    char magic[4];
    if (std::fread(magic, 1, 4, f.get()) != 4 || std::memcmp(magic, "QCT1", 4) != 0)
        throw std::runtime_error("bad magic in tensor file " + path);
    std::uint32_t rank;
    if (!get_u32le(f.get(), rank))
        throw std::runtime_error("truncated tensor file " + path);
    if (rank == 0 || rank > 32)
        throw std::runtime_error("bad rank " + std::to_string(rank) +
                                 " in tensor file " + path);
    std::vector<std::size_t> shape(rank);
    std::uint64_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        std::uint32_t d;
        if (!get_u32le(f.get(), d))
            throw std::runtime_error("truncated tensor file " + path);
        if (d == 0)
            throw std::runtime_error("zero dim in tensor file " + path);
        n *= d;
        if (n > (1u << 28))
            throw std::runtime_error("tensor too large in file " + path);
        shape[i] = d;
    }
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits;
        if (!get_u32le(f.get(), bits))
            throw std::runtime_error("truncated tensor file " + path);
        float fv;
        std::memcpy(&fv, &bits, 4);
        values[i] = static_cast<double>(fv);
    }
    return Tensor(std::move(shape), std::move(values));
}

} // namespace quantcal
