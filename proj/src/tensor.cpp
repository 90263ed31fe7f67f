#include "gm3/tensor.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace gm3 {

namespace {

constexpr char kMagic[8] = {'G', 'M', '3', 'T', 'E', 'N', 'S', 'R'};

void write_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
    return v;
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

template <typename T>
void Tensor<T>::save(std::ostream& os) const {
    os.write(kMagic, 8);
    const uint8_t dtype = uint8_t(dtype_of<T>::value);
    const uint8_t rank = uint8_t(shape_.size());
    os.write(reinterpret_cast<const char*>(&dtype), 1);
    os.write(reinterpret_cast<const char*>(&rank), 1);
    for (int d : shape_) write_u64(os, uint64_t(d));
    // Payload assumes a little-endian host, as does the rest of the project.
    os.write(reinterpret_cast<const char*>(data_.data()), std::streamsize(data_.size() * sizeof(T)));
    if (!os) throw IoError("tensor save: stream write failed");
}

template <typename T>
Tensor<T> Tensor<T>::load(std::istream& is) {
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0) throw IoError("tensor load: bad magic");
    uint8_t dtype = 0, rank = 0;
    is.read(reinterpret_cast<char*>(&dtype), 1);
    is.read(reinterpret_cast<char*>(&rank), 1);
    if (dtype != uint8_t(dtype_of<T>::value)) {
        throw IoError("tensor load: dtype byte " + std::to_string(int(dtype)) + " does not match requested dtype " +
                      std::to_string(int(dtype_of<T>::value)));
    }
    std::vector<int> shape(rank);
    for (auto& d : shape) d = int(read_u64(is));
    Tensor<T> t(shape);
    is.read(reinterpret_cast<char*>(t.data()), std::streamsize(size_t(t.size()) * sizeof(T)));
    if (!is) throw IoError("tensor load: truncated payload");
    return t;
}

template <typename T>
void Tensor<T>::save_file(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    save(f);
}

template <typename T>
Tensor<T> Tensor<T>::load_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for read: " + path);
    return load(f);
}

std::vector<int> Rng_sample_indices_impl(Rng& rng, int n, int k);

template class Tensor<float>;
template class Tensor<double>;

}  // namespace gm3

// Rng::sample_indices lives here so common.hpp stays header-light.
namespace gm3 {

std::vector<int> Rng::sample_indices(int n, int k) {
    if (k < 0 || k > n) throw ContractError("sample_indices: k out of range");
    // Partial Fisher-Yates over an index pool.
    std::vector<int> pool(size_t(n));
    for (int i = 0; i < n; ++i) pool[size_t(i)] = i;
    for (int i = 0; i < k; ++i) {
        const int j = i + int(below(n - i));
        std::swap(pool[size_t(i)], pool[size_t(j)]);
    }
    std::vector<int> out(pool.begin(), pool.begin() + k);
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace gm3
