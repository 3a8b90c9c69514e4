// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the unit and acceptance tests.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "vecmerge/tensor_store.hpp"

namespace vecmerge::testutil {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "vecmerge") {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::vector<std::byte> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::vector<std::byte> out(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = static_cast<std::byte>(raw[i]);
    return out;
}

inline void write_file(const std::filesystem::path& path, std::span<const std::byte> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Shape random_shape(std::mt19937_64& rng, std::uint64_t max_numel) {
    std::uniform_int_distribution<int> rank_dist(0, 3);
    const int rank = rank_dist(rng);
    Shape shape;
    std::uint64_t numel = 1;
    for (int r = 0; r < rank; ++r) {
        std::uniform_int_distribution<std::uint64_t> dim(1, std::max<std::uint64_t>(1, max_numel / numel));
        shape.push_back(std::min<std::uint64_t>(dim(rng), 16));
        numel *= shape.back();
    }
    return shape;
}

/// Random raw bit patterns (including NaN payloads, infinities, subnormals) of a dtype.
inline Tensor random_bits_tensor(std::mt19937_64& rng, DType dtype, Shape shape) {
    std::vector<std::byte> bytes(shape_numel(shape) * dtype_size(dtype));
    for (auto& b : bytes) b = static_cast<std::byte>(rng() & 0xFF);
    return Tensor(dtype, std::move(shape), std::move(bytes));
}

inline Tensor random_normal_tensor(std::mt19937_64& rng, DType dtype, Shape shape, double sigma = 1.0) {
    std::normal_distribution<double> normal(0.0, sigma);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = normal(rng);
    return Tensor::from_f64(dtype, std::move(shape), v);
}

inline DType random_dtype(std::mt19937_64& rng) {
    constexpr DType all[] = {DType::F64, DType::F32, DType::F16, DType::BF16};
    return all[rng() % 4];
}

}  // namespace vecmerge::testutil
