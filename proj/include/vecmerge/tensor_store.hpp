// SPDX-License-Identifier: Apache-2.0
//
// Tensor archive I/O.
//
// Layout: an 8-byte little-endian header length N, N bytes of UTF-8 JSON
// header, then the raw little-endian data region. The header maps each tensor
// name to {"dtype", "shape", "data_offsets": [begin, end]} with offsets
// relative to the start of the data region, plus an optional "__metadata__"
// object of string values.
//
// The writer is canonical: tensors are laid out in lexicographic name order,
// packed from offset 0, with no header padding. Identical checkpoints always
// serialize to identical bytes.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "vecmerge/dtype.hpp"

namespace vecmerge {

using Shape = std::vector<std::uint64_t>;

/// Element count of a shape; an empty shape is a scalar.
std::uint64_t shape_numel(const Shape& shape);
std::string format_shape(const Shape& shape);

inline constexpr std::string_view kMetadataKey = "__metadata__";

/// A dense row-major tensor holding its elements in storage dtype.
class Tensor {
public:
    Tensor() = default;
    Tensor(DType dtype, Shape shape, std::vector<std::byte> bytes);

    static Tensor from_f64(DType dtype, Shape shape, std::span<const double> values);

    DType dtype() const { return dtype_; }
    const Shape& shape() const { return shape_; }
    std::uint64_t numel() const { return shape_numel(shape_); }
    std::span<const std::byte> bytes() const { return bytes_; }

    std::vector<double> to_f64() const;
    double at(std::uint64_t index) const { return decode_one(dtype_, bytes_, index); }

    /// Re-encodes into `target` with round-to-nearest-even. Same-dtype casts copy bits.
    Tensor cast(DType target) const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    DType dtype_ = DType::F32;
    Shape shape_;
    std::vector<std::byte> bytes_;
};

struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> metadata;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/// Header entry for one tensor. Offsets are relative to the data region.
struct TensorSpec {
    std::string name;
    DType dtype = DType::F32;
    Shape shape;
    std::uint64_t begin = 0;
    std::uint64_t end = 0;

    std::uint64_t numel() const { return shape_numel(shape); }
};

/// Format or consistency failure while decoding an archive.
class ArchiveError : public std::runtime_error {
public:
    ArchiveError(const std::string& message, std::string tensor = {}, std::uint64_t offset = 0);

    const std::string& tensor() const { return tensor_; }
    std::uint64_t offset() const { return offset_; }

private:
    std::string tensor_;
    std::uint64_t offset_;
};

struct Violation {
    std::string kind;
    std::string tensor;
    std::uint64_t offset = 0;
    std::string message;
};

struct ValidationReport {
    std::string path;
    std::size_t tensor_count = 0;
    std::uint64_t file_bytes = 0;
    std::uint64_t header_bytes = 0;
    std::uint64_t data_bytes = 0;
    std::map<std::string, std::size_t> dtype_counts;
    std::vector<Violation> violations;

    bool valid() const { return violations.empty(); }
    /// Stable-key JSON rendering used by `inspect`.
    std::string to_json(int indent = 2) const;
};

struct DTypePolicy {
    std::optional<DType> cast_to;  // nullopt keeps every tensor's dtype
    bool allow_nonfinite = true;
};

Checkpoint read_archive(std::span<const std::byte> bytes);
Checkpoint read_archive(const std::filesystem::path& path);

std::vector<std::byte> write_archive(const Checkpoint& checkpoint, const DTypePolicy& policy = {});

/// Writes to a temporary sibling and renames into place.
void save_archive(const Checkpoint& checkpoint, const std::filesystem::path& path,
                  const DTypePolicy& policy = {});

/// Checks every format invariant and reports violations instead of throwing.
/// Throws only when the file cannot be read.
ValidationReport validate_archive(const std::filesystem::path& path);
ValidationReport validate_archive(std::span<const std::byte> bytes);

/// Header-only view of an archive file with on-demand reads of tensor data.
/// Holds no tensor data itself, so arbitrarily large archives can be streamed.
class ArchiveReader {
public:
    explicit ArchiveReader(const std::filesystem::path& path);

    const std::filesystem::path& path() const { return path_; }
    /// Entries in lexicographic name order.
    const std::map<std::string, TensorSpec>& specs() const { return specs_; }
    const std::map<std::string, std::string>& metadata() const { return metadata_; }
    bool contains(const std::string& name) const { return specs_.count(name) != 0; }
    const TensorSpec& spec(const std::string& name) const;

    /// Raw storage bytes of elements [first, first + count).
    std::vector<std::byte> read_bytes(const std::string& name, std::uint64_t first, std::uint64_t count);
    /// Elements [first, first + count) widened to binary64.
    std::vector<double> read_f64(const std::string& name, std::uint64_t first, std::uint64_t count);
    Tensor read_tensor(const std::string& name);

private:
    std::filesystem::path path_;
    std::ifstream stream_;
    std::uint64_t data_start_ = 0;
    std::map<std::string, TensorSpec> specs_;
    std::map<std::string, std::string> metadata_;
};

/// Declared output tensor for ArchiveWriter.
struct OutputTensor {
    std::string name;
    DType dtype = DType::F32;
    Shape shape;
};

/// Streams a canonical archive to disk: the header is written up front from
/// the declared tensors, data is appended in name order, and the file only
/// appears at its final path after `finish()`.
class ArchiveWriter {
public:
    ArchiveWriter(std::filesystem::path path, std::vector<OutputTensor> tensors,
                  const std::map<std::string, std::string>& metadata);
    ~ArchiveWriter();

    ArchiveWriter(const ArchiveWriter&) = delete;
    ArchiveWriter& operator=(const ArchiveWriter&) = delete;

    /// Declared tensors in the order their data must be appended.
    const std::vector<OutputTensor>& layout() const { return tensors_; }
    void append(std::span<const std::byte> bytes);
    void finish();

private:
    std::filesystem::path path_;
    std::filesystem::path temp_path_;
    std::ofstream stream_;
    std::vector<OutputTensor> tensors_;
    std::uint64_t expected_bytes_ = 0;
    std::uint64_t written_bytes_ = 0;
    bool finished_ = false;
};

/// Header bytes (length prefix + JSON) for tensors in the given order.
std::string encode_header(const std::vector<OutputTensor>& tensors,
                          const std::map<std::string, std::string>& metadata);

/// Temporary path in the same directory used for atomic replacement.
std::filesystem::path temp_sibling(const std::filesystem::path& path);

}  // namespace vecmerge
