// SPDX-License-Identifier: Apache-2.0

#include "vecmerge/tensor_store.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <set>

#include <unistd.h>

#include <fmt/core.h>
#include <json.hpp>

namespace vecmerge {

using nlohmann::json;

namespace {

constexpr std::uint64_t kPrefixBytes = 8;

bool checked_mul(std::uint64_t a, std::uint64_t b, std::uint64_t& out) {
    return !__builtin_mul_overflow(a, b, &out);
}

bool is_fatal(const Violation& v) { return v.kind != "non-contiguous data"; }

struct ParsedHeader {
    std::vector<TensorSpec> entries;  // header order, well-formed entries only
    std::map<std::string, std::string> metadata;
};

std::optional<std::uint64_t> as_u64(const json& j) {
    if (j.is_number_unsigned()) return j.get<std::uint64_t>();
    if (j.is_number_integer() && j.get<std::int64_t>() >= 0) {
        return static_cast<std::uint64_t>(j.get<std::int64_t>());
    }
    return std::nullopt;
}

// Decodes the JSON header and checks every entry against a data region of
// `data_len` bytes. Offsets in violations are absolute file offsets.
ParsedHeader parse_header(std::string_view text, std::uint64_t data_len, std::vector<Violation>& out) {
    ParsedHeader parsed;
    const std::uint64_t data_start = kPrefixBytes + text.size();

    std::set<std::string> seen;
    json root;
    try {
        root = json::parse(text, [&](int depth, json::parse_event_t event, json& value) {
            if (event == json::parse_event_t::key && depth == 1) {
                const auto key = value.get<std::string>();
                if (!seen.insert(key).second) {
                    out.push_back({"duplicate tensor name", key, kPrefixBytes,
                                   fmt::format("duplicate tensor name '{}' in header", key)});
                }
            }
            return true;
        });
    } catch (const json::parse_error& e) {
        out.push_back({"malformed header", {}, kPrefixBytes + e.byte, e.what()});
        return parsed;
    }
    if (!root.is_object()) {
        out.push_back({"malformed header", {}, kPrefixBytes, "header is not a JSON object"});
        return parsed;
    }

    for (const auto& [name, entry] : root.items()) {
        if (name == kMetadataKey) {
            if (!entry.is_object()) {
                out.push_back({"malformed metadata", name, kPrefixBytes, "__metadata__ must be an object"});
                continue;
            }
            for (const auto& [key, value] : entry.items()) {
                if (!value.is_string()) {
                    out.push_back({"malformed metadata", name, kPrefixBytes,
                                   fmt::format("metadata value for '{}' is not a string", key)});
                    continue;
                }
                parsed.metadata[key] = value.get<std::string>();
            }
            continue;
        }
        if (name.empty()) {
            out.push_back({"empty tensor name", name, kPrefixBytes, "tensor name is empty"});
            continue;
        }
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets")) {
            out.push_back({"malformed entry", name, kPrefixBytes,
                           fmt::format("tensor '{}' needs dtype, shape and data_offsets", name)});
            continue;
        }
        TensorSpec spec;
        spec.name = name;

        const auto& dtype = entry["dtype"];
        auto parsed_dtype = dtype.is_string() ? parse_dtype(dtype.get<std::string>()) : std::nullopt;
        if (!parsed_dtype) {
            out.push_back({"unknown dtype", name, kPrefixBytes,
                           fmt::format("tensor '{}' has unknown dtype {}", name, dtype.dump())});
            continue;
        }
        spec.dtype = *parsed_dtype;

        const auto& shape = entry["shape"];
        bool shape_ok = shape.is_array();
        if (shape_ok) {
            for (const auto& dim : shape) {
                auto d = as_u64(dim);
                if (!d) {
                    shape_ok = false;
                    break;
                }
                spec.shape.push_back(*d);
            }
        }
        if (!shape_ok) {
            out.push_back({"malformed entry", name, kPrefixBytes,
                           fmt::format("tensor '{}' shape must be a list of non-negative integers", name)});
            continue;
        }

        const auto& offsets = entry["data_offsets"];
        std::optional<std::uint64_t> begin, end;
        if (offsets.is_array() && offsets.size() == 2) {
            begin = as_u64(offsets[0]);
            end = as_u64(offsets[1]);
        }
        if (!begin || !end || *begin > *end) {
            out.push_back({"malformed entry", name, kPrefixBytes,
                           fmt::format("tensor '{}' data_offsets must be [begin, end] with begin <= end", name)});
            continue;
        }
        spec.begin = *begin;
        spec.end = *end;

        std::uint64_t numel = 1;
        std::uint64_t expected = 0;
        bool sized = true;
        for (auto d : spec.shape) sized = sized && checked_mul(numel, d, numel);
        sized = sized && checked_mul(numel, dtype_size(spec.dtype), expected);
        if (!sized || expected != spec.end - spec.begin) {
            out.push_back({"numel mismatch", name, data_start + spec.begin,
                           fmt::format("tensor '{}' spans {} bytes but shape {} of {} needs {}", name,
                                       spec.end - spec.begin, format_shape(spec.shape),
                                       dtype_name(spec.dtype), sized ? std::to_string(expected) : std::string("overflow"))});
            continue;
        }
        if (spec.end > data_len) {
            out.push_back({"out-of-bounds byte range", name, data_start + spec.begin,
                           fmt::format("tensor '{}' range [{}, {}) exceeds data region of {} bytes", name,
                                       spec.begin, spec.end, data_len)});
            continue;
        }
        parsed.entries.push_back(std::move(spec));
    }

    std::vector<const TensorSpec*> by_offset;
    for (const auto& e : parsed.entries) by_offset.push_back(&e);
    std::sort(by_offset.begin(), by_offset.end(), [](const TensorSpec* a, const TensorSpec* b) {
        return std::tie(a->begin, a->end, a->name) < std::tie(b->begin, b->end, b->name);
    });
    std::uint64_t cursor = 0;
    for (const TensorSpec* e : by_offset) {
        if (e->begin < cursor) {
            out.push_back({"overlapping byte ranges", e->name, data_start + e->begin,
                           fmt::format("tensor '{}' range [{}, {}) overlaps the previous tensor ending at {}",
                                       e->name, e->begin, e->end, cursor)});
        } else if (e->begin > cursor) {
            out.push_back({"non-contiguous data", e->name, data_start + cursor,
                           fmt::format("gap of {} bytes before tensor '{}'", e->begin - cursor, e->name)});
        }
        cursor = std::max(cursor, e->end);
    }
    if (cursor < data_len) {
        out.push_back({"non-contiguous data", {}, data_start + cursor,
                       fmt::format("{} trailing bytes after the last tensor", data_len - cursor)});
    }
    return parsed;
}

[[noreturn]] void throw_violation(const Violation& v) { throw ArchiveError(fmt::format("{}: {}", v.kind, v.message), v.tensor, v.offset); }

void throw_first_fatal(const std::vector<Violation>& violations) {
    for (const auto& v : violations) {
        if (is_fatal(v)) throw_violation(v);
    }
}

std::uint64_t read_prefix(std::span<const std::byte> bytes) {
    std::uint64_t n = 0;
    std::memcpy(&n, bytes.data(), sizeof(n));
    return n;
}

void check_writable_name(const std::string& name) {
    if (name.empty()) throw ArchiveError("tensor name is empty");
    if (name == kMetadataKey) throw ArchiveError("tensor name '__metadata__' is reserved", name);
}

void check_finite(const Tensor& t, const std::string& name) {
    for (std::uint64_t i = 0; i < t.numel(); ++i) {
        if (!std::isfinite(t.at(i))) {
            throw ArchiveError(fmt::format("tensor '{}' has a non-finite value at element {} and the "
                                           "policy forbids non-finite values",
                                           name, i),
                               name, i);
        }
    }
}

}  // namespace

std::uint64_t shape_numel(const Shape& shape) {
    std::uint64_t n = 1;
    for (auto d : shape) {
        if (!checked_mul(n, d, n)) throw std::overflow_error("tensor element count overflows");
    }
    return n;
}

std::string format_shape(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(DType dtype, Shape shape, std::vector<std::byte> bytes)
    : dtype_(dtype), shape_(std::move(shape)), bytes_(std::move(bytes)) {
    if (bytes_.size() != shape_numel(shape_) * dtype_size(dtype_)) {
        throw std::invalid_argument(fmt::format("tensor of shape {} and dtype {} needs {} bytes, got {}",
                                                format_shape(shape_), dtype_name(dtype_),
                                                shape_numel(shape_) * dtype_size(dtype_), bytes_.size()));
    }
}

Tensor Tensor::from_f64(DType dtype, Shape shape, std::span<const double> values) {
    if (values.size() != shape_numel(shape)) {
        throw std::invalid_argument(fmt::format("{} values do not fill shape {}", values.size(), format_shape(shape)));
    }
    std::vector<std::byte> bytes(values.size() * dtype_size(dtype));
    encode_f64(dtype, values, bytes);
    return Tensor(dtype, std::move(shape), std::move(bytes));
}

std::vector<double> Tensor::to_f64() const {
    std::vector<double> out(numel());
    decode_f64(dtype_, bytes_, out);
    return out;
}

Tensor Tensor::cast(DType target) const {
    if (target == dtype_) return *this;
    return from_f64(target, shape_, to_f64());
}

ArchiveError::ArchiveError(const std::string& message, std::string tensor, std::uint64_t offset)
    : std::runtime_error(tensor.empty() ? fmt::format("{} (offset {})", message, offset)
                                        : fmt::format("{} (tensor '{}', offset {})", message, tensor, offset)),
      tensor_(std::move(tensor)),
      offset_(offset) {}

std::string ValidationReport::to_json(int indent) const {
    json j;
    j["path"] = path;
    j["valid"] = valid();
    j["tensor_count"] = tensor_count;
    j["file_bytes"] = file_bytes;
    j["header_bytes"] = header_bytes;
    j["data_bytes"] = data_bytes;
    j["dtype_counts"] = json::object();
    for (const auto& [k, v] : dtype_counts) j["dtype_counts"][k] = v;
    j["violations"] = json::array();
    for (const auto& v : violations) {
        j["violations"].push_back({{"kind", v.kind}, {"tensor", v.tensor}, {"offset", v.offset}, {"message", v.message}});
    }
    return j.dump(indent);
}

Checkpoint read_archive(std::span<const std::byte> bytes) {
    if (bytes.size() < kPrefixBytes) {
        throw ArchiveError(fmt::format("truncated input: {} bytes is shorter than the 8-byte length prefix",
                                       bytes.size()));
    }
    const std::uint64_t header_len = read_prefix(bytes);
    if (header_len > bytes.size() - kPrefixBytes) {
        throw ArchiveError(fmt::format("truncated input: header declares {} bytes but only {} follow", header_len,
                                       bytes.size() - kPrefixBytes),
                           {}, kPrefixBytes);
    }
    const std::string_view text(reinterpret_cast<const char*>(bytes.data() + kPrefixBytes), header_len);
    const auto data = bytes.subspan(kPrefixBytes + header_len);

    std::vector<Violation> violations;
    auto header = parse_header(text, data.size(), violations);
    throw_first_fatal(violations);

    Checkpoint out;
    out.metadata = std::move(header.metadata);
    for (auto& spec : header.entries) {
        auto range = data.subspan(spec.begin, spec.end - spec.begin);
        out.tensors.emplace(spec.name, Tensor(spec.dtype, std::move(spec.shape),
                                              std::vector<std::byte>(range.begin(), range.end())));
    }
    return out;
}

Checkpoint read_archive(const std::filesystem::path& path) {
    ArchiveReader reader(path);
    Checkpoint out;
    out.metadata = reader.metadata();
    for (const auto& [name, spec] : reader.specs()) out.tensors.emplace(name, reader.read_tensor(name));
    return out;
}

std::string encode_header(const std::vector<OutputTensor>& tensors,
                          const std::map<std::string, std::string>& metadata) {
    nlohmann::ordered_json header = nlohmann::ordered_json::object();
    if (!metadata.empty()) {
        auto& meta = header[std::string(kMetadataKey)] = nlohmann::ordered_json::object();
        for (const auto& [k, v] : metadata) meta[k] = v;
    }
    std::uint64_t offset = 0;
    for (const auto& t : tensors) {
        const std::uint64_t size = shape_numel(t.shape) * dtype_size(t.dtype);
        nlohmann::ordered_json entry;
        entry["dtype"] = dtype_name(t.dtype);
        entry["shape"] = t.shape;
        entry["data_offsets"] = {offset, offset + size};
        header[t.name] = std::move(entry);
        offset += size;
    }
    const std::string text = header.dump();
    std::string out(kPrefixBytes, '\0');
    const std::uint64_t n = text.size();
    std::memcpy(out.data(), &n, sizeof(n));
    return out + text;
}

std::vector<std::byte> write_archive(const Checkpoint& checkpoint, const DTypePolicy& policy) {
    std::vector<OutputTensor> layout;
    for (const auto& [name, tensor] : checkpoint.tensors) {
        check_writable_name(name);
        layout.push_back({name, policy.cast_to.value_or(tensor.dtype()), tensor.shape()});
    }
    const std::string header = encode_header(layout, checkpoint.metadata);
    std::vector<std::byte> out(reinterpret_cast<const std::byte*>(header.data()),
                               reinterpret_cast<const std::byte*>(header.data()) + header.size());
    for (const auto& [name, tensor] : checkpoint.tensors) {
        const Tensor stored = policy.cast_to ? tensor.cast(*policy.cast_to) : tensor;
        if (!policy.allow_nonfinite) check_finite(stored, name);
        out.insert(out.end(), stored.bytes().begin(), stored.bytes().end());
    }
    return out;
}

std::filesystem::path temp_sibling(const std::filesystem::path& path) {
    static std::atomic<unsigned> counter{0};
    auto name = path.filename().string();
    return path.parent_path() / fmt::format(".{}.tmp.{}.{}", name, ::getpid(), counter++);
}

void save_archive(const Checkpoint& checkpoint, const std::filesystem::path& path, const DTypePolicy& policy) {
    const auto bytes = write_archive(checkpoint, policy);
    const auto temp = temp_sibling(path);
    {
        std::ofstream out(temp, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            std::error_code ec;
            std::filesystem::remove(temp, ec);
            throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
        }
    }
    std::filesystem::rename(temp, path);
}

ValidationReport validate_archive(std::span<const std::byte> bytes) {
    ValidationReport report;
    report.file_bytes = bytes.size();
    if (bytes.size() < kPrefixBytes) {
        report.violations.push_back({"truncated", {}, 0, "input is shorter than the 8-byte length prefix"});
        return report;
    }
    const std::uint64_t header_len = read_prefix(bytes);
    if (header_len > bytes.size() - kPrefixBytes) {
        report.violations.push_back({"truncated", {}, kPrefixBytes,
                                     fmt::format("header declares {} bytes but only {} follow", header_len,
                                                 bytes.size() - kPrefixBytes)});
        return report;
    }
    report.header_bytes = header_len;
    report.data_bytes = bytes.size() - kPrefixBytes - header_len;
    const std::string_view text(reinterpret_cast<const char*>(bytes.data() + kPrefixBytes), header_len);
    auto header = parse_header(text, report.data_bytes, report.violations);
    report.tensor_count = header.entries.size();
    for (const auto& e : header.entries) ++report.dtype_counts[std::string(dtype_name(e.dtype))];
    return report;
}

ValidationReport validate_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(fmt::format("cannot open '{}'", path.string()));
    std::vector<std::byte> bytes(std::filesystem::file_size(path));
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw std::runtime_error(fmt::format("cannot read '{}'", path.string()));
    auto report = validate_archive(bytes);
    report.path = path.string();
    return report;
}

ArchiveReader::ArchiveReader(const std::filesystem::path& path) : path_(path), stream_(path, std::ios::binary) {
    if (!stream_) throw std::runtime_error(fmt::format("cannot open '{}'", path.string()));
    const std::uint64_t file_size = std::filesystem::file_size(path);
    if (file_size < kPrefixBytes) {
        throw ArchiveError(fmt::format("truncated input: '{}' is shorter than the 8-byte length prefix", path.string()));
    }
    std::uint64_t header_len = 0;
    stream_.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    if (header_len > file_size - kPrefixBytes) {
        throw ArchiveError(fmt::format("truncated input: header declares {} bytes but only {} follow", header_len,
                                       file_size - kPrefixBytes),
                           {}, kPrefixBytes);
    }
    std::string text(header_len, '\0');
    stream_.read(text.data(), static_cast<std::streamsize>(header_len));
    if (!stream_) throw std::runtime_error(fmt::format("cannot read header of '{}'", path.string()));
    data_start_ = kPrefixBytes + header_len;

    std::vector<Violation> violations;
    auto header = parse_header(text, file_size - data_start_, violations);
    throw_first_fatal(violations);
    metadata_ = std::move(header.metadata);
    for (auto& spec : header.entries) {
        auto name = spec.name;
        specs_.emplace(std::move(name), std::move(spec));
    }
}

const TensorSpec& ArchiveReader::spec(const std::string& name) const {
    auto it = specs_.find(name);
    if (it == specs_.end()) {
        throw ArchiveError(fmt::format("no tensor '{}' in '{}'", name, path_.string()), name);
    }
    return it->second;
}

std::vector<std::byte> ArchiveReader::read_bytes(const std::string& name, std::uint64_t first, std::uint64_t count) {
    const auto& s = spec(name);
    if (first > s.numel() || count > s.numel() - first) {
        throw std::out_of_range(fmt::format("element range [{}, {}) outside tensor '{}' of {} elements", first,
                                            first + count, name, s.numel()));
    }
    const std::uint64_t width = dtype_size(s.dtype);
    std::vector<std::byte> out(count * width);
    stream_.seekg(static_cast<std::streamoff>(data_start_ + s.begin + first * width));
    stream_.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!stream_) {
        throw ArchiveError(fmt::format("short read of tensor '{}' in '{}'", name, path_.string()), name,
                           data_start_ + s.begin);
    }
    return out;
}

std::vector<double> ArchiveReader::read_f64(const std::string& name, std::uint64_t first, std::uint64_t count) {
    const auto raw = read_bytes(name, first, count);
    std::vector<double> out(count);
    decode_f64(spec(name).dtype, raw, out);
    return out;
}

Tensor ArchiveReader::read_tensor(const std::string& name) {
    const auto& s = spec(name);
    return Tensor(s.dtype, s.shape, read_bytes(name, 0, s.numel()));
}

ArchiveWriter::ArchiveWriter(std::filesystem::path path, std::vector<OutputTensor> tensors,
                             const std::map<std::string, std::string>& metadata)
    : path_(std::move(path)), temp_path_(temp_sibling(path_)), tensors_(std::move(tensors)) {
    std::sort(tensors_.begin(), tensors_.end(),
              [](const OutputTensor& a, const OutputTensor& b) { return a.name < b.name; });
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
        check_writable_name(tensors_[i].name);
        if (i > 0 && tensors_[i].name == tensors_[i - 1].name) {
            throw ArchiveError(fmt::format("duplicate tensor name '{}'", tensors_[i].name), tensors_[i].name);
        }
        expected_bytes_ += shape_numel(tensors_[i].shape) * dtype_size(tensors_[i].dtype);
    }
    stream_.open(temp_path_, std::ios::binary | std::ios::trunc);
    if (!stream_) throw std::runtime_error(fmt::format("cannot create '{}'", temp_path_.string()));
    const auto header = encode_header(tensors_, metadata);
    stream_.write(header.data(), static_cast<std::streamsize>(header.size()));
}

ArchiveWriter::~ArchiveWriter() {
    if (!finished_) {
        stream_.close();
        std::error_code ec;
        std::filesystem::remove(temp_path_, ec);
    }
}

void ArchiveWriter::append(std::span<const std::byte> bytes) {
    if (written_bytes_ + bytes.size() > expected_bytes_) {
        throw std::logic_error("ArchiveWriter: more data appended than declared");
    }
    stream_.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!stream_) throw std::runtime_error(fmt::format("write failed for '{}'", path_.string()));
    written_bytes_ += bytes.size();
}

void ArchiveWriter::finish() {
    if (written_bytes_ != expected_bytes_) {
        throw std::logic_error(fmt::format("ArchiveWriter: {} of {} declared bytes written", written_bytes_,
                                           expected_bytes_));
    }
    stream_.close();
    if (!stream_) throw std::runtime_error(fmt::format("write failed for '{}'", path_.string()));
    std::filesystem::rename(temp_path_, path_);
    finished_ = true;
}

}  // namespace vecmerge
