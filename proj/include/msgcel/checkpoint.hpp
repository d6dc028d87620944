#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "msgcel/types.hpp"

namespace msgcel {

/// Named little-endian array inside a checkpoint.
struct Blob {
    std::string name;
    std::variant<std::vector<double>, std::vector<std::int64_t>> data;

    bool operator==(const Blob&) const = default;
};

/// `MSG1`, u32 version, config text (u32 length + bytes), u32 blob count,
/// then per blob: name (u32 length + bytes), u8 type (0 = f64, 1 = i64),
/// u64 element count, elements. Blobs keep insertion order so that
/// read -> write reproduces the file byte for byte.
struct CheckpointFile {
    static constexpr std::uint32_t kVersion = 1;

    std::string config_text;
    std::vector<Blob> blobs;

    void put(std::string name, std::vector<double> values);
    void put(std::string name, std::vector<std::int64_t> values);
    bool has(std::string_view name) const;
    const std::vector<double>& f64(std::string_view name) const;
    const std::vector<std::int64_t>& i64(std::string_view name) const;

    void write(std::ostream& os) const;
    void write(const std::filesystem::path& path) const;
    static CheckpointFile read(std::istream& is);
    static CheckpointFile read(const std::filesystem::path& path);

    bool operator==(const CheckpointFile&) const = default;
};

std::vector<double> to_std(const Matrix& m);
std::vector<double> to_std(const Vector& v);
Matrix to_matrix(const std::vector<double>& values, Eigen::Index rows, Eigen::Index cols);

}  // namespace msgcel
