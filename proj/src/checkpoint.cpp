#include "msgcel/checkpoint.hpp"

#include <algorithm>
#include <fstream>

#include "msgcel/binary_io.hpp"

namespace msgcel {

namespace {

const Blob* find_blob(const std::vector<Blob>& blobs, std::string_view name) {
    auto it = std::find_if(blobs.begin(), blobs.end(), [&](const Blob& b) { return b.name == name; });
    return it == blobs.end() ? nullptr : &*it;
}

}  // namespace

void CheckpointFile::put(std::string name, std::vector<double> values) {
    if (has(name)) throw Error("checkpoint: duplicate blob " + name);
    blobs.push_back({std::move(name), std::move(values)});
}

void CheckpointFile::put(std::string name, std::vector<std::int64_t> values) {
    if (has(name)) throw Error("checkpoint: duplicate blob " + name);
    blobs.push_back({std::move(name), std::move(values)});
}

bool CheckpointFile::has(std::string_view name) const { return find_blob(blobs, name) != nullptr; }

const std::vector<double>& CheckpointFile::f64(std::string_view name) const {
    const Blob* b = find_blob(blobs, name);
    if (!b) throw ParseError("checkpoint: missing blob " + std::string(name));
    const auto* v = std::get_if<std::vector<double>>(&b->data);
    if (!v) throw ParseError("checkpoint: blob " + std::string(name) + " is not f64");
    return *v;
}

const std::vector<std::int64_t>& CheckpointFile::i64(std::string_view name) const {
    const Blob* b = find_blob(blobs, name);
    if (!b) throw ParseError("checkpoint: missing blob " + std::string(name));
    const auto* v = std::get_if<std::vector<std::int64_t>>(&b->data);
    if (!v) throw ParseError("checkpoint: blob " + std::string(name) + " is not i64");
    return *v;
}

void CheckpointFile::write(std::ostream& os) const {
    io::write_magic(os, "MSG1");
    io::write_u32(os, kVersion);
    io::write_string(os, config_text);
    io::write_u32(os, static_cast<std::uint32_t>(blobs.size()));
    for (const auto& b : blobs) {
        io::write_string(os, b.name);
        if (const auto* d = std::get_if<std::vector<double>>(&b.data)) {
            os.put(0);
            io::write_u64(os, d->size());
            for (double x : *d) io::write_f64(os, x);
        } else {
            const auto& v = std::get<std::vector<std::int64_t>>(b.data);
            os.put(1);
            io::write_u64(os, v.size());
            for (auto x : v) io::write_i64(os, x);
        }
    }
}

void CheckpointFile::write(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    write(out);
    if (!out) throw Error("failed writing checkpoint " + path.string());
}

CheckpointFile CheckpointFile::read(std::istream& is) {
    io::expect_magic(is, "MSG1");
    const auto version = io::read_u32(is);
    if (version != kVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version));
    CheckpointFile ck;
    ck.config_text = io::read_string(is);
    const auto count = io::read_u32(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        auto name = io::read_string(is);
        const int type = is.get();
        const auto n = io::read_u64(is);
        if (type == 0) {
            std::vector<double> v(n);
            for (auto& x : v) x = io::read_f64(is);
            ck.blobs.push_back({std::move(name), std::move(v)});
        } else if (type == 1) {
            std::vector<std::int64_t> v(n);
            for (auto& x : v) x = io::read_i64(is);
            ck.blobs.push_back({std::move(name), std::move(v)});
        } else {
            throw ParseError("checkpoint: bad blob type for " + name);
        }
    }
    return ck;
}

CheckpointFile CheckpointFile::read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint " + path.string());
    return read(in);
}

std::vector<double> to_std(const Matrix& m) { return std::vector<double>(m.data(), m.data() + m.size()); }

std::vector<double> to_std(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Matrix to_matrix(const std::vector<double>& values, Eigen::Index rows, Eigen::Index cols) {
    if (static_cast<Eigen::Index>(values.size()) != rows * cols) {
        throw ParseError("checkpoint: blob size does not match shape");
    }
    return Eigen::Map<const Matrix>(values.data(), rows, cols);
}

}  // namespace msgcel
