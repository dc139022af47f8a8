#include "dsee/archive.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>

#include <json.hpp>

namespace dsee {

static_assert(std::endian::native == std::endian::little,
              "archive payload relies on little-endian host layout");

std::size_t dtype_size(Dtype dtype) {
    switch (dtype) {
        case Dtype::F32: return 4;
        case Dtype::I64: return 8;
        case Dtype::U8: return 1;
    }
    throw ParameterError("dtype_size: invalid dtype");
}

const char* dtype_name(Dtype dtype) {
    switch (dtype) {
        case Dtype::F32: return "f32";
        case Dtype::I64: return "i64";
        case Dtype::U8: return "u8";
    }
    throw ParameterError("dtype_name: invalid dtype");
}

Dtype parse_dtype(const std::string& name) {
    if (name == "f32") return Dtype::F32;
    if (name == "i64") return Dtype::I64;
    if (name == "u8") return Dtype::U8;
    throw CorruptionError("unknown dtype '" + name + "'");
}

std::uint64_t TensorRecord::element_count() const {
    std::uint64_t count = 1;
    for (std::uint64_t d : shape) count *= d;
    return count;
}

void TensorArchive::put(const std::string& name, TensorRecord record) {
    if (name.empty() || name.size() > 256) {
        throw ParameterError("tensor name must be 1..256 bytes");
    }
    if (tensors_.count(name)) {
        throw ParameterError("duplicate tensor name '" + name + "'");
    }
    if (record.bytes.size() != record.element_count() * dtype_size(record.dtype)) {
        throw ParameterError("tensor '" + name + "': byte length does not match shape");
    }
    tensors_.emplace(name, std::move(record));
}

void TensorArchive::put_f32(const std::string& name, const std::vector<std::uint64_t>& shape,
                            const std::vector<float>& values) {
    TensorRecord rec;
    rec.dtype = Dtype::F32;
    rec.shape = shape;
    rec.bytes.resize(values.size() * 4);
    std::memcpy(rec.bytes.data(), values.data(), rec.bytes.size());
    put(name, std::move(rec));
}

void TensorArchive::put_i64(const std::string& name, const std::vector<std::uint64_t>& shape,
                            const std::vector<std::int64_t>& values) {
    TensorRecord rec;
    rec.dtype = Dtype::I64;
    rec.shape = shape;
    rec.bytes.resize(values.size() * 8);
    std::memcpy(rec.bytes.data(), values.data(), rec.bytes.size());
    put(name, std::move(rec));
}

void TensorArchive::put_u8(const std::string& name, const std::vector<std::uint64_t>& shape,
                           const std::vector<std::uint8_t>& values) {
    TensorRecord rec;
    rec.dtype = Dtype::U8;
    rec.shape = shape;
    rec.bytes = values;
    put(name, std::move(rec));
}

const TensorRecord& TensorArchive::get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) {
        throw ParameterError("archive has no tensor '" + name + "'");
    }
    return it->second;
}

std::vector<float> TensorArchive::get_f32(const std::string& name) const {
    const TensorRecord& rec = get(name);
    if (rec.dtype != Dtype::F32) {
        throw ParameterError("tensor '" + name + "' is not f32");
    }
    std::vector<float> out(rec.bytes.size() / 4);
    std::memcpy(out.data(), rec.bytes.data(), rec.bytes.size());
    return out;
}

std::vector<std::int64_t> TensorArchive::get_i64(const std::string& name) const {
    const TensorRecord& rec = get(name);
    if (rec.dtype != Dtype::I64) {
        throw ParameterError("tensor '" + name + "' is not i64");
    }
    std::vector<std::int64_t> out(rec.bytes.size() / 8);
    std::memcpy(out.data(), rec.bytes.data(), rec.bytes.size());
    return out;
}

std::vector<std::uint8_t> TensorArchive::get_u8(const std::string& name) const {
    const TensorRecord& rec = get(name);
    if (rec.dtype != Dtype::U8) {
        throw ParameterError("tensor '" + name + "' is not u8");
    }
    return rec.bytes;
}

bool TensorArchive::operator==(const TensorArchive& other) const {
    if (meta_ != other.meta_) return false;
    if (tensors_.size() != other.tensors_.size()) return false;
    for (const auto& [name, rec] : tensors_) {
        auto it = other.tensors_.find(name);
        if (it == other.tensors_.end()) return false;
        if (rec.dtype != it->second.dtype || rec.shape != it->second.shape ||
            rec.bytes != it->second.bytes) {
            return false;
        }
    }
    return true;
}

namespace {

constexpr char kMagic[4] = {'D', 'S', 'E', 'E'};
constexpr std::uint64_t kAlignment = 64;

std::uint64_t align_up(std::uint64_t value, std::uint64_t alignment) {
    return (value + alignment - 1) / alignment * alignment;
}

void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.insert(out.end(), {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                           static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 24)});
}

void append_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

} // namespace

void write_archive(const std::string& path, const TensorArchive& archive) {
    // header JSON; std::map iteration keeps tensor order deterministic
    nlohmann::json header;
    header["tensors"] = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, rec] : archive.tensors()) {
        nlohmann::json entry;
        entry["dtype"] = dtype_name(rec.dtype);
        entry["shape"] = rec.shape;
        entry["offset"] = offset;
        header["tensors"][name] = entry;
        offset = align_up(offset + rec.bytes.size(), kAlignment);
    }
    header["meta"] = archive.meta();
    std::string header_text = header.dump();
    // pad the header so the payload base lands on a 64-byte file boundary
    const std::uint64_t prefix = 4 + 4 + 8;
    header_text.resize(align_up(prefix + header_text.size(), kAlignment) - prefix, ' ');

    std::vector<std::uint8_t> blob;
    blob.insert(blob.end(), kMagic, kMagic + 4);
    append_u32(blob, TensorArchive::kVersion);
    append_u64(blob, header_text.size());
    blob.insert(blob.end(), header_text.begin(), header_text.end());
    const std::uint64_t payload_base = blob.size();
    for (const auto& [name, rec] : archive.tensors()) {
        (void)name;
        blob.resize(align_up(blob.size() - payload_base, kAlignment) + payload_base, 0);
        blob.insert(blob.end(), rec.bytes.begin(), rec.bytes.end());
    }

    const std::string tmp_path = path + ".tmp";
    std::FILE* f = std::fopen(tmp_path.c_str(), "wb");
    if (!f) {
        throw IoError("cannot open '" + tmp_path + "' for writing");
    }
    const std::size_t written = std::fwrite(blob.data(), 1, blob.size(), f);
    const bool flush_ok = std::fclose(f) == 0;
    if (written != blob.size() || !flush_ok) {
        std::remove(tmp_path.c_str());
        throw IoError("short write to '" + tmp_path + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp_path, path, ec);
    if (ec) {
        std::remove(tmp_path.c_str());
        throw IoError("cannot rename '" + tmp_path + "' to '" + path + "': " + ec.message());
    }
}

TensorArchive read_archive(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) {
        throw IoError("cannot open '" + path + "'");
    }
    std::vector<std::uint8_t> blob;
    std::uint8_t chunk[65536];
    std::size_t n;
    while ((n = std::fread(chunk, 1, sizeof(chunk), f)) > 0) {
        blob.insert(blob.end(), chunk, chunk + n);
    }
    const bool read_error = std::ferror(f) != 0;
    std::fclose(f);
    if (read_error) {
        throw IoError("read failure on '" + path + "'");
    }

    if (blob.size() < 16) {
        throw IoError("truncated archive '" + path + "' (" + std::to_string(blob.size()) +
                      " bytes)");
    }
    if (std::memcmp(blob.data(), kMagic, 4) != 0) {
        throw FormatError("bad magic bytes in '" + path + "'");
    }
    std::uint32_t version;
    std::memcpy(&version, blob.data() + 4, 4);
    if (version != TensorArchive::kVersion) {
        throw FormatError("unsupported archive version " + std::to_string(version));
    }
    std::uint64_t header_len;
    std::memcpy(&header_len, blob.data() + 8, 8);
    if (header_len > blob.size() - 16) {
        throw CorruptionError("header length " + std::to_string(header_len) +
                              " exceeds file size");
    }
    const std::uint64_t payload_base = 16 + header_len;
    const std::uint64_t payload_size = blob.size() - payload_base;

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(blob.begin() + 16, blob.begin() + 16 + header_len);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(std::string("unparseable archive header: ") + e.what());
    }

    TensorArchive archive;
    try {
        for (const auto& [key, value] : header.at("meta").items()) {
            archive.meta()[key] = value.get<std::string>();
        }
        for (const auto& [name, entry] : header.at("tensors").items()) {
            TensorRecord rec;
            rec.dtype = parse_dtype(entry.at("dtype").get<std::string>());
            rec.shape = entry.at("shape").get<std::vector<std::uint64_t>>();
            const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
            const std::uint64_t byte_len = rec.element_count() * dtype_size(rec.dtype);
            if (offset > payload_size || byte_len > payload_size - offset) {
                throw CorruptionError("tensor '" + name + "' extends past end of payload");
            }
            rec.bytes.assign(blob.begin() + payload_base + offset,
                             blob.begin() + payload_base + offset + byte_len);
            archive.put(name, std::move(rec));
        }
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(std::string("malformed archive header: ") + e.what());
    } catch (const ParameterError& e) {
        throw CorruptionError(std::string("invalid archive contents: ") + e.what());
    }
    return archive;
}

} // namespace dsee
