#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dsee/errors.hpp"

namespace dsee {

enum class Dtype : std::uint8_t { F32, I64, U8 };

std::size_t dtype_size(Dtype dtype);
const char* dtype_name(Dtype dtype);
Dtype parse_dtype(const std::string& name);

/// One named tensor: dtype, shape and raw little-endian bytes.
struct TensorRecord {
    Dtype dtype = Dtype::F32;
    std::vector<std::uint64_t> shape;
    std::vector<std::uint8_t> bytes;

    std::uint64_t element_count() const;
};

/// Named-tensor container with string metadata, stored on disk as:
///
///   "DSEE" magic | u32 LE version | u64 LE header length | JSON header |
///   padding to a 64-byte boundary | raw tensor payload
///
/// The JSON header maps tensor names to {dtype, shape, offset}; offsets are
/// relative to the payload base and 64-byte aligned, so archives are
/// position-independent. read(write(x)) is byte-for-byte x.
class TensorArchive {
public:
    static constexpr std::uint32_t kVersion = 1;

    /// Throws ParameterError on duplicate/overlong names or byte-length
    /// mismatches against shape x dtype size.
    void put(const std::string& name, TensorRecord record);

    void put_f32(const std::string& name, const std::vector<std::uint64_t>& shape,
                 const std::vector<float>& values);
    void put_i64(const std::string& name, const std::vector<std::uint64_t>& shape,
                 const std::vector<std::int64_t>& values);
    void put_u8(const std::string& name, const std::vector<std::uint64_t>& shape,
                const std::vector<std::uint8_t>& values);

    bool contains(const std::string& name) const { return tensors_.count(name) > 0; }
    const TensorRecord& get(const std::string& name) const;

    std::vector<float> get_f32(const std::string& name) const;
    std::vector<std::int64_t> get_i64(const std::string& name) const;
    std::vector<std::uint8_t> get_u8(const std::string& name) const;

    const std::map<std::string, TensorRecord>& tensors() const { return tensors_; }
    std::map<std::string, std::string>& meta() { return meta_; }
    const std::map<std::string, std::string>& meta() const { return meta_; }

    bool operator==(const TensorArchive& other) const;

private:
    std::map<std::string, TensorRecord> tensors_;
    std::map<std::string, std::string> meta_;
};

/// Serializes to path atomically (temp file + rename).
void write_archive(const std::string& path, const TensorArchive& archive);

/// Throws FormatError (magic/version), CorruptionError (inconsistent header)
/// or IoError (unreadable/truncated file).
TensorArchive read_archive(const std::string& path);

} // namespace dsee
