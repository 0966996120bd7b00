#include <cstring>
#include <fstream>

#include "sdebnn/common.hpp"
#include "sdebnn/model.hpp"

// Checkpoint layout (little-endian):
//   magic "SBNC" | u32 version | u64 json_len | json bytes
//   u32 tensor_count
//   per tensor: u16 name_len | name | u8 rank | u64 dims[rank] | f64 data[]

namespace sdebnn {

namespace {

constexpr char kMagic[4] = {'S', 'B', 'N', 'C'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream& in, const std::string& path) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
        throw FormatError(path + ": truncated checkpoint");
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointData& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out.write(kMagic, 4);
    put<std::uint32_t>(out, kVersion);
    put<std::uint64_t>(out, data.config_json.size());
    out.write(data.config_json.data(), static_cast<long>(data.config_json.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(data.tensors.size()));
    for (const auto& t : data.tensors) {
        put<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
        out.write(t.name.data(), static_cast<long>(t.name.size()));
        put<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
        for (auto d : t.shape) put<std::uint64_t>(out, d);
        out.write(reinterpret_cast<const char*>(t.value.data()),
                  static_cast<long>(t.value.size() * sizeof(double)));
    }
    if (!out) throw IoError("write failed for " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError(path + ": not a checkpoint file (bad magic)");
    const auto version = get<std::uint32_t>(in, path);
    if (version != kVersion)
        throw FormatError(path + ": unsupported checkpoint version " +
                          std::to_string(version));
    CheckpointData data;
    const auto json_len = get<std::uint64_t>(in, path);
    data.config_json.resize(json_len);
    if (json_len && !in.read(data.config_json.data(), static_cast<long>(json_len)))
        throw FormatError(path + ": truncated config block");
    const auto count = get<std::uint32_t>(in, path);
    for (std::uint32_t i = 0; i < count; ++i) {
        ParamT<double> t;
        const auto name_len = get<std::uint16_t>(in, path);
        t.name.resize(name_len);
        if (!in.read(t.name.data(), name_len))
            throw FormatError(path + ": truncated tensor name");
        const auto rank = get<std::uint8_t>(in, path);
        std::size_t n = 1;
        for (std::uint8_t r = 0; r < rank; ++r) {
            const auto d = get<std::uint64_t>(in, path);
            t.shape.push_back(d);
            n *= d;
        }
        t.value.resize(n);
        if (n && !in.read(reinterpret_cast<char*>(t.value.data()),
                          static_cast<long>(n * sizeof(double))))
            throw FormatError(path + ": truncated tensor data for " + t.name);
        data.tensors.push_back(std::move(t));
    }
    return data;
}

}  // namespace sdebnn
