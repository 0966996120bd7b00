#include "sdebnn/idx.hpp"

#include <cstdio>
#include <fstream>

#include "sdebnn/common.hpp"

namespace sdebnn {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::vector<std::uint8_t> read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                     std::istreambuf_iterator<char>());
}

std::uint32_t read_u32(const std::vector<std::uint8_t>& buf, std::size_t offset,
                       const std::string& path) {
    if (offset + 4 > buf.size())
        throw FormatError(path + ": truncated at byte offset " + std::to_string(offset));
    return (static_cast<std::uint32_t>(buf[offset]) << 24) |
           (static_cast<std::uint32_t>(buf[offset + 1]) << 16) |
           (static_cast<std::uint32_t>(buf[offset + 2]) << 8) |
           static_cast<std::uint32_t>(buf[offset + 3]);
}

void write_u32(std::ofstream& out, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                       static_cast<char>(v >> 8), static_cast<char>(v)};
    out.write(b, 4);
}

}  // namespace

IdxImages read_idx_images(const std::string& path) {
    const auto buf = read_all(path);
    const auto magic = read_u32(buf, 0, path);
    if (magic != kImagesMagic)
        throw FormatError(path + ": bad image magic at byte offset 0 (got 0x" +
                          [&] { char s[16]; std::snprintf(s, sizeof s, "%08x", magic); return std::string(s); }() +
                          ", want 0x00000803)");
    IdxImages img;
    img.count = read_u32(buf, 4, path);
    img.rows = read_u32(buf, 8, path);
    img.cols = read_u32(buf, 12, path);
    const std::size_t need = 16 + img.count * img.rows * img.cols;
    if (buf.size() < need)
        throw FormatError(path + ": truncated payload at byte offset " +
                          std::to_string(buf.size()) + " (need " + std::to_string(need) + ")");
    img.pixels.assign(buf.begin() + 16, buf.begin() + static_cast<long>(need));
    return img;
}

IdxLabels read_idx_labels(const std::string& path) {
    const auto buf = read_all(path);
    const auto magic = read_u32(buf, 0, path);
    if (magic != kLabelsMagic)
        throw FormatError(path + ": bad label magic at byte offset 0");
    const std::size_t count = read_u32(buf, 4, path);
    const std::size_t need = 8 + count;
    if (buf.size() < need)
        throw FormatError(path + ": truncated payload at byte offset " +
                          std::to_string(buf.size()) + " (need " + std::to_string(need) + ")");
    IdxLabels lab;
    lab.labels.assign(buf.begin() + 8, buf.begin() + static_cast<long>(need));
    return lab;
}

void write_idx_images(const std::string& path, const IdxImages& images) {
    if (images.pixels.size() != images.count * images.rows * images.cols)
        throw ContractError("write_idx_images: pixel buffer does not match dimensions");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    write_u32(out, kImagesMagic);
    write_u32(out, static_cast<std::uint32_t>(images.count));
    write_u32(out, static_cast<std::uint32_t>(images.rows));
    write_u32(out, static_cast<std::uint32_t>(images.cols));
    out.write(reinterpret_cast<const char*>(images.pixels.data()),
              static_cast<long>(images.pixels.size()));
}

void write_idx_labels(const std::string& path, const IdxLabels& labels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    write_u32(out, kLabelsMagic);
    write_u32(out, static_cast<std::uint32_t>(labels.labels.size()));
    out.write(reinterpret_cast<const char*>(labels.labels.data()),
              static_cast<long>(labels.labels.size()));
}

}  // namespace sdebnn
