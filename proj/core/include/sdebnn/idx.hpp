#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sdebnn {

// IDX is the big-endian binary layout MNIST ships in: a magic word
// (0x00000803 for u8 images, 0x00000801 for u8 labels), dimension sizes,
// then the raw payload.

struct IdxImages {
    std::size_t count = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> pixels;  // count * rows * cols, row-major
};

struct IdxLabels {
    std::vector<std::uint8_t> labels;
};

/// Throws FormatError naming the byte offset on bad magic or truncation.
IdxImages read_idx_images(const std::string& path);
IdxLabels read_idx_labels(const std::string& path);

void write_idx_images(const std::string& path, const IdxImages& images);
void write_idx_labels(const std::string& path, const IdxLabels& labels);

}  // namespace sdebnn
