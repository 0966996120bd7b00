#pragma once

#include <string>
#include <vector>

namespace sdebnn {

struct FetchItem {
    std::string remote_name;  // file name on the mirror
    std::string local_name;   // decompressed IDX file name
    std::string gz_sha256;    // checksum of the compressed payload
    std::size_t idx_bytes;    // expected decompressed size
};

/// MNIST file table (canonical gzip checksums and decompressed sizes).
const std::vector<FetchItem>& mnist_files();

std::string sha256_hex(const std::string& path);

/// Inflates a gzip file; returns decompressed byte count.
std::size_t gunzip_file(const std::string& gz_path, const std::string& out_path);

/// Downloads (if needed), checksum-verifies and decompresses the MNIST IDX
/// files into dest_dir. Skips files whose decompressed outputs already exist
/// with the right size. Throws IoError when the mirrors are unreachable.
void fetch_mnist(const std::string& dest_dir);

/// True when all four decompressed MNIST files are present in dir.
bool mnist_present(const std::string& dir);

}  // namespace sdebnn
