#include "sdebnn/fetch.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "httplib.h"
#include "sdebnn/common.hpp"

namespace fs = std::filesystem;

namespace sdebnn {

const std::vector<FetchItem>& mnist_files() {
    static const std::vector<FetchItem> files = {
        {"train-images-idx3-ubyte.gz", "train-images-idx3-ubyte",
         "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609", 47040016},
        {"train-labels-idx1-ubyte.gz", "train-labels-idx1-ubyte",
         "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c", 60008},
        {"t10k-images-idx3-ubyte.gz", "t10k-images-idx3-ubyte",
         "8d422c7b0a1c1c79245a5bcf07fe86e33eeafee792b84584aec276f5a2dbc4e6", 7840016},
        {"t10k-labels-idx1-ubyte.gz", "t10k-labels-idx1-ubyte",
         "f7ae60f92e00ec6debd23a6088c31dbd2371eca3ffa0defaefb259924204aec6", 10008},
    };
    return files;
}

std::string sha256_hex(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<size_t>(in.gcount()));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    std::string hex;
    hex.reserve(2 * len);
    for (unsigned i = 0; i < len; ++i) {
        char s[3];
        std::snprintf(s, sizeof s, "%02x", digest[i]);
        hex += s;
    }
    return hex;
}

std::size_t gunzip_file(const std::string& gz_path, const std::string& out_path) {
    gzFile gz = gzopen(gz_path.c_str(), "rb");
    if (!gz) throw IoError("cannot open " + gz_path);
    std::ofstream out(out_path, std::ios::binary);
    if (!out) {
        gzclose(gz);
        throw IoError("cannot write " + out_path);
    }
    char buf[1 << 16];
    std::size_t total = 0;
    int n;
    while ((n = gzread(gz, buf, sizeof buf)) > 0) {
        out.write(buf, n);
        total += static_cast<std::size_t>(n);
    }
    const bool bad = n < 0;
    gzclose(gz);
    if (bad) throw FormatError(gz_path + ": corrupt gzip stream");
    return total;
}

namespace {

bool download(const std::string& host, const std::string& remote_path,
              const std::string& dest, bool tls) {
    try {
        std::unique_ptr<httplib::Client> cli;
        cli = std::make_unique<httplib::Client>(
            (tls ? std::string("https://") : std::string("http://")) + host);
        cli->set_connection_timeout(15);
        cli->set_read_timeout(60);
        cli->set_follow_location(true);
        auto res = cli->Get(remote_path);
        if (!res || res->status != 200) return false;
        std::ofstream out(dest, std::ios::binary);
        if (!out) return false;
        out.write(res->body.data(), static_cast<long>(res->body.size()));
        return true;
    } catch (...) {
        return false;
    }
}

}  // namespace

bool mnist_present(const std::string& dir) {
    for (const auto& f : mnist_files()) {
        fs::path p = fs::path(dir) / f.local_name;
        std::error_code ec;
        if (!fs::exists(p, ec) || fs::file_size(p, ec) != f.idx_bytes) return false;
    }
    return true;
}

void fetch_mnist(const std::string& dest_dir) {
    fs::create_directories(dest_dir);
    for (const auto& f : mnist_files()) {
        const fs::path idx = fs::path(dest_dir) / f.local_name;
        std::error_code ec;
        if (fs::exists(idx, ec) && fs::file_size(idx, ec) == f.idx_bytes) continue;

        const fs::path gz = fs::path(dest_dir) / f.remote_name;
        if (!fs::exists(gz, ec)) {
            const bool ok =
                download("ossci-datasets.s3.amazonaws.com", "/mnist/" + f.remote_name,
                         gz.string(), true) ||
                download("storage.googleapis.com", "/cvdf-datasets/mnist/" + f.remote_name,
                         gz.string(), true);
            if (!ok)
                throw IoError("fetch-data: could not download " + f.remote_name +
                              " from any mirror (network unavailable?)");
        }
        const auto digest = sha256_hex(gz.string());
        if (digest != f.gz_sha256)
            throw FormatError("fetch-data: checksum mismatch for " + gz.string() +
                              " (got " + digest + ")");
        const auto bytes = gunzip_file(gz.string(), idx.string());
        if (bytes != f.idx_bytes)
            throw FormatError("fetch-data: unexpected decompressed size for " +
                              idx.string() + " (got " + std::to_string(bytes) + ")");
    }
}

}  // namespace sdebnn
