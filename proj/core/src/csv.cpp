#include "sdebnn/csv.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "sdebnn/common.hpp"

namespace sdebnn {

namespace {
const char* kHeader = "epoch,train_loss,train_kl,test_acc,test_nll,mean_nfe_f,wall_ms";
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_training_log(const std::string& path, const TrainingLog& log) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << kHeader << "\n";
    for (const auto& r : log.rows) {
        out << r.epoch << ',' << format_double(r.train_loss) << ','
            << format_double(r.train_kl) << ',' << format_double(r.test_acc) << ','
            << format_double(r.test_nll) << ',' << format_double(r.mean_nfe_f) << ','
            << r.wall_ms << "\n";
    }
}

TrainingLog read_training_log(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != kHeader)
        throw FormatError(path + ": unexpected training-log header");
    TrainingLog log;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        TrainingLogRow r;
        std::istringstream ss(line);
        std::string field;
        auto next = [&]() -> std::string {
            if (!std::getline(ss, field, ',')) throw FormatError(path + ": short row");
            return field;
        };
        r.epoch = std::stoi(next());
        r.train_loss = std::stod(next());
        r.train_kl = std::stod(next());
        r.test_acc = std::stod(next());
        r.test_nll = std::stod(next());
        r.mean_nfe_f = std::stod(next());
        r.wall_ms = std::stol(next());
        log.rows.push_back(r);
    }
    return log;
}

std::string training_log_deterministic_view(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream out;
    std::string line;
    while (std::getline(in, line)) {
        const auto pos = line.rfind(',');
        out << (pos == std::string::npos ? line : line.substr(0, pos)) << "\n";
    }
    return out.str();
}

}  // namespace sdebnn
