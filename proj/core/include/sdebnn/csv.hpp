#pragma once

#include <string>
#include <vector>

namespace sdebnn {

// Per-epoch training log. For classification tasks test_acc is test-set
// accuracy; for regression it is the 95% predictive-interval coverage (the
// bounded [0,1] analogue logged in the same column).
struct TrainingLogRow {
    int epoch = 0;
    double train_loss = 0;
    double train_kl = 0;
    double test_acc = 0;
    double test_nll = 0;
    double mean_nfe_f = 0;
    long wall_ms = 0;
};

struct TrainingLog {
    std::vector<TrainingLogRow> rows;
};

/// Shortest round-trippable decimal text for a double (%.17g).
std::string format_double(double v);

void write_training_log(const std::string& path, const TrainingLog& log);
TrainingLog read_training_log(const std::string& path);

/// CSV bytes with the wall_ms column removed; wall time is the one
/// deliberately non-deterministic column, so reproducibility comparisons use
/// this view.
std::string training_log_deterministic_view(const std::string& path);

}  // namespace sdebnn
