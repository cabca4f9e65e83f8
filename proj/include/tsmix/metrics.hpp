// Classification metrics over confusion matrices, plus multi-seed aggregation.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tsmix/errors.hpp"

namespace tsmix {

class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t n_classes)
        : n_(n_classes), counts_(n_classes * n_classes, 0) {
        if (n_classes == 0) throw ValidationError("confusion matrix needs at least one class");
    }

    static ConfusionMatrix from_counts(std::size_t n_classes, std::vector<std::uint64_t> counts) {
        ConfusionMatrix cm(n_classes);
        if (counts.size() != n_classes * n_classes)
            throw ValidationError("confusion matrix counts must be n_classes^2");
        cm.counts_ = std::move(counts);
        return cm;
    }

    void record(std::size_t truth, std::size_t predicted) {
        if (truth >= n_ || predicted >= n_)
            throw ValidationError("confusion matrix: class index out of range");
        ++counts_[truth * n_ + predicted];
    }

    std::size_t n_classes() const { return n_; }
    std::uint64_t at(std::size_t truth, std::size_t predicted) const {
        return counts_[truth * n_ + predicted];
    }

    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (auto c : counts_) t += c;
        return t;
    }

    std::uint64_t trace() const {
        std::uint64_t t = 0;
        for (std::size_t i = 0; i < n_; ++i) t += counts_[i * n_ + i];
        return t;
    }

    std::uint64_t row_sum(std::size_t truth) const {
        std::uint64_t t = 0;
        for (std::size_t j = 0; j < n_; ++j) t += counts_[truth * n_ + j];
        return t;
    }

    std::uint64_t col_sum(std::size_t predicted) const {
        std::uint64_t t = 0;
        for (std::size_t i = 0; i < n_; ++i) t += counts_[i * n_ + predicted];
        return t;
    }

private:
    std::size_t n_;
    std::vector<std::uint64_t> counts_;
};

namespace detail {
inline void require_scored(const ConfusionMatrix& cm, const char* metric) {
    if (cm.total() == 0)
        throw ValidationError(std::string(metric) + ": confusion matrix holds no samples");
}
} // namespace detail

// Trace over total. Identical to micro-F1 in the single-label setting.
inline double accuracy(const ConfusionMatrix& cm) {
    detail::require_scored(cm, "accuracy");
    return static_cast<double>(cm.trace()) / static_cast<double>(cm.total());
}

// Unweighted mean of per-class F1. Zero-denominator precision, recall, or F1
// contribute 0, so absent classes drag the mean down rather than vanishing.
inline double f1_macro(const ConfusionMatrix& cm) {
    detail::require_scored(cm, "f1_macro");
    const std::size_t n = cm.n_classes();
    double acc = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
        const double tp = static_cast<double>(cm.at(c, c));
        const double pred = static_cast<double>(cm.col_sum(c));
        const double truth = static_cast<double>(cm.row_sum(c));
        const double precision = pred > 0.0 ? tp / pred : 0.0;
        const double recall = truth > 0.0 ? tp / truth : 0.0;
        const double denom = precision + recall;
        acc += denom > 0.0 ? 2.0 * precision * recall / denom : 0.0;
    }
    return acc / static_cast<double>(n);
}

// (p_o - p_e) / (1 - p_e); degenerate p_e = 1 maps to 0.
inline double cohens_kappa(const ConfusionMatrix& cm) {
    detail::require_scored(cm, "cohens_kappa");
    const double total = static_cast<double>(cm.total());
    const double po = static_cast<double>(cm.trace()) / total;
    double pe = 0.0;
    for (std::size_t c = 0; c < cm.n_classes(); ++c)
        pe += static_cast<double>(cm.row_sum(c)) * static_cast<double>(cm.col_sum(c));
    pe /= total * total;
    if (pe >= 1.0) return 0.0;
    return (po - pe) / (1.0 - pe);
}

struct MetricSet {
    double accuracy = 0.0;
    double f1_macro = 0.0;
    double kappa = 0.0;
};

inline MetricSet score(const ConfusionMatrix& cm) {
    return MetricSet{accuracy(cm), f1_macro(cm), cohens_kappa(cm)};
}

struct SeedAggregate {
    std::size_t n_runs = 0;
    double mean = 0.0;
    std::optional<double> std_dev; // absent below two runs
};

// Mean and sample (n-1) standard deviation over per-seed metric values.
// Welford's update keeps identical runs at exactly zero deviation.
inline SeedAggregate aggregate_seeds(const std::vector<double>& runs) {
    if (runs.empty()) throw ValidationError("aggregate_seeds: no runs");
    double mean = 0.0, m2 = 0.0;
    std::size_t n = 0;
    for (double v : runs) {
        ++n;
        const double d = v - mean;
        mean += d / static_cast<double>(n);
        m2 += d * (v - mean);
    }
    SeedAggregate agg;
    agg.n_runs = n;
    agg.mean = mean;
    if (n >= 2) agg.std_dev = std::sqrt(m2 / static_cast<double>(n - 1));
    return agg;
}

} // namespace tsmix
