#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "egoprompt/errors.hpp"

namespace egoprompt {

/// Percent of exactly matching predictions.
inline double average_accuracy(const std::vector<std::int32_t>& preds,
                               const std::vector<std::int32_t>& truth) {
    if (preds.size() != truth.size() || preds.empty())
        throw UsageError("average_accuracy: prediction/truth lengths " + std::to_string(preds.size()) +
                         "/" + std::to_string(truth.size()));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == truth[i]) ++correct;
    return 100.0 * static_cast<double>(correct) / static_cast<double>(preds.size());
}

/// Unweighted mean of per-class recalls, in percent.
inline double class_average_accuracy(const std::vector<std::int32_t>& preds,
                                     const std::vector<std::int32_t>& truth) {
    if (preds.size() != truth.size() || preds.empty())
        throw UsageError("class_average_accuracy: prediction/truth lengths " +
                         std::to_string(preds.size()) + "/" + std::to_string(truth.size()));
    std::map<std::int32_t, std::pair<std::size_t, std::size_t>> per_class;  // label -> {correct, total}
    for (std::size_t i = 0; i < preds.size(); ++i) {
        auto& [correct, total] = per_class[truth[i]];
        ++total;
        if (preds[i] == truth[i]) ++correct;
    }
    double sum = 0;
    for (const auto& [label, ct] : per_class)
        sum += static_cast<double>(ct.first) / static_cast<double>(ct.second);
    return 100.0 * sum / static_cast<double>(per_class.size());
}

/// 2ab/(a+b); both arguments must be positive.
inline double harmonic_mean(double a, double b) {
    if (a <= 0 || b <= 0)
        throw UsageError("harmonic_mean: arguments must be positive, got " + std::to_string(a) + ", " +
                         std::to_string(b));
    return 2.0 * a * b / (a + b);
}

}  // namespace egoprompt
