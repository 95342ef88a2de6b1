#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace radiopipe {

struct RocPoint {
    double fpr;
    double tpr;
    double threshold;  // +inf for the (0,0) anchor
};

struct Confusion {
    int64_t tp = 0;
    int64_t fp = 0;
    int64_t fn = 0;
    int64_t tn = 0;
    int64_t total() const { return tp + fp + fn + tn; }
};

struct ClassificationMetrics {
    std::optional<double> precision;
    std::optional<double> sensitivity;
    std::optional<double> specificity;
    std::optional<double> accuracy;
};

struct MetricsReport {
    double auc = 0.0;
    std::vector<RocPoint> roc;
    Confusion confusion;
    ClassificationMetrics scalars;
    std::string split_label;  // which predictions this was computed on
};

// Mann-Whitney AUC with ties counted 1/2, plus the ROC polyline swept over
// every distinct score.
std::pair<double, std::vector<RocPoint>> roc_auc(const std::vector<double>& scores,
                                                 const std::vector<int>& labels);

Confusion confusion_matrix(const std::vector<double>& scores, const std::vector<int>& labels,
                           double threshold = 0.5);

ClassificationMetrics classification_metrics(const Confusion& c);

MetricsReport compute_report(const std::vector<double>& scores, const std::vector<int>& labels,
                             const std::string& split_label);

struct ReportPaths {
    std::filesystem::path roc_csv;
    std::filesystem::path report_json;
    std::filesystem::path roc_svg;
};

void emit_report(const MetricsReport& report, const ReportPaths& paths);
MetricsReport parse_report(const std::filesystem::path& report_json);

}  // namespace radiopipe
