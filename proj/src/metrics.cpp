#include "radiopipe/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "radiopipe/error.hpp"

namespace radiopipe {

namespace {

void check_lengths(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) {
        fail("LengthMismatch", std::to_string(scores.size()) + " scores vs " +
                                   std::to_string(labels.size()) + " labels");
    }
    for (int y : labels) {
        if (y != 0 && y != 1) fail("UsageError", "labels must be 0 or 1");
    }
}

std::string format_double(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

}  // namespace

std::pair<double, std::vector<RocPoint>> roc_auc(const std::vector<double>& scores,
                                                 const std::vector<int>& labels) {
    check_lengths(scores, labels);
    const int64_t n = static_cast<int64_t>(scores.size());
    int64_t n_pos = 0;
    for (int y : labels) n_pos += y;
    const int64_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) fail("SingleClass", "both classes required for a ROC curve");

    // Mann-Whitney via midranks: ties contribute exactly 1/2 per pair.
    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    for (size_t i = 0; i < order.size();) {
        size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (size_t k = i; k < j; ++k) {
            if (labels[order[k]] == 1) rank_sum_pos += midrank;
        }
        i = j;
    }
    const double auc =
        (rank_sum_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0) /
        (static_cast<double>(n_pos) * static_cast<double>(n_neg));

    // ROC swept from the highest score down, one point per distinct score.
    std::vector<RocPoint> roc;
    roc.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
    int64_t tp = 0, fp = 0;
    for (size_t i = order.size(); i > 0;) {
        size_t j = i;  // group of equal scores [j_lo, i)
        const double s = scores[order[i - 1]];
        while (j > 0 && scores[order[j - 1]] == s) --j;
        for (size_t k = j; k < i; ++k) {
            if (labels[order[k]] == 1) ++tp;
            else ++fp;
        }
        roc.push_back({static_cast<double>(fp) / static_cast<double>(n_neg),
                       static_cast<double>(tp) / static_cast<double>(n_pos), s});
        i = j;
    }
    return {auc, roc};
}

Confusion confusion_matrix(const std::vector<double>& scores, const std::vector<int>& labels,
                           double threshold) {
    check_lengths(scores, labels);
    Confusion c;
    for (size_t i = 0; i < scores.size(); ++i) {
        const bool predicted = scores[i] >= threshold;
        if (predicted && labels[i] == 1) ++c.tp;
        else if (predicted) ++c.fp;
        else if (labels[i] == 1) ++c.fn;
        else ++c.tn;
    }
    return c;
}

ClassificationMetrics classification_metrics(const Confusion& c) {
    ClassificationMetrics m;
    auto ratio = [](int64_t num, int64_t den) -> std::optional<double> {
        if (den == 0) return std::nullopt;
        return static_cast<double>(num) / static_cast<double>(den);
    };
    m.precision = ratio(c.tp, c.tp + c.fp);
    m.sensitivity = ratio(c.tp, c.tp + c.fn);
    m.specificity = ratio(c.tn, c.tn + c.fp);
    m.accuracy = ratio(c.tp + c.tn, c.total());
    return m;
}

MetricsReport compute_report(const std::vector<double>& scores, const std::vector<int>& labels,
                             const std::string& split_label) {
    MetricsReport r;
    auto [auc, roc] = roc_auc(scores, labels);
    r.auc = auc;
    r.roc = std::move(roc);
    r.confusion = confusion_matrix(scores, labels);
    r.scalars = classification_metrics(r.confusion);
    r.split_label = split_label;
    return r;
}

// ----------------------------- emission -----------------------------

namespace {

nlohmann::ordered_json optional_json(const std::optional<double>& v) {
    if (!v) return nullptr;
    return *v;
}

std::optional<double> optional_from_json(const nlohmann::json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

void write_svg(const MetricsReport& report, const std::filesystem::path& path) {
    const double size = 440.0, margin = 50.0, plot = size - 2 * margin;
    auto px = [&](double fpr) { return margin + fpr * plot; };
    auto py = [&](double tpr) { return margin + (1.0 - tpr) * plot; };

    std::ofstream out(path);
    if (!out) fail("IoError", "cannot open " + path.string() + " for writing");
    out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\""
        << size << "\" viewBox=\"0 0 " << size << " " << size << "\">\n";
    out << "  <rect x=\"0\" y=\"0\" width=\"" << size << "\" height=\"" << size
        << "\" fill=\"white\"/>\n";
    out << "  <rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << plot
        << "\" height=\"" << plot << "\" fill=\"none\" stroke=\"#888\"/>\n";
    out << "  <line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(1) << "\" y2=\""
        << py(1) << "\" stroke=\"#bbb\" stroke-dasharray=\"6,4\"/>\n";
    out << "  <polyline fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"2\" points=\"";
    for (size_t i = 0; i < report.roc.size(); ++i) {
        if (i) out << " ";
        out << format_double(px(report.roc[i].fpr)) << "," << format_double(py(report.roc[i].tpr));
    }
    out << "\"/>\n";
    out << "  <text x=\"" << margin + 10 << "\" y=\"" << margin + 22
        << "\" font-family=\"sans-serif\" font-size=\"15\">AUC = " << format_double(report.auc)
        << " (" << report.split_label << ")</text>\n";
    out << "  <text x=\"" << size / 2 << "\" y=\"" << size - 12
        << "\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">false positive "
           "rate</text>\n";
    out << "  <text x=\"16\" y=\"" << size / 2
        << "\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" "
           "transform=\"rotate(-90 16 "
        << size / 2 << ")\">true positive rate</text>\n";
    out << "</svg>\n";
    if (!out) fail("IoError", "short write to " + path.string());
}

}  // namespace

void emit_report(const MetricsReport& report, const ReportPaths& paths) {
    if (!paths.roc_csv.empty()) {
        std::ofstream out(paths.roc_csv);
        if (!out) fail("IoError", "cannot open " + paths.roc_csv.string() + " for writing");
        out << "fpr,tpr,threshold\n";
        for (const auto& p : report.roc) {
            out << format_double(p.fpr) << "," << format_double(p.tpr) << ","
                << format_double(p.threshold) << "\n";
        }
        if (!out) fail("IoError", "short write to " + paths.roc_csv.string());
    }
    if (!paths.report_json.empty()) {
        nlohmann::ordered_json j;
        j["split"] = report.split_label;
        j["auc"] = report.auc;
        j["confusion"] = {{"tp", report.confusion.tp},
                          {"fp", report.confusion.fp},
                          {"fn", report.confusion.fn},
                          {"tn", report.confusion.tn}};
        j["metrics"] = {{"precision", optional_json(report.scalars.precision)},
                        {"sensitivity", optional_json(report.scalars.sensitivity)},
                        {"specificity", optional_json(report.scalars.specificity)},
                        {"accuracy", optional_json(report.scalars.accuracy)}};
        nlohmann::ordered_json roc = nlohmann::ordered_json::array();
        for (const auto& p : report.roc) {
            nlohmann::ordered_json point;
            point["fpr"] = p.fpr;
            point["tpr"] = p.tpr;
            if (std::isinf(p.threshold)) point["threshold"] = "inf";
            else point["threshold"] = p.threshold;
            roc.push_back(std::move(point));
        }
        j["roc"] = std::move(roc);
        std::ofstream out(paths.report_json);
        if (!out) fail("IoError", "cannot open " + paths.report_json.string() + " for writing");
        out << j.dump(2) << "\n";
        if (!out) fail("IoError", "short write to " + paths.report_json.string());
    }
    if (!paths.roc_svg.empty()) write_svg(report, paths.roc_svg);
}

MetricsReport parse_report(const std::filesystem::path& report_json) {
    std::ifstream in(report_json);
    if (!in) fail("IoError", "cannot open " + report_json.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        fail("IoError", "bad report json: " + std::string(e.what()));
    }
    MetricsReport r;
    r.split_label = j.at("split").get<std::string>();
    r.auc = j.at("auc").get<double>();
    r.confusion.tp = j.at("confusion").at("tp").get<int64_t>();
    r.confusion.fp = j.at("confusion").at("fp").get<int64_t>();
    r.confusion.fn = j.at("confusion").at("fn").get<int64_t>();
    r.confusion.tn = j.at("confusion").at("tn").get<int64_t>();
    r.scalars.precision = optional_from_json(j.at("metrics").at("precision"));
    r.scalars.sensitivity = optional_from_json(j.at("metrics").at("sensitivity"));
    r.scalars.specificity = optional_from_json(j.at("metrics").at("specificity"));
    r.scalars.accuracy = optional_from_json(j.at("metrics").at("accuracy"));
    for (const auto& point : j.at("roc")) {
        RocPoint p;
        p.fpr = point.at("fpr").get<double>();
        p.tpr = point.at("tpr").get<double>();
        if (point.at("threshold").is_string()) {
            p.threshold = std::numeric_limits<double>::infinity();
        } else {
            p.threshold = point.at("threshold").get<double>();
        }
        r.roc.push_back(p);
    }
    return r;
}

}  // namespace radiopipe
