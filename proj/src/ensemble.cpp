#include "radiopipe/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>

#include <json.hpp>

#include "radiopipe/dicom.hpp"
#include "radiopipe/error.hpp"

namespace radiopipe {

namespace {

std::string strip_cr(std::string line) {
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    return line;
}

double sigmoid_clamped(double z) {
    double p = 1.0 / (1.0 + std::exp(-z));
    return std::min(std::max(p, 1e-12), 1.0 - 1e-12);
}

}  // namespace

std::vector<ScoreRow> read_score_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail("IoError", "cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || strip_cr(line) != "BraTS21ID,MGMT_value") {
        fail("MalformedPredictionsCsv", "expected header BraTS21ID,MGMT_value in " +
                                            path.string());
    }
    std::vector<ScoreRow> rows;
    std::set<std::string> seen;
    size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        line = strip_cr(line);
        if (line.empty()) continue;
        const size_t comma = line.find(',');
        if (comma == std::string::npos) {
            fail("MalformedPredictionsCsv", path.string() + ":" + std::to_string(line_no) +
                                                ": missing comma");
        }
        ScoreRow row;
        row.subject_id = dicom::zero_pad_subject_id(line.substr(0, comma));
        const std::string value = line.substr(comma + 1);
        char* end = nullptr;
        row.value = std::strtod(value.c_str(), &end);
        if (end == value.c_str() || *end != '\0' || !std::isfinite(row.value) ||
            row.value < 0.0 || row.value > 1.0) {
            fail("MalformedPredictionsCsv", path.string() + ":" + std::to_string(line_no) +
                                                ": bad probability '" + value + "'");
        }
        if (!seen.insert(row.subject_id).second) {
            fail("DuplicateSubjectId", row.subject_id + " repeats in " + path.string());
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_score_csv(const std::vector<ScoreRow>& rows, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) fail("IoError", "cannot open " + path.string() + " for writing");
    out << "BraTS21ID,MGMT_value\n";
    char buf[32];
    for (const auto& row : rows) {
        std::snprintf(buf, sizeof(buf), "%.9f", row.value);
        out << row.subject_id << "," << buf << "\n";
    }
    if (!out) fail("IoError", "short write to " + path.string());
}

std::vector<Prediction> merge_predictions(
    const std::map<Modality, std::vector<ScoreRow>>& by_modality) {
    std::map<std::string, Prediction> merged;
    for (const auto& [modality, rows] : by_modality) {
        for (const auto& row : rows) {
            Prediction& p = merged[row.subject_id];
            p.subject_id = row.subject_id;
            p.per_modality[modality] = row.value;
        }
    }
    std::vector<Prediction> out;
    out.reserve(merged.size());
    for (auto& [id, p] : merged) out.push_back(std::move(p));
    return out;
}

std::vector<Prediction> average_ensemble(const std::vector<Prediction>& preds) {
    std::vector<Prediction> out = preds;
    for (auto& p : out) {
        if (p.per_modality.empty()) {
            fail("EmptyPrediction", "subject " + p.subject_id + " has no modality probability");
        }
        double sum = 0.0;
        for (const auto& [modality, value] : p.per_modality) sum += value;
        p.final = sum / static_cast<double>(p.per_modality.size());
    }
    return out;
}

namespace {

std::array<double, 4> feature_vector(const Prediction& p) {
    std::array<double, 4> x{};
    for (const Modality m : kAllModalities) {
        const auto it = p.per_modality.find(m);
        if (it == p.per_modality.end()) {
            fail("MissingModality", "subject " + p.subject_id + " lacks " + to_string(m));
        }
        x[static_cast<size_t>(m)] = it->second;
    }
    return x;
}

}  // namespace

StackingModel fit_stacking(const std::vector<Prediction>& preds,
                           const std::map<std::string, int>& labels,
                           const StackingFitOptions& options) {
    if (preds.empty()) fail("InsufficientData", "no predictions to fit on");
    std::vector<std::array<double, 4>> xs;
    std::vector<int> ys;
    xs.reserve(preds.size());
    for (const auto& p : preds) {
        xs.push_back(feature_vector(p));
        const auto it = labels.find(p.subject_id);
        if (it == labels.end()) fail("UsageError", "no label for subject " + p.subject_id);
        ys.push_back(it->second);
    }
    const bool has_pos = std::find(ys.begin(), ys.end(), 1) != ys.end();
    const bool has_neg = std::find(ys.begin(), ys.end(), 0) != ys.end();
    if (!has_pos || !has_neg) fail("SingleClassLabels", "both classes required to fit a stacker");

    const double n = static_cast<double>(xs.size());
    const double lambda = options.l2_lambda;
    std::array<double, 4> w = options.init_weights;
    double b = options.init_bias;

    for (int iter = 0; iter < options.max_iters; ++iter) {
        std::array<double, 4> grad_data{0, 0, 0, 0};
        double grad_b = 0.0;
        for (size_t i = 0; i < xs.size(); ++i) {
            double z = b;
            for (size_t j = 0; j < 4; ++j) z += w[j] * xs[i][j];
            const double err = sigmoid_clamped(z) - ys[i];
            for (size_t j = 0; j < 4; ++j) grad_data[j] += err * xs[i][j];
            grad_b += err;
        }
        for (size_t j = 0; j < 4; ++j) grad_data[j] /= n;
        grad_b /= n;

        double grad_max = std::abs(grad_b);
        for (size_t j = 0; j < 4; ++j) {
            grad_max = std::max(grad_max, std::abs(grad_data[j] + lambda * w[j]));
        }
        if (grad_max < options.grad_tolerance) break;

        // Implicit step for the quadratic penalty keeps the update stable for
        // any lambda; the fixed point is the same regularized optimum.
        for (size_t j = 0; j < 4; ++j) {
            w[j] = (w[j] - options.lr * grad_data[j]) / (1.0 + options.lr * lambda);
        }
        b -= options.lr * grad_b;
    }

    StackingModel model;
    model.weights = w;
    model.bias = b;
    model.l2_lambda = lambda;
    return model;
}

std::vector<Prediction> predict_stacking(const StackingModel& model,
                                         const std::vector<Prediction>& preds) {
    std::vector<Prediction> out = preds;
    for (auto& p : out) {
        const std::array<double, 4> x = feature_vector(p);
        double z = model.bias;
        for (size_t j = 0; j < 4; ++j) z += model.weights[j] * x[j];
        p.final = sigmoid_clamped(z);
    }
    return out;
}

void save_stacker(const StackingModel& model, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["weights"] = model.weights;
    j["bias"] = model.bias;
    j["l2_lambda"] = model.l2_lambda;
    std::ofstream out(path);
    if (!out) fail("IoError", "cannot open " + path.string() + " for writing");
    out << j.dump(2) << "\n";
    if (!out) fail("IoError", "short write to " + path.string());
}

StackingModel load_stacker(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail("IoError", "cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        fail("IoError", "bad stacker json: " + std::string(e.what()));
    }
    StackingModel model;
    const auto weights = j.at("weights");
    if (!weights.is_array() || weights.size() != 4) {
        fail("IoError", "stacker must have 4 weights");
    }
    for (size_t i = 0; i < 4; ++i) model.weights[i] = weights[i].get<double>();
    model.bias = j.at("bias").get<double>();
    model.l2_lambda = j.value("l2_lambda", 0.01);
    return model;
}

}  // namespace radiopipe
