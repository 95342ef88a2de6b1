#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "radiopipe/modality.hpp"

namespace radiopipe {

struct Prediction {
    std::string subject_id;
    std::map<Modality, double> per_modality;
    std::optional<double> final;
};

// One row of a score CSV (header BraTS21ID,MGMT_value).
struct ScoreRow {
    std::string subject_id;
    double value = 0.0;
};

std::vector<ScoreRow> read_score_csv(const std::filesystem::path& path);
void write_score_csv(const std::vector<ScoreRow>& rows, const std::filesystem::path& path);

// Union of subjects across per-modality score files, sorted by subject id.
std::vector<Prediction> merge_predictions(
    const std::map<Modality, std::vector<ScoreRow>>& by_modality);

// final = mean over the modalities that are present.
std::vector<Prediction> average_ensemble(const std::vector<Prediction>& preds);

struct StackingModel {
    std::array<double, 4> weights{0, 0, 0, 0};  // T1w, T1wCE, T2w, FLAIR
    double bias = 0.0;
    double l2_lambda = 0.01;
};

struct StackingFitOptions {
    double l2_lambda = 0.01;
    double lr = 0.1;
    double grad_tolerance = 1e-6;
    int max_iters = 100000;
    std::array<double, 4> init_weights{0, 0, 0, 0};
    double init_bias = 0.0;
};

// L2-regularized logistic regression on the four modality probabilities;
// full-batch descent with the quadratic penalty handled implicitly, stopped
// on gradient max-norm.
StackingModel fit_stacking(const std::vector<Prediction>& preds,
                           const std::map<std::string, int>& labels,
                           const StackingFitOptions& options = {});

std::vector<Prediction> predict_stacking(const StackingModel& model,
                                         const std::vector<Prediction>& preds);

void save_stacker(const StackingModel& model, const std::filesystem::path& path);
StackingModel load_stacker(const std::filesystem::path& path);

}  // namespace radiopipe
