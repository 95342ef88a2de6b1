#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "radiopipe/ensemble.hpp"
#include "radiopipe/error.hpp"
#include "radiopipe/rng.hpp"

using namespace radiopipe;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("radiopipe_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

Prediction full_prediction(const std::string& id, double t1w, double t1wce, double t2w,
                           double flair) {
    Prediction p;
    p.subject_id = id;
    p.per_modality[Modality::T1w] = t1w;
    p.per_modality[Modality::T1wCE] = t1wce;
    p.per_modality[Modality::T2w] = t2w;
    p.per_modality[Modality::FLAIR] = flair;
    return p;
}

// Linearly separable stacking fixture: positives score high on every
// modality, negatives low, with deterministic jitter.
void separable_fixture(std::vector<Prediction>& preds, std::map<std::string, int>& labels) {
    Rng rng(55);
    for (int i = 0; i < 12; ++i) {
        const int label = i % 2;
        const double base = label == 1 ? 0.75 : 0.25;
        char buf[8];
        std::snprintf(buf, sizeof(buf), "%05d", i + 1);
        preds.push_back(full_prediction(buf, base + 0.04 * rng.uniform(),
                                        base + 0.04 * rng.uniform(), base + 0.04 * rng.uniform(),
                                        base + 0.04 * rng.uniform()));
        labels[buf] = label;
    }
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

// ----------------------------- averaging -----------------------------

TEST_CASE("average of the four modality probabilities") {
    const auto out = average_ensemble({full_prediction("00001", 0.2, 0.4, 0.6, 0.8)});
    REQUIRE(out.size() == 1);
    CHECK(out[0].final.value() == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("averaging uses exactly the modalities present") {
    Prediction p;
    p.subject_id = "00002";
    p.per_modality[Modality::T2w] = 0.3;
    p.per_modality[Modality::FLAIR] = 0.5;
    const auto out = average_ensemble({p});
    CHECK(out[0].final.value() == doctest::Approx(0.4).epsilon(1e-15));
}

TEST_CASE("averaging a subject with no scores is an error") {
    Prediction p;
    p.subject_id = "00003";
    CHECK_THROWS_WITH_AS(average_ensemble({p}), doctest::Contains("EmptyPrediction"), Error);
}

TEST_CASE("averaged finals are bounded and order preserving") {
    Rng rng(56);
    std::vector<Prediction> preds;
    for (int i = 0; i < 20; ++i) {
        preds.push_back(full_prediction("id" + std::to_string(i), rng.uniform(), rng.uniform(),
                                        rng.uniform(), rng.uniform()));
    }
    const auto out = average_ensemble(preds);
    REQUIRE(out.size() == preds.size());
    for (size_t i = 0; i < out.size(); ++i) {
        CHECK(out[i].subject_id == preds[i].subject_id);
        double lo = 1.0, hi = 0.0;
        for (const auto& [m, v] : preds[i].per_modality) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        CHECK(out[i].final.value() >= lo);
        CHECK(out[i].final.value() <= hi);
    }
    // recomputing from the same inputs changes nothing
    const auto again = average_ensemble(out);
    for (size_t i = 0; i < out.size(); ++i) {
        CHECK(again[i].final.value() == out[i].final.value());
    }
}

// ----------------------------- score csv -----------------------------

TEST_CASE("score csv format is frozen") {
    const fs::path dir = temp_dir("score_csv");
    const std::vector<ScoreRow> rows{{"00042", 0.25}, {"00777", 1.0}};
    const fs::path path = dir / "scores.csv";
    write_score_csv(rows, path);
    CHECK(read_file(path) == "BraTS21ID,MGMT_value\n"
                             "00042,0.250000000\n"
                             "00777,1.000000000\n");
    fs::remove_all(dir);
}

TEST_CASE("score csv round trips probabilities to nine decimals") {
    const fs::path dir = temp_dir("score_rt");
    Rng rng(57);
    std::vector<ScoreRow> rows;
    for (int i = 0; i < 50; ++i) {
        char buf[8];
        std::snprintf(buf, sizeof(buf), "%05d", i + 1);
        rows.push_back({buf, rng.uniform()});
    }
    const fs::path path = dir / "scores.csv";
    write_score_csv(rows, path);
    const auto back = read_score_csv(path);
    REQUIRE(back.size() == rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        CHECK(back[i].subject_id == rows[i].subject_id);
        CHECK(std::abs(back[i].value - rows[i].value) <= 5e-10);
    }
    fs::remove_all(dir);
}

TEST_CASE("score csv reader zero pads ids and rejects damage") {
    const fs::path dir = temp_dir("score_bad");
    const fs::path path = dir / "scores.csv";

    std::ofstream(path) << "BraTS21ID,MGMT_value\n7,0.5\n";
    CHECK(read_score_csv(path)[0].subject_id == "00007");

    std::ofstream(path) << "ID,prob\n7,0.5\n";
    CHECK_THROWS_WITH_AS(read_score_csv(path), doctest::Contains("MalformedPredictionsCsv"),
                         Error);

    std::ofstream(path) << "BraTS21ID,MGMT_value\n7 0.5\n";
    CHECK_THROWS_WITH_AS(read_score_csv(path), doctest::Contains("MalformedPredictionsCsv"),
                         Error);

    std::ofstream(path) << "BraTS21ID,MGMT_value\n7,1.5\n";
    CHECK_THROWS_WITH_AS(read_score_csv(path), doctest::Contains("MalformedPredictionsCsv"),
                         Error);

    std::ofstream(path) << "BraTS21ID,MGMT_value\n7,-0.1\n";
    CHECK_THROWS_WITH_AS(read_score_csv(path), doctest::Contains("MalformedPredictionsCsv"),
                         Error);

    std::ofstream(path) << "BraTS21ID,MGMT_value\n7,maybe\n";
    CHECK_THROWS_WITH_AS(read_score_csv(path), doctest::Contains("MalformedPredictionsCsv"),
                         Error);

    std::ofstream(path) << "BraTS21ID,MGMT_value\n7,0.5\n00007,0.25\n";
    CHECK_THROWS_WITH_AS(read_score_csv(path), doctest::Contains("DuplicateSubjectId"), Error);

    CHECK_THROWS_WITH_AS(read_score_csv(dir / "absent.csv"), doctest::Contains("IoError"), Error);
    fs::remove_all(dir);
}

TEST_CASE("merge joins modality files by subject into a sorted union") {
    std::map<Modality, std::vector<ScoreRow>> by_modality;
    by_modality[Modality::T1w] = {{"00003", 0.7}, {"00001", 0.2}};
    by_modality[Modality::FLAIR] = {{"00002", 0.9}, {"00003", 0.4}};
    const auto merged = merge_predictions(by_modality);
    REQUIRE(merged.size() == 3);
    CHECK(merged[0].subject_id == "00001");
    CHECK(merged[1].subject_id == "00002");
    CHECK(merged[2].subject_id == "00003");
    CHECK(merged[0].per_modality.size() == 1);
    CHECK(merged[0].per_modality.at(Modality::T1w) == 0.2);
    CHECK(merged[1].per_modality.size() == 1);
    CHECK(merged[1].per_modality.at(Modality::FLAIR) == 0.9);
    CHECK(merged[2].per_modality.size() == 2);
    CHECK(merged[2].per_modality.at(Modality::T1w) == 0.7);
    CHECK(merged[2].per_modality.at(Modality::FLAIR) == 0.4);
    CHECK_FALSE(merged[0].final.has_value());
}

// ----------------------------- stacking -----------------------------

TEST_CASE("stacking separates the separable") {
    std::vector<Prediction> preds;
    std::map<std::string, int> labels;
    separable_fixture(preds, labels);
    const StackingModel model = fit_stacking(preds, labels);
    const auto scored = predict_stacking(model, preds);
    for (const auto& p : scored) {
        const int predicted = p.final.value() >= 0.5 ? 1 : 0;
        CAPTURE(p.subject_id);
        CHECK(predicted == labels.at(p.subject_id));
        CHECK(p.final.value() > 0.0);
        CHECK(p.final.value() < 1.0);
    }
    // the learned direction points from low scores to high scores
    double wsum = 0.0;
    for (double w : model.weights) wsum += w;
    CHECK(wsum > 0.0);
}

TEST_CASE("the stacking optimum does not depend on the starting point") {
    std::vector<Prediction> preds;
    std::map<std::string, int> labels;
    separable_fixture(preds, labels);
    const StackingModel reference = fit_stacking(preds, labels);
    Rng rng(58);
    for (int trial = 0; trial < 10; ++trial) {
        StackingFitOptions options;
        for (auto& w : options.init_weights) w = rng.uniform(-1.0, 1.0);
        options.init_bias = rng.uniform(-1.0, 1.0);
        const StackingModel refit = fit_stacking(preds, labels, options);
        double diff = std::abs(refit.bias - reference.bias);
        for (size_t j = 0; j < 4; ++j) {
            diff = std::max(diff, std::abs(refit.weights[j] - reference.weights[j]));
        }
        CAPTURE(trial);
        CHECK(diff <= 1e-4);
    }
}

TEST_CASE("a crushing l2 penalty drives the weights to zero") {
    std::vector<Prediction> preds;
    std::map<std::string, int> labels;
    separable_fixture(preds, labels);
    StackingFitOptions options;
    options.l2_lambda = 1e6;
    const StackingModel model = fit_stacking(preds, labels, options);
    for (double w : model.weights) CHECK(std::abs(w) < 1e-3);
    // with dead weights the bias still matches the class balance (6/6)
    const auto scored = predict_stacking(model, preds);
    for (const auto& p : scored) {
        CHECK(p.final.value() == doctest::Approx(0.5).epsilon(1e-2));
    }
}

TEST_CASE("stacking failures are categorized") {
    std::vector<Prediction> preds;
    std::map<std::string, int> labels;
    CHECK_THROWS_WITH_AS(fit_stacking(preds, labels), doctest::Contains("InsufficientData"),
                         Error);

    separable_fixture(preds, labels);
    std::map<std::string, int> one_class;
    for (const auto& [id, y] : labels) one_class[id] = 1;
    CHECK_THROWS_WITH_AS(fit_stacking(preds, one_class), doctest::Contains("SingleClassLabels"),
                         Error);

    auto missing_label = labels;
    missing_label.erase(preds[3].subject_id);
    CHECK_THROWS_WITH_AS(fit_stacking(preds, missing_label), doctest::Contains("UsageError"),
                         Error);

    auto gappy = preds;
    gappy[2].per_modality.erase(Modality::T2w);
    CHECK_THROWS_WITH_AS(fit_stacking(gappy, labels), doctest::Contains("MissingModality"),
                         Error);
    CHECK_THROWS_WITH_AS(predict_stacking(StackingModel{}, gappy),
                         doctest::Contains("MissingModality"), Error);
}

TEST_CASE("a zero stacker scores one half everywhere") {
    const StackingModel zero;
    const auto scored = predict_stacking(zero, {full_prediction("00009", 0.1, 0.9, 0.3, 0.7)});
    CHECK(scored[0].final.value() == 0.5);
}

TEST_CASE("stacker json round trips exactly") {
    const fs::path dir = temp_dir("stacker");
    StackingModel model;
    model.weights = {0.125, -1.75, 2.5, 0.0625};
    model.bias = -0.375;
    model.l2_lambda = 0.02;
    const fs::path path = dir / "stacker.json";
    save_stacker(model, path);
    const StackingModel back = load_stacker(path);
    for (size_t j = 0; j < 4; ++j) CHECK(back.weights[j] == model.weights[j]);
    CHECK(back.bias == model.bias);
    CHECK(back.l2_lambda == model.l2_lambda);

    CHECK_THROWS_WITH_AS(load_stacker(dir / "absent.json"), doctest::Contains("IoError"), Error);
    const fs::path broken = dir / "broken.json";
    std::ofstream(broken) << "{\"weights\": [1, 2], \"bias\": 0}";
    CHECK_THROWS_WITH_AS(load_stacker(broken), doctest::Contains("IoError"), Error);
    fs::remove_all(dir);
}
