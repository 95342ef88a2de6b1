#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "radiopipe/ensemble.hpp"
#include "radiopipe/modality.hpp"
#include "radiopipe/vit3d.hpp"
#include "radiopipe/volume.hpp"

namespace radiopipe {

// ----------------------------- loss -----------------------------

struct BceResult {
    double loss;
    double dlogit;  // p - y
};

// Binary cross-entropy straight from the logit; never forms log(0).
BceResult bce_from_logit(double logit, int label);

// Loss from an already-squashed probability (clamped away from 0 and 1).
double bce_loss(double prob, int label);

// ----------------------------- early stopping -----------------------------

// Patience counter over validation loss. Only strict improvement resets it.
class EarlyStopping {
public:
    explicit EarlyStopping(int patience) : patience_(patience) {}

    // Returns true when `val_loss` strictly improves on the best seen.
    bool update(double val_loss, int epoch);
    bool should_stop() const { return patience_ > 0 && since_improvement_ >= patience_; }
    double best() const { return best_; }
    int best_epoch() const { return best_epoch_; }

private:
    int patience_;
    double best_ = std::numeric_limits<double>::infinity();
    int best_epoch_ = -1;
    int since_improvement_ = 0;
};

// ----------------------------- adam -----------------------------

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    Vit3dParams<float> m;
    Vit3dParams<float> v;
    int64_t step = 0;

    static AdamState init(const Vit3dConfig& cfg) {
        return AdamState{Vit3dParams<float>::zeros(cfg), Vit3dParams<float>::zeros(cfg), 0};
    }
};

// One in-place Adam update; throws NonFiniteGradient on NaN/inf gradients.
void adam_step(Vit3dParams<float>& params, const Vit3dParams<float>& grads, AdamState& state,
               double lr, const AdamConfig& cfg = {});

// ----------------------------- training -----------------------------

enum class AugmentMode { None, Rot90, Affine };

AugmentMode augment_mode_from_string(const std::string& name);
std::string to_string(AugmentMode mode);

struct TrainConfig {
    int epochs = 10;
    double val_split = 0.2;
    int batch_size = 2;
    double lr = 1e-4;
    double lr_decay = 0.95;
    int early_stop_patience = 3;  // 0 disables early stopping
    uint64_t seed = 0;
    Modality modality = Modality::T1w;
    AugmentMode augment = AugmentMode::Rot90;

    void validate() const;
};

struct TrainSample {
    Volume volume;
    int label = 0;
};

struct TrainSplit {
    std::vector<TrainSample> train;
    std::vector<TrainSample> val;
};

// Seeded validation holdout at subject granularity: every sample of a subject
// lands on the same side. n_val = max(1, round(n_subjects * val_split)).
// Errors: InsufficientData (no training subjects left, or the training
// partition ends up single-class).
TrainSplit split_by_subject(const std::vector<TrainSample>& samples, double val_split,
                            uint64_t seed);

struct EpochLog {
    int epoch;        // 1-based
    double train_loss;
    double val_loss;
    double val_auc;   // NaN when the validation split is single-class
    double lr;
};

struct Checkpoint {
    Vit3dConfig config;
    Modality modality = Modality::T1w;
    Vit3dParams<float> params;
    double best_val_loss = std::numeric_limits<double>::infinity();
    int epoch = 0;
};

struct TrainResult {
    Checkpoint best;         // params at the best validation loss
    Checkpoint final_state;  // params after the last epoch run
    std::vector<EpochLog> log;
};

// Subject-level seeded split, sequential epochs, checkpoint kept at the best
// validation loss.
TrainResult train(const std::vector<TrainSample>& samples, const Vit3dConfig& model_config,
                  const TrainConfig& train_config);

// Eval-mode probabilities for each volume, keyed by subject id.
std::vector<Prediction> evaluate(const Checkpoint& checkpoint,
                                 const std::vector<Volume>& volumes);

// ----------------------------- checkpoint file -----------------------------

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void write_train_log(const std::vector<EpochLog>& log, const std::filesystem::path& path);

}  // namespace radiopipe
