#include "radiopipe/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "radiopipe/augment.hpp"
#include "radiopipe/error.hpp"
#include "radiopipe/metrics.hpp"
#include "radiopipe/rng.hpp"

namespace radiopipe {

// ----------------------------- loss -----------------------------

BceResult bce_from_logit(double logit, int label) {
    // max(z,0) - z*y + log(1 + exp(-|z|)) never overflows or takes log(0)
    const double z = logit;
    const double loss = std::max(z, 0.0) - z * label + std::log1p(std::exp(-std::abs(z)));
    const double p = 1.0 / (1.0 + std::exp(-z));
    return BceResult{loss, p - label};
}

double bce_loss(double prob, int label) {
    const double p = std::min(std::max(prob, 1e-12), 1.0 - 1e-12);
    return -(label * std::log(p) + (1 - label) * std::log1p(-p));
}

// ----------------------------- early stopping -----------------------------

bool EarlyStopping::update(double val_loss, int epoch) {
    if (val_loss < best_) {
        best_ = val_loss;
        best_epoch_ = epoch;
        since_improvement_ = 0;
        return true;
    }
    ++since_improvement_;
    return false;
}

// ----------------------------- adam -----------------------------

namespace {

template <typename S>
std::vector<std::pair<std::string, Tensor<S>*>> named_tensors(Vit3dParams<S>& p) {
    std::vector<std::pair<std::string, Tensor<S>*>> out;
    p.for_each([&](const std::string& name, Tensor<S>& t) { out.emplace_back(name, &t); });
    return out;
}

}  // namespace

void adam_step(Vit3dParams<float>& params, const Vit3dParams<float>& grads, AdamState& state,
               double lr, const AdamConfig& cfg) {
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bias1 = 1.0 - std::pow(cfg.beta1, t);
    const double bias2 = 1.0 - std::pow(cfg.beta2, t);

    auto p_list = named_tensors(params);
    auto g_list = named_tensors(const_cast<Vit3dParams<float>&>(grads));
    auto m_list = named_tensors(state.m);
    auto v_list = named_tensors(state.v);
    for (size_t i = 0; i < p_list.size(); ++i) {
        auto& p = p_list[i].second->data;
        const auto& g = g_list[i].second->data;
        auto& m = m_list[i].second->data;
        auto& v = v_list[i].second->data;
        if (g.size() != p.size()) {
            fail("ShapeMismatch", "gradient shape differs from parameters for " +
                                      p_list[i].first);
        }
        for (size_t k = 0; k < p.size(); ++k) {
            const double gk = g[k];
            if (!std::isfinite(gk)) {
                fail("NonFiniteGradient", p_list[i].first + "[" + std::to_string(k) + "]");
            }
            const double mk = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            const double vk = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            m[k] = static_cast<float>(mk);
            v[k] = static_cast<float>(vk);
            const double m_hat = mk / bias1;
            const double v_hat = vk / bias2;
            p[k] = static_cast<float>(p[k] - lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
        }
    }
}

// ----------------------------- training -----------------------------

AugmentMode augment_mode_from_string(const std::string& name) {
    if (name == "none") return AugmentMode::None;
    if (name == "rot90") return AugmentMode::Rot90;
    if (name == "affine") return AugmentMode::Affine;
    fail("UsageError", "unknown augment mode '" + name + "'");
}

std::string to_string(AugmentMode mode) {
    switch (mode) {
        case AugmentMode::None: return "none";
        case AugmentMode::Rot90: return "rot90";
        case AugmentMode::Affine: return "affine";
    }
    return "none";
}

void TrainConfig::validate() const {
    if (epochs < 1) fail("UsageError", "epochs must be >= 1");
    if (!(val_split > 0.0 && val_split < 1.0)) fail("UsageError", "val_split must be in (0, 1)");
    if (batch_size < 1) fail("UsageError", "batch_size must be >= 1");
    if (!(lr > 0.0)) fail("UsageError", "lr must be positive");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) fail("UsageError", "lr_decay must be in (0, 1]");
    if (early_stop_patience < 0) fail("UsageError", "early_stop_patience must be >= 0");
}

TrainSplit split_by_subject(const std::vector<TrainSample>& samples, double val_split,
                            uint64_t seed) {
    std::vector<std::string> subjects;
    std::set<std::string> seen;
    for (const auto& s : samples) {
        if (seen.insert(s.volume.subject_id).second) subjects.push_back(s.volume.subject_id);
    }
    const auto n = static_cast<long long>(subjects.size());
    const long long n_val = std::max(1ll, std::llround(static_cast<double>(n) * val_split));
    if (n_val >= n) {
        fail("InsufficientData", "validation split of " + std::to_string(n) +
                                     " subjects leaves no training subjects");
    }
    Rng rng(derive_seed(seed, 0));
    rng.shuffle(subjects);
    const std::set<std::string> val_subjects(subjects.begin(), subjects.begin() + n_val);

    TrainSplit split;
    for (const auto& s : samples) {
        if (val_subjects.count(s.volume.subject_id)) split.val.push_back(s);
        else split.train.push_back(s);
    }
    bool train_pos = false, train_neg = false;
    for (const auto& s : split.train) (s.label ? train_pos : train_neg) = true;
    if (!train_pos || !train_neg) {
        fail("InsufficientData", "training partition is single-class after the split");
    }
    return split;
}

namespace {

double mean(const std::vector<double>& xs) {
    double sum = 0.0;
    for (double x : xs) sum += x;
    return xs.empty() ? 0.0 : sum / static_cast<double>(xs.size());
}

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

}  // namespace

TrainResult train(const std::vector<TrainSample>& samples, const Vit3dConfig& model_config,
                  const TrainConfig& train_config) {
    model_config.validate();
    train_config.validate();
    if (samples.size() < 3) fail("InsufficientData", "need at least 3 labeled volumes");

    TrainSplit split = split_by_subject(samples, train_config.val_split, train_config.seed);
    if (train_config.augment == AugmentMode::Rot90) {
        std::vector<Volume> originals;
        originals.reserve(split.train.size());
        for (const auto& s : split.train) originals.push_back(s.volume);
        std::vector<Volume> expanded = expand_training_set(originals);
        std::vector<TrainSample> train_set;
        train_set.reserve(expanded.size());
        for (size_t i = 0; i < expanded.size(); ++i) {
            train_set.push_back(
                TrainSample{std::move(expanded[i]), split.train[i % split.train.size()].label});
        }
        split.train = std::move(train_set);
    }

    Vit3dModel<float> model(model_config);
    Rng init_rng(derive_seed(train_config.seed, 1));
    model.params = init_params<float>(model_config, init_rng);
    Rng model_rng(derive_seed(train_config.seed, 2));
    AdamState adam = AdamState::init(model_config);

    EarlyStopping stopper(train_config.early_stop_patience);
    TrainResult result;
    result.best.config = model_config;
    result.best.modality = train_config.modality;
    result.best.params = model.params;

    std::vector<size_t> order(split.train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= train_config.epochs; ++epoch) {
        const double lr = train_config.lr * std::pow(train_config.lr_decay, epoch - 1);

        // Per-epoch jittered copies when the random policy is selected.
        const std::vector<TrainSample>* train_set = &split.train;
        std::vector<TrainSample> jittered;
        if (train_config.augment == AugmentMode::Affine) {
            Rng affine_rng(derive_seed(train_config.seed, 1000 + static_cast<uint64_t>(epoch)));
            AugmentPolicy policy;
            jittered.reserve(split.train.size());
            for (const auto& s : split.train) {
                jittered.push_back(TrainSample{random_affine(s.volume, policy, affine_rng),
                                               s.label});
            }
            train_set = &jittered;
        }

        Rng shuffle_rng(derive_seed(train_config.seed, 100 + static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        std::vector<double> train_losses;
        train_losses.reserve(train_set->size());
        for (size_t start = 0; start < order.size();
             start += static_cast<size_t>(train_config.batch_size)) {
            const size_t stop =
                std::min(order.size(), start + static_cast<size_t>(train_config.batch_size));
            const double batch_n = static_cast<double>(stop - start);
            Vit3dParams<float> batch_grads = Vit3dParams<float>::zeros(model_config);
            auto acc_list = named_tensors(batch_grads);
            for (size_t i = start; i < stop; ++i) {
                const TrainSample& sample = (*train_set)[order[i]];
                const auto out = model.forward(sample.volume, Mode::Train, model_rng);
                const BceResult bce = bce_from_logit(out.logit, sample.label);
                train_losses.push_back(bce.loss);
                Vit3dParams<float> grads =
                    model.backward(static_cast<float>(bce.dlogit / batch_n));
                auto g_list = named_tensors(grads);
                for (size_t k = 0; k < acc_list.size(); ++k) {
                    auto& dst = acc_list[k].second->data;
                    const auto& src = g_list[k].second->data;
                    for (size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
                }
            }
            adam_step(model.params, batch_grads, adam, lr);
        }

        std::vector<double> val_losses;
        std::vector<double> val_scores;
        std::vector<int> val_labels;
        for (const auto& s : split.val) {
            const auto out = model.forward(s.volume, Mode::Eval, model_rng);
            val_losses.push_back(bce_from_logit(out.logit, s.label).loss);
            val_scores.push_back(out.prob);
            val_labels.push_back(s.label);
        }
        const double val_loss = mean(val_losses);
        const bool val_both_classes =
            std::find(val_labels.begin(), val_labels.end(), 1) != val_labels.end() &&
            std::find(val_labels.begin(), val_labels.end(), 0) != val_labels.end();
        double val_auc = std::numeric_limits<double>::quiet_NaN();
        if (val_both_classes) val_auc = roc_auc(val_scores, val_labels).first;

        result.log.push_back(EpochLog{epoch, mean(train_losses), val_loss, val_auc, lr});

        if (stopper.update(val_loss, epoch)) {
            result.best.params = model.params;
            result.best.best_val_loss = val_loss;
            result.best.epoch = epoch;
        }
        if (stopper.should_stop()) break;
    }

    result.final_state.config = model_config;
    result.final_state.modality = train_config.modality;
    result.final_state.params = std::move(model.params);
    result.final_state.best_val_loss = result.best.best_val_loss;
    result.final_state.epoch = result.log.empty() ? 0 : result.log.back().epoch;
    return result;
}

std::vector<Prediction> evaluate(const Checkpoint& checkpoint,
                                 const std::vector<Volume>& volumes) {
    Vit3dModel<float> model(checkpoint.config);
    model.params = checkpoint.params;
    Rng unused(0);
    std::vector<Prediction> preds;
    preds.reserve(volumes.size());
    for (const auto& v : volumes) {
        const auto out = model.forward(v, Mode::Eval, unused);
        Prediction p;
        p.subject_id = v.subject_id;
        p.per_modality[checkpoint.modality] = out.prob;
        preds.push_back(std::move(p));
    }
    return preds;
}

// ----------------------------- checkpoint file -----------------------------

namespace {

constexpr uint32_t kCheckpointVersion = 1;

void append_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

uint32_t read_u32(const std::string& bytes, size_t offset) {
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) {
        v = (v << 8) | static_cast<uint8_t>(bytes[offset + static_cast<size_t>(i)]);
    }
    return v;
}

nlohmann::ordered_json config_json(const Vit3dConfig& cfg) {
    nlohmann::ordered_json j;
    j["image_height"] = cfg.image_height;
    j["image_width"] = cfg.image_width;
    j["image_depth"] = cfg.image_depth;
    j["patch_size"] = cfg.patch_size;
    j["embed_dim"] = cfg.embed_dim;
    j["num_blocks"] = cfg.num_blocks;
    j["num_heads"] = cfg.num_heads;
    j["dropout_rate"] = cfg.dropout_rate;
    j["mlp_hidden_dim"] = cfg.mlp_hidden_dim;
    return j;
}

Vit3dConfig config_from_json(const nlohmann::json& j) {
    Vit3dConfig cfg;
    cfg.image_height = j.at("image_height").get<int>();
    cfg.image_width = j.at("image_width").get<int>();
    cfg.image_depth = j.at("image_depth").get<int>();
    cfg.patch_size = j.at("patch_size").get<int>();
    cfg.embed_dim = j.at("embed_dim").get<int>();
    cfg.num_blocks = j.at("num_blocks").get<int>();
    cfg.num_heads = j.at("num_heads").get<int>();
    cfg.dropout_rate = j.at("dropout_rate").get<double>();
    cfg.mlp_hidden_dim = j.at("mlp_hidden_dim").get<int>();
    return cfg;
}

}  // namespace

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
    auto tensors = named_tensors(const_cast<Vit3dParams<float>&>(checkpoint.params));

    nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
    uint64_t offset = 0;
    for (const auto& [name, tensor] : tensors) {
        nlohmann::ordered_json entry;
        entry["name"] = name;
        entry["shape"] = tensor->shape;
        entry["offset"] = offset;
        manifest.push_back(std::move(entry));
        offset += static_cast<uint64_t>(tensor->numel()) * 4;
    }
    nlohmann::ordered_json header;
    header["config"] = config_json(checkpoint.config);
    header["modality"] = to_string(checkpoint.modality);
    header["epoch"] = checkpoint.epoch;
    header["best_val_loss"] = checkpoint.best_val_loss;
    header["manifest"] = std::move(manifest);
    const std::string header_bytes = header.dump();

    std::string out;
    out.reserve(12 + header_bytes.size() + offset);
    out += "V3DC";
    append_u32(out, kCheckpointVersion);
    append_u32(out, static_cast<uint32_t>(header_bytes.size()));
    out += header_bytes;
    for (const auto& [name, tensor] : tensors) {
        for (float x : tensor->data) {
            uint32_t bits;
            std::memcpy(&bits, &x, 4);
            append_u32(out, bits);
        }
    }

    std::ofstream file(path, std::ios::binary);
    if (!file) fail("IoError", "cannot open " + path.string() + " for writing");
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) fail("IoError", "short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) fail("IoError", "cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());

    if (bytes.size() < 4 || bytes.compare(0, 4, "V3DC") != 0) {
        fail("BadMagic", "not a checkpoint file");
    }
    if (bytes.size() < 12) fail("TruncatedBlob", "checkpoint header cut short");
    const uint32_t version = read_u32(bytes, 4);
    if (version != kCheckpointVersion) {
        fail("VersionMismatch", "checkpoint version " + std::to_string(version) +
                                    ", expected " + std::to_string(kCheckpointVersion));
    }
    const uint32_t header_size = read_u32(bytes, 8);
    if (bytes.size() < 12 + static_cast<size_t>(header_size)) {
        fail("TruncatedBlob", "checkpoint header cut short");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(12, header_size));
    } catch (const nlohmann::json::exception& e) {
        fail("IoError", "bad checkpoint header: " + std::string(e.what()));
    }

    Checkpoint checkpoint;
    try {
        checkpoint.config = config_from_json(header.at("config"));
        checkpoint.modality = parse_modality(header.at("modality").get<std::string>());
        checkpoint.epoch = header.at("epoch").get<int>();
        checkpoint.best_val_loss = header.at("best_val_loss").get<double>();
    } catch (const nlohmann::json::exception& e) {
        fail("IoError", "bad checkpoint header: " + std::string(e.what()));
    }
    checkpoint.params = Vit3dParams<float>::zeros(checkpoint.config);

    std::map<std::string, std::pair<std::vector<int>, uint64_t>> manifest;
    for (const auto& entry : header.at("manifest")) {
        manifest[entry.at("name").get<std::string>()] = {
            entry.at("shape").get<std::vector<int>>(), entry.at("offset").get<uint64_t>()};
    }

    const size_t blob_base = 12 + header_size;
    const size_t blob_size = bytes.size() - blob_base;
    auto tensors = named_tensors(checkpoint.params);
    if (manifest.size() != tensors.size()) {
        fail("ManifestShapeMismatch", "manifest has " + std::to_string(manifest.size()) +
                                          " tensors, model needs " +
                                          std::to_string(tensors.size()));
    }
    for (auto& [name, tensor] : tensors) {
        const auto it = manifest.find(name);
        if (it == manifest.end()) {
            fail("ManifestShapeMismatch", "tensor " + name + " missing from manifest");
        }
        if (it->second.first != tensor->shape) {
            fail("ManifestShapeMismatch", "tensor " + name + " has shape " +
                                              detail::shape_string(it->second.first) +
                                              ", expected " +
                                              detail::shape_string(tensor->shape));
        }
        const uint64_t byte_offset = it->second.second;
        const uint64_t byte_count = static_cast<uint64_t>(tensor->numel()) * 4;
        if (byte_offset + byte_count > blob_size) {
            fail("TruncatedBlob", "tensor " + name + " extends past end of file");
        }
        for (int64_t k = 0; k < tensor->numel(); ++k) {
            const uint32_t bits =
                read_u32(bytes, blob_base + byte_offset + static_cast<size_t>(k) * 4);
            std::memcpy(&tensor->data[static_cast<size_t>(k)], &bits, 4);
        }
    }
    return checkpoint;
}

void write_train_log(const std::vector<EpochLog>& log, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) fail("IoError", "cannot open " + path.string() + " for writing");
    out << "epoch,train_loss,val_loss,val_auc,lr\n";
    for (const auto& row : log) {
        out << row.epoch << "," << format_double(row.train_loss) << ","
            << format_double(row.val_loss) << "," << format_double(row.val_auc) << ","
            << format_double(row.lr) << "\n";
    }
    if (!out) fail("IoError", "short write to " + path.string());
}

}  // namespace radiopipe
