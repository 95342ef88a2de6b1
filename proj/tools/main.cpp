#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "radiopipe/augment.hpp"
#include "radiopipe/dicom.hpp"
#include "radiopipe/ensemble.hpp"
#include "radiopipe/error.hpp"
#include "radiopipe/metrics.hpp"
#include "radiopipe/synth.hpp"
#include "radiopipe/trainer.hpp"
#include "radiopipe/vit3d.hpp"
#include "radiopipe/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

// Every artifact gets a sidecar holding the command and its effective flags,
// enough to re-run the producing invocation.
void write_sidecar(const fs::path& path, const ordered_json& config) {
    std::ofstream out(path);
    if (!out) radiopipe::fail("IoError", "cannot open " + path.string() + " for writing");
    out << config.dump(2) << "\n";
    if (!out) radiopipe::fail("IoError", "short write to " + path.string());
}

struct Dims {
    int height = 32;
    int width = 32;
    int depth = 32;
};

Dims parse_dims(const std::string& text) {
    Dims d;
    if (std::sscanf(text.c_str(), "%dx%dx%d", &d.height, &d.width, &d.depth) != 3 ||
        d.height < 1 || d.width < 1 || d.depth < 1) {
        radiopipe::fail("UsageError", "--dims must look like 32x32x32, got '" + text + "'");
    }
    return d;
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::string current;
    for (char c : text) {
        if (c == ',') {
            if (!current.empty()) out.push_back(current);
            current.clear();
        } else {
            current.push_back(c);
        }
    }
    if (!current.empty()) out.push_back(current);
    return out;
}

// Parallel worker pool over an index range; used by prep and synth fan-out.
void parallel_for(size_t count, int jobs, const std::function<void(size_t)>& body) {
    if (jobs <= 1 || count <= 1) {
        for (size_t i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::vector<std::thread> workers;
    std::exception_ptr error;
    std::mutex error_mutex;
    const int n_workers = std::min<int>(jobs, static_cast<int>(count));
    for (int w = 0; w < n_workers; ++w) {
        workers.emplace_back([&] {
            for (;;) {
                const size_t i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& w : workers) w.join();
    if (error) std::rethrow_exception(error);
}

// ----------------------------- synth -----------------------------

struct SynthArgs {
    std::string out;
    int subjects = 8;
    std::string dims = "32x32x32";
    double positive_fraction = 0.5;
    int lesion_side = 8;
    int lesion_delta = 1500;
    double noise_sigma = 25.0;
    uint64_t seed = 0;
    int jobs = 1;
};

int run_synth(const SynthArgs& args) {
    const Dims dims = parse_dims(args.dims);
    radiopipe::synth::SynthSpec spec;
    spec.num_subjects = args.subjects;
    spec.height = dims.height;
    spec.width = dims.width;
    spec.depth = dims.depth;
    spec.positive_fraction = args.positive_fraction;
    spec.lesion_side = args.lesion_side;
    spec.lesion_delta = args.lesion_delta;
    spec.noise_sigma = args.noise_sigma;
    spec.seed = args.seed;
    radiopipe::synth::generate_dataset(spec, args.out, args.jobs);

    ordered_json sidecar;
    sidecar["command"] = "synth";
    sidecar["out"] = args.out;
    sidecar["subjects"] = args.subjects;
    sidecar["dims"] = args.dims;
    sidecar["positive_fraction"] = args.positive_fraction;
    sidecar["lesion_side"] = args.lesion_side;
    sidecar["lesion_delta"] = args.lesion_delta;
    sidecar["noise_sigma"] = args.noise_sigma;
    sidecar["seed"] = args.seed;
    write_sidecar(fs::path(args.out) / "run.json", sidecar);
    std::cout << "wrote " << args.subjects << " subjects to " << args.out << "\n";
    return 0;
}

// ----------------------------- prep -----------------------------

struct PrepArgs {
    std::string input;
    std::string output;
    int size = 256;
    int depth = 64;
    std::string modalities = "T1w,T1wCE,T2w,FLAIR";
    int jobs = 1;
};

int run_prep(const PrepArgs& args) {
    std::vector<radiopipe::Modality> wanted;
    for (const auto& name : split_list(args.modalities)) {
        wanted.push_back(radiopipe::parse_modality(name));
    }
    if (wanted.empty()) radiopipe::fail("UsageError", "--modalities must name at least one");

    const radiopipe::dicom::DatasetIndex index = radiopipe::dicom::scan_dataset(args.input);
    struct Job {
        const radiopipe::dicom::DatasetIndex::Subject* subject;
        radiopipe::Modality modality;
        const std::vector<fs::path>* files;
    };
    std::vector<Job> todo;
    for (const auto& subject : index.subjects) {
        for (const radiopipe::Modality m : wanted) {
            const auto it = subject.series.find(m);
            if (it == subject.series.end() || it->second.empty()) continue;
            todo.push_back(Job{&subject, m, &it->second});
        }
    }

    const radiopipe::VolumeTarget target{args.size, args.size, args.depth};
    fs::create_directories(args.output);
    parallel_for(todo.size(), args.jobs, [&](size_t i) {
        const Job& job = todo[i];
        std::vector<radiopipe::dicom::DicomSlice> slices;
        slices.reserve(job.files->size());
        for (const auto& file : *job.files) {
            slices.push_back(radiopipe::dicom::parse_dicom_file(file));
        }
        radiopipe::Volume v = radiopipe::build_volume(slices, target);
        v.subject_id = job.subject->id;
        v.modality = job.modality;
        fs::create_directories(fs::path(args.output) / job.subject->id);
        radiopipe::save_volume(v, fs::path(args.output) / job.subject->id /
                                      (radiopipe::to_string(job.modality) + ".vol"));
    });

    if (fs::exists(fs::path(args.input) / "labels.csv")) {
        fs::copy_file(fs::path(args.input) / "labels.csv", fs::path(args.output) / "labels.csv",
                      fs::copy_options::overwrite_existing);
    }

    ordered_json sidecar;
    sidecar["command"] = "prep";
    sidecar["input"] = args.input;
    sidecar["output"] = args.output;
    sidecar["size"] = args.size;
    sidecar["depth"] = args.depth;
    sidecar["modalities"] = args.modalities;
    write_sidecar(fs::path(args.output) / "run.json", sidecar);
    std::cout << "prepared " << todo.size() << " volumes into " << args.output << "\n";
    return 0;
}

// ----------------------------- train -----------------------------

struct TrainArgs {
    std::string data;
    std::string labels;
    std::string modality;
    std::string out;
    std::string log;
    int image_size = 256;
    int depth = 64;
    int patch = 32;
    int embed_dim = 128;
    int heads = 16;
    int blocks = 2;
    int mlp_hidden = 0;
    double dropout = 0.1;
    int epochs = 10;
    double val_split = 0.2;
    int batch_size = 2;
    double lr = 1e-4;
    double lr_decay = 0.95;
    int patience = 3;
    std::string augment = "rot90";
    uint64_t seed = 0;
};

ordered_json train_sidecar(const TrainArgs& args) {
    ordered_json j;
    j["command"] = "train";
    j["data"] = args.data;
    j["labels"] = args.labels;
    j["modality"] = args.modality;
    j["out"] = args.out;
    j["image_size"] = args.image_size;
    j["depth"] = args.depth;
    j["patch"] = args.patch;
    j["embed_dim"] = args.embed_dim;
    j["heads"] = args.heads;
    j["blocks"] = args.blocks;
    j["mlp_hidden"] = args.mlp_hidden;
    j["dropout"] = args.dropout;
    j["epochs"] = args.epochs;
    j["val_split"] = args.val_split;
    j["batch_size"] = args.batch_size;
    j["lr"] = args.lr;
    j["lr_decay"] = args.lr_decay;
    j["patience"] = args.patience;
    j["augment"] = args.augment;
    j["seed"] = args.seed;
    return j;
}

int run_train(const TrainArgs& args) {
    if (args.patch < 1 || args.image_size % args.patch || args.depth % args.patch) {
        radiopipe::fail("UsageError", "patch must divide both --image-size and --depth");
    }
    if (args.embed_dim < 1 || args.heads < 1 || args.embed_dim % args.heads) {
        radiopipe::fail("UsageError", "--embed-dim must be divisible by --heads");
    }
    const radiopipe::Modality modality = radiopipe::parse_modality(args.modality);

    radiopipe::Vit3dConfig model_config;
    model_config.image_height = args.image_size;
    model_config.image_width = args.image_size;
    model_config.image_depth = args.depth;
    model_config.patch_size = args.patch;
    model_config.embed_dim = args.embed_dim;
    model_config.num_heads = args.heads;
    model_config.num_blocks = args.blocks;
    model_config.mlp_hidden_dim = args.mlp_hidden;
    model_config.dropout_rate = args.dropout;

    radiopipe::TrainConfig train_config;
    train_config.epochs = args.epochs;
    train_config.val_split = args.val_split;
    train_config.batch_size = args.batch_size;
    train_config.lr = args.lr;
    train_config.lr_decay = args.lr_decay;
    train_config.early_stop_patience = args.patience;
    train_config.seed = args.seed;
    train_config.modality = modality;
    train_config.augment = radiopipe::augment_mode_from_string(args.augment);

    const std::map<std::string, int> labels = radiopipe::dicom::read_labels_csv(args.labels);
    std::vector<radiopipe::TrainSample> samples;
    for (const auto& [id, label] : labels) {
        const fs::path vol_path =
            fs::path(args.data) / id / (radiopipe::to_string(modality) + ".vol");
        radiopipe::Volume v = radiopipe::load_volume(vol_path);
        if (v.modality != modality) {
            radiopipe::fail("MissingModality", vol_path.string() + " holds " +
                                                   radiopipe::to_string(v.modality) +
                                                   ", wanted " + radiopipe::to_string(modality));
        }
        v.subject_id = id;
        samples.push_back(radiopipe::TrainSample{std::move(v), label});
    }

    const radiopipe::TrainResult result = radiopipe::train(samples, model_config, train_config);
    radiopipe::save_checkpoint(result.best, args.out);
    const fs::path log_path = args.log.empty() ? fs::path(args.out + ".log.csv")
                                               : fs::path(args.log);
    radiopipe::write_train_log(result.log, log_path);
    write_sidecar(args.out + ".run.json", train_sidecar(args));

    std::cout << "trained " << args.modality << " on " << samples.size() << " subjects, best "
              << "val loss " << result.best.best_val_loss << " at epoch " << result.best.epoch
              << ", checkpoint " << args.out << "\n";
    return 0;
}

// ----------------------------- predict -----------------------------

struct PredictArgs {
    std::string model;
    std::string data;
    std::string out;
};

int run_predict(const PredictArgs& args) {
    const radiopipe::Checkpoint checkpoint = radiopipe::load_checkpoint(args.model);
    const std::string vol_name = radiopipe::to_string(checkpoint.modality) + ".vol";

    std::vector<fs::path> subject_dirs;
    for (const auto& entry : fs::directory_iterator(args.data)) {
        if (entry.is_directory() && fs::exists(entry.path() / vol_name)) {
            subject_dirs.push_back(entry.path());
        }
    }
    std::sort(subject_dirs.begin(), subject_dirs.end());
    if (subject_dirs.empty()) {
        radiopipe::fail("InsufficientData", "no subject directories with " + vol_name +
                                                " under " + args.data);
    }

    std::vector<radiopipe::Volume> volumes;
    volumes.reserve(subject_dirs.size());
    for (const auto& dir : subject_dirs) {
        radiopipe::Volume v = radiopipe::load_volume(dir / vol_name);
        v.subject_id = dir.filename().string();
        volumes.push_back(std::move(v));
    }
    const std::vector<radiopipe::Prediction> preds = radiopipe::evaluate(checkpoint, volumes);

    std::vector<radiopipe::ScoreRow> rows;
    rows.reserve(preds.size());
    for (const auto& p : preds) {
        rows.push_back({p.subject_id, p.per_modality.at(checkpoint.modality)});
    }
    radiopipe::write_score_csv(rows, args.out);

    ordered_json sidecar;
    sidecar["command"] = "predict";
    sidecar["model"] = args.model;
    sidecar["data"] = args.data;
    sidecar["out"] = args.out;
    sidecar["modality"] = radiopipe::to_string(checkpoint.modality);
    write_sidecar(args.out + ".run.json", sidecar);
    std::cout << "predicted " << rows.size() << " subjects to " << args.out << "\n";
    return 0;
}

// ----------------------------- ensemble -----------------------------

struct EnsembleArgs {
    std::string mode;
    std::string preds;
    std::string labels;
    std::string stacker;
    std::string stacker_out;
    std::string out;
};

int run_ensemble(const EnsembleArgs& args) {
    const std::vector<std::string> files = split_list(args.preds);
    if (files.empty() || files.size() > 4) {
        radiopipe::fail("UsageError", "--preds takes 1 to 4 comma-separated files in modality "
                                      "order T1w,T1wCE,T2w,FLAIR");
    }
    std::map<radiopipe::Modality, std::vector<radiopipe::ScoreRow>> by_modality;
    for (size_t i = 0; i < files.size(); ++i) {
        by_modality[radiopipe::kAllModalities[i]] = radiopipe::read_score_csv(files[i]);
    }
    const std::vector<radiopipe::Prediction> merged = radiopipe::merge_predictions(by_modality);

    std::vector<radiopipe::Prediction> finals;
    if (args.mode == "average") {
        finals = radiopipe::average_ensemble(merged);
    } else if (args.mode == "stack") {
        if (files.size() != 4) {
            radiopipe::fail("UsageError", "stacking needs all four per-modality files");
        }
        radiopipe::StackingModel model;
        if (!args.stacker.empty()) {
            model = radiopipe::load_stacker(args.stacker);
        } else if (!args.labels.empty()) {
            const std::map<std::string, int> labels =
                radiopipe::dicom::read_labels_csv(args.labels);
            model = radiopipe::fit_stacking(merged, labels);
            const std::string stacker_path =
                args.stacker_out.empty() ? args.out + ".stacker.json" : args.stacker_out;
            radiopipe::save_stacker(model, stacker_path);
        } else {
            radiopipe::fail("UsageError", "stack mode needs --labels (fit) or --stacker (load)");
        }
        finals = radiopipe::predict_stacking(model, merged);
    } else {
        radiopipe::fail("UsageError", "--mode must be average or stack");
    }

    std::vector<radiopipe::ScoreRow> rows;
    rows.reserve(finals.size());
    for (const auto& p : finals) rows.push_back({p.subject_id, *p.final});
    radiopipe::write_score_csv(rows, args.out);

    ordered_json sidecar;
    sidecar["command"] = "ensemble";
    sidecar["mode"] = args.mode;
    sidecar["preds"] = args.preds;
    sidecar["labels"] = args.labels;
    sidecar["stacker"] = args.stacker;
    sidecar["stacker_out"] = args.stacker_out;
    sidecar["out"] = args.out;
    write_sidecar(args.out + ".run.json", sidecar);
    std::cout << "combined " << files.size() << " prediction files into " << args.out << "\n";
    return 0;
}

// ----------------------------- eval -----------------------------

struct EvalArgs {
    std::string preds;
    std::string labels;
    std::string out_dir;
    std::string split_label = "eval";
};

int run_eval(const EvalArgs& args) {
    const std::vector<radiopipe::ScoreRow> rows = radiopipe::read_score_csv(args.preds);
    const std::map<std::string, int> labels = radiopipe::dicom::read_labels_csv(args.labels);
    std::vector<double> scores;
    std::vector<int> truth;
    for (const auto& row : rows) {
        const auto it = labels.find(row.subject_id);
        if (it == labels.end()) {
            radiopipe::fail("UsageError", "no label for subject " + row.subject_id);
        }
        scores.push_back(row.value);
        truth.push_back(it->second);
    }
    const radiopipe::MetricsReport report =
        radiopipe::compute_report(scores, truth, args.split_label);

    fs::create_directories(args.out_dir);
    radiopipe::ReportPaths paths;
    paths.roc_csv = fs::path(args.out_dir) / "roc.csv";
    paths.report_json = fs::path(args.out_dir) / "report.json";
    paths.roc_svg = fs::path(args.out_dir) / "roc.svg";
    radiopipe::emit_report(report, paths);

    ordered_json sidecar;
    sidecar["command"] = "eval";
    sidecar["preds"] = args.preds;
    sidecar["labels"] = args.labels;
    sidecar["out_dir"] = args.out_dir;
    sidecar["split_label"] = args.split_label;
    write_sidecar(fs::path(args.out_dir) / "run.json", sidecar);
    std::cout << "auc " << report.auc << " over " << scores.size() << " subjects, report in "
              << args.out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"radiopipe: DICOM-to-prediction pipeline for MGMT classification"};
    app.require_subcommand(1);

    SynthArgs synth_args;
    auto* synth = app.add_subcommand("synth", "generate a synthetic DICOM dataset");
    synth->add_option("--out", synth_args.out, "output directory")->required();
    synth->add_option("--subjects", synth_args.subjects, "number of subjects");
    synth->add_option("--dims", synth_args.dims, "volume dims as HxWxD");
    synth->add_option("--positive-fraction", synth_args.positive_fraction,
                      "fraction of positive labels");
    synth->add_option("--lesion-side", synth_args.lesion_side, "planted cube side length");
    synth->add_option("--lesion-delta", synth_args.lesion_delta,
                      "planted cube intensity offset");
    synth->add_option("--noise-sigma", synth_args.noise_sigma, "gaussian noise level");
    synth->add_option("--seed", synth_args.seed, "generation seed");
    synth->add_option("--jobs", synth_args.jobs, "parallel workers");

    PrepArgs prep_args;
    auto* prep = app.add_subcommand("prep", "assemble DICOM series into volume caches");
    prep->add_option("--input", prep_args.input, "DICOM dataset root")->required();
    prep->add_option("--output", prep_args.output, "volume cache directory")->required();
    prep->add_option("--size", prep_args.size, "in-plane output size");
    prep->add_option("--depth", prep_args.depth, "output slice count");
    prep->add_option("--modalities", prep_args.modalities, "comma-separated modality list");
    prep->add_option("--jobs", prep_args.jobs, "parallel workers");

    TrainArgs train_args;
    auto* train = app.add_subcommand("train", "train one per-modality model");
    train->add_option("--data", train_args.data, "volume cache directory")->required();
    train->add_option("--labels", train_args.labels, "labels CSV")->required();
    train->add_option("--modality", train_args.modality, "T1w|T1wCE|T2w|FLAIR")->required();
    train->add_option("--out", train_args.out, "checkpoint path")->required();
    train->add_option("--log", train_args.log, "training log CSV (default <out>.log.csv)");
    train->add_option("--image-size", train_args.image_size, "in-plane input size");
    train->add_option("--depth", train_args.depth, "input slice count");
    train->add_option("--patch", train_args.patch, "cubic patch size");
    train->add_option("--embed-dim", train_args.embed_dim, "token width");
    train->add_option("--heads", train_args.heads, "attention heads");
    train->add_option("--blocks", train_args.blocks, "encoder blocks");
    train->add_option("--mlp-hidden", train_args.mlp_hidden, "MLP hidden width (0 = 4x embed)");
    train->add_option("--dropout", train_args.dropout, "dropout rate");
    train->add_option("--epochs", train_args.epochs, "epoch cap");
    train->add_option("--val-split", train_args.val_split, "validation fraction");
    train->add_option("--batch-size", train_args.batch_size, "batch size");
    train->add_option("--lr", train_args.lr, "learning rate");
    train->add_option("--lr-decay", train_args.lr_decay, "per-epoch lr factor");
    train->add_option("--patience", train_args.patience, "early-stop patience (0 disables)");
    train->add_option("--augment", train_args.augment, "none|rot90|affine");
    train->add_option("--seed", train_args.seed, "training seed");

    PredictArgs predict_args;
    auto* predict = app.add_subcommand("predict", "score volumes with a checkpoint");
    predict->add_option("--model", predict_args.model, "checkpoint path")->required();
    predict->add_option("--data", predict_args.data, "volume cache directory")->required();
    predict->add_option("--out", predict_args.out, "prediction CSV")->required();

    EnsembleArgs ensemble_args;
    auto* ensemble = app.add_subcommand("ensemble", "combine per-modality predictions");
    ensemble->add_option("--mode", ensemble_args.mode, "average|stack")->required();
    ensemble->add_option("--preds", ensemble_args.preds,
                         "comma-separated prediction CSVs, modality order T1w,T1wCE,T2w,FLAIR")
        ->required();
    ensemble->add_option("--labels", ensemble_args.labels, "labels CSV (fits the stacker)");
    ensemble->add_option("--stacker", ensemble_args.stacker, "existing stacker JSON");
    ensemble->add_option("--stacker-out", ensemble_args.stacker_out,
                         "where to save a fitted stacker");
    ensemble->add_option("--out", ensemble_args.out, "final prediction CSV")->required();

    EvalArgs eval_args;
    auto* eval = app.add_subcommand("eval", "score predictions against labels");
    eval->add_option("--preds", eval_args.preds, "prediction CSV")->required();
    eval->add_option("--labels", eval_args.labels, "labels CSV")->required();
    eval->add_option("--out-dir", eval_args.out_dir, "report directory")->required();
    eval->add_option("--split-label", eval_args.split_label, "name recorded in the report");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: UsageError: " << e.what() << "\n";
        std::cerr << app.help() << "\n";
        return 2;
    }

    try {
        if (synth->parsed()) return run_synth(synth_args);
        if (prep->parsed()) return run_prep(prep_args);
        if (train->parsed()) return run_train(train_args);
        if (predict->parsed()) return run_predict(predict_args);
        if (ensemble->parsed()) return run_ensemble(ensemble_args);
        if (eval->parsed()) return run_eval(eval_args);
    } catch (const radiopipe::Error& e) {
        std::cerr << "error: " << e.category() << ": " << e.what() << "\n";
        return e.category() == "UsageError" ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: Internal: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
