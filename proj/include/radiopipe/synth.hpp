#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "radiopipe/dicom.hpp"

namespace radiopipe::synth {

enum class TransferSyntax { ExplicitLE, ImplicitLE };

// Serializes a slice as a DICOM Part-10 file readable by parse_dicom_file.
// Field round trip is exact for values whose decimal form is exact (the
// generator below only emits such values).
std::vector<uint8_t> encode_dicom(const dicom::DicomSlice& slice,
                                  TransferSyntax syntax = TransferSyntax::ExplicitLE);
void write_dicom(const dicom::DicomSlice& slice, const std::filesystem::path& path,
                 TransferSyntax syntax = TransferSyntax::ExplicitLE);

// Synthetic dataset with a planted, learnable signal: positive subjects get
// a bright cube at a per-subject random location in all four modalities.
struct SynthSpec {
    int num_subjects = 8;
    int height = 32;
    int width = 32;
    int depth = 32;
    double positive_fraction = 0.5;
    int lesion_side = 8;
    int lesion_delta = 1500;     // stored-intensity bump inside the cube
    double noise_sigma = 25.0;   // gaussian noise, stored-intensity units
    uint64_t seed = 0;
};

// Writes `<subject>/<modality>/*.dcm` series (one slice per file, shuffled
// file order, z positions and instance numbers present) plus labels.csv with
// unpadded ids. Fully deterministic per seed; parallel across subjects when
// jobs > 1 with per-subject derived seeds.
void generate_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir,
                      int jobs = 1);

}  // namespace radiopipe::synth
