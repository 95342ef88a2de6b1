#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "radiopipe/dicom.hpp"
#include "radiopipe/modality.hpp"

namespace radiopipe {

// H×W×D voxel grid. Storage is depth-major, row-major within a slice:
// voxels[(d*H + h)*W + w] — the same layout as the VOL1 cache file.
struct Volume {
    int height = 0;
    int width = 0;
    int depth = 0;
    std::string subject_id;
    Modality modality = Modality::T1w;
    std::vector<float> voxels;

    static Volume zeros(int h, int w, int d) {
        Volume v;
        v.height = h;
        v.width = w;
        v.depth = d;
        v.voxels.assign(static_cast<size_t>(h) * static_cast<size_t>(w) * static_cast<size_t>(d),
                        0.0f);
        return v;
    }

    float& at(int h, int w, int d) {
        return voxels[(static_cast<size_t>(d) * static_cast<size_t>(height) +
                       static_cast<size_t>(h)) *
                          static_cast<size_t>(width) +
                      static_cast<size_t>(w)];
    }
    float at(int h, int w, int d) const {
        return voxels[(static_cast<size_t>(d) * static_cast<size_t>(height) +
                       static_cast<size_t>(h)) *
                          static_cast<size_t>(width) +
                      static_cast<size_t>(w)];
    }
};

struct VolumeTarget {
    int height = 256;
    int width = 256;
    int depth = 64;
};

// Ordering of a slice stack: ascending z_position when every slice has one,
// else ascending instance_number when every slice has one; stable on ties.
// Errors: NoOrderingKey.
std::vector<size_t> order_slices(const std::vector<dicom::DicomSlice>& slices);

// Linear VOI window: y = ((x - (c - 0.5)) / (w - 1) + 0.5) * (y_max - y_min)
// + y_min, clamped to the output range. Errors: InvalidWindow (w <= 1).
double apply_voi_lut(double x, double center, double width, double y_min, double y_max);

// Bilinear in-plane, then linear along depth; corner-aligned sampling.
Volume resize_volume(const Volume& v, const VolumeTarget& target);

// Min-max scaling to [0,1]; a constant volume maps to all zeros.
Volume normalize_volume(const Volume& v);

// order_slices -> rescale -> VOI window (when present, range [0,1]) -> stack
// -> resize -> normalize. Errors: NoOrderingKey, InconsistentGeometry,
// InvalidWindow.
Volume build_volume(const std::vector<dicom::DicomSlice>& slices,
                    const VolumeTarget& target = {});

// VOL1 cache: magic "VOL1", H,W,D u32 LE, modality code u8, then H*W*D
// float32 LE voxels in depth-major then row-major order. Errors: BadMagic,
// TruncatedBlob, IoError.
void save_volume(const Volume& v, const std::filesystem::path& path);
Volume load_volume(const std::filesystem::path& path);

}  // namespace radiopipe
