#include "radiopipe/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include "radiopipe/error.hpp"

namespace radiopipe {

std::vector<size_t> order_slices(const std::vector<dicom::DicomSlice>& slices) {
    if (slices.empty()) fail("NoOrderingKey", "empty slice list");
    std::vector<size_t> perm(slices.size());
    std::iota(perm.begin(), perm.end(), size_t{0});

    const bool all_z = std::all_of(slices.begin(), slices.end(),
                                   [](const auto& s) { return s.z_position.has_value(); });
    if (all_z) {
        std::stable_sort(perm.begin(), perm.end(), [&](size_t a, size_t b) {
            return *slices[a].z_position < *slices[b].z_position;
        });
        return perm;
    }
    const bool all_instance = std::all_of(slices.begin(), slices.end(),
                                          [](const auto& s) { return s.instance_number.has_value(); });
    if (all_instance) {
        std::stable_sort(perm.begin(), perm.end(), [&](size_t a, size_t b) {
            return *slices[a].instance_number < *slices[b].instance_number;
        });
        return perm;
    }
    fail("NoOrderingKey", "neither z position nor instance number present on every slice");
}

double apply_voi_lut(double x, double center, double width, double y_min, double y_max) {
    if (width <= 1.0) fail("InvalidWindow", "window width must be > 1");
    const double c = center - 0.5;
    const double half = (width - 1.0) / 2.0;
    if (x <= c - half) return y_min;
    if (x > c + half) return y_max;
    return ((x - c) / (width - 1.0) + 0.5) * (y_max - y_min) + y_min;
}

namespace {

// Corner-aligned source position for output index `o`: endpoints map to
// endpoints; a single-sample axis collapses to position 0.
struct AxisMap {
    std::vector<int> lo;
    std::vector<float> frac;
    AxisMap(int in_size, int out_size) {
        lo.resize(static_cast<size_t>(out_size));
        frac.resize(static_cast<size_t>(out_size));
        const double scale =
            (out_size > 1 && in_size > 1) ? static_cast<double>(in_size - 1) / (out_size - 1) : 0.0;
        for (int o = 0; o < out_size; ++o) {
            const double pos = o * scale;
            int i = static_cast<int>(std::floor(pos));
            double f = pos - i;
            if (i >= in_size - 1) {
                i = in_size - 1;
                f = 0.0;
            }
            lo[static_cast<size_t>(o)] = i;
            frac[static_cast<size_t>(o)] = static_cast<float>(f);
        }
    }
};

}  // namespace

Volume resize_volume(const Volume& v, const VolumeTarget& target) {
    if (v.height <= 0 || v.width <= 0 || v.depth <= 0 || target.height <= 0 ||
        target.width <= 0 || target.depth <= 0) {
        fail("ShapeMismatch", "volume dimensions must be positive");
    }
    const AxisMap hmap(v.height, target.height);
    const AxisMap wmap(v.width, target.width);

    // Pass 1: bilinear within each plane.
    Volume planar = Volume::zeros(target.height, target.width, v.depth);
    planar.subject_id = v.subject_id;
    planar.modality = v.modality;
    for (int d = 0; d < v.depth; ++d) {
        for (int h = 0; h < target.height; ++h) {
            const int h0 = hmap.lo[static_cast<size_t>(h)];
            const int h1 = std::min(h0 + 1, v.height - 1);
            const float fh = hmap.frac[static_cast<size_t>(h)];
            for (int w = 0; w < target.width; ++w) {
                const int w0 = wmap.lo[static_cast<size_t>(w)];
                const int w1 = std::min(w0 + 1, v.width - 1);
                const float fw = wmap.frac[static_cast<size_t>(w)];
                const float top = v.at(h0, w0, d) * (1.0f - fw) + v.at(h0, w1, d) * fw;
                const float bottom = v.at(h1, w0, d) * (1.0f - fw) + v.at(h1, w1, d) * fw;
                planar.at(h, w, d) = top * (1.0f - fh) + bottom * fh;
            }
        }
    }
    if (target.depth == v.depth) return planar;

    // Pass 2: linear along depth.
    const AxisMap dmap(v.depth, target.depth);
    Volume out = Volume::zeros(target.height, target.width, target.depth);
    out.subject_id = v.subject_id;
    out.modality = v.modality;
    for (int d = 0; d < target.depth; ++d) {
        const int d0 = dmap.lo[static_cast<size_t>(d)];
        const int d1 = std::min(d0 + 1, v.depth - 1);
        const float fd = dmap.frac[static_cast<size_t>(d)];
        for (int h = 0; h < target.height; ++h) {
            for (int w = 0; w < target.width; ++w) {
                out.at(h, w, d) =
                    planar.at(h, w, d0) * (1.0f - fd) + planar.at(h, w, d1) * fd;
            }
        }
    }
    return out;
}

Volume normalize_volume(const Volume& v) {
    Volume out = v;
    if (out.voxels.empty()) return out;
    const auto [min_it, max_it] = std::minmax_element(out.voxels.begin(), out.voxels.end());
    const float lo = *min_it;
    const float hi = *max_it;
    if (hi == lo) {
        std::fill(out.voxels.begin(), out.voxels.end(), 0.0f);
        return out;
    }
    const float span = hi - lo;
    for (float& x : out.voxels) x = (x - lo) / span;
    return out;
}

Volume build_volume(const std::vector<dicom::DicomSlice>& slices, const VolumeTarget& target) {
    const std::vector<size_t> perm = order_slices(slices);
    const int rows = slices[0].rows;
    const int cols = slices[0].cols;
    for (const auto& s : slices) {
        if (s.rows != rows || s.cols != cols) {
            fail("InconsistentGeometry", "mixed slice dimensions " + std::to_string(s.rows) +
                                             "x" + std::to_string(s.cols) + " vs " +
                                             std::to_string(rows) + "x" + std::to_string(cols));
        }
    }

    Volume stacked = Volume::zeros(rows, cols, static_cast<int>(slices.size()));
    for (size_t d = 0; d < perm.size(); ++d) {
        const auto& s = slices[perm[d]];
        const bool windowed = s.window_center.has_value() && s.window_width.has_value();
        for (int h = 0; h < rows; ++h) {
            for (int w = 0; w < cols; ++w) {
                const double raw = s.pixels[static_cast<size_t>(h) * static_cast<size_t>(cols) +
                                            static_cast<size_t>(w)];
                double value = s.rescale_slope * raw + s.rescale_intercept;
                if (windowed) {
                    value = apply_voi_lut(value, *s.window_center, *s.window_width, 0.0, 1.0);
                }
                stacked.at(h, w, static_cast<int>(d)) = static_cast<float>(value);
            }
        }
    }
    return normalize_volume(resize_volume(stacked, target));
}

// ----------------------------- VOL1 cache -----------------------------

namespace {

void put_u32(std::ofstream& out, uint32_t v) {
    uint8_t b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<uint8_t>((v >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::ifstream& in) {
    uint8_t b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) fail("TruncatedBlob", "volume header cut short");
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

}  // namespace

void save_volume(const Volume& v, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail("IoError", "cannot open " + path.string() + " for writing");
    out.write("VOL1", 4);
    put_u32(out, static_cast<uint32_t>(v.height));
    put_u32(out, static_cast<uint32_t>(v.width));
    put_u32(out, static_cast<uint32_t>(v.depth));
    const uint8_t code = static_cast<uint8_t>(v.modality);
    out.write(reinterpret_cast<const char*>(&code), 1);
    for (float x : v.voxels) {
        uint32_t bits;
        std::memcpy(&bits, &x, 4);
        put_u32(out, bits);
    }
    if (!out) fail("IoError", "short write to " + path.string());
}

Volume load_volume(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("IoError", "cannot open " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "VOL1", 4) != 0) fail("BadMagic", "not a VOL1 file");
    Volume v;
    v.height = static_cast<int>(get_u32(in));
    v.width = static_cast<int>(get_u32(in));
    v.depth = static_cast<int>(get_u32(in));
    uint8_t code = 0;
    in.read(reinterpret_cast<char*>(&code), 1);
    if (!in || code > 3) fail("TruncatedBlob", "bad modality code");
    v.modality = static_cast<Modality>(code);
    const size_t count = static_cast<size_t>(v.height) * static_cast<size_t>(v.width) *
                         static_cast<size_t>(v.depth);
    v.voxels.resize(count);
    for (size_t i = 0; i < count; ++i) {
        const uint32_t bits = get_u32(in);
        std::memcpy(&v.voxels[i], &bits, 4);
    }
    return v;
}

}  // namespace radiopipe
