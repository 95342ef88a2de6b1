#include "radiopipe/synth.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <thread>

#include "radiopipe/error.hpp"
#include "radiopipe/rng.hpp"

namespace radiopipe::synth {
namespace {

namespace fs = std::filesystem;
using dicom::DicomSlice;
using dicom::Tag;

// Shortest decimal form that parses back to the same double.
std::string decimal_string(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

class Writer {
public:
    void u16(uint16_t v) {
        bytes_.push_back(static_cast<uint8_t>(v & 0xFF));
        bytes_.push_back(static_cast<uint8_t>(v >> 8));
    }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xFF));
    }
    void raw(const void* data, size_t n) {
        const auto* p = static_cast<const uint8_t*>(data);
        bytes_.insert(bytes_.end(), p, p + n);
    }
    std::vector<uint8_t> take() { return std::move(bytes_); }
    size_t size() const { return bytes_.size(); }

private:
    std::vector<uint8_t> bytes_;
};

bool long_form(const char* vr) {
    static constexpr const char* kLong[] = {"OB", "OW", "OF", "SQ", "UT", "UN"};
    for (const char* v : kLong) {
        if (std::strncmp(vr, v, 2) == 0) return true;
    }
    return false;
}

void put_element(Writer& w, Tag tag, const char* vr, std::vector<uint8_t> value,
                 bool explicit_vr) {
    if (value.size() % 2 == 1) {
        // Even-length rule: text VRs pad with space, UI with NUL, binary with 0.
        const uint8_t pad = (std::strncmp(vr, "UI", 2) == 0)   ? '\0'
                            : (std::strncmp(vr, "OW", 2) == 0 ||
                               std::strncmp(vr, "OB", 2) == 0) ? 0
                                                               : ' ';
        value.push_back(pad);
    }
    w.u16(tag.group);
    w.u16(tag.element);
    if (explicit_vr) {
        w.raw(vr, 2);
        if (long_form(vr)) {
            w.u16(0);
            w.u32(static_cast<uint32_t>(value.size()));
        } else {
            w.u16(static_cast<uint16_t>(value.size()));
        }
    } else {
        w.u32(static_cast<uint32_t>(value.size()));
    }
    w.raw(value.data(), value.size());
}

std::vector<uint8_t> text_value(const std::string& s) {
    return std::vector<uint8_t>(s.begin(), s.end());
}

std::vector<uint8_t> us_value(int v) {
    return {static_cast<uint8_t>(v & 0xFF), static_cast<uint8_t>((v >> 8) & 0xFF)};
}

}  // namespace

std::vector<uint8_t> encode_dicom(const DicomSlice& slice, TransferSyntax syntax) {
    const bool explicit_vr = syntax == TransferSyntax::ExplicitLE;
    const char* syntax_uid = explicit_vr ? dicom::kExplicitVrLittleEndian
                                         : dicom::kImplicitVrLittleEndian;

    // File meta is always Explicit VR LE; group length covers what follows it.
    Writer meta;
    put_element(meta, dicom::kTransferSyntaxUid, "UI", text_value(syntax_uid), true);
    const std::vector<uint8_t> meta_bytes = meta.take();

    Writer w;
    for (int i = 0; i < 128; ++i) w.raw("\0", 1);
    w.raw("DICM", 4);
    put_element(w, Tag{0x0002, 0x0000}, "UL",
                {static_cast<uint8_t>(meta_bytes.size() & 0xFF),
                 static_cast<uint8_t>((meta_bytes.size() >> 8) & 0xFF),
                 static_cast<uint8_t>((meta_bytes.size() >> 16) & 0xFF),
                 static_cast<uint8_t>((meta_bytes.size() >> 24) & 0xFF)},
                true);
    w.raw(meta_bytes.data(), meta_bytes.size());

    // Dataset, ascending tag order.
    if (slice.instance_number) {
        put_element(w, dicom::kInstanceNumber, "IS",
                    text_value(std::to_string(*slice.instance_number)), explicit_vr);
    }
    if (slice.z_position) {
        put_element(w, dicom::kImagePositionPatient, "DS",
                    text_value("0\\0\\" + decimal_string(*slice.z_position)), explicit_vr);
    }
    put_element(w, dicom::kRows, "US", us_value(slice.rows), explicit_vr);
    put_element(w, dicom::kColumns, "US", us_value(slice.cols), explicit_vr);
    put_element(w, dicom::kBitsAllocated, "US", us_value(slice.bits_allocated), explicit_vr);
    put_element(w, dicom::kBitsStored, "US", us_value(slice.bits_stored), explicit_vr);
    put_element(w, dicom::kPixelRepresentation, "US",
                us_value(slice.pixel_representation == dicom::PixelRepr::Signed ? 1 : 0),
                explicit_vr);
    if (slice.window_center) {
        put_element(w, dicom::kWindowCenter, "DS",
                    text_value(decimal_string(*slice.window_center)), explicit_vr);
    }
    if (slice.window_width) {
        put_element(w, dicom::kWindowWidth, "DS",
                    text_value(decimal_string(*slice.window_width)), explicit_vr);
    }
    put_element(w, dicom::kRescaleIntercept, "DS",
                text_value(decimal_string(slice.rescale_intercept)), explicit_vr);
    put_element(w, dicom::kRescaleSlope, "DS",
                text_value(decimal_string(slice.rescale_slope)), explicit_vr);

    std::vector<uint8_t> pixel_bytes;
    pixel_bytes.reserve(slice.pixels.size() * (slice.bits_allocated / 8));
    for (int32_t px : slice.pixels) {
        pixel_bytes.push_back(static_cast<uint8_t>(px & 0xFF));
        if (slice.bits_allocated == 16) {
            pixel_bytes.push_back(static_cast<uint8_t>((px >> 8) & 0xFF));
        }
    }
    put_element(w, dicom::kPixelData, slice.bits_allocated == 8 ? "OB" : "OW",
                std::move(pixel_bytes), explicit_vr);
    return w.take();
}

void write_dicom(const DicomSlice& slice, const fs::path& path, TransferSyntax syntax) {
    const auto bytes = encode_dicom(slice, syntax);
    std::ofstream out(path, std::ios::binary);
    if (!out) fail("IoError", "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) fail("IoError", "short write to " + path.string());
}

namespace {

// Per-modality rescale/window tables; windows cover the rescaled 12-bit range
// and every value has an exact decimal form.
struct SeriesIntensity {
    double slope, intercept, center, width;
    int base;  // stored-value background
};

constexpr SeriesIntensity kSeriesIntensity[4] = {
    {1.0, 0.0, 2048.0, 4096.0, 1000},
    {1.0, 0.0, 2048.0, 4096.0, 1100},
    {0.5, 100.5, 1124.5, 2048.0, 900},
    {2.0, -250.0, 3846.0, 8192.0, 1050},
};

void generate_subject(const SynthSpec& spec, const fs::path& out_dir, int subject_index,
                      bool positive) {
    Rng rng(derive_seed(spec.seed, static_cast<uint64_t>(subject_index) + 1));
    const std::string id = [&] {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%05d", subject_index + 1);
        return std::string(buf);
    }();

    // One cube location per subject, shared by all modalities.
    const int side = spec.lesion_side;
    const int lh = static_cast<int>(rng.below(static_cast<uint64_t>(spec.height - side + 1)));
    const int lw = static_cast<int>(rng.below(static_cast<uint64_t>(spec.width - side + 1)));
    const int ld = static_cast<int>(rng.below(static_cast<uint64_t>(spec.depth - side + 1)));

    for (size_t mi = 0; mi < kAllModalities.size(); ++mi) {
        const Modality modality = kAllModalities[mi];
        const SeriesIntensity& intensity = kSeriesIntensity[mi];
        const fs::path series_dir = out_dir / id / to_string(modality);
        fs::create_directories(series_dir);

        std::vector<int> slice_order(static_cast<size_t>(spec.depth));
        for (int k = 0; k < spec.depth; ++k) slice_order[static_cast<size_t>(k)] = k;
        rng.shuffle(slice_order);  // file order differs from spatial order

        for (size_t file_idx = 0; file_idx < slice_order.size(); ++file_idx) {
            const int k = slice_order[file_idx];
            dicom::DicomSlice slice;
            slice.rows = spec.height;
            slice.cols = spec.width;
            slice.bits_allocated = 16;
            slice.bits_stored = 12;
            slice.pixel_representation = dicom::PixelRepr::Unsigned;
            slice.rescale_slope = intensity.slope;
            slice.rescale_intercept = intensity.intercept;
            slice.window_center = intensity.center;
            slice.window_width = intensity.width;
            slice.instance_number = k + 1;
            slice.z_position = k * 2.5;
            slice.pixels.resize(static_cast<size_t>(spec.height) * static_cast<size_t>(spec.width));
            for (int h = 0; h < spec.height; ++h) {
                for (int col = 0; col < spec.width; ++col) {
                    double v = intensity.base;
                    if (positive && h >= lh && h < lh + side && col >= lw && col < lw + side &&
                        k >= ld && k < ld + side) {
                        v += spec.lesion_delta;
                    }
                    if (spec.noise_sigma > 0.0) v += spec.noise_sigma * rng.normal();
                    const long pixel = std::lround(std::clamp(v, 0.0, 4095.0));
                    slice.pixels[static_cast<size_t>(h) * static_cast<size_t>(spec.width) +
                                 static_cast<size_t>(col)] = static_cast<int32_t>(pixel);
                }
            }
            char name[32];
            std::snprintf(name, sizeof(name), "Image-%03zu.dcm", file_idx + 1);
            write_dicom(slice, series_dir / name);
        }
    }
}

}  // namespace

void generate_dataset(const SynthSpec& spec, const fs::path& out_dir, int jobs) {
    if (spec.lesion_side > spec.height || spec.lesion_side > spec.width ||
        spec.lesion_side > spec.depth) {
        fail("UsageError", "lesion side exceeds volume dimensions");
    }
    fs::create_directories(out_dir);

    // Deterministic label assignment: seeded shuffle, first `positives` get 1.
    const int positives =
        static_cast<int>(std::llround(spec.num_subjects * spec.positive_fraction));
    std::vector<int> order(static_cast<size_t>(spec.num_subjects));
    for (int i = 0; i < spec.num_subjects; ++i) order[static_cast<size_t>(i)] = i;
    Rng label_rng(derive_seed(spec.seed, 0));
    label_rng.shuffle(order);
    std::vector<bool> is_positive(static_cast<size_t>(spec.num_subjects), false);
    for (int i = 0; i < positives; ++i) is_positive[static_cast<size_t>(order[static_cast<size_t>(i)])] = true;

    const int workers = std::max(1, jobs);
    std::atomic<int> next{0};
    auto worker = [&] {
        for (;;) {
            const int i = next.fetch_add(1);
            if (i >= spec.num_subjects) return;
            generate_subject(spec, out_dir, i, is_positive[static_cast<size_t>(i)]);
        }
    };
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        for (int t = 0; t < workers; ++t) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }

    std::ofstream labels(out_dir / "labels.csv");
    if (!labels) fail("IoError", "cannot write labels.csv");
    labels << "BraTS21ID,MGMT_value\n";
    for (int i = 0; i < spec.num_subjects; ++i) {
        labels << (i + 1) << ',' << (is_positive[static_cast<size_t>(i)] ? 1 : 0) << '\n';
    }
}

}  // namespace radiopipe::synth
