#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "radiopipe/modality.hpp"

namespace radiopipe::dicom {

struct Tag {
    uint16_t group = 0;
    uint16_t element = 0;
    auto operator<=>(const Tag&) const = default;
};

// Tags this reader cares about. Everything else is retained as opaque bytes.
inline constexpr Tag kTransferSyntaxUid{0x0002, 0x0010};
inline constexpr Tag kInstanceNumber{0x0020, 0x0013};
inline constexpr Tag kImagePositionPatient{0x0020, 0x0032};
inline constexpr Tag kRows{0x0028, 0x0010};
inline constexpr Tag kColumns{0x0028, 0x0011};
inline constexpr Tag kBitsAllocated{0x0028, 0x0100};
inline constexpr Tag kBitsStored{0x0028, 0x0101};
inline constexpr Tag kPixelRepresentation{0x0028, 0x0103};
inline constexpr Tag kWindowCenter{0x0028, 0x1050};
inline constexpr Tag kWindowWidth{0x0028, 0x1051};
inline constexpr Tag kRescaleIntercept{0x0028, 0x1052};
inline constexpr Tag kRescaleSlope{0x0028, 0x1053};
inline constexpr Tag kPixelData{0x7fe0, 0x0010};

inline constexpr const char* kExplicitVrLittleEndian = "1.2.840.10008.1.2.1";
inline constexpr const char* kImplicitVrLittleEndian = "1.2.840.10008.1.2";

enum class PixelRepr : uint8_t { Unsigned = 0, Signed = 1 };

// One parsed DICOM file: the raw tag dictionary plus the decoded header
// fields and pixel matrix this pipeline consumes.
struct DicomSlice {
    std::map<Tag, std::vector<uint8_t>> tags;
    int rows = 0;
    int cols = 0;
    int bits_allocated = 16;
    int bits_stored = 16;
    PixelRepr pixel_representation = PixelRepr::Unsigned;
    double rescale_slope = 1.0;
    double rescale_intercept = 0.0;
    std::optional<double> window_center;
    std::optional<double> window_width;
    std::optional<int> instance_number;
    std::optional<double> z_position;     // third component of Image Position (Patient)
    std::vector<int32_t> pixels;          // row-major, rows*cols entries
};

struct DatasetIndex {
    struct Subject {
        std::string id;  // exactly five decimal digits
        std::map<Modality, std::vector<std::filesystem::path>> series;
    };
    std::vector<Subject> subjects;        // sorted by id
    std::map<std::string, int> labels;    // empty when no labels CSV given
};

// Parses a DICOM Part-10 file restricted to the two uncompressed
// little-endian transfer syntaxes. Sequences are skipped; unknown tags are
// kept as opaque bytes. Errors: MissingMagic, UnsupportedTransferSyntax,
// MissingRequiredTag, TruncatedElement, LengthMismatch.
DicomSlice parse_dicom_file(std::span<const uint8_t> bytes);
DicomSlice parse_dicom_file(const std::filesystem::path& path);

// Little-endian decode of a pixel buffer described by the header fields of
// `slice` (rows, cols, bits_allocated, pixel_representation). Errors:
// LengthMismatch.
std::vector<int32_t> decode_pixel_data(const DicomSlice& slice,
                                       std::span<const uint8_t> raw);

// Pads an integer-like subject id to the canonical five-digit form.
std::string zero_pad_subject_id(const std::string& raw);

// Labels CSV with header `BraTS21ID,MGMT_value`; ids are zero-padded on
// read. Errors: MalformedLabelsCsv, DuplicateSubjectId.
std::map<std::string, int> read_labels_csv(const std::filesystem::path& path);

// Enumerates `<subject_id>/<modality>/*.dcm` under root. Unknown directories
// and non-.dcm files are ignored; file lists are sorted by name.
DatasetIndex scan_dataset(const std::filesystem::path& root,
                          const std::optional<std::filesystem::path>& labels_csv = std::nullopt);

}  // namespace radiopipe::dicom
