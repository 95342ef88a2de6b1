#include "radiopipe/dicom.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstring>
#include <fstream>

#include "radiopipe/error.hpp"

namespace radiopipe::dicom {
namespace {

namespace fs = std::filesystem;

// ----------------------------- byte reader -----------------------------

class Reader {
public:
    explicit Reader(std::span<const uint8_t> bytes) : bytes_(bytes) {}

    size_t pos() const { return pos_; }
    size_t remaining() const { return bytes_.size() - pos_; }
    bool exhausted() const { return pos_ >= bytes_.size(); }

    uint16_t peek_u16() const {
        need(2);
        return static_cast<uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    }

    uint16_t read_u16() {
        const uint16_t v = peek_u16();
        pos_ += 2;
        return v;
    }

    uint32_t read_u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | bytes_[pos_ + static_cast<size_t>(i)];
        pos_ += 4;
        return v;
    }

    std::span<const uint8_t> read_bytes(size_t n) {
        need(n);
        auto out = bytes_.subspan(pos_, n);
        pos_ += n;
        return out;
    }

    void skip(size_t n) {
        need(n);
        pos_ += n;
    }

private:
    void need(size_t n) const {
        if (bytes_.size() - pos_ < n) {
            fail("TruncatedElement", "declared length exceeds remaining bytes at offset " +
                                         std::to_string(pos_));
        }
    }

    std::span<const uint8_t> bytes_;
    size_t pos_ = 0;
};

// ----------------------------- element headers -----------------------------

bool is_long_form_vr(char a, char b) {
    const char vr[3] = {a, b, 0};
    static constexpr const char* kLong[] = {"OB", "OW", "OF", "SQ", "UT", "UN"};
    for (const char* v : kLong) {
        if (std::strncmp(vr, v, 2) == 0) return true;
    }
    return false;
}

struct ElementHeader {
    Tag tag;
    char vr[2] = {0, 0};  // zero when implicit
    uint32_t length = 0;
    bool is_sequence = false;
    bool undefined_length = false;
};

constexpr uint32_t kUndefined = 0xFFFFFFFFu;

ElementHeader read_element_header(Reader& r, bool explicit_vr) {
    ElementHeader h;
    h.tag.group = r.read_u16();
    h.tag.element = r.read_u16();
    if (explicit_vr) {
        auto vr = r.read_bytes(2);
        h.vr[0] = static_cast<char>(vr[0]);
        h.vr[1] = static_cast<char>(vr[1]);
        if (is_long_form_vr(h.vr[0], h.vr[1])) {
            r.skip(2);  // reserved
            h.length = r.read_u32();
        } else {
            h.length = r.read_u16();
        }
        h.is_sequence = (h.vr[0] == 'S' && h.vr[1] == 'Q');
    } else {
        h.length = r.read_u32();
        // Without a full dictionary, an undefined length marks a sequence.
        h.is_sequence = (h.length == kUndefined);
    }
    h.undefined_length = (h.length == kUndefined);
    if (h.undefined_length) h.is_sequence = true;
    return h;
}

// Skips one sequence body. Defined-length sequences are skipped in one hop;
// undefined-length ones are walked item by item, recursing into nested
// undefined-length content, until the sequence delimiter (FFFE,E0DD).
void skip_sequence_body(Reader& r, const ElementHeader& h, bool explicit_vr);

void skip_undefined_item_body(Reader& r, bool explicit_vr) {
    // Item content is a nested dataset; parse headers until (FFFE,E00D).
    for (;;) {
        ElementHeader h = read_element_header(r, explicit_vr);
        if (h.tag.group == 0xFFFE && h.tag.element == 0xE00D) return;
        if (h.is_sequence) {
            skip_sequence_body(r, h, explicit_vr);
        } else {
            r.skip(h.length);
        }
    }
}

void skip_sequence_body(Reader& r, const ElementHeader& h, bool explicit_vr) {
    if (!h.undefined_length) {
        r.skip(h.length);
        return;
    }
    for (;;) {
        const uint16_t group = r.read_u16();
        const uint16_t element = r.read_u16();
        const uint32_t length = r.read_u32();
        if (group == 0xFFFE && element == 0xE0DD) return;       // sequence delimiter
        if (group == 0xFFFE && element == 0xE000) {             // item
            if (length == kUndefined) {
                skip_undefined_item_body(r, explicit_vr);
            } else {
                r.skip(length);
            }
            continue;
        }
        fail("TruncatedElement", "unexpected tag inside sequence");
    }
}

// ----------------------------- value decoding -----------------------------

std::string trimmed_string(const std::vector<uint8_t>& raw) {
    std::string s(raw.begin(), raw.end());
    const auto is_pad = [](char c) { return c == ' ' || c == '\0'; };
    while (!s.empty() && is_pad(s.back())) s.pop_back();
    while (!s.empty() && is_pad(s.front())) s.erase(s.begin());
    return s;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    size_t start = 0;
    for (;;) {
        const size_t end = s.find(sep, start);
        parts.push_back(s.substr(start, end - start));
        if (end == std::string::npos) break;
        start = end + 1;
    }
    return parts;
}

std::optional<double> parse_decimal(const std::string& text) {
    std::string t = text;
    while (!t.empty() && (t.back() == ' ' || t.back() == '\0')) t.pop_back();
    while (!t.empty() && t.front() == ' ') t.erase(t.begin());
    if (t.empty()) return std::nullopt;
    char* end = nullptr;
    const double v = std::strtod(t.c_str(), &end);
    if (end != t.c_str() + t.size()) return std::nullopt;
    return v;
}

// Decimal String: backslash-separated values; returns the value at `index`.
std::optional<double> decimal_at(const std::map<Tag, std::vector<uint8_t>>& tags,
                                 Tag tag, size_t index) {
    const auto it = tags.find(tag);
    if (it == tags.end()) return std::nullopt;
    const auto parts = split(trimmed_string(it->second), '\\');
    if (index >= parts.size()) return std::nullopt;
    return parse_decimal(parts[index]);
}

std::optional<int> unsigned_short_at(const std::map<Tag, std::vector<uint8_t>>& tags,
                                     Tag tag) {
    const auto it = tags.find(tag);
    if (it == tags.end() || it->second.size() < 2) return std::nullopt;
    return it->second[0] | (it->second[1] << 8);
}

std::optional<int> integer_string_at(const std::map<Tag, std::vector<uint8_t>>& tags,
                                     Tag tag) {
    const auto it = tags.find(tag);
    if (it == tags.end()) return std::nullopt;
    const std::string s = trimmed_string(it->second);
    int value = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
    return value;
}

}  // namespace

// ----------------------------- pixel decoding -----------------------------

std::vector<int32_t> decode_pixel_data(const DicomSlice& slice,
                                       std::span<const uint8_t> raw) {
    const size_t count = static_cast<size_t>(slice.rows) * static_cast<size_t>(slice.cols);
    const size_t bytes_per = static_cast<size_t>(slice.bits_allocated) / 8;
    if (raw.size() != count * bytes_per) {
        fail("LengthMismatch", "pixel data holds " + std::to_string(raw.size()) +
                                   " bytes, expected " + std::to_string(count * bytes_per));
    }
    std::vector<int32_t> out(count);
    const bool is_signed = slice.pixel_representation == PixelRepr::Signed;
    if (slice.bits_allocated == 8) {
        for (size_t i = 0; i < count; ++i) {
            out[i] = is_signed ? static_cast<int32_t>(static_cast<int8_t>(raw[i]))
                               : static_cast<int32_t>(raw[i]);
        }
    } else {
        for (size_t i = 0; i < count; ++i) {
            const uint16_t v = static_cast<uint16_t>(raw[2 * i] | (raw[2 * i + 1] << 8));
            out[i] = is_signed ? static_cast<int32_t>(static_cast<int16_t>(v))
                               : static_cast<int32_t>(v);
        }
    }
    return out;
}

// ----------------------------- file parsing -----------------------------

DicomSlice parse_dicom_file(std::span<const uint8_t> bytes) {
    if (bytes.size() < 132 || std::memcmp(bytes.data() + 128, "DICM", 4) != 0) {
        fail("MissingMagic", "not a DICOM Part-10 file");
    }
    Reader r(bytes.subspan(132));

    DicomSlice slice;

    // File meta group (0002) is always Explicit VR Little Endian.
    while (!r.exhausted() && r.remaining() >= 2 && r.peek_u16() == 0x0002) {
        ElementHeader h = read_element_header(r, /*explicit_vr=*/true);
        if (h.is_sequence) {
            skip_sequence_body(r, h, true);
            slice.tags[h.tag] = {};
            continue;
        }
        auto value = r.read_bytes(h.length);
        slice.tags[h.tag].assign(value.begin(), value.end());
    }

    const auto ts_it = slice.tags.find(kTransferSyntaxUid);
    if (ts_it == slice.tags.end()) {
        fail("UnsupportedTransferSyntax", "transfer syntax UID absent from file meta");
    }
    const std::string syntax = trimmed_string(ts_it->second);
    bool explicit_vr;
    if (syntax == kExplicitVrLittleEndian) {
        explicit_vr = true;
    } else if (syntax == kImplicitVrLittleEndian) {
        explicit_vr = false;
    } else {
        fail("UnsupportedTransferSyntax", syntax);
    }

    // Dataset elements until end of file.
    while (!r.exhausted()) {
        ElementHeader h = read_element_header(r, explicit_vr);
        if (h.is_sequence) {
            skip_sequence_body(r, h, explicit_vr);
            slice.tags[h.tag] = {};  // presence recorded, body dropped
            continue;
        }
        auto value = r.read_bytes(h.length);
        slice.tags[h.tag].assign(value.begin(), value.end());
    }

    for (Tag required : {kRows, kColumns, kBitsAllocated, kPixelData}) {
        if (!slice.tags.count(required)) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "(%04X,%04X)", required.group, required.element);
            fail("MissingRequiredTag", std::string("tag ") + buf + " absent");
        }
    }

    slice.rows = unsigned_short_at(slice.tags, kRows).value_or(0);
    slice.cols = unsigned_short_at(slice.tags, kColumns).value_or(0);
    slice.bits_allocated = unsigned_short_at(slice.tags, kBitsAllocated).value_or(0);
    if (slice.bits_allocated != 8 && slice.bits_allocated != 16) {
        fail("UnsupportedBitsAllocated",
             "bits allocated must be 8 or 16, got " + std::to_string(slice.bits_allocated));
    }
    slice.bits_stored = unsigned_short_at(slice.tags, kBitsStored).value_or(slice.bits_allocated);
    slice.pixel_representation =
        unsigned_short_at(slice.tags, kPixelRepresentation).value_or(0) == 1
            ? PixelRepr::Signed
            : PixelRepr::Unsigned;
    slice.rescale_slope = decimal_at(slice.tags, kRescaleSlope, 0).value_or(1.0);
    slice.rescale_intercept = decimal_at(slice.tags, kRescaleIntercept, 0).value_or(0.0);
    slice.window_center = decimal_at(slice.tags, kWindowCenter, 0);   // first value
    slice.window_width = decimal_at(slice.tags, kWindowWidth, 0);
    slice.instance_number = integer_string_at(slice.tags, kInstanceNumber);
    slice.z_position = decimal_at(slice.tags, kImagePositionPatient, 2);

    // Pixel data may carry one even-length pad byte.
    const auto& raw = slice.tags.at(kPixelData);
    const size_t expected = static_cast<size_t>(slice.rows) * static_cast<size_t>(slice.cols) *
                            (static_cast<size_t>(slice.bits_allocated) / 8);
    std::span<const uint8_t> pixel_bytes(raw.data(), raw.size());
    if (raw.size() == expected + 1 && (expected % 2) == 1) {
        pixel_bytes = pixel_bytes.first(expected);
    }
    slice.pixels = decode_pixel_data(slice, pixel_bytes);
    return slice;
}

DicomSlice parse_dicom_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("IoError", "cannot open " + path.string());
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return parse_dicom_file(std::span<const uint8_t>(bytes.data(), bytes.size()));
}

// ----------------------------- dataset scanning -----------------------------

std::string zero_pad_subject_id(const std::string& raw) {
    std::string t = raw;
    while (!t.empty() && std::isspace(static_cast<unsigned char>(t.back()))) t.pop_back();
    while (!t.empty() && std::isspace(static_cast<unsigned char>(t.front()))) t.erase(t.begin());
    if (t.empty() || !std::all_of(t.begin(), t.end(), [](unsigned char c) { return std::isdigit(c); })) {
        fail("MalformedLabelsCsv", "subject id '" + raw + "' is not a decimal number");
    }
    while (t.size() > 1 && t.front() == '0') t.erase(t.begin());
    while (t.size() < 5) t.insert(t.begin(), '0');
    return t;
}

std::map<std::string, int> read_labels_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail("IoError", "cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) fail("MalformedLabelsCsv", "empty file " + path.string());
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "BraTS21ID,MGMT_value") {
        fail("MalformedLabelsCsv", "expected header BraTS21ID,MGMT_value, got '" + line + "'");
    }
    std::map<std::string, int> labels;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) {
            fail("MalformedLabelsCsv", "row without comma: '" + line + "'");
        }
        const std::string id = zero_pad_subject_id(line.substr(0, comma));
        const std::string value = line.substr(comma + 1);
        if (value != "0" && value != "1") {
            fail("MalformedLabelsCsv", "MGMT_value must be 0 or 1, got '" + value + "'");
        }
        if (labels.count(id)) fail("DuplicateSubjectId", id);
        labels[id] = value == "1" ? 1 : 0;
    }
    return labels;
}

namespace {

bool is_five_digit_id(const std::string& name) {
    return name.size() == 5 &&
           std::all_of(name.begin(), name.end(),
                       [](unsigned char c) { return std::isdigit(c); });
}

}  // namespace

DatasetIndex scan_dataset(const std::filesystem::path& root,
                          const std::optional<std::filesystem::path>& labels_csv) {
    DatasetIndex index;
    if (fs::exists(root)) {
        for (const auto& entry : fs::directory_iterator(root)) {
            if (!entry.is_directory()) continue;
            const std::string id = entry.path().filename().string();
            if (!is_five_digit_id(id)) continue;
            DatasetIndex::Subject subject;
            subject.id = id;
            for (Modality m : kAllModalities) {
                const fs::path series_dir = entry.path() / to_string(m);
                std::vector<fs::path> files;
                if (fs::exists(series_dir) && fs::is_directory(series_dir)) {
                    for (const auto& f : fs::directory_iterator(series_dir)) {
                        if (f.is_regular_file() && f.path().extension() == ".dcm") {
                            files.push_back(f.path());
                        }
                    }
                    std::sort(files.begin(), files.end());
                }
                subject.series[m] = std::move(files);
            }
            index.subjects.push_back(std::move(subject));
        }
    }
    std::sort(index.subjects.begin(), index.subjects.end(),
              [](const auto& a, const auto& b) { return a.id < b.id; });
    if (labels_csv) index.labels = read_labels_csv(*labels_csv);
    return index;
}

}  // namespace radiopipe::dicom
