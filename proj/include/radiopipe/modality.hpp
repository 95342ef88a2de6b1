#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "radiopipe/error.hpp"

namespace radiopipe {

// The four mpMRI series types, in canonical order. The numeric values are
// the wire codes used by the volume cache format and checkpoint metadata.
enum class Modality : uint8_t { T1w = 0, T1wCE = 1, T2w = 2, FLAIR = 3 };

inline constexpr std::array<Modality, 4> kAllModalities = {
    Modality::T1w, Modality::T1wCE, Modality::T2w, Modality::FLAIR};

inline std::string to_string(Modality m) {
    switch (m) {
        case Modality::T1w: return "T1w";
        case Modality::T1wCE: return "T1wCE";
        case Modality::T2w: return "T2w";
        case Modality::FLAIR: return "FLAIR";
    }
    return "?";
}

// Lookup that tolerates unknown names; directory scans use this to skip
// unrelated folders.
inline std::optional<Modality> modality_from_string(std::string_view name) {
    for (Modality m : kAllModalities) {
        if (name == to_string(m)) return m;
    }
    return std::nullopt;
}

// Strict variant for user-supplied names.
inline Modality parse_modality(const std::string& name) {
    const auto m = modality_from_string(name);
    if (!m) fail("UsageError", "unknown modality '" + name + "'");
    return *m;
}

}  // namespace radiopipe
