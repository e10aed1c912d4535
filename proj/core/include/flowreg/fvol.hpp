#pragma once

#include <filesystem>
#include <string>

#include "flowreg/types.hpp"

namespace flowreg {

// FVOL container: magic "FVOL", version byte 1, little-endian u32 fields
// nx, ny, nz, channels, dtype (0 = float32, 1 = uint8 label), three
// little-endian float32 spacings, then channel-major raw data (x-fastest
// within a channel). Volumes: channels=1 dtype=0; fields: channels=3 dtype=0;
// labels: channels=1 dtype=1.

struct FvolError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class FvolKind { kVolume, kField, kLabels };

FvolKind peek_fvol_kind(const std::filesystem::path& path);

void write_fvol(const std::filesystem::path& path, const Volume& v);
void write_fvol(const std::filesystem::path& path, const DisplacementField& f);
void write_fvol(const std::filesystem::path& path, const LabelMap& l);

Volume read_fvol_volume(const std::filesystem::path& path);
DisplacementField read_fvol_field(const std::filesystem::path& path);
LabelMap read_fvol_labels(const std::filesystem::path& path);

}  // namespace flowreg
