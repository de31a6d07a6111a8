#pragma once

#include <filesystem>

#include "pmss/data/synth.hpp"

namespace pmss::data {

/// Writes meta.json plus img_%05d.bin / lab_%05d.bin, training samples first.
void write_dataset(const std::filesystem::path& dir, const Dataset& ds);
/// Reads a directory produced by write_dataset. Throws std::runtime_error on
/// missing or inconsistent files.
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace pmss::data
