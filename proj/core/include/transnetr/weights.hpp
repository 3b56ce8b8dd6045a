#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "transnetr/model.hpp"
#include "transnetr/tensor.hpp"

namespace transnetr {

// Flat tensor container: a textual header (name, shape, byte offset per
// entry), raw little-endian float32 payload in header order, and a trailing
// FNV-1a 64-bit checksum over the payload. Byte-exact round trip.
//
//   TNRW0001\n
//   meta <key> <value>\n
//   tensor <name> <rank> <d0> ... <offset>\n
//   blob <name> <nbytes> <offset>\n
//   end\n
//   <payload><8-byte checksum>
struct WeightArchive {
    struct TensorEntry {
        std::string name;
        Shape shape;
        std::vector<float> data;
    };
    struct BlobEntry {
        std::string name;
        std::vector<std::uint8_t> bytes;
    };

    std::vector<std::pair<std::string, std::string>> meta;
    std::vector<TensorEntry> tensors;
    std::vector<BlobEntry> blobs;

    void add_meta(std::string key, std::string value);
    void add_tensor(std::string name, const Shape& shape, std::vector<float> data);
    const TensorEntry* find_tensor(const std::string& name) const;
    const std::string* find_meta(const std::string& key) const;
};

void save_archive(const std::filesystem::path& path, const WeightArchive& archive);
WeightArchive load_archive(const std::filesystem::path& path);

// Snapshot of every registry tensor (parameters and buffers) in order.
WeightArchive archive_from_registry(const ParamRegistry& registry);

// Copies archive tensors into registry tensors by name, shape-checked.
// Archive entries that the registry does not know, and (when
// require_complete) registry entries the archive lacks, are errors naming
// the offending tensor. Non-registry entries (e.g. optimizer moments under
// a reserved prefix) are skipped via `ignore_prefix`.
void apply_archive_to_registry(const WeightArchive& archive, ParamRegistry& registry,
                               bool require_complete, const std::string& ignore_prefix = "");

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size);

}  // namespace transnetr
