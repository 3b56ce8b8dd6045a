#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "transnetr/image.hpp"
#include "transnetr/rng.hpp"
#include "transnetr/tensor.hpp"

namespace transnetr {

struct SampleRecord {
    std::string id;      // "<stem>" or "<center>/<stem>"
    std::filesystem::path image_path;
    std::filesystem::path mask_path;
    std::string center;  // empty = untagged
};

struct DatasetManifest {
    std::filesystem::path root;
    std::vector<SampleRecord> records;

    std::size_t size() const { return records.size(); }
    bool has_centers() const;
    // center names in sorted order; untagged samples reported as "untagged"
    std::vector<std::string> centers() const;
};

enum class DatasetLayout { Auto, Flat, Centered };

// flat:     root/images/*.ppm + root/masks/*.{ppm,pgm} paired by stem
// centered: root/<center>/images + root/<center>/masks
// Lexicographic record order; an image without a mask (or vice versa) is an
// error naming the orphan.
DatasetManifest load_dataset(const std::filesystem::path& root,
                             DatasetLayout layout = DatasetLayout::Auto);

struct Sample {
    std::string id;
    std::string center;
    Tensor image;  // 1x3xHxW in [0,1]
    Tensor mask;   // 1x1xHxW in {0,1}
};

// target 0x0 keeps the native size. The image is bilinearly resized, the
// mask nearest-neighbour resized and re-binarized (8-bit threshold 128).
Sample load_sample(const SampleRecord& record, std::int64_t target_h = 0, std::int64_t target_w = 0);

// Deterministic seeded shuffle, then the first train_n ids form the train
// manifest. When split_file is non-empty the train ids are written there,
// one per line under a header naming the seed.
std::pair<DatasetManifest, DatasetManifest> split_holdout(const DatasetManifest& manifest,
                                                          std::size_t train_n, std::uint64_t seed,
                                                          const std::filesystem::path& split_file = {});

struct SynthConfig {
    int n = 8;
    std::int64_t size = 64;
    int centers = 0;  // 0 = flat layout; otherwise C1..Ck with per-center hue shift
    std::uint64_t seed = 42;
};

// Writes a deterministic synthetic dataset (noisy backgrounds, 1-3
// anti-aliased ellipses per image, exact-interior masks) under out_dir and
// returns its manifest. Foreground fraction is in (0.01, 0.6) by
// construction.
DatasetManifest synth_dataset(const SynthConfig& config, const std::filesystem::path& out_dir);

// Disjoint per-center views preserving record order; untagged samples are
// grouped under "untagged".
std::vector<std::pair<std::string, DatasetManifest>> group_by_center(const DatasetManifest& manifest);

// Pixel-center test against the rotated ellipse equation; exposed so tests
// can compare rasterized areas with the analytic pi*a*b.
std::vector<std::uint8_t> rasterize_ellipse(std::int64_t size, double cx, double cy, double a, double b,
                                            double theta);

}  // namespace transnetr
