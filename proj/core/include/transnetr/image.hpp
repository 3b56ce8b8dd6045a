#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "transnetr/tensor.hpp"

namespace transnetr {

// Interleaved row-major 8-bit raster; channels is 1 (gray) or 3 (rgb).
struct ImageU8 {
    std::int64_t width = 0;
    std::int64_t height = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;

    std::uint8_t& at(std::int64_t y, std::int64_t x, int c) {
        return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
    }
    std::uint8_t at(std::int64_t y, std::int64_t x, int c) const {
        return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
    }
};

// Binary netpbm rasters: P6 (rgb) and P5 (gray), maxval 255. The format used
// for all images, masks, probability maps and heatmaps in this project.
ImageU8 read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const ImageU8& img);

// 8-bit -> [0,1] float CHW tensor (RGB for 3-channel input).
Tensor image_to_tensor(const ImageU8& img);
// Single-channel [0,1] plane -> 8-bit grayscale (values clamped, rounded).
ImageU8 tensor_plane_to_image(const std::vector<float>& plane, std::int64_t h, std::int64_t w);

ImageU8 resize_bilinear_u8(const ImageU8& img, std::int64_t out_h, std::int64_t out_w);
ImageU8 resize_nearest_u8(const ImageU8& img, std::int64_t out_h, std::int64_t out_w);

}  // namespace transnetr
