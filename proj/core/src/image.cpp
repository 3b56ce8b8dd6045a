#include "transnetr/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace transnetr {

namespace {

int read_pnm_token(std::istream& in) {
    // Skips whitespace and '#' comments between header fields.
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (!std::isspace(c)) {
            break;
        }
        c = in.get();
    }
    if (c == EOF) return -1;
    int value = 0;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        c = in.get();
    }
    return value;
}

}  // namespace

ImageU8 read_image(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open image file: " + path.string());
    char magic[2] = {0, 0};
    in.read(magic, 2);
    int channels = 0;
    if (magic[0] == 'P' && magic[1] == '6') {
        channels = 3;
    } else if (magic[0] == 'P' && magic[1] == '5') {
        channels = 1;
    } else {
        throw std::runtime_error("unsupported image format (expected binary PPM/PGM): " + path.string());
    }
    const int w = read_pnm_token(in);
    const int h = read_pnm_token(in);
    const int maxval = read_pnm_token(in);
    if (w <= 0 || h <= 0 || maxval != 255) {
        throw std::runtime_error("corrupt or unsupported PNM header in " + path.string());
    }
    ImageU8 img;
    img.width = w;
    img.height = h;
    img.channels = channels;
    img.pixels.resize(static_cast<std::size_t>(w) * h * channels);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
        throw std::runtime_error("truncated image data in " + path.string());
    }
    return img;
}

void write_image(const std::filesystem::path& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3) {
        throw std::invalid_argument("write_image: channels must be 1 or 3");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write image file: " + path.string());
    out << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw std::runtime_error("failed writing image data to " + path.string());
}

Tensor image_to_tensor(const ImageU8& img) {
    const std::int64_t h = img.height, w = img.width;
    const int c = img.channels;
    std::vector<float> data(static_cast<std::size_t>(c) * h * w);
    constexpr float kInv255 = 1.0f / 255.0f;
    for (int ch = 0; ch < c; ++ch) {
        float* plane = data.data() + static_cast<std::size_t>(ch) * h * w;
        for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t x = 0; x < w; ++x) {
                plane[y * w + x] = static_cast<float>(img.at(y, x, ch)) * kInv255;
            }
        }
    }
    return Tensor::from_vector({1, c, h, w}, std::move(data));
}

ImageU8 tensor_plane_to_image(const std::vector<float>& plane, std::int64_t h, std::int64_t w) {
    if (static_cast<std::int64_t>(plane.size()) != h * w) {
        throw std::invalid_argument("tensor_plane_to_image: size mismatch");
    }
    ImageU8 img;
    img.width = w;
    img.height = h;
    img.channels = 1;
    img.pixels.resize(static_cast<std::size_t>(h * w));
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        const float v = std::clamp(plane[i], 0.0f, 1.0f);
        img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
    return img;
}

namespace {

ImageU8 resize_u8(const ImageU8& img, std::int64_t out_h, std::int64_t out_w, bool bilinear) {
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize: output size must be >= 1");
    ImageU8 out;
    out.width = out_w;
    out.height = out_h;
    out.channels = img.channels;
    out.pixels.resize(static_cast<std::size_t>(out_w) * out_h * img.channels);
    const double ry = static_cast<double>(img.height) / static_cast<double>(out_h);
    const double rx = static_cast<double>(img.width) / static_cast<double>(out_w);
    for (std::int64_t y = 0; y < out_h; ++y) {
        const double sy = (y + 0.5) * ry - 0.5;
        for (std::int64_t x = 0; x < out_w; ++x) {
            const double sx = (x + 0.5) * rx - 0.5;
            for (int c = 0; c < img.channels; ++c) {
                double v;
                if (bilinear) {
                    const std::int64_t y0 = std::clamp<std::int64_t>(
                        static_cast<std::int64_t>(std::floor(sy)), 0, img.height - 1);
                    const std::int64_t y1 = std::min<std::int64_t>(y0 + 1, img.height - 1);
                    const std::int64_t x0 = std::clamp<std::int64_t>(
                        static_cast<std::int64_t>(std::floor(sx)), 0, img.width - 1);
                    const std::int64_t x1 = std::min<std::int64_t>(x0 + 1, img.width - 1);
                    const double fy = std::clamp(sy - std::floor(sy), 0.0, 1.0);
                    const double fx = std::clamp(sx - std::floor(sx), 0.0, 1.0);
                    const double top = (1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c);
                    const double bot = (1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c);
                    v = (1 - fy) * top + fy * bot;
                } else {
                    const std::int64_t ny = std::clamp<std::int64_t>(
                        static_cast<std::int64_t>(std::lround(sy)), 0, img.height - 1);
                    const std::int64_t nx = std::clamp<std::int64_t>(
                        static_cast<std::int64_t>(std::lround(sx)), 0, img.width - 1);
                    v = img.at(ny, nx, c);
                }
                out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0l, 255l));
            }
        }
    }
    return out;
}

}  // namespace

ImageU8 resize_bilinear_u8(const ImageU8& img, std::int64_t out_h, std::int64_t out_w) {
    return resize_u8(img, out_h, out_w, true);
}

ImageU8 resize_nearest_u8(const ImageU8& img, std::int64_t out_h, std::int64_t out_w) {
    return resize_u8(img, out_h, out_w, false);
}

}  // namespace transnetr
