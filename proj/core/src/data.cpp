#include "transnetr/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

namespace transnetr {

namespace fs = std::filesystem;

bool DatasetManifest::has_centers() const {
    for (const auto& r : records) {
        if (!r.center.empty()) return true;
    }
    return false;
}

std::vector<std::string> DatasetManifest::centers() const {
    std::set<std::string> names;
    bool untagged = false;
    for (const auto& r : records) {
        if (r.center.empty()) {
            untagged = true;
        } else {
            names.insert(r.center);
        }
    }
    std::vector<std::string> out(names.begin(), names.end());
    if (untagged) out.push_back("untagged");
    return out;
}

namespace {

bool is_raster(const fs::path& p) {
    const auto ext = p.extension().string();
    return ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

// stem -> path, lexicographically ordered
std::map<std::string, fs::path> list_rasters(const fs::path& dir) {
    std::map<std::string, fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && is_raster(entry.path())) {
            out[entry.path().stem().string()] = entry.path();
        }
    }
    return out;
}

void pair_directory(const fs::path& images, const fs::path& masks, const std::string& center,
                    std::vector<SampleRecord>& records) {
    auto image_map = list_rasters(images);
    auto mask_map = list_rasters(masks);
    for (const auto& [stem, path] : image_map) {
        auto it = mask_map.find(stem);
        if (it == mask_map.end()) {
            throw std::runtime_error("image without a mask: " + path.string());
        }
        SampleRecord rec;
        rec.id = center.empty() ? stem : center + "/" + stem;
        rec.image_path = path;
        rec.mask_path = it->second;
        rec.center = center;
        records.push_back(std::move(rec));
    }
    for (const auto& [stem, path] : mask_map) {
        if (image_map.find(stem) == image_map.end()) {
            throw std::runtime_error("mask without an image: " + path.string());
        }
    }
}

}  // namespace

DatasetManifest load_dataset(const fs::path& root, DatasetLayout layout) {
    if (!fs::exists(root)) throw std::runtime_error("dataset root does not exist: " + root.string());

    const bool flat_shape = fs::is_directory(root / "images") && fs::is_directory(root / "masks");
    if (layout == DatasetLayout::Auto) {
        layout = flat_shape ? DatasetLayout::Flat : DatasetLayout::Centered;
    }

    DatasetManifest manifest;
    manifest.root = root;
    if (layout == DatasetLayout::Flat) {
        if (!flat_shape) {
            throw std::runtime_error("flat dataset layout needs images/ and masks/ under " +
                                     root.string());
        }
        pair_directory(root / "images", root / "masks", "", manifest.records);
    } else {
        std::vector<std::string> centers;
        for (const auto& entry : fs::directory_iterator(root)) {
            if (entry.is_directory() && fs::is_directory(entry.path() / "images") &&
                fs::is_directory(entry.path() / "masks")) {
                centers.push_back(entry.path().filename().string());
            }
        }
        if (centers.empty()) {
            throw std::runtime_error("no <center>/images + <center>/masks directories under " +
                                     root.string());
        }
        std::sort(centers.begin(), centers.end());
        for (const auto& center : centers) {
            pair_directory(root / center / "images", root / center / "masks", center,
                           manifest.records);
        }
    }
    if (manifest.records.empty()) {
        throw std::runtime_error("dataset at " + root.string() + " contains no samples");
    }
    return manifest;
}

Sample load_sample(const SampleRecord& record, std::int64_t target_h, std::int64_t target_w) {
    ImageU8 image = read_image(record.image_path);
    ImageU8 mask = read_image(record.mask_path);
    if (image.width != mask.width || image.height != mask.height) {
        throw std::runtime_error("sample '" + record.id + "': image is " +
                                 std::to_string(image.width) + "x" + std::to_string(image.height) +
                                 " but mask is " + std::to_string(mask.width) + "x" +
                                 std::to_string(mask.height));
    }
    if (target_h > 0 && target_w > 0 && (image.height != target_h || image.width != target_w)) {
        image = resize_bilinear_u8(image, target_h, target_w);
        mask = resize_nearest_u8(mask, target_h, target_w);
    }

    Sample sample;
    sample.id = record.id;
    sample.center = record.center;

    // image -> 1x3xHxW in [0,1]; grayscale inputs are replicated across rgb
    const std::int64_t h = image.height, w = image.width;
    std::vector<float> img_data(static_cast<std::size_t>(3 * h * w));
    constexpr float kInv255 = 1.0f / 255.0f;
    for (int c = 0; c < 3; ++c) {
        const int src_c = image.channels == 3 ? c : 0;
        float* plane = img_data.data() + static_cast<std::size_t>(c) * h * w;
        for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t x = 0; x < w; ++x) {
                plane[y * w + x] = static_cast<float>(image.at(y, x, src_c)) * kInv255;
            }
        }
    }
    sample.image = Tensor::from_vector({1, 3, h, w}, std::move(img_data));

    // mask -> 1x1xHxW binary, 8-bit threshold 128
    std::vector<float> mask_data(static_cast<std::size_t>(h * w));
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            mask_data[static_cast<std::size_t>(y * w + x)] = mask.at(y, x, 0) >= 128 ? 1.0f : 0.0f;
        }
    }
    sample.mask = Tensor::from_vector({1, 1, h, w}, std::move(mask_data));
    return sample;
}

std::pair<DatasetManifest, DatasetManifest> split_holdout(const DatasetManifest& manifest,
                                                          std::size_t train_n, std::uint64_t seed,
                                                          const fs::path& split_file) {
    if (train_n >= manifest.records.size()) {
        throw std::invalid_argument("split_holdout: train_n (" + std::to_string(train_n) +
                                    ") must be smaller than the sample count (" +
                                    std::to_string(manifest.records.size()) + ")");
    }
    std::vector<std::size_t> order = identity_permutation(manifest.records.size());
    Rng rng = Rng::derive(seed, 0x5917u);
    rng.shuffle(order);

    std::set<std::size_t> train_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(train_n));
    DatasetManifest train, test;
    train.root = test.root = manifest.root;
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        (train_idx.count(i) ? train : test).records.push_back(manifest.records[i]);
    }

    if (!split_file.empty()) {
        std::ofstream out(split_file);
        if (!out) throw std::runtime_error("cannot write split file: " + split_file.string());
        out << "# seed=" << seed << " train_n=" << train_n << "\n";
        for (const auto& r : train.records) out << r.id << "\n";
    }
    return {std::move(train), std::move(test)};
}

// ------------------------------------------------------------------ synthesis

std::vector<std::uint8_t> rasterize_ellipse(std::int64_t size, double cx, double cy, double a, double b,
                                            double theta) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(size * size), 0);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::int64_t y = 0; y < size; ++y) {
        for (std::int64_t x = 0; x < size; ++x) {
            const double dx = (x + 0.5) - cx;
            const double dy = (y + 0.5) - cy;
            const double u = dx * ct + dy * st;
            const double v = -dx * st + dy * ct;
            if ((u * u) / (a * a) + (v * v) / (b * b) <= 1.0) {
                mask[static_cast<std::size_t>(y * size + x)] = 1;
            }
        }
    }
    return mask;
}

namespace {

struct Hsv {
    double h, s, v;  // h in degrees
};

void hsv_to_rgb(const Hsv& c, double& r, double& g, double& b) {
    const double h = std::fmod(std::fmod(c.h, 360.0) + 360.0, 360.0) / 60.0;
    const int sector = static_cast<int>(h) % 6;
    const double f = h - std::floor(h);
    const double p = c.v * (1 - c.s);
    const double q = c.v * (1 - c.s * f);
    const double t = c.v * (1 - c.s * (1 - f));
    switch (sector) {
        case 0: r = c.v; g = t; b = p; break;
        case 1: r = q; g = c.v; b = p; break;
        case 2: r = p; g = c.v; b = t; break;
        case 3: r = p; g = q; b = c.v; break;
        case 4: r = t; g = p; b = c.v; break;
        default: r = c.v; g = p; b = q; break;
    }
}

struct EllipseSpec {
    double cx, cy, a, b, theta;
    Hsv color;
};

// coverage in [0,1] via 4x4 supersampling; used only for image anti-aliasing
double ellipse_coverage(const EllipseSpec& e, std::int64_t x, std::int64_t y) {
    const double ct = std::cos(e.theta), st = std::sin(e.theta);
    int hit = 0;
    for (int sy = 0; sy < 4; ++sy) {
        for (int sx = 0; sx < 4; ++sx) {
            const double px = x + (sx + 0.5) / 4.0;
            const double py = y + (sy + 0.5) / 4.0;
            const double dx = px - e.cx, dy = py - e.cy;
            const double u = dx * ct + dy * st;
            const double v = -dx * st + dy * ct;
            if ((u * u) / (e.a * e.a) + (v * v) / (e.b * e.b) <= 1.0) ++hit;
        }
    }
    return hit / 16.0;
}

void synth_one(Rng& rng, std::int64_t size, double hue_shift, ImageU8& image, ImageU8& mask) {
    const double s = static_cast<double>(size);

    // low-frequency value-noise grid for the background
    constexpr int kGrid = 8;
    std::vector<double> grid((kGrid + 1) * (kGrid + 1));
    for (auto& v : grid) v = rng.uniform(-0.08, 0.08);
    auto grid_noise = [&](std::int64_t y, std::int64_t x) {
        const double gy = static_cast<double>(y) / s * kGrid;
        const double gx = static_cast<double>(x) / s * kGrid;
        const int y0 = static_cast<int>(gy), x0 = static_cast<int>(gx);
        const double fy = gy - y0, fx = gx - x0;
        const double top = grid[y0 * (kGrid + 1) + x0] * (1 - fx) + grid[y0 * (kGrid + 1) + x0 + 1] * fx;
        const double bot =
            grid[(y0 + 1) * (kGrid + 1) + x0] * (1 - fx) + grid[(y0 + 1) * (kGrid + 1) + x0 + 1] * fx;
        return top * (1 - fy) + fy * bot;
    };

    const Hsv bg{30.0 + hue_shift + rng.uniform(-10.0, 10.0), rng.uniform(0.25, 0.45),
                 rng.uniform(0.45, 0.65)};

    // 1-3 ellipses; the geometry keeps the union fraction inside (0.01, 0.6)
    const int count = 1 + static_cast<int>(rng.uniform_int(3));
    std::vector<EllipseSpec> ellipses;
    for (int i = 0; i < count; ++i) {
        EllipseSpec e;
        e.cx = rng.uniform(0.25, 0.75) * s;
        e.cy = rng.uniform(0.25, 0.75) * s;
        e.a = rng.uniform(0.08, 0.22) * s;
        e.b = rng.uniform(0.08, 0.22) * s;
        e.theta = rng.uniform(0.0, 3.14159265358979323846);
        e.color = Hsv{350.0 + rng.uniform(-15.0, 15.0), rng.uniform(0.3, 0.55), rng.uniform(0.5, 0.75)};
        ellipses.push_back(e);
    }

    mask.width = mask.height = size;
    mask.channels = 1;
    mask.pixels.assign(static_cast<std::size_t>(size * size), 0);
    for (const auto& e : ellipses) {
        auto one = rasterize_ellipse(size, e.cx, e.cy, e.a, e.b, e.theta);
        for (std::size_t i = 0; i < one.size(); ++i) {
            if (one[i]) mask.pixels[i] = 255;
        }
    }

    image.width = image.height = size;
    image.channels = 3;
    image.pixels.resize(static_cast<std::size_t>(size * size * 3));
    for (std::int64_t y = 0; y < size; ++y) {
        for (std::int64_t x = 0; x < size; ++x) {
            double r, g, b;
            Hsv base = bg;
            base.v = std::clamp(base.v + grid_noise(y, x), 0.05, 0.95);
            hsv_to_rgb(base, r, g, b);
            for (const auto& e : ellipses) {
                const double cov = ellipse_coverage(e, x, y);
                if (cov <= 0.0) continue;
                // radial shading toward the rim
                const double dx = (x + 0.5 - e.cx) / e.a, dy = (y + 0.5 - e.cy) / e.b;
                const double radial = std::clamp(1.0 - 0.25 * std::sqrt(dx * dx + dy * dy), 0.5, 1.0);
                Hsv pc = e.color;
                pc.v = std::clamp(pc.v * radial, 0.05, 0.95);
                double pr, pg, pb;
                hsv_to_rgb(pc, pr, pg, pb);
                r = r * (1 - cov) + pr * cov;
                g = g * (1 - cov) + pg * cov;
                b = b * (1 - cov) + pb * cov;
            }
            auto put = [&](int c, double v) {
                v += rng.uniform(-0.02, 0.02);  // fine grain
                image.at(y, x, c) =
                    static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0l, 255l));
            };
            put(0, r);
            put(1, g);
            put(2, b);
        }
    }
}

}  // namespace

DatasetManifest synth_dataset(const SynthConfig& config, const fs::path& out_dir) {
    if (config.n < 1) throw std::invalid_argument("synth_dataset: n must be >= 1");
    if (config.size < 32 || config.size % 32 != 0) {
        throw std::invalid_argument("synth_dataset: size must be a positive multiple of 32");
    }

    auto dir_for = [&](int center_idx) {
        if (config.centers <= 0) return out_dir;
        return out_dir / ("C" + std::to_string(center_idx + 1));
    };
    const int ncenters = std::max(0, config.centers);
    for (int c = 0; c < std::max(1, ncenters); ++c) {
        fs::create_directories(dir_for(c) / "images");
        fs::create_directories(dir_for(c) / "masks");
    }

    for (int i = 0; i < config.n; ++i) {
        Rng rng = Rng::derive(config.seed, 0x5A11u, static_cast<std::uint64_t>(i));
        const int center_idx = ncenters > 0 ? i % ncenters : 0;
        const double hue_shift = ncenters > 0 ? 50.0 * center_idx : 0.0;

        ImageU8 image, mask;
        for (int attempt = 0; attempt < 16; ++attempt) {
            synth_one(rng, config.size, hue_shift, image, mask);
            std::int64_t fg = 0;
            for (auto v : mask.pixels) fg += v != 0;
            const double frac = static_cast<double>(fg) / static_cast<double>(mask.pixels.size());
            if (frac > 0.01 && frac < 0.6) break;
        }

        char name[32];
        std::snprintf(name, sizeof(name), "sample_%04d", i);
        write_image(dir_for(center_idx) / "images" / (std::string(name) + ".ppm"), image);
        write_image(dir_for(center_idx) / "masks" / (std::string(name) + ".pgm"), mask);
    }
    return load_dataset(out_dir, ncenters > 0 ? DatasetLayout::Centered : DatasetLayout::Flat);
}

std::vector<std::pair<std::string, DatasetManifest>> group_by_center(const DatasetManifest& manifest) {
    std::vector<std::pair<std::string, DatasetManifest>> groups;
    for (const auto& center : manifest.centers()) {
        DatasetManifest view;
        view.root = manifest.root;
        for (const auto& r : manifest.records) {
            const std::string tag = r.center.empty() ? "untagged" : r.center;
            if (tag == center) view.records.push_back(r);
        }
        groups.emplace_back(center, std::move(view));
    }
    return groups;
}

}  // namespace transnetr
