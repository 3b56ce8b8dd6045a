#include "transnetr/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace transnetr {

// ------------------------------------------------------------------ configs

std::string AugmentConfig::to_string() const {
    if (!any()) return "none";
    std::string out;
    auto append = [&](bool flag, const char* name) {
        if (!flag) return;
        if (!out.empty()) out += ",";
        out += name;
    };
    append(hflip, "hflip");
    append(vflip, "vflip");
    append(rotate90, "rot90");
    append(crop, "crop");
    append(jitter, "jitter");
    return out;
}

AugmentConfig AugmentConfig::parse(const std::string& spec) {
    AugmentConfig cfg;
    if (spec.empty() || spec == "none") return cfg;
    if (spec == "all") return all();
    std::istringstream ss(spec);
    std::string token;
    while (std::getline(ss, token, ',')) {
        if (token == "hflip") cfg.hflip = true;
        else if (token == "vflip") cfg.vflip = true;
        else if (token == "rot90") cfg.rotate90 = true;
        else if (token == "crop") cfg.crop = true;
        else if (token == "jitter") cfg.jitter = true;
        else throw std::invalid_argument("unknown augmentation '" + token +
                                         "' (expected hflip,vflip,rot90,crop,jitter,all,none)");
    }
    return cfg;
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0)) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (max_steps < 1) throw std::invalid_argument("TrainConfig: max_steps must be >= 1");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
        throw std::invalid_argument("TrainConfig: betas must lie in [0, 1)");
    }
    if (!(epsilon > 0)) throw std::invalid_argument("TrainConfig: epsilon must be > 0");
}

// ------------------------------------------------------------------ loss

template <class T>
TensorT<T> bce_dice_loss(const TensorT<T>& pred, const TensorT<T>& target, T bce_weight,
                         T dice_weight) {
    if (pred.shape() != target.shape()) {
        throw std::invalid_argument("bce_dice_loss: shape mismatch, " + shape_str(pred.shape()) +
                                    " vs " + shape_str(target.shape()));
    }
    for (const T& v : target.values()) {
        if (v != T(0) && v != T(1)) {
            throw std::invalid_argument("bce_dice_loss: target must be binary");
        }
    }

    const T eps = T(1e-7);
    auto p = clamp(pred, eps, T(1) - eps);
    auto one_minus_p = offset(scale(p, T(-1)), T(1));
    auto one_minus_t = offset(scale(target, T(-1)), T(1));
    auto ll = add(mul(target, log_elem(p)), mul(one_minus_t, log_elem(one_minus_p)));
    auto bce = scale(mean_all(ll), T(-1));

    // soft dice per image, smoothing 1, then batch mean
    auto inter = sum_per_image(mul(pred, target));
    auto sums = add(sum_per_image(pred), sum_per_image(target));
    auto dice = divide(offset(scale(inter, T(2)), T(1)), offset(sums, T(1)));
    auto dice_loss = offset(scale(mean_all(dice), T(-1)), T(1));

    return add(scale(bce, bce_weight), scale(dice_loss, dice_weight));
}

template TensorT<float> bce_dice_loss<float>(const TensorT<float>&, const TensorT<float>&, float, float);
template TensorT<double> bce_dice_loss<double>(const TensorT<double>&, const TensorT<double>&, double,
                                               double);

// ------------------------------------------------------------------ augmentation

namespace {

struct PlaneView {
    std::int64_t c, h, w;
};

PlaneView view_of(const Tensor& t) { return {t.dim(1), t.dim(2), t.dim(3)}; }

template <class Fn>
Tensor remap(const Tensor& src, std::int64_t out_h, std::int64_t out_w, Fn&& src_index) {
    const PlaneView v = view_of(src);
    std::vector<float> out(static_cast<std::size_t>(v.c * out_h * out_w));
    const auto& in = src.values();
    for (std::int64_t c = 0; c < v.c; ++c) {
        const float* plane = in.data() + c * v.h * v.w;
        float* dst = out.data() + c * out_h * out_w;
        for (std::int64_t y = 0; y < out_h; ++y) {
            for (std::int64_t x = 0; x < out_w; ++x) {
                dst[y * out_w + x] = plane[src_index(y, x)];
            }
        }
    }
    return Tensor::from_vector({1, v.c, out_h, out_w}, std::move(out));
}

}  // namespace

SamplePair flip_horizontal(const SamplePair& s) {
    const PlaneView v = view_of(s.image);
    auto index = [w = v.w](std::int64_t y, std::int64_t x) { return y * w + (w - 1 - x); };
    return {remap(s.image, v.h, v.w, index), remap(s.mask, v.h, v.w, index)};
}

SamplePair flip_vertical(const SamplePair& s) {
    const PlaneView v = view_of(s.image);
    auto index = [h = v.h, w = v.w](std::int64_t y, std::int64_t x) { return (h - 1 - y) * w + x; };
    return {remap(s.image, v.h, v.w, index), remap(s.mask, v.h, v.w, index)};
}

SamplePair rotate_quarter(const SamplePair& s, int quarter_turns) {
    const int k = ((quarter_turns % 4) + 4) % 4;
    if (k == 0) return s;
    // one clockwise quarter turn: out(y, x) = in(h-1-x, y), output is w x h
    auto rot_once = [](const Tensor& t) {
        const PlaneView pv = view_of(t);
        auto index = [h = pv.h, w = pv.w](std::int64_t y, std::int64_t x) {
            return (h - 1 - x) * w + y;
        };
        return remap(t, pv.w, pv.h, index);
    };
    SamplePair out = s;
    for (int i = 0; i < k; ++i) out = {rot_once(out.image), rot_once(out.mask)};
    return out;
}

SamplePair crop_resize(const SamplePair& s, double side_scale, double frac_y, double frac_x) {
    if (!(side_scale > 0.0 && side_scale <= 1.0)) {
        throw std::invalid_argument("crop_resize: side_scale must be in (0, 1]");
    }
    const PlaneView v = view_of(s.image);
    const std::int64_t ch = std::max<std::int64_t>(1, std::llround(side_scale * v.h));
    const std::int64_t cw = std::max<std::int64_t>(1, std::llround(side_scale * v.w));
    const std::int64_t y0 = std::llround(frac_y * static_cast<double>(v.h - ch));
    const std::int64_t x0 = std::llround(frac_x * static_cast<double>(v.w - cw));

    // image: half-pixel bilinear sampling inside the window
    const auto& img = s.image.values();
    std::vector<float> out_img(static_cast<std::size_t>(v.c * v.h * v.w));
    for (std::int64_t c = 0; c < v.c; ++c) {
        const float* plane = img.data() + c * v.h * v.w;
        float* dst = out_img.data() + c * v.h * v.w;
        for (std::int64_t y = 0; y < v.h; ++y) {
            const double sy = y0 + (y + 0.5) * static_cast<double>(ch) / v.h - 0.5;
            const std::int64_t iy0 = std::clamp<std::int64_t>(
                static_cast<std::int64_t>(std::floor(sy)), y0, y0 + ch - 1);
            const std::int64_t iy1 = std::min(iy0 + 1, y0 + ch - 1);
            const double fy = std::clamp(sy - std::floor(sy), 0.0, 1.0);
            for (std::int64_t x = 0; x < v.w; ++x) {
                const double sx = x0 + (x + 0.5) * static_cast<double>(cw) / v.w - 0.5;
                const std::int64_t ix0 = std::clamp<std::int64_t>(
                    static_cast<std::int64_t>(std::floor(sx)), x0, x0 + cw - 1);
                const std::int64_t ix1 = std::min(ix0 + 1, x0 + cw - 1);
                const double fx = std::clamp(sx - std::floor(sx), 0.0, 1.0);
                const double top = (1 - fx) * plane[iy0 * v.w + ix0] + fx * plane[iy0 * v.w + ix1];
                const double bot = (1 - fx) * plane[iy1 * v.w + ix0] + fx * plane[iy1 * v.w + ix1];
                dst[y * v.w + x] = static_cast<float>((1 - fy) * top + fy * bot);
            }
        }
    }

    // mask: nearest neighbour, then re-binarized
    const auto& msk = s.mask.values();
    std::vector<float> out_mask(static_cast<std::size_t>(v.h * v.w));
    for (std::int64_t y = 0; y < v.h; ++y) {
        const std::int64_t sy = y0 + std::clamp<std::int64_t>(
                                         static_cast<std::int64_t>((y + 0.5) * ch / v.h), 0, ch - 1);
        for (std::int64_t x = 0; x < v.w; ++x) {
            const std::int64_t sx = x0 + std::clamp<std::int64_t>(
                                             static_cast<std::int64_t>((x + 0.5) * cw / v.w), 0, cw - 1);
            out_mask[static_cast<std::size_t>(y * v.w + x)] = msk[sy * v.w + sx] > 0.5f ? 1.0f : 0.0f;
        }
    }

    return {Tensor::from_vector({1, v.c, v.h, v.w}, std::move(out_img)),
            Tensor::from_vector({1, 1, v.h, v.w}, std::move(out_mask))};
}

Tensor adjust_brightness_contrast(const Tensor& image, double contrast, double brightness) {
    std::vector<float> out(image.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = (image.values()[i] - 0.5) * contrast + 0.5 + brightness;
        out[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    return Tensor::from_vector(image.shape(), std::move(out));
}

SamplePair augment(const SamplePair& sample, const AugmentConfig& config, Rng& rng) {
    SamplePair out = sample;
    if (config.hflip && rng.bernoulli(0.5)) out = flip_horizontal(out);
    if (config.vflip && rng.bernoulli(0.5)) out = flip_vertical(out);
    if (config.rotate90 && rng.bernoulli(0.5)) {
        int k = 1 + static_cast<int>(rng.uniform_int(3));
        if (out.image.dim(2) != out.image.dim(3)) k = 2;  // keep non-square shapes stable
        out = rotate_quarter(out, k);
    }
    if (config.crop && rng.bernoulli(0.5)) {
        const double scale = rng.uniform(0.8, 1.0);
        const double fy = rng.uniform();
        const double fx = rng.uniform();
        out = crop_resize(out, scale, fy, fx);
    }
    if (config.jitter && rng.bernoulli(0.5)) {
        const double contrast = rng.uniform(0.8, 1.2);
        const double brightness = rng.uniform(-0.2, 0.2);
        out.image = adjust_brightness_contrast(out.image, contrast, brightness);
    }
    return out;
}

// ------------------------------------------------------------------ optimizer

AdamOptimizer::AdamOptimizer(ParamRegistry& registry, double lr, double beta1, double beta2,
                             double epsilon)
    : lr_(lr), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
    for (auto& e : registry.entries) {
        if (!e.is_param) continue;
        Slot slot;
        slot.name = e.name;
        slot.param = e.tensor;
        slot.m.assign(static_cast<std::size_t>(e.tensor.numel()), 0.0f);
        slot.v.assign(static_cast<std::size_t>(e.tensor.numel()), 0.0f);
        slots_.push_back(std::move(slot));
    }
}

void AdamOptimizer::step() {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
    for (auto& slot : slots_) {
        if (!slot.param.has_grad()) {
            throw std::runtime_error("adam: parameter '" + slot.name + "' has no gradient");
        }
        const auto& g = slot.param.grad();
        auto& theta = slot.param.values();
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double gi = g[i];
            const double m = beta1_ * slot.m[i] + (1.0 - beta1_) * gi;
            const double v = beta2_ * slot.v[i] + (1.0 - beta2_) * gi * gi;
            slot.m[i] = static_cast<float>(m);
            slot.v[i] = static_cast<float>(v);
            const double m_hat = m / bc1;
            const double v_hat = v / bc2;
            theta[i] = static_cast<float>(theta[i] - lr_ * m_hat / (std::sqrt(v_hat) + epsilon_));
        }
    }
}

void AdamOptimizer::zero_grad() {
    for (auto& slot : slots_) slot.param.zero_grad();
}

// ------------------------------------------------------------------ checkpoints

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void append_model_meta(WeightArchive& archive, const ModelConfig& cfg) {
    archive.add_meta("model.preset", to_string(cfg.encoder_preset));
    archive.add_meta("model.variant", to_string(cfg.variant));
    archive.add_meta("model.reduction_channels", std::to_string(cfg.reduction_channels));
    archive.add_meta("model.patch_size", std::to_string(cfg.patch_size));
    archive.add_meta("model.attn_heads", std::to_string(cfg.attn_heads));
    archive.add_meta("model.transformer_layers", std::to_string(cfg.transformer_layers));
    archive.add_meta("model.token_dim", std::to_string(cfg.token_dim));
    archive.add_meta("model.ff_hidden", std::to_string(cfg.effective_ff_hidden()));
    archive.add_meta("model.positional_embedding", cfg.positional_embedding ? "1" : "0");
    archive.add_meta("model.train_height", std::to_string(cfg.effective_train_height()));
    archive.add_meta("model.train_width", std::to_string(cfg.effective_train_width()));
}

void append_train_meta(WeightArchive& archive, const TrainConfig& cfg) {
    archive.add_meta("train.learning_rate", fmt_double(cfg.learning_rate));
    archive.add_meta("train.batch_size", std::to_string(cfg.batch_size));
    archive.add_meta("train.max_steps", std::to_string(cfg.max_steps));
    archive.add_meta("train.beta1", fmt_double(cfg.beta1));
    archive.add_meta("train.beta2", fmt_double(cfg.beta2));
    archive.add_meta("train.epsilon", fmt_double(cfg.epsilon));
    archive.add_meta("train.seed", std::to_string(cfg.seed));
    archive.add_meta("train.augment", cfg.augment.to_string());
    archive.add_meta("train.checkpoint_interval", std::to_string(cfg.checkpoint_interval));
    archive.add_meta("train.val_interval", std::to_string(cfg.val_interval));
    archive.add_meta("train.bce_weight", fmt_double(cfg.bce_weight));
    archive.add_meta("train.dice_weight", fmt_double(cfg.dice_weight));
}

std::string meta_or(const WeightArchive& archive, const std::string& key, const std::string& fallback) {
    const std::string* v = archive.find_meta(key);
    return v ? *v : fallback;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const TransNetRModel& model,
                      const AdamOptimizer* optimizer, const TrainConfig& config, std::int64_t step) {
    WeightArchive archive = archive_from_registry(model.registry());
    append_model_meta(archive, model.config());
    append_train_meta(archive, config);
    archive.add_meta("step", std::to_string(step));
    if (optimizer != nullptr) {
        archive.add_meta("adam.t", std::to_string(optimizer->step_count()));
        for (const auto& slot : optimizer->slots()) {
            archive.add_tensor("adam.m." + slot.name, slot.param.shape(), slot.m);
            archive.add_tensor("adam.v." + slot.name, slot.param.shape(), slot.v);
        }
    }
    // training randomness is derived from (seed, step); that pair is the state
    const std::string rng_state =
        "counter seed=" + std::to_string(config.seed) + " step=" + std::to_string(step);
    archive.blobs.push_back(WeightArchive::BlobEntry{
        "rng_state", std::vector<std::uint8_t>(rng_state.begin(), rng_state.end())});
    save_archive(path, archive);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
    Checkpoint ck;
    ck.archive = load_archive(path);
    const auto& a = ck.archive;

    ck.model_config.encoder_preset = parse_preset(meta_or(a, "model.preset", "resnet50"));
    ck.model_config.variant = parse_variant(meta_or(a, "model.variant", "full"));
    ck.model_config.reduction_channels = std::stoi(meta_or(a, "model.reduction_channels", "64"));
    ck.model_config.patch_size = std::stoi(meta_or(a, "model.patch_size", "4"));
    ck.model_config.attn_heads = std::stoi(meta_or(a, "model.attn_heads", "4"));
    ck.model_config.transformer_layers = std::stoi(meta_or(a, "model.transformer_layers", "2"));
    ck.model_config.token_dim = std::stoi(meta_or(a, "model.token_dim", "128"));
    ck.model_config.ff_hidden = std::stoi(meta_or(a, "model.ff_hidden", "0"));
    ck.model_config.positional_embedding = meta_or(a, "model.positional_embedding", "1") == "1";
    ck.model_config.train_height = std::stoll(meta_or(a, "model.train_height", "0"));
    ck.model_config.train_width = std::stoll(meta_or(a, "model.train_width", "0"));

    ck.train_config.learning_rate = std::stod(meta_or(a, "train.learning_rate", "0.0001"));
    ck.train_config.batch_size = std::stoi(meta_or(a, "train.batch_size", "8"));
    ck.train_config.max_steps = std::stoll(meta_or(a, "train.max_steps", "500"));
    ck.train_config.beta1 = std::stod(meta_or(a, "train.beta1", "0.9"));
    ck.train_config.beta2 = std::stod(meta_or(a, "train.beta2", "0.999"));
    ck.train_config.epsilon = std::stod(meta_or(a, "train.epsilon", "1e-8"));
    ck.train_config.seed = std::stoull(meta_or(a, "train.seed", "42"));
    ck.train_config.augment = AugmentConfig::parse(meta_or(a, "train.augment", "none"));
    ck.train_config.checkpoint_interval = std::stoll(meta_or(a, "train.checkpoint_interval", "0"));
    ck.train_config.val_interval = std::stoll(meta_or(a, "train.val_interval", "0"));
    ck.train_config.bce_weight = std::stod(meta_or(a, "train.bce_weight", "1"));
    ck.train_config.dice_weight = std::stod(meta_or(a, "train.dice_weight", "1"));

    ck.step = std::stoll(meta_or(a, "step", "0"));
    ck.has_optimizer = a.find_meta("adam.t") != nullptr;
    return ck;
}

TransNetRModel Checkpoint::instantiate_model() const {
    TransNetRModel model = build_model(model_config, 0);
    restore_into(model);
    return model;
}

void Checkpoint::restore_into(TransNetRModel& model) const {
    apply_archive_to_registry(archive, model.registry(), true, "adam.");
}

void Checkpoint::restore_optimizer(AdamOptimizer& optimizer) const {
    if (!has_optimizer) {
        throw std::runtime_error("checkpoint carries no optimizer state");
    }
    for (auto& slot : optimizer.slots()) {
        const auto* m = archive.find_tensor("adam.m." + slot.name);
        const auto* v = archive.find_tensor("adam.v." + slot.name);
        if (m == nullptr || v == nullptr) {
            throw std::runtime_error("checkpoint is missing optimizer state for '" + slot.name + "'");
        }
        if (m->shape != slot.param.shape() || v->shape != slot.param.shape()) {
            throw std::runtime_error("optimizer state shape mismatch for '" + slot.name + "'");
        }
        slot.m = m->data;
        slot.v = v->data;
    }
    optimizer.set_step_count(std::stoll(*archive.find_meta("adam.t")));
}

// ------------------------------------------------------------------ loop

namespace {
constexpr std::uint64_t kEpochStream = 0xE70Cu;
constexpr std::uint64_t kStepStream = 0x57E9u;
}  // namespace

TrainResult train(TransNetRModel& model, const DatasetManifest& data, const TrainConfig& config,
                  AdamOptimizer& optimizer, std::int64_t start_step, const TrainHooks& hooks) {
    config.validate();
    if (data.records.empty()) throw std::invalid_argument("train: dataset is empty");

    const std::int64_t h = model.config().effective_train_height();
    const std::int64_t w = model.config().effective_train_width();
    const std::int64_t n = static_cast<std::int64_t>(data.records.size());
    const std::int64_t batch = std::min<std::int64_t>(config.batch_size, n);
    const std::int64_t steps_per_epoch = std::max<std::int64_t>(1, n / batch);

    TrainResult result;
    for (std::int64_t step = start_step + 1; step <= config.max_steps; ++step) {
        const std::int64_t epoch = (step - 1) / steps_per_epoch;
        const std::int64_t slot = (step - 1) % steps_per_epoch;

        auto perm = identity_permutation(static_cast<std::size_t>(n));
        Rng perm_rng = Rng::derive(config.seed, kEpochStream, static_cast<std::uint64_t>(epoch));
        perm_rng.shuffle(perm);
        Rng aug_rng = Rng::derive(config.seed, kStepStream, static_cast<std::uint64_t>(step));

        std::vector<float> images(static_cast<std::size_t>(batch * 3 * h * w));
        std::vector<float> masks(static_cast<std::size_t>(batch * h * w));
        for (std::int64_t i = 0; i < batch; ++i) {
            const std::size_t idx = perm[static_cast<std::size_t>(slot * batch + i)];
            Sample sample = load_sample(data.records[idx], h, w);
            SamplePair pair{sample.image, sample.mask};
            if (config.augment.any()) pair = augment(pair, config.augment, aug_rng);
            std::copy(pair.image.values().begin(), pair.image.values().end(),
                      images.begin() + i * 3 * h * w);
            std::copy(pair.mask.values().begin(), pair.mask.values().end(),
                      masks.begin() + i * h * w);
        }
        auto batch_images = Tensor::from_vector({batch, 3, h, w}, std::move(images));
        auto batch_masks = Tensor::from_vector({batch, 1, h, w}, std::move(masks));

        double loss_value = 0;
        try {
            Tape tape;
            auto pred = model.forward(batch_images, true);
            auto loss = bce_dice_loss(pred, batch_masks, static_cast<float>(config.bce_weight),
                                      static_cast<float>(config.dice_weight));
            loss_value = loss.item();
            if (!std::isfinite(loss_value)) {
                throw std::runtime_error("loss is not finite");
            }
            tape.backward(loss);
        } catch (const std::exception& e) {
            throw std::runtime_error("training aborted at step " + std::to_string(step) + ": " +
                                     e.what());
        }
        optimizer.step();
        optimizer.zero_grad();

        result.loss_history.emplace_back(step, loss_value);
        if (hooks.on_step) hooks.on_step(step, loss_value);
        const bool at_cadence =
            config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0;
        if (hooks.on_checkpoint && (at_cadence || step == config.max_steps)) {
            hooks.on_checkpoint(step);
        }
        if (hooks.on_validate && config.val_interval > 0 &&
            (step % config.val_interval == 0 || step == config.max_steps)) {
            hooks.on_validate(step);
        }
    }
    result.final_step = config.max_steps;
    return result;
}

}  // namespace transnetr
