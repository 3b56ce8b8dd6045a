#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "oracles.hpp"
#include "transnetr/gradcheck.hpp"
#include "transnetr/metrics.hpp"
#include "transnetr/train.hpp"

using namespace transnetr;
namespace fs = std::filesystem;
using TensorD = TensorT<double>;

namespace {

fs::path fresh_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
}

Tensor random_target(Rng& rng, Shape shape) {
    std::vector<float> data(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : data) v = rng.bernoulli(0.4) ? 1.0f : 0.0f;
    return Tensor::from_vector(std::move(shape), std::move(data));
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.encoder_preset = EncoderPreset::Tiny;
    return cfg;
}

}  // namespace

// ------------------------------------------------------------------ loss

TEST_CASE("bce_dice_loss: pred = 0.5 everywhere makes the BCE term exactly ln 2") {
    Rng rng(1);
    auto pred = Tensor::full({2, 1, 4, 4}, 0.5f);
    auto target = random_target(rng, {2, 1, 4, 4});
    auto bce_only = bce_dice_loss(pred, target, 1.0f, 0.0f);
    CHECK(bce_only.item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("bce_dice_loss: near-perfect prediction drives the dice term below 1e-3") {
    auto target = Tensor::full({1, 1, 64, 64}, 1.0f);
    auto pred = Tensor::full({1, 1, 64, 64}, 1.0f - 1e-6f);
    auto dice_only = bce_dice_loss(pred, target, 0.0f, 1.0f);
    CHECK(dice_only.item() < 1e-3f);
    CHECK(dice_only.item() >= 0.0f);
}

TEST_CASE("bce_dice_loss matches a pixel-by-pixel scalar recomputation") {
    Rng rng(3);
    const std::int64_t n = 2, h = 6, w = 5;
    std::vector<float> pv(static_cast<std::size_t>(n * h * w));
    for (auto& v : pv) v = static_cast<float>(rng.uniform(0.02, 0.98));
    auto pred = Tensor::from_vector({n, 1, h, w}, pv);
    auto target = random_target(rng, {n, 1, h, w});

    double bce = 0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double p = std::clamp(static_cast<double>(pv[i]), 1e-7, 1.0 - 1e-7);
        const double t = target.values()[i];
        bce -= t * std::log(p) + (1 - t) * std::log(1 - p);
    }
    bce /= static_cast<double>(pv.size());
    double dice_sum = 0;
    for (std::int64_t b = 0; b < n; ++b) {
        double inter = 0, ps = 0, ts = 0;
        for (std::int64_t i = 0; i < h * w; ++i) {
            const double p = pv[static_cast<std::size_t>(b * h * w + i)];
            const double t = target.values()[static_cast<std::size_t>(b * h * w + i)];
            inter += p * t;
            ps += p;
            ts += t;
        }
        dice_sum += (2 * inter + 1) / (ps + ts + 1);
    }
    const double expect = bce + (1.0 - dice_sum / n);

    auto loss = bce_dice_loss(pred, target);
    CHECK(loss.item() == doctest::Approx(expect).epsilon(1e-5));
}

TEST_CASE("bce_dice_loss: validation") {
    auto pred = Tensor::full({1, 1, 2, 2}, 0.5f);
    CHECK_THROWS_AS(bce_dice_loss(pred, Tensor::full({1, 1, 2, 3}, 1.0f)), std::invalid_argument);
    CHECK_THROWS_WITH_AS(bce_dice_loss(pred, Tensor::full({1, 1, 2, 2}, 0.5f)),
                         doctest::Contains("binary"), std::invalid_argument);
}

TEST_CASE("bce_dice_loss gradient matches finite differences on 1x1x8x8") {
    Rng rng(5);
    std::vector<double> pv(64);
    for (auto& v : pv) v = rng.uniform(0.05, 0.95);
    auto pred = TensorD::from_vector({1, 1, 8, 8}, pv);
    std::vector<double> tv(64);
    for (auto& v : tv) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    auto target = TensorD::from_vector({1, 1, 8, 8}, tv);

    auto err = finite_diff_check<double>(
        [&](const TensorD& p) { return bce_dice_loss(p, target); }, pred, 1e-6);
    CHECK(err <= 1e-4);
}

TEST_CASE("loss positivity and approach to zero") {
    Rng rng(7);
    auto target = random_target(rng, {1, 1, 8, 8});
    auto far = bce_dice_loss(Tensor::full({1, 1, 8, 8}, 0.5f), target);
    CHECK(far.item() > 0.0f);

    std::vector<float> close(64);
    for (std::size_t i = 0; i < 64; ++i) {
        close[i] = target.values()[i] == 1.0f ? 1.0f - 1e-6f : 1e-6f;
    }
    auto near = bce_dice_loss(Tensor::from_vector({1, 1, 8, 8}, std::move(close)), target);
    CHECK(near.item() < 0.01f);
    CHECK(near.item() >= 0.0f);
    CHECK(near.item() < far.item());
}

// ------------------------------------------------------------------ adam

TEST_CASE("adam: first-step magnitude is ~lr for unit gradient") {
    ParamRegistry reg;
    auto theta = Tensor::zeros({1}, true);
    reg.add_param("theta", theta);
    AdamOptimizer opt(reg, 1e-4);
    {
        Tape tape;
        tape.backward(sum_all(theta));  // d(loss)/d(theta) = 1
    }
    opt.step();
    CHECK(opt.step_count() == 1);
    CHECK(theta.values()[0] == doctest::Approx(-1e-4).epsilon(1e-6));
}

TEST_CASE("adam: zero gradient leaves parameters unchanged but advances t") {
    ParamRegistry reg;
    auto theta = Tensor::from_vector({3}, {1.0f, -2.0f, 3.0f}, true);
    reg.add_param("theta", theta);
    AdamOptimizer opt(reg, 1e-2);
    {
        Tape tape;
        tape.backward(scale(sum_all(theta), 0.0f));  // gradient identically zero
    }
    opt.step();
    CHECK(opt.step_count() == 1);
    CHECK(theta.values() == std::vector<float>{1.0f, -2.0f, 3.0f});
}

TEST_CASE("adam: missing gradient is an error naming the parameter") {
    ParamRegistry reg;
    auto theta = Tensor::zeros({2}, true);
    reg.add_param("decoder1.inner.res.conv1.conv.weight", theta);
    AdamOptimizer opt(reg, 1e-3);
    CHECK_THROWS_WITH_AS(opt.step(), doctest::Contains("decoder1.inner.res.conv1.conv.weight"),
                         std::runtime_error);
}

TEST_CASE("adam: identical runs from equal state give identical parameters") {
    auto run = [] {
        ParamRegistry reg;
        auto theta = Tensor::from_vector({4}, {0.3f, -0.2f, 0.9f, 0.05f}, true);
        reg.add_param("theta", theta);
        AdamOptimizer opt(reg, 3e-3);
        for (int k = 0; k < 5; ++k) {
            Tape tape;
            tape.backward(sum_all(mul(theta, theta)));
            opt.step();
            opt.zero_grad();
        }
        return theta.values();
    };
    CHECK(run() == run());
}

// ------------------------------------------------------------------ augmentation

TEST_CASE("augmentation: disabled set is the identity") {
    Rng data_rng(11), aug_rng(12);
    SamplePair s{oracle::random_tensor<float>(data_rng, {1, 3, 8, 8}, 0.0, 1.0),
                 random_target(data_rng, {1, 1, 8, 8})};
    auto out = augment(s, AugmentConfig::none(), aug_rng);
    CHECK(out.image.values() == s.image.values());
    CHECK(out.mask.values() == s.mask.values());
}

TEST_CASE("augmentation: flips are involutions and preserve alignment") {
    Rng rng(13);
    SamplePair s{oracle::random_tensor<float>(rng, {1, 3, 6, 6}, 0.0, 1.0),
                 random_target(rng, {1, 1, 6, 6})};
    auto twice_h = flip_horizontal(flip_horizontal(s));
    CHECK(twice_h.image.values() == s.image.values());
    CHECK(twice_h.mask.values() == s.mask.values());
    auto twice_v = flip_vertical(flip_vertical(s));
    CHECK(twice_v.image.values() == s.image.values());

    // alignment: mask == thresholded channel 0 survives geometric transforms
    std::vector<float> img(3 * 36);
    std::vector<float> mask(36);
    for (std::size_t i = 0; i < 36; ++i) {
        const bool fg = rng.bernoulli(0.5);
        img[i] = fg ? 0.9f : 0.1f;
        img[36 + i] = 0.5f;
        img[72 + i] = 0.5f;
        mask[i] = fg ? 1.0f : 0.0f;
    }
    SamplePair aligned{Tensor::from_vector({1, 3, 6, 6}, std::move(img)),
                       Tensor::from_vector({1, 1, 6, 6}, std::move(mask))};
    for (auto* fn : {&flip_horizontal, &flip_vertical}) {
        auto out = (*fn)(aligned);
        for (std::size_t i = 0; i < 36; ++i) {
            CHECK(out.mask.values()[i] == (out.image.values()[i] > 0.5f ? 1.0f : 0.0f));
        }
    }
    for (int k : {1, 2, 3}) {
        auto out = rotate_quarter(aligned, k);
        for (std::size_t i = 0; i < 36; ++i) {
            CHECK(out.mask.values()[i] == (out.image.values()[i] > 0.5f ? 1.0f : 0.0f));
        }
    }
}

TEST_CASE("augmentation: rotations compose to identity after four quarters") {
    Rng rng(17);
    SamplePair s{oracle::random_tensor<float>(rng, {1, 3, 5, 5}, 0.0, 1.0),
                 random_target(rng, {1, 1, 5, 5})};
    auto once = rotate_quarter(s, 1);
    auto full = rotate_quarter(once, 3);
    CHECK(full.image.values() == s.image.values());
    CHECK(full.mask.values() == s.mask.values());
}

TEST_CASE("augmentation: foreground count moves only via cropping, never via jitter") {
    Rng rng(19);
    SamplePair s{oracle::random_tensor<float>(rng, {1, 3, 16, 16}, 0.0, 1.0),
                 random_target(rng, {1, 1, 16, 16})};
    auto count = [](const Tensor& m) {
        std::int64_t c = 0;
        for (float v : m.values()) c += v == 1.0f;
        return c;
    };
    const auto base = count(s.mask);

    CHECK(count(flip_horizontal(s).mask) == base);
    CHECK(count(flip_vertical(s).mask) == base);
    CHECK(count(rotate_quarter(s, 1).mask) == base);
    CHECK(count(rotate_quarter(s, 2).mask) == base);

    auto jittered = s;
    jittered.image = adjust_brightness_contrast(s.image, 1.2, -0.1);
    CHECK(jittered.image.values() != s.image.values());
    CHECK(count(jittered.mask) == base);  // mask untouched

    auto cropped = crop_resize(s, 0.8, 0.3, 0.7);
    for (float v : cropped.mask.values()) CHECK((v == 0.0f || v == 1.0f));
    CHECK(cropped.mask.shape() == s.mask.shape());
}

TEST_CASE("augmentation draws are deterministic in (seed, step)") {
    Rng data_rng(23);
    SamplePair s{oracle::random_tensor<float>(data_rng, {1, 3, 8, 8}, 0.0, 1.0),
                 random_target(data_rng, {1, 1, 8, 8})};
    auto cfg = AugmentConfig::all();
    Rng a = Rng::derive(9, 0x57E9u, 3);
    Rng b = Rng::derive(9, 0x57E9u, 3);
    auto out_a = augment(s, cfg, a);
    auto out_b = augment(s, cfg, b);
    CHECK(out_a.image.values() == out_b.image.values());
    CHECK(out_a.mask.values() == out_b.mask.values());
}

TEST_CASE("augment config string round trip") {
    CHECK(AugmentConfig::none().to_string() == "none");
    CHECK(AugmentConfig::all().to_string() == "hflip,vflip,rot90,crop,jitter");
    auto cfg = AugmentConfig::parse("hflip,crop");
    CHECK(cfg.hflip);
    CHECK(cfg.crop);
    CHECK_FALSE(cfg.vflip);
    CHECK(AugmentConfig::parse(cfg.to_string()).to_string() == cfg.to_string());
    CHECK_THROWS_AS(AugmentConfig::parse("zoom"), std::invalid_argument);
}

// ------------------------------------------------------------------ checkpoints

TEST_CASE("checkpoint: save -> load -> save is byte-identical") {
    auto dir = fresh_dir("transnetr_ckpt_roundtrip");
    auto model = build_model(tiny_config(), 3);
    AdamOptimizer opt(model.registry(), 1e-4);
    TrainConfig cfg;
    cfg.seed = 77;

    const auto p1 = dir / "ck1.tnr";
    const auto p2 = dir / "ck2.tnr";
    write_checkpoint(p1, model, &opt, cfg, 12);

    auto loaded = Checkpoint::load(p1);
    CHECK(loaded.step == 12);
    CHECK(loaded.has_optimizer);
    CHECK(loaded.train_config.seed == 77);
    CHECK(loaded.model_config.encoder_preset == EncoderPreset::Tiny);

    auto model2 = loaded.instantiate_model();
    AdamOptimizer opt2(model2.registry(), loaded.train_config.learning_rate);
    loaded.restore_optimizer(opt2);
    write_checkpoint(p2, model2, &opt2, loaded.train_config, loaded.step);
    CHECK(read_bytes(p1) == read_bytes(p2));
}

TEST_CASE("checkpoint: wrong-preset load is rejected naming the tensor") {
    auto dir = fresh_dir("transnetr_ckpt_mismatch");
    auto tiny = build_model(tiny_config(), 3);
    TrainConfig cfg;
    write_checkpoint(dir / "tiny.tnr", tiny, nullptr, cfg, 1);

    auto loaded = Checkpoint::load(dir / "tiny.tnr");
    auto big = build_model(ModelConfig{}, 3);
    CHECK_THROWS_WITH_AS(loaded.restore_into(big), doctest::Contains("encoder.stem.conv.weight"),
                         std::runtime_error);
}

TEST_CASE("checkpoint: truncation fails the integrity check") {
    auto dir = fresh_dir("transnetr_ckpt_trunc");
    auto model = build_model(tiny_config(), 3);
    TrainConfig cfg;
    write_checkpoint(dir / "full.tnr", model, nullptr, cfg, 1);
    auto bytes = read_bytes(dir / "full.tnr");
    std::ofstream out(dir / "cut.tnr", std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size() / 2));
    out.close();
    CHECK_THROWS_AS(Checkpoint::load(dir / "cut.tnr"), std::runtime_error);
}

// ------------------------------------------------------------------ training loop

TEST_CASE("train: deterministic history, finite losses, resume is bit-exact") {
    auto dir = fresh_dir("transnetr_train_loop");
    SynthConfig synth;
    synth.n = 6;
    synth.size = 64;
    synth.seed = 5;
    auto data = synth_dataset(synth, dir / "data");

    TrainConfig cfg;
    cfg.batch_size = 3;
    cfg.max_steps = 10;
    cfg.seed = 31;
    cfg.augment = AugmentConfig::all();
    cfg.checkpoint_interval = 5;

    auto run_full = [&](const fs::path& ckpt_dir) {
        auto model = build_model(tiny_config(), 11);
        AdamOptimizer opt(model.registry(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
        TrainHooks hooks;
        hooks.on_checkpoint = [&](std::int64_t step) {
            write_checkpoint(ckpt_dir / ("ck_" + std::to_string(step) + ".tnr"), model, &opt, cfg,
                             step);
        };
        auto result = train(model, data, cfg, opt, 0, hooks);
        return std::make_pair(std::move(model), std::move(result));
    };

    fs::create_directories(dir / "a");
    fs::create_directories(dir / "b");
    auto [model_a, result_a] = run_full(dir / "a");
    auto [model_b, result_b] = run_full(dir / "b");

    REQUIRE(result_a.loss_history.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(std::isfinite(result_a.loss_history[i].second));
        CHECK(result_a.loss_history[i] == result_b.loss_history[i]);
    }
    CHECK(read_bytes(dir / "a" / "ck_10.tnr") == read_bytes(dir / "b" / "ck_10.tnr"));

    // resume from the mid-run checkpoint and land on the identical final state
    auto mid = Checkpoint::load(dir / "a" / "ck_5.tnr");
    auto resumed = mid.instantiate_model();
    AdamOptimizer opt_resumed(resumed.registry(), cfg.learning_rate, cfg.beta1, cfg.beta2,
                              cfg.epsilon);
    mid.restore_optimizer(opt_resumed);
    TrainHooks hooks;
    fs::create_directories(dir / "c");
    hooks.on_checkpoint = [&](std::int64_t step) {
        write_checkpoint(dir / "c" / ("ck_" + std::to_string(step) + ".tnr"), resumed, &opt_resumed,
                         cfg, step);
    };
    auto result_c = train(resumed, data, cfg, opt_resumed, mid.step, hooks);
    REQUIRE(result_c.loss_history.size() == 5);  // steps 6..10
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(result_c.loss_history[i] == result_a.loss_history[i + 5]);
    }
    CHECK(read_bytes(dir / "c" / "ck_10.tnr") == read_bytes(dir / "a" / "ck_10.tnr"));
}

TEST_CASE("train: empty dataset and bad configs are rejected") {
    auto model = build_model(tiny_config(), 1);
    AdamOptimizer opt(model.registry(), 1e-4);
    DatasetManifest empty;
    TrainConfig cfg;
    CHECK_THROWS_AS(train(model, empty, cfg, opt), std::invalid_argument);

    cfg.learning_rate = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.learning_rate = 1e-4;
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
