#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "transnetr/data.hpp"
#include "transnetr/model.hpp"
#include "transnetr/tensor.hpp"
#include "transnetr/weights.hpp"

namespace transnetr {

struct AugmentConfig {
    bool hflip = false;
    bool vflip = false;
    bool rotate90 = false;  // 90/180/270 quarter turns
    bool crop = false;      // crop-and-resize, side scale in [0.8, 1.0]
    bool jitter = false;    // brightness/contrast +-20%, image only
    bool any() const { return hflip || vflip || rotate90 || crop || jitter; }

    static AugmentConfig all() { return {true, true, true, true, true}; }
    static AugmentConfig none() { return {}; }

    std::string to_string() const;               // comma list, "none" when empty
    static AugmentConfig parse(const std::string& spec);
};

struct TrainConfig {
    double learning_rate = 1e-4;
    int batch_size = 8;
    std::int64_t max_steps = 500;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 42;
    AugmentConfig augment;
    std::int64_t checkpoint_interval = 0;  // 0 = final checkpoint only
    std::int64_t val_interval = 0;         // 0 = no validation passes
    double bce_weight = 1.0;
    double dice_weight = 1.0;

    void validate() const;
};

// Mean binary cross-entropy over all pixels (predictions clamped to
// [1e-7, 1-1e-7]) plus the batch-mean soft dice loss with smoothing 1,
// combined as bce_w * BCE + dice_w * (1 - dice).
template <class T>
TensorT<T> bce_dice_loss(const TensorT<T>& pred, const TensorT<T>& target, T bce_weight = T(1),
                         T dice_weight = T(1));

// ------------------------------------------------------------------ augmentation

// Geometric transforms are applied identically to image (1x3xHxW) and mask
// (1x1xHxW); photometric jitter touches the image only. Masks stay binary.
struct SamplePair {
    Tensor image;
    Tensor mask;
};

SamplePair flip_horizontal(const SamplePair& s);
SamplePair flip_vertical(const SamplePair& s);
SamplePair rotate_quarter(const SamplePair& s, int quarter_turns);  // 1, 2 or 3
SamplePair crop_resize(const SamplePair& s, double side_scale, double frac_y, double frac_x);
Tensor adjust_brightness_contrast(const Tensor& image, double contrast, double brightness);

SamplePair augment(const SamplePair& sample, const AugmentConfig& config, Rng& rng);

// ------------------------------------------------------------------ optimizer

class AdamOptimizer {
public:
    AdamOptimizer(ParamRegistry& registry, double lr, double beta1 = 0.9, double beta2 = 0.999,
                  double epsilon = 1e-8);

    // Bias-corrected Adam update, in place. Every parameter must carry a
    // populated gradient; a missing one is an error naming the parameter.
    void step();
    void zero_grad();

    std::int64_t step_count() const { return step_count_; }

    struct Slot {
        std::string name;
        Tensor param;
        std::vector<float> m, v;
    };
    std::vector<Slot>& slots() { return slots_; }
    const std::vector<Slot>& slots() const { return slots_; }
    void set_step_count(std::int64_t t) { step_count_ = t; }

private:
    std::vector<Slot> slots_;
    double lr_, beta1_, beta2_, epsilon_;
    std::int64_t step_count_ = 0;
};

// ------------------------------------------------------------------ checkpoints

// A checkpoint is a weight archive extended with optimizer moments (under
// the reserved "adam." prefix), the step counter, a config echo and the RNG
// state. Training randomness is counter-derived from (seed, step), so the
// serialized RNG state is exactly that pair.
void write_checkpoint(const std::filesystem::path& path, const TransNetRModel& model,
                      const AdamOptimizer* optimizer, const TrainConfig& config, std::int64_t step);

struct Checkpoint {
    ModelConfig model_config;
    TrainConfig train_config;
    std::int64_t step = 0;
    bool has_optimizer = false;
    WeightArchive archive;

    static Checkpoint load(const std::filesystem::path& path);

    TransNetRModel instantiate_model() const;          // build + restore all tensors
    void restore_into(TransNetRModel& model) const;    // same-architecture restore
    void restore_optimizer(AdamOptimizer& optimizer) const;
};

// ------------------------------------------------------------------ loop

struct TrainHooks {
    std::function<void(std::int64_t step, double loss)> on_step;
    std::function<void(std::int64_t step)> on_checkpoint;  // fired at the configured cadence
    std::function<void(std::int64_t step)> on_validate;
};

struct TrainResult {
    std::vector<std::pair<std::int64_t, double>> loss_history;  // (step, loss), 1-based steps
    std::int64_t final_step = 0;
};

// Shuffled mini-batches (drop-last), augment -> forward -> bce_dice_loss ->
// backward -> adam step. Batch norm runs in train mode. The permutation of
// epoch e and the augmentation draws of step s depend only on (seed, e) and
// (seed, s), so a run resumed from a checkpoint replays the original stream.
// Aborts with a diagnostic naming the step if the loss turns non-finite.
TrainResult train(TransNetRModel& model, const DatasetManifest& data, const TrainConfig& config,
                  AdamOptimizer& optimizer, std::int64_t start_step = 0,
                  const TrainHooks& hooks = {});

}  // namespace transnetr
