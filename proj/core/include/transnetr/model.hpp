#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "transnetr/nn_ops.hpp"
#include "transnetr/rng.hpp"
#include "transnetr/tensor.hpp"

namespace transnetr {

enum class EncoderPreset { ResNet50, Tiny };
enum class Variant { Full, NoRT, ResidualOnly };

std::string to_string(EncoderPreset preset);
std::string to_string(Variant variant);
EncoderPreset parse_preset(const std::string& name);
Variant parse_variant(const std::string& name);

// Table-style labels for the three variants (ablation reports).
std::string variant_label(Variant variant);

struct ModelConfig {
    EncoderPreset encoder_preset = EncoderPreset::ResNet50;
    Variant variant = Variant::Full;
    int reduction_channels = 64;
    int patch_size = 4;
    int attn_heads = 4;
    int transformer_layers = 2;
    int token_dim = 128;
    int ff_hidden = 0;       // 0 -> 2 * token_dim
    bool positional_embedding = true;
    std::int64_t train_height = 0;  // 0 -> preset default (256 full scale, 64 desk scale)
    std::int64_t train_width = 0;

    int effective_ff_hidden() const { return ff_hidden > 0 ? ff_hidden : 2 * token_dim; }
    std::int64_t effective_train_height() const;
    std::int64_t effective_train_width() const;

    void validate() const;  // throws std::invalid_argument naming the violated constraint
};

// Ordered name -> tensor map over everything the model owns. Parameters are
// trainable; buffers (batch-norm running statistics) are persistent state
// that is serialized but not optimized.
struct ParamRegistry {
    struct Entry {
        std::string name;
        Tensor tensor;
        bool is_param;
    };
    std::vector<Entry> entries;

    void add_param(std::string name, const Tensor& t);
    void add_buffer(std::string name, const Tensor& t);
    const Entry* find(const std::string& name) const;
    std::int64_t parameter_count() const;
};

// ----------------------------------------------------------------- layers

struct Conv2dLayer {
    Tensor weight;
    Tensor bias;  // undefined when the layer has none
    int stride = 1;
    int padding = 0;
    Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
    void register_into(ParamRegistry& reg, const std::string& prefix) const;
};

struct BatchNorm2dLayer {
    Tensor scale, shift, running_mean, running_var;
    Tensor forward(const Tensor& x, bool training) {
        return batchnorm2d(x, scale, shift, running_mean, running_var, training);
    }
    void register_into(ParamRegistry& reg, const std::string& prefix) const;
};

struct ConvBn {
    Conv2dLayer conv;
    BatchNorm2dLayer bn;
    Tensor forward(const Tensor& x, bool training) { return bn.forward(conv.forward(x), training); }
    void register_into(ParamRegistry& reg, const std::string& prefix) const;
};

struct LinearLayer {
    Tensor weight, bias;
    Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }
    void register_into(ParamRegistry& reg, const std::string& prefix) const;
};

struct LayerNormLayer {
    Tensor scale, shift;
    Tensor forward(const Tensor& x) const { return layernorm(x, scale, shift); }
    void register_into(ParamRegistry& reg, const std::string& prefix) const;
};

Conv2dLayer make_conv2d_layer(Rng& rng, std::int64_t in_ch, std::int64_t out_ch, int kernel, int stride,
                              int padding, bool with_bias);
BatchNorm2dLayer make_batchnorm_layer(std::int64_t channels);
LinearLayer make_linear_layer(Rng& rng, std::int64_t in_dim, std::int64_t out_dim);
LayerNormLayer make_layernorm_layer(std::int64_t dim);

// ----------------------------------------------------------------- blocks

struct Bottleneck {
    ConvBn narrow;  // 1x1 to the stage width
    ConvBn center;  // 3x3, carries the stage stride
    ConvBn expand;  // 1x1 to the output width
    std::optional<ConvBn> shortcut;  // 1x1 projection when shape changes
    Tensor forward(const Tensor& x, bool training);
    void register_into(ParamRegistry& reg, const std::string& prefix) const;
};

struct Encoder {
    Conv2dLayer stem_conv;  // 7x7 stride 2
    BatchNorm2dLayer stem_bn;
    std::vector<Bottleneck> stage1, stage2, stage3;
    struct Taps {
        Tensor f1, f2, f3, f4;  // strides 2, 4, 8, 16
    };
    Taps forward(const Tensor& image, bool training);
    void register_into(ParamRegistry& reg, const std::string& prefix) const;
};

struct ResidualBlock {
    ConvBn conv1, conv2;             // both 3x3
    std::optional<ConvBn> shortcut;  // 1x1 when in/out channels differ
    Tensor forward(const Tensor& x, bool training);
    void register_into(ParamRegistry& reg, const std::string& prefix) const;
};

struct TransformerLayer {
    LayerNormLayer ln1, ln2;
    LinearLayer q, k, v, attn_out, ff1, ff2;
    int heads = 4;
    Tensor forward(const Tensor& tokens) const;
    void register_into(ParamRegistry& reg, const std::string& prefix) const;
};

// 1x1 conv reduction -> patch tokens -> transformer -> back to the grid ->
// 1x1 conv -> skip add with the block input -> residual block.
struct RTBlock {
    ConvBn proj;          // in -> rc
    LinearLayer embed;    // rc*p^2 -> token_dim
    Tensor pos;           // [grid_h0*grid_w0, token_dim]; undefined when disabled
    std::int64_t grid_h0 = 0, grid_w0 = 0;
    std::vector<TransformerLayer> layers;
    LinearLayer unembed;  // token_dim -> rc*p^2
    ConvBn out;           // rc -> in
    ResidualBlock res;    // in -> out_channels
    int patch = 4;
    Tensor forward(const Tensor& x, bool training);
    void register_into(ParamRegistry& reg, const std::string& prefix) const;
};

enum class DecoderInner { RT, Residual, PlainConv };

struct DecoderBlock {
    DecoderInner inner_kind = DecoderInner::Residual;
    std::optional<RTBlock> rt;
    std::optional<ResidualBlock> res;
    std::optional<ConvBn> plain;  // 3x3 conv + bn (+ leaky relu in forward)
    // upsample2x(deep) ++ skip on channels, then the inner block
    Tensor forward(const Tensor& deep, const Tensor& skip, bool training);
    void register_into(ParamRegistry& reg, const std::string& prefix) const;
};

// ----------------------------------------------------------------- model

class TransNetRModel {
public:
    Encoder encoder;
    std::array<ConvBn, 4> reduce;  // + leaky relu in forward
    std::array<DecoderBlock, 3> decoders;
    Conv2dLayer head;  // 1x1 -> 1 channel, with bias

    const ModelConfig& config() const { return config_; }
    ParamRegistry& registry() { return registry_; }
    const ParamRegistry& registry() const { return registry_; }

    // Rejects inputs whose size the decoder chain cannot carry.
    void validate_input(const Tensor& image) const;

    Tensor forward(const Tensor& image, bool training = false);

    struct StageTaps {
        std::array<Tensor, 4> reduced;
        std::array<Tensor, 3> decoded;
        Tensor output;
    };
    StageTaps forward_with_taps(const Tensor& image, bool training = false);

    std::int64_t parameter_count() const { return registry_.parameter_count(); }
    // (block name, trainable parameter count) in registry order.
    std::vector<std::pair<std::string, std::int64_t>> parameter_breakdown() const;

    // Channel-mean |activation| per tapped stage, min-max normalized to [0,1]
    // and bilinearly resized to the input resolution. Eval mode, no grads.
    std::vector<std::pair<std::string, Tensor>> feature_heatmaps(const Tensor& image);

    friend TransNetRModel build_model(const ModelConfig& config, std::uint64_t seed);

private:
    ModelConfig config_;
    ParamRegistry registry_;
};

TransNetRModel build_model(const ModelConfig& config, std::uint64_t seed);

// Analytic multiply-accumulate count for a single-image forward pass at the
// given resolution. Counts conv, linear and attention matmuls.
struct FlopReport {
    std::int64_t total = 0;
    std::vector<std::pair<std::string, std::int64_t>> per_block;
};
FlopReport count_flops(const TransNetRModel& model, std::int64_t height, std::int64_t width);

}  // namespace transnetr
