#include "transnetr/model.hpp"

#include <cmath>
#include <stdexcept>

namespace transnetr {

// ------------------------------------------------------------------ names

std::string to_string(EncoderPreset preset) {
    return preset == EncoderPreset::ResNet50 ? "resnet50" : "tiny";
}

std::string to_string(Variant variant) {
    switch (variant) {
        case Variant::Full: return "full";
        case Variant::NoRT: return "no_rt";
        case Variant::ResidualOnly: return "residual_only";
    }
    return "full";
}

EncoderPreset parse_preset(const std::string& name) {
    if (name == "resnet50") return EncoderPreset::ResNet50;
    if (name == "tiny") return EncoderPreset::Tiny;
    throw std::invalid_argument("unknown encoder preset '" + name + "' (expected resnet50 or tiny)");
}

Variant parse_variant(const std::string& name) {
    if (name == "full") return Variant::Full;
    if (name == "no_rt") return Variant::NoRT;
    if (name == "residual_only") return Variant::ResidualOnly;
    throw std::invalid_argument("unknown variant '" + name +
                                "' (expected full, no_rt or residual_only)");
}

std::string variant_label(Variant variant) {
    switch (variant) {
        case Variant::Full: return "TransNetR (Ours)";
        case Variant::NoRT: return "TransNetR without RT block";
        case Variant::ResidualOnly: return "TransNetR (RT block replaced with residual block)";
    }
    return "TransNetR (Ours)";
}

// ------------------------------------------------------------------ config

std::int64_t ModelConfig::effective_train_height() const {
    if (train_height > 0) return train_height;
    return encoder_preset == EncoderPreset::ResNet50 ? 256 : 64;
}

std::int64_t ModelConfig::effective_train_width() const {
    if (train_width > 0) return train_width;
    return encoder_preset == EncoderPreset::ResNet50 ? 256 : 64;
}

void ModelConfig::validate() const {
    if (reduction_channels < 1) throw std::invalid_argument("ModelConfig: reduction_channels must be >= 1");
    if (patch_size < 1) throw std::invalid_argument("ModelConfig: patch_size must be >= 1");
    if (attn_heads < 1) throw std::invalid_argument("ModelConfig: attn_heads must be >= 1");
    if (transformer_layers < 1) {
        throw std::invalid_argument("ModelConfig: transformer_layers must be >= 1");
    }
    if (token_dim < 1) throw std::invalid_argument("ModelConfig: token_dim must be >= 1");
    if (token_dim % attn_heads != 0) {
        throw std::invalid_argument("ModelConfig: token_dim (" + std::to_string(token_dim) +
                                    ") must be divisible by attn_heads (" + std::to_string(attn_heads) +
                                    ")");
    }
    const std::int64_t h = effective_train_height();
    const std::int64_t w = effective_train_width();
    if (h % 32 != 0 || w % 32 != 0) {
        throw std::invalid_argument("ModelConfig: train_resolution " + std::to_string(h) + "x" +
                                    std::to_string(w) + " must be divisible by 32");
    }
    if ((h / 8) % patch_size != 0 || (w / 8) % patch_size != 0) {
        throw std::invalid_argument(
            "ModelConfig: patch_size " + std::to_string(patch_size) +
            " must divide the decoder-stage spatial dims implied by train_resolution (" +
            std::to_string(h / 8) + "x" + std::to_string(w / 8) + " at the deepest decoder)");
    }
}

// ------------------------------------------------------------------ registry

void ParamRegistry::add_param(std::string name, const Tensor& t) {
    entries.push_back(Entry{std::move(name), t, true});
}

void ParamRegistry::add_buffer(std::string name, const Tensor& t) {
    entries.push_back(Entry{std::move(name), t, false});
}

const ParamRegistry::Entry* ParamRegistry::find(const std::string& name) const {
    for (const auto& e : entries) {
        if (e.name == name) return &e;
    }
    return nullptr;
}

std::int64_t ParamRegistry::parameter_count() const {
    std::int64_t total = 0;
    for (const auto& e : entries) {
        if (e.is_param) total += e.tensor.numel();
    }
    return total;
}

// ------------------------------------------------------------------ layer builders

Conv2dLayer make_conv2d_layer(Rng& rng, std::int64_t in_ch, std::int64_t out_ch, int kernel, int stride,
                              int padding, bool with_bias) {
    const std::int64_t fan_in = in_ch * kernel * kernel;
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<float> w(static_cast<std::size_t>(out_ch * in_ch * kernel * kernel));
    for (auto& v : w) v = static_cast<float>(rng.normal(0.0, stddev));
    Conv2dLayer layer;
    layer.weight = Tensor::from_vector({out_ch, in_ch, kernel, kernel}, std::move(w), true);
    if (with_bias) layer.bias = Tensor::zeros({out_ch}, true);
    layer.stride = stride;
    layer.padding = padding;
    return layer;
}

BatchNorm2dLayer make_batchnorm_layer(std::int64_t channels) {
    BatchNorm2dLayer layer;
    layer.scale = Tensor::full({channels}, 1.0f, true);
    layer.shift = Tensor::zeros({channels}, true);
    layer.running_mean = Tensor::zeros({channels});
    layer.running_var = Tensor::full({channels}, 1.0f);
    return layer;
}

LinearLayer make_linear_layer(Rng& rng, std::int64_t in_dim, std::int64_t out_dim) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
    std::vector<float> w(static_cast<std::size_t>(out_dim * in_dim));
    for (auto& v : w) v = static_cast<float>(rng.uniform(-bound, bound));
    std::vector<float> b(static_cast<std::size_t>(out_dim));
    for (auto& v : b) v = static_cast<float>(rng.uniform(-bound, bound));
    LinearLayer layer;
    layer.weight = Tensor::from_vector({out_dim, in_dim}, std::move(w), true);
    layer.bias = Tensor::from_vector({out_dim}, std::move(b), true);
    return layer;
}

LayerNormLayer make_layernorm_layer(std::int64_t dim) {
    LayerNormLayer layer;
    layer.scale = Tensor::full({dim}, 1.0f, true);
    layer.shift = Tensor::zeros({dim}, true);
    return layer;
}

namespace {

ConvBn make_conv_bn(Rng& rng, std::int64_t in_ch, std::int64_t out_ch, int kernel, int stride,
                    int padding) {
    // no conv bias: the batch-norm shift absorbs it
    return ConvBn{make_conv2d_layer(rng, in_ch, out_ch, kernel, stride, padding, false),
                  make_batchnorm_layer(out_ch)};
}

constexpr float kLeakySlope = 0.01f;

Tensor leaky(const Tensor& x) { return activation(x, Activation::LeakyRelu, kLeakySlope); }
Tensor relu(const Tensor& x) { return activation(x, Activation::Relu); }

}  // namespace

// ------------------------------------------------------------------ register_into

void Conv2dLayer::register_into(ParamRegistry& reg, const std::string& prefix) const {
    reg.add_param(prefix + ".weight", weight);
    if (bias.defined()) reg.add_param(prefix + ".bias", bias);
}

void BatchNorm2dLayer::register_into(ParamRegistry& reg, const std::string& prefix) const {
    reg.add_param(prefix + ".scale", scale);
    reg.add_param(prefix + ".shift", shift);
    reg.add_buffer(prefix + ".running_mean", running_mean);
    reg.add_buffer(prefix + ".running_var", running_var);
}

void ConvBn::register_into(ParamRegistry& reg, const std::string& prefix) const {
    conv.register_into(reg, prefix + ".conv");
    bn.register_into(reg, prefix + ".bn");
}

void LinearLayer::register_into(ParamRegistry& reg, const std::string& prefix) const {
    reg.add_param(prefix + ".weight", weight);
    reg.add_param(prefix + ".bias", bias);
}

void LayerNormLayer::register_into(ParamRegistry& reg, const std::string& prefix) const {
    reg.add_param(prefix + ".scale", scale);
    reg.add_param(prefix + ".shift", shift);
}

void Bottleneck::register_into(ParamRegistry& reg, const std::string& prefix) const {
    narrow.register_into(reg, prefix + ".narrow");
    center.register_into(reg, prefix + ".center");
    expand.register_into(reg, prefix + ".expand");
    if (shortcut) shortcut->register_into(reg, prefix + ".shortcut");
}

void Encoder::register_into(ParamRegistry& reg, const std::string& prefix) const {
    stem_conv.register_into(reg, prefix + ".stem.conv");
    stem_bn.register_into(reg, prefix + ".stem.bn");
    const std::vector<const std::vector<Bottleneck>*> stages = {&stage1, &stage2, &stage3};
    for (std::size_t s = 0; s < stages.size(); ++s) {
        for (std::size_t b = 0; b < stages[s]->size(); ++b) {
            (*stages[s])[b].register_into(
                reg, prefix + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(b));
        }
    }
}

void ResidualBlock::register_into(ParamRegistry& reg, const std::string& prefix) const {
    conv1.register_into(reg, prefix + ".conv1");
    conv2.register_into(reg, prefix + ".conv2");
    if (shortcut) shortcut->register_into(reg, prefix + ".shortcut");
}

void TransformerLayer::register_into(ParamRegistry& reg, const std::string& prefix) const {
    ln1.register_into(reg, prefix + ".ln1");
    q.register_into(reg, prefix + ".q");
    k.register_into(reg, prefix + ".k");
    v.register_into(reg, prefix + ".v");
    attn_out.register_into(reg, prefix + ".attn_out");
    ln2.register_into(reg, prefix + ".ln2");
    ff1.register_into(reg, prefix + ".ff1");
    ff2.register_into(reg, prefix + ".ff2");
}

void RTBlock::register_into(ParamRegistry& reg, const std::string& prefix) const {
    proj.register_into(reg, prefix + ".proj");
    embed.register_into(reg, prefix + ".embed");
    if (pos.defined()) reg.add_param(prefix + ".pos", pos);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        layers[i].register_into(reg, prefix + ".layer" + std::to_string(i));
    }
    unembed.register_into(reg, prefix + ".unembed");
    out.register_into(reg, prefix + ".out");
    res.register_into(reg, prefix + ".res");
}

void DecoderBlock::register_into(ParamRegistry& reg, const std::string& prefix) const {
    switch (inner_kind) {
        case DecoderInner::RT:
            rt->register_into(reg, prefix + ".inner");
            break;
        case DecoderInner::Residual:
            res->register_into(reg, prefix + ".inner.res");
            break;
        case DecoderInner::PlainConv:
            // deliberately shares names with the residual block's first layer
            // so variant parameter sets nest
            plain->register_into(reg, prefix + ".inner.res.conv1");
            break;
    }
}

// ------------------------------------------------------------------ block forwards

Tensor Bottleneck::forward(const Tensor& x, bool training) {
    auto y = relu(narrow.forward(x, training));
    y = relu(center.forward(y, training));
    y = expand.forward(y, training);
    Tensor sc = shortcut ? shortcut->forward(x, training) : x;
    return relu(add(y, sc));
}

Encoder::Taps Encoder::forward(const Tensor& image, bool training) {
    Taps taps;
    taps.f1 = relu(stem_bn.forward(stem_conv.forward(image), training));
    Tensor y = maxpool2d(taps.f1, 3, 2, 1);
    for (auto& block : stage1) y = block.forward(y, training);
    taps.f2 = y;
    for (auto& block : stage2) y = block.forward(y, training);
    taps.f3 = y;
    for (auto& block : stage3) y = block.forward(y, training);
    taps.f4 = y;
    return taps;
}

Tensor ResidualBlock::forward(const Tensor& x, bool training) {
    auto y = leaky(conv1.forward(x, training));
    y = conv2.forward(y, training);
    Tensor sc = shortcut ? shortcut->forward(x, training) : x;
    return leaky(add(y, sc));
}

Tensor TransformerLayer::forward(const Tensor& tokens) const {
    const std::int64_t n = tokens.dim(0), t = tokens.dim(1), d = tokens.dim(2);
    const std::int64_t dh = d / heads;

    auto split_heads = [&](const Tensor& proj) {
        return permute(reshape(proj, {n, t, heads, dh}), {0, 2, 1, 3});  // N,h,T,dh
    };

    auto xn = ln1.forward(tokens);
    auto qh = split_heads(q.forward(xn));
    auto kh = split_heads(k.forward(xn));
    auto vh = split_heads(v.forward(xn));
    auto scores = scale(batched_matmul(qh, permute(kh, {0, 1, 3, 2})),
                        static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh))));
    auto ctx = batched_matmul(softmax(scores), vh);                     // N,h,T,dh
    auto merged = reshape(permute(ctx, {0, 2, 1, 3}), {n, t, d});
    auto attended = add(tokens, attn_out.forward(merged));

    auto ffin = ln2.forward(attended);
    auto ff = ff2.forward(relu(ff1.forward(ffin)));
    return add(attended, ff);
}

Tensor RTBlock::forward(const Tensor& x, bool training) {
    const std::int64_t h = x.dim(2), w = x.dim(3);
    if (h % patch != 0 || w % patch != 0) {
        throw std::invalid_argument("rt_block: spatial size " + shape_str(x.shape()) +
                                    " is not divisible by patch size " + std::to_string(patch));
    }
    const std::int64_t rc = proj.conv.weight.dim(0);

    auto reduced = leaky(proj.forward(x, training));
    auto tokens = embed.forward(patchify(reduced, patch));
    if (pos.defined()) {
        const std::int64_t gh = h / patch, gw = w / patch;
        Tensor table = pos;
        if (gh != grid_h0 || gw != grid_w0) {
            // re-grid the learned table to the current token grid
            const std::int64_t d = pos.dim(1);
            auto grid = reshape(permute(reshape(pos, {grid_h0, grid_w0, d}), {2, 0, 1}),
                                {1, d, grid_h0, grid_w0});
            auto resized = bilinear_resize(grid, gh, gw);
            table = permute(reshape(resized, {d, gh * gw}), {1, 0});
        }
        tokens = add_token_bias(tokens, table);
    }
    for (const auto& layer : layers) tokens = layer.forward(tokens);
    auto grid = unpatchify(unembed.forward(tokens), rc, h, w, patch);
    auto projected = out.forward(grid, training);
    auto fused = leaky(add(projected, x));
    return res.forward(fused, training);
}

Tensor DecoderBlock::forward(const Tensor& deep, const Tensor& skip, bool training) {
    auto up = bilinear_upsample2x(deep);
    if (up.dim(2) != skip.dim(2) || up.dim(3) != skip.dim(3)) {
        throw std::invalid_argument("decoder: upsampled map " + shape_str(up.shape()) +
                                    " does not match skip " + shape_str(skip.shape()));
    }
    auto cat = concat_channels(up, skip);
    switch (inner_kind) {
        case DecoderInner::RT: return rt->forward(cat, training);
        case DecoderInner::Residual: return res->forward(cat, training);
        case DecoderInner::PlainConv: return leaky(plain->forward(cat, training));
    }
    throw std::logic_error("decoder: unknown inner kind");
}

// ------------------------------------------------------------------ build

namespace {

struct EncoderSpec {
    std::int64_t stem;
    std::array<int, 3> blocks;
    std::array<std::int64_t, 3> widths;
    std::array<std::int64_t, 3> outs;
};

EncoderSpec encoder_spec(EncoderPreset preset) {
    if (preset == EncoderPreset::ResNet50) {
        return {64, {3, 4, 6}, {64, 128, 256}, {256, 512, 1024}};
    }
    return {8, {1, 1, 1}, {8, 16, 32}, {32, 64, 128}};
}

Bottleneck make_bottleneck(Rng& rng, std::int64_t in_ch, std::int64_t width, std::int64_t out_ch,
                           int stride) {
    Bottleneck block;
    block.narrow = make_conv_bn(rng, in_ch, width, 1, 1, 0);
    block.center = make_conv_bn(rng, width, width, 3, stride, 1);
    block.expand = make_conv_bn(rng, width, out_ch, 1, 1, 0);
    if (in_ch != out_ch || stride != 1) {
        block.shortcut = make_conv_bn(rng, in_ch, out_ch, 1, stride, 0);
    }
    return block;
}

Encoder make_encoder(Rng& rng, const EncoderSpec& spec) {
    Encoder enc;
    enc.stem_conv = make_conv2d_layer(rng, 3, spec.stem, 7, 2, 3, false);
    enc.stem_bn = make_batchnorm_layer(spec.stem);
    std::int64_t in_ch = spec.stem;
    std::vector<Bottleneck>* stages[3] = {&enc.stage1, &enc.stage2, &enc.stage3};
    for (int s = 0; s < 3; ++s) {
        const int stage_stride = s == 0 ? 1 : 2;
        for (int b = 0; b < spec.blocks[static_cast<std::size_t>(s)]; ++b) {
            stages[s]->push_back(make_bottleneck(rng, in_ch, spec.widths[static_cast<std::size_t>(s)],
                                                 spec.outs[static_cast<std::size_t>(s)],
                                                 b == 0 ? stage_stride : 1));
            in_ch = spec.outs[static_cast<std::size_t>(s)];
        }
    }
    return enc;
}

ResidualBlock make_residual_block(Rng& rng, std::int64_t in_ch, std::int64_t out_ch) {
    ResidualBlock block;
    block.conv1 = make_conv_bn(rng, in_ch, out_ch, 3, 1, 1);
    block.conv2 = make_conv_bn(rng, out_ch, out_ch, 3, 1, 1);
    if (in_ch != out_ch) block.shortcut = make_conv_bn(rng, in_ch, out_ch, 1, 1, 0);
    return block;
}

TransformerLayer make_transformer_layer(Rng& rng, int dim, int heads, int ff_hidden) {
    TransformerLayer layer;
    layer.ln1 = make_layernorm_layer(dim);
    layer.q = make_linear_layer(rng, dim, dim);
    layer.k = make_linear_layer(rng, dim, dim);
    layer.v = make_linear_layer(rng, dim, dim);
    layer.attn_out = make_linear_layer(rng, dim, dim);
    layer.ln2 = make_layernorm_layer(dim);
    layer.ff1 = make_linear_layer(rng, dim, ff_hidden);
    layer.ff2 = make_linear_layer(rng, ff_hidden, dim);
    layer.heads = heads;
    return layer;
}

RTBlock make_rt_block(Rng& rng, const ModelConfig& cfg, std::int64_t in_ch, std::int64_t out_ch,
                      std::int64_t stage_h, std::int64_t stage_w) {
    RTBlock block;
    const std::int64_t rc = cfg.reduction_channels;
    const std::int64_t feat = rc * cfg.patch_size * cfg.patch_size;
    block.patch = cfg.patch_size;
    block.proj = make_conv_bn(rng, in_ch, rc, 1, 1, 0);
    block.embed = make_linear_layer(rng, feat, cfg.token_dim);
    block.grid_h0 = stage_h / cfg.patch_size;
    block.grid_w0 = stage_w / cfg.patch_size;
    if (cfg.positional_embedding) {
        std::vector<float> table(static_cast<std::size_t>(block.grid_h0 * block.grid_w0 * cfg.token_dim));
        for (auto& v : table) v = static_cast<float>(rng.normal(0.0, 0.02));
        block.pos = Tensor::from_vector({block.grid_h0 * block.grid_w0, cfg.token_dim},
                                        std::move(table), true);
    }
    for (int i = 0; i < cfg.transformer_layers; ++i) {
        block.layers.push_back(
            make_transformer_layer(rng, cfg.token_dim, cfg.attn_heads, cfg.effective_ff_hidden()));
    }
    block.unembed = make_linear_layer(rng, cfg.token_dim, feat);
    block.out = make_conv_bn(rng, rc, in_ch, 1, 1, 0);
    block.res = make_residual_block(rng, in_ch, out_ch);
    return block;
}

DecoderBlock make_decoder_block(Rng& rng, const ModelConfig& cfg, int index) {
    const std::int64_t rc = cfg.reduction_channels;
    const std::int64_t in_ch = 2 * rc;
    DecoderBlock block;
    // Decoder 3 carries a residual block in every variant; the first two hold
    // the RT block (full), a plain conv (no_rt) or a residual block.
    if (index < 2 && cfg.variant == Variant::Full) {
        const std::int64_t div = index == 0 ? 8 : 4;  // stage stride relative to the input
        block.inner_kind = DecoderInner::RT;
        block.rt = make_rt_block(rng, cfg, in_ch, rc, cfg.effective_train_height() / div,
                                 cfg.effective_train_width() / div);
    } else if (index < 2 && cfg.variant == Variant::NoRT) {
        block.inner_kind = DecoderInner::PlainConv;
        block.plain = make_conv_bn(rng, in_ch, rc, 3, 1, 1);
    } else {
        block.inner_kind = DecoderInner::Residual;
        block.res = make_residual_block(rng, in_ch, rc);
    }
    return block;
}

}  // namespace

TransNetRModel build_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    TransNetRModel model;
    model.config_ = config;

    Rng rng = Rng::derive(seed, 0xB11Du);
    const EncoderSpec spec = encoder_spec(config.encoder_preset);
    model.encoder = make_encoder(rng, spec);

    const std::array<std::int64_t, 4> tap_channels = {spec.stem, spec.outs[0], spec.outs[1],
                                                      spec.outs[2]};
    for (int i = 0; i < 4; ++i) {
        model.reduce[static_cast<std::size_t>(i)] =
            make_conv_bn(rng, tap_channels[static_cast<std::size_t>(i)], config.reduction_channels, 1, 1,
                         0);
    }
    for (int i = 0; i < 3; ++i) {
        model.decoders[static_cast<std::size_t>(i)] = make_decoder_block(rng, config, i);
    }
    model.head = make_conv2d_layer(rng, config.reduction_channels, 1, 1, 1, 0, true);

    auto& reg = model.registry_;
    model.encoder.register_into(reg, "encoder");
    for (int i = 0; i < 4; ++i) {
        model.reduce[static_cast<std::size_t>(i)].register_into(reg,
                                                                "reduce" + std::to_string(i + 1));
    }
    for (int i = 0; i < 3; ++i) {
        model.decoders[static_cast<std::size_t>(i)].register_into(reg,
                                                                  "decoder" + std::to_string(i + 1));
    }
    model.head.register_into(reg, "head.conv");
    return model;
}

// ------------------------------------------------------------------ forward

void TransNetRModel::validate_input(const Tensor& image) const {
    if (image.rank() != 4 || image.dim(1) != 3) {
        throw std::invalid_argument("forward: expected an Nx3xHxW image, got " +
                                    shape_str(image.shape()));
    }
    const std::int64_t h = image.dim(2), w = image.dim(3);
    const int p = config_.patch_size;
    if (h % 32 != 0 || w % 32 != 0 || (h / 8) % p != 0 || (w / 8) % p != 0) {
        throw std::invalid_argument(
            "forward: input " + shape_str(image.shape()) +
            " violates the size rule: H and W must be divisible by 32 and H/8, W/8 divisible by the "
            "patch size (" +
            std::to_string(p) + ")");
    }
}

TransNetRModel::StageTaps TransNetRModel::forward_with_taps(const Tensor& image, bool training) {
    validate_input(image);
    StageTaps taps;
    auto enc = encoder.forward(image, training);
    const std::array<Tensor, 4> feats = {enc.f1, enc.f2, enc.f3, enc.f4};
    for (int i = 0; i < 4; ++i) {
        taps.reduced[static_cast<std::size_t>(i)] = leaky(
            reduce[static_cast<std::size_t>(i)].forward(feats[static_cast<std::size_t>(i)], training));
    }
    taps.decoded[0] = decoders[0].forward(taps.reduced[3], taps.reduced[2], training);
    taps.decoded[1] = decoders[1].forward(taps.decoded[0], taps.reduced[1], training);
    taps.decoded[2] = decoders[2].forward(taps.decoded[1], taps.reduced[0], training);
    auto up = bilinear_upsample2x(taps.decoded[2]);
    taps.output = activation(head.forward(up), Activation::Sigmoid);
    return taps;
}

Tensor TransNetRModel::forward(const Tensor& image, bool training) {
    return forward_with_taps(image, training).output;
}

std::vector<std::pair<std::string, std::int64_t>> TransNetRModel::parameter_breakdown() const {
    std::vector<std::pair<std::string, std::int64_t>> blocks;
    for (const auto& e : registry_.entries) {
        if (!e.is_param) continue;
        const std::string block = e.name.substr(0, e.name.find('.'));
        if (blocks.empty() || blocks.back().first != block) blocks.emplace_back(block, 0);
        blocks.back().second += e.tensor.numel();
    }
    return blocks;
}

std::vector<std::pair<std::string, Tensor>> TransNetRModel::feature_heatmaps(const Tensor& image) {
    auto taps = forward_with_taps(image, false);
    const std::int64_t out_h = image.dim(2), out_w = image.dim(3);

    std::vector<std::pair<std::string, Tensor>> maps;
    auto emit = [&](const std::string& name, const Tensor& t) {
        const std::int64_t c = t.dim(1), h = t.dim(2), w = t.dim(3);
        std::vector<float> plane(static_cast<std::size_t>(h * w), 0.0f);
        const auto& v = t.values();  // first image of the batch
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const float* src = v.data() + ch * h * w;
            for (std::int64_t i = 0; i < h * w; ++i) {
                plane[static_cast<std::size_t>(i)] += std::abs(src[i]);
            }
        }
        float lo = plane[0], hi = plane[0];
        for (float x : plane) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        for (float& x : plane) x = hi > lo ? (x - lo) / (hi - lo) : 0.0f;
        auto grid = Tensor::from_vector({1, 1, h, w}, std::move(plane));
        maps.emplace_back(name, bilinear_resize(grid, out_h, out_w));
    };
    for (int i = 0; i < 4; ++i) {
        emit("reduce" + std::to_string(i + 1), taps.reduced[static_cast<std::size_t>(i)]);
    }
    for (int i = 0; i < 3; ++i) {
        emit("decoder" + std::to_string(i + 1), taps.decoded[static_cast<std::size_t>(i)]);
    }
    return maps;
}

// ------------------------------------------------------------------ flops

namespace {

std::int64_t conv_macs(const Conv2dLayer& conv, std::int64_t oh, std::int64_t ow) {
    const auto& s = conv.weight.shape();  // [O, I, Kh, Kw]
    return s[0] * oh * ow * s[1] * s[2] * s[3];
}

std::int64_t linear_macs(const LinearLayer& layer, std::int64_t rows) {
    return rows * layer.weight.dim(0) * layer.weight.dim(1);
}

std::int64_t residual_macs(const ResidualBlock& block, std::int64_t h, std::int64_t w) {
    std::int64_t total = conv_macs(block.conv1.conv, h, w) + conv_macs(block.conv2.conv, h, w);
    if (block.shortcut) total += conv_macs(block.shortcut->conv, h, w);
    return total;
}

}  // namespace

FlopReport count_flops(const TransNetRModel& model, std::int64_t height, std::int64_t width) {
    if (height < 32 || width < 32 || height % 32 != 0 || width % 32 != 0) {
        throw std::invalid_argument("count_flops: input size must be divisible by 32");
    }
    FlopReport report;
    auto block = [&](const std::string& name, std::int64_t macs) {
        report.per_block.emplace_back(name, macs);
        report.total += macs;
    };

    const std::int64_t h2 = height / 2, w2 = width / 2;
    block("encoder.stem", conv_macs(model.encoder.stem_conv, h2, w2));

    const std::vector<const std::vector<Bottleneck>*> stages = {&model.encoder.stage1,
                                                                &model.encoder.stage2,
                                                                &model.encoder.stage3};
    std::int64_t sh = height / 4, sw = width / 4;  // after the stem maxpool
    for (std::size_t s = 0; s < stages.size(); ++s) {
        std::int64_t macs = 0;
        for (const auto& b : *stages[s]) {
            const std::int64_t out_h = sh / b.center.conv.stride;
            const std::int64_t out_w = sw / b.center.conv.stride;
            macs += conv_macs(b.narrow.conv, sh, sw);
            macs += conv_macs(b.center.conv, out_h, out_w);
            macs += conv_macs(b.expand.conv, out_h, out_w);
            if (b.shortcut) macs += conv_macs(b.shortcut->conv, out_h, out_w);
            sh = out_h;
            sw = out_w;
        }
        block("encoder.stage" + std::to_string(s + 1), macs);
    }

    const std::array<std::int64_t, 4> divs = {2, 4, 8, 16};
    for (std::size_t i = 0; i < 4; ++i) {
        block("reduce" + std::to_string(i + 1),
              conv_macs(model.reduce[i].conv, height / divs[i], width / divs[i]));
    }

    const std::array<std::int64_t, 3> dec_divs = {8, 4, 2};
    for (std::size_t i = 0; i < 3; ++i) {
        const std::int64_t dh = height / dec_divs[i], dw = width / dec_divs[i];
        const auto& dec = model.decoders[i];
        std::int64_t macs = 0;
        switch (dec.inner_kind) {
            case DecoderInner::RT: {
                const auto& rt = *dec.rt;
                macs += conv_macs(rt.proj.conv, dh, dw);
                const std::int64_t tokens = (dh / rt.patch) * (dw / rt.patch);
                macs += linear_macs(rt.embed, tokens);
                const std::int64_t d = rt.embed.weight.dim(0);
                for (const auto& layer : rt.layers) {
                    macs += linear_macs(layer.q, tokens) + linear_macs(layer.k, tokens) +
                            linear_macs(layer.v, tokens) + linear_macs(layer.attn_out, tokens);
                    macs += 2 * tokens * tokens * d;  // scores and attention-weighted values
                    macs += linear_macs(layer.ff1, tokens) + linear_macs(layer.ff2, tokens);
                }
                macs += linear_macs(rt.unembed, tokens);
                macs += conv_macs(rt.out.conv, dh, dw);
                macs += residual_macs(rt.res, dh, dw);
                break;
            }
            case DecoderInner::Residual:
                macs += residual_macs(*dec.res, dh, dw);
                break;
            case DecoderInner::PlainConv:
                macs += conv_macs(dec.plain->conv, dh, dw);
                break;
        }
        block("decoder" + std::to_string(i + 1), macs);
    }

    block("head", conv_macs(model.head, height, width));
    return report;
}

}  // namespace transnetr
