// transnetr: train / evaluate / infer / benchmark / ablate the TransNetR
// segmentation model from the command line.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "transnetr/data.hpp"
#include "transnetr/image.hpp"
#include "transnetr/metrics.hpp"
#include "transnetr/model.hpp"
#include "transnetr/train.hpp"
#include "transnetr/weights.hpp"

namespace fs = std::filesystem;
using namespace transnetr;

namespace {

// ------------------------------------------------------------------ shared plumbing

struct CommonOpts {
    std::string out_dir;
    std::uint64_t seed = 42;
};

fs::path resolve_out_dir(const std::string& requested, const std::string& command) {
    fs::path dir;
    if (!requested.empty()) {
        dir = requested;
    } else {
        const auto now = std::chrono::system_clock::now();
        const std::time_t t = std::chrono::system_clock::to_time_t(now);
        char stamp[32];
        std::strftime(stamp, sizeof(stamp), "%Y%m%d_%H%M%S", std::localtime(&t));
        dir = fs::path("runs") / (command + "_" + stamp);
    }
    fs::create_directories(dir);
    return dir;
}

void echo_config(const fs::path& out_dir,
                 const std::vector<std::pair<std::string, std::string>>& entries) {
    std::ofstream out(out_dir / "config.txt");
    for (const auto& [k, v] : entries) out << k << "=" << v << "\n";
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// Flat key=value config files, merged with precedence defaults < file < flags:
// a file entry applies only when the matching flag was not given.
using KeyBindings = std::vector<std::pair<std::string, std::function<void(const std::string&)>>>;

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

void apply_config_file(CLI::App* cmd, const std::string& config_path, const KeyBindings& bindings) {
    if (config_path.empty()) return;
    std::ifstream in(config_path);
    if (!in) throw std::runtime_error("cannot open config file: " + config_path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error(config_path + ":" + std::to_string(lineno) +
                                     ": expected key=value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        bool known = false;
        for (const auto& [name, apply] : bindings) {
            if (name == key) {
                known = true;
                if (cmd->count("--" + key) == 0) apply(value);
                break;
            }
        }
        if (!known) {
            throw std::runtime_error(config_path + ":" + std::to_string(lineno) +
                                     ": unknown config key '" + key + "'");
        }
    }
}

void require_data(const std::string& data) {
    if (data.empty()) {
        throw std::runtime_error("--data is required (set it as a flag or in the config file)");
    }
}

// "synth:n=8,size=64,centers=3" or a dataset directory path
DatasetManifest resolve_data(const std::string& spec, const fs::path& out_dir, std::uint64_t seed) {
    if (spec.rfind("synth:", 0) == 0 || spec == "synth") {
        SynthConfig cfg;
        cfg.seed = seed;
        if (spec.size() > 6) {
            std::istringstream ss(spec.substr(6));
            std::string kv;
            while (std::getline(ss, kv, ',')) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos) {
                    throw std::runtime_error("bad synth spec entry '" + kv +
                                             "' (expected key=value)");
                }
                const std::string key = kv.substr(0, eq);
                const std::string value = kv.substr(eq + 1);
                if (key == "n") cfg.n = std::stoi(value);
                else if (key == "size") cfg.size = std::stoll(value);
                else if (key == "centers") cfg.centers = std::stoi(value);
                else if (key == "seed") cfg.seed = std::stoull(value);
                else throw std::runtime_error("unknown synth spec key '" + key + "'");
            }
        }
        return synth_dataset(cfg, out_dir / "dataset");
    }
    if (!fs::exists(spec)) {
        throw std::runtime_error("data path does not exist: " + spec);
    }
    return load_dataset(spec);
}

struct ModelOpts {
    std::string preset = "tiny";
    std::string variant = "full";
    std::int64_t resolution = 0;  // 0 = preset default

    ModelConfig to_config() const {
        ModelConfig cfg;
        cfg.encoder_preset = parse_preset(preset);
        cfg.variant = parse_variant(variant);
        if (resolution > 0) cfg.train_height = cfg.train_width = resolution;
        return cfg;
    }
};

void add_model_opts(CLI::App* cmd, ModelOpts& opts) {
    cmd->add_option("--preset", opts.preset, "Encoder preset: resnet50 or tiny")
        ->check(CLI::IsMember({"resnet50", "tiny"}));
    cmd->add_option("--variant", opts.variant, "Architecture variant: full, no_rt, residual_only")
        ->check(CLI::IsMember({"full", "no_rt", "residual_only"}));
    cmd->add_option("--resolution", opts.resolution,
                    "Square train/eval resolution (0 = preset default, must be divisible by 32)");
}

void write_history(const fs::path& path, const std::vector<std::pair<std::int64_t, double>>& rows) {
    std::ofstream out(path);
    out << "step,loss\n";
    char buf[64];
    for (const auto& [step, loss] : rows) {
        std::snprintf(buf, sizeof(buf), "%lld,%.9g\n", static_cast<long long>(step), loss);
        out << buf;
    }
}

double mean_train_dsc(TransNetRModel& model, const DatasetManifest& data, double threshold) {
    const auto h = model.config().effective_train_height();
    const auto w = model.config().effective_train_width();
    return evaluate_model(model, data, threshold, h, w).aggregate().dsc;
}

// ------------------------------------------------------------------ train

struct TrainOpts {
    CommonOpts common;
    ModelOpts model;
    std::string config_file;
    std::string data;
    std::int64_t steps = 500;
    int batch_size = 8;
    double lr = 1e-4;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::string augment = "none";
    std::int64_t ckpt_interval = 0;
    std::string val_data;
    std::int64_t val_interval = 0;
    std::string resume;
    std::string import_weights;
};

int run_train(const TrainOpts& opts) {
    const fs::path out_dir = resolve_out_dir(opts.common.out_dir, "train");

    TransNetRModel model;
    TrainConfig tcfg;
    std::int64_t start_step = 0;
    std::optional<Checkpoint> resume_ck;

    if (!opts.resume.empty()) {
        resume_ck = Checkpoint::load(opts.resume);
        model = resume_ck->instantiate_model();
        tcfg = resume_ck->train_config;
        tcfg.max_steps = opts.steps;  // the only override honoured on resume
        start_step = resume_ck->step;
    } else {
        model = build_model(opts.model.to_config(), opts.common.seed);
        tcfg.learning_rate = opts.lr;
        tcfg.batch_size = opts.batch_size;
        tcfg.max_steps = opts.steps;
        tcfg.beta1 = opts.beta1;
        tcfg.beta2 = opts.beta2;
        tcfg.epsilon = opts.eps;
        tcfg.seed = opts.common.seed;
        tcfg.augment = AugmentConfig::parse(opts.augment);
        tcfg.checkpoint_interval = opts.ckpt_interval;
        tcfg.val_interval = opts.val_interval;
        if (!opts.import_weights.empty()) {
            auto archive = load_archive(opts.import_weights);
            apply_archive_to_registry(archive, model.registry(), false, "adam.");
            std::cout << "imported " << archive.tensors.size() << " tensors from "
                      << opts.import_weights << "\n";
        }
    }

    AdamOptimizer optimizer(model.registry(), tcfg.learning_rate, tcfg.beta1, tcfg.beta2,
                            tcfg.epsilon);
    if (resume_ck && resume_ck->has_optimizer) resume_ck->restore_optimizer(optimizer);

    // synth data derives from the training seed so a resumed run regenerates
    // the exact dataset of the original one
    DatasetManifest data = resolve_data(opts.data, out_dir, tcfg.seed);
    std::optional<DatasetManifest> val_data;
    if (!opts.val_data.empty()) val_data = resolve_data(opts.val_data, out_dir, tcfg.seed + 1);

    // keys mirror the flag names so the echoed file replays via --config;
    // provenance-only entries are commented out
    echo_config(out_dir, {{"# command", "train"},
                          {"# start_step", std::to_string(start_step)},
                          {"data", opts.data},
                          {"preset", to_string(model.config().encoder_preset)},
                          {"variant", to_string(model.config().variant)},
                          {"resolution", std::to_string(model.config().effective_train_height())},
                          {"steps", std::to_string(tcfg.max_steps)},
                          {"batch-size", std::to_string(tcfg.batch_size)},
                          {"lr", fmt_double(tcfg.learning_rate)},
                          {"beta1", fmt_double(tcfg.beta1)},
                          {"beta2", fmt_double(tcfg.beta2)},
                          {"eps", fmt_double(tcfg.epsilon)},
                          {"augment", tcfg.augment.to_string()},
                          {"ckpt-interval", std::to_string(tcfg.checkpoint_interval)},
                          {"val-interval", std::to_string(tcfg.val_interval)},
                          {"seed", std::to_string(tcfg.seed)},
                          {"resume", opts.resume}});

    std::ofstream val_history;
    TrainHooks hooks;
    hooks.on_step = [&](std::int64_t step, double loss) {
        if (step % 50 == 0 || step == tcfg.max_steps) {
            std::cout << "step " << step << "  loss " << loss << "\n";
        }
    };
    hooks.on_checkpoint = [&](std::int64_t step) {
        char name[48];
        std::snprintf(name, sizeof(name), "checkpoint_%08lld.tnr", static_cast<long long>(step));
        write_checkpoint(out_dir / name, model, &optimizer, tcfg, step);
    };
    if (val_data) {
        val_history.open(out_dir / "val_history.csv");
        val_history << "step,miou,mdsc,recall,precision,f2\n";
        hooks.on_validate = [&](std::int64_t step) {
            auto report = evaluate_model(model, *val_data, 0.5,
                                         model.config().effective_train_height(),
                                         model.config().effective_train_width());
            const auto m = report.aggregate();
            val_history << step << "," << fmt_double(m.iou) << "," << fmt_double(m.dsc) << ","
                        << fmt_double(m.recall) << "," << fmt_double(m.precision) << ","
                        << fmt_double(m.f2) << "\n";
        };
    }

    auto result = train(model, data, tcfg, optimizer, start_step, hooks);
    write_history(out_dir / "history.csv", result.loss_history);
    write_checkpoint(out_dir / "checkpoint_final.tnr", model, &optimizer, tcfg, result.final_step);
    std::cout << "trained to step " << result.final_step << "; outputs in " << out_dir.string()
              << "\n";
    return 0;
}

// ------------------------------------------------------------------ eval

struct EvalOpts {
    CommonOpts common;
    std::string config_file;
    std::string data;
    std::string checkpoint;
    std::string from_masks;
    double threshold = 0.5;
    std::int64_t resolution = 0;
    std::string label = "TransNetR (Ours)";
};

int run_eval(const EvalOpts& opts) {
    const fs::path out_dir = resolve_out_dir(opts.common.out_dir, "eval");
    DatasetManifest data = resolve_data(opts.data, out_dir, opts.common.seed);
    const std::string dataset_label =
        data.root.filename().empty() ? data.root.string() : data.root.filename().string();

    echo_config(out_dir, {{"command", "eval"},
                          {"data", opts.data},
                          {"checkpoint", opts.checkpoint},
                          {"from_masks", opts.from_masks},
                          {"threshold", fmt_double(opts.threshold)},
                          {"resolution", std::to_string(opts.resolution)},
                          {"seed", std::to_string(opts.common.seed)}});

    MetricsReport report;
    if (!opts.from_masks.empty()) {
        report = evaluate_masks(opts.from_masks, data, opts.threshold);
    } else if (!opts.checkpoint.empty()) {
        auto ck = Checkpoint::load(opts.checkpoint);
        auto model = ck.instantiate_model();
        const std::int64_t h =
            opts.resolution > 0 ? opts.resolution : model.config().effective_train_height();
        const std::int64_t w =
            opts.resolution > 0 ? opts.resolution : model.config().effective_train_width();
        report = evaluate_model(model, data, opts.threshold, h, w);
    } else {
        throw std::runtime_error("eval needs either --checkpoint or --from-masks");
    }

    report.write_csv(out_dir / "per_image.csv");
    report.write_summary_csv(out_dir / "summary.csv");
    const std::string table = report.human_table(opts.label, dataset_label);
    std::ofstream(out_dir / "report.txt") << table;
    std::cout << table;
    return 0;
}

// ------------------------------------------------------------------ infer

struct InferOpts {
    CommonOpts common;
    std::string checkpoint;
    std::string input;
    double threshold = 0.5;
    bool heatmaps = false;
};

int run_infer(const InferOpts& opts) {
    const fs::path out_dir = resolve_out_dir(opts.common.out_dir, "infer");
    auto ck = Checkpoint::load(opts.checkpoint);
    auto model = ck.instantiate_model();

    std::vector<fs::path> inputs;
    if (fs::is_directory(opts.input)) {
        for (const auto& entry : fs::directory_iterator(opts.input)) {
            const auto ext = entry.path().extension().string();
            if (entry.is_regular_file() && (ext == ".ppm" || ext == ".pgm" || ext == ".pnm")) {
                inputs.push_back(entry.path());
            }
        }
        std::sort(inputs.begin(), inputs.end());
        if (inputs.empty()) {
            throw std::runtime_error("no raster images under " + opts.input);
        }
    } else if (fs::exists(opts.input)) {
        inputs.push_back(opts.input);
    } else {
        throw std::runtime_error("input path does not exist: " + opts.input);
    }

    echo_config(out_dir, {{"command", "infer"},
                          {"checkpoint", opts.checkpoint},
                          {"input", opts.input},
                          {"threshold", fmt_double(opts.threshold)},
                          {"heatmaps", opts.heatmaps ? "1" : "0"}});

    for (const auto& path : inputs) {
        auto raster = read_image(path);
        ImageU8 rgb = raster;
        if (rgb.channels == 1) {
            // promote grayscale to rgb
            ImageU8 x;
            x.width = rgb.width;
            x.height = rgb.height;
            x.channels = 3;
            x.pixels.resize(static_cast<std::size_t>(x.width) * x.height * 3);
            for (std::int64_t i = 0; i < x.width * x.height; ++i) {
                for (int c = 0; c < 3; ++c) x.pixels[static_cast<std::size_t>(i * 3 + c)] = rgb.pixels[static_cast<std::size_t>(i)];
            }
            rgb = std::move(x);
        }
        auto image = image_to_tensor(rgb);
        auto prob = model.forward(image, false);  // validates the size rule

        const std::int64_t h = prob.dim(2), w = prob.dim(3);
        const std::string stem = path.stem().string();
        write_image(out_dir / (stem + "_prob.pgm"), tensor_plane_to_image(prob.values(), h, w));

        auto mask = binarize(prob, opts.threshold);
        write_image(out_dir / (stem + "_mask.pgm"), tensor_plane_to_image(mask.values(), h, w));

        if (opts.heatmaps) {
            for (const auto& [name, map] : model.feature_heatmaps(image)) {
                write_image(out_dir / (stem + "_heat_" + name + ".pgm"),
                            tensor_plane_to_image(map.values(), h, w));
            }
        }
        std::cout << path.string() << " -> " << (out_dir / (stem + "_mask.pgm")).string() << "\n";
    }
    return 0;
}

// ------------------------------------------------------------------ bench

struct BenchOpts {
    CommonOpts common;
    ModelOpts model;
    int warmup = 3;
    int iters = 15;
};

int run_bench(const BenchOpts& opts) {
    auto cfg = opts.model.to_config();
    auto model = build_model(cfg, opts.common.seed);
    const std::int64_t h = cfg.effective_train_height();
    const std::int64_t w = cfg.effective_train_width();

    const std::int64_t params = model.parameter_count();
    const auto flops = count_flops(model, h, w);
    auto fps = fps_benchmark(model, h, w, opts.warmup, opts.iters);

    const double params_m = static_cast<double>(params) / 1e6;
    const double gmac = static_cast<double>(flops.total) / 1e9;
    std::printf("preset=%s variant=%s resolution=%lldx%lld\n", to_string(cfg.encoder_preset).c_str(),
                to_string(cfg.variant).c_str(), static_cast<long long>(h),
                static_cast<long long>(w));
    std::printf("parameters=%lld (%.2f M)\n", static_cast<long long>(params), params_m);
    std::printf("macs_per_forward=%lld (%.2f GMac)\n", static_cast<long long>(flops.total), gmac);
    std::printf("fps=%.4f  latency_ms p50=%.2f p90=%.2f p99=%.2f (%d iters)\n", fps.fps, fps.p50_ms,
                fps.p90_ms, fps.p99_ms, fps.iterations);
    for (const auto& [name, macs] : flops.per_block) {
        std::printf("  block %-16s %12lld MACs\n", name.c_str(), static_cast<long long>(macs));
    }
    if (cfg.encoder_preset == EncoderPreset::ResNet50) {
        // informational comparison against the published TransNetR cost figures
        std::printf("reference (published TransNetR, 256x256): 27.27 M parameters, 10.58 GMac\n");
        std::printf("delta: %+.2f M parameters, %+.2f GMac\n", params_m - 27.27, gmac - 10.58);
    }
    if (!opts.common.out_dir.empty()) {
        const fs::path out_dir = resolve_out_dir(opts.common.out_dir, "bench");
        echo_config(out_dir, {{"command", "bench"},
                              {"preset", opts.model.preset},
                              {"variant", opts.model.variant},
                              {"resolution", std::to_string(h)},
                              {"warmup", std::to_string(opts.warmup)},
                              {"iters", std::to_string(opts.iters)},
                              {"seed", std::to_string(opts.common.seed)}});
    }
    return 0;
}

// ------------------------------------------------------------------ ablate

struct AblateOpts {
    CommonOpts common;
    std::string config_file;
    std::string data;
    std::string preset = "tiny";
    std::int64_t resolution = 0;
    std::int64_t steps = 500;
    int batch_size = 8;
    double lr = 1e-4;
    double threshold = 0.5;
};

int run_ablate(const AblateOpts& opts) {
    const fs::path out_dir = resolve_out_dir(opts.common.out_dir, "ablate");
    DatasetManifest data = resolve_data(opts.data, out_dir, opts.common.seed);

    echo_config(out_dir, {{"command", "ablate"},
                          {"data", opts.data},
                          {"preset", opts.preset},
                          {"resolution", std::to_string(opts.resolution)},
                          {"steps", std::to_string(opts.steps)},
                          {"batch_size", std::to_string(opts.batch_size)},
                          {"learning_rate", fmt_double(opts.lr)},
                          {"threshold", fmt_double(opts.threshold)},
                          {"seed", std::to_string(opts.common.seed)}});

    struct RowResult {
        Variant variant;
        PerImageMetrics m;
        std::int64_t params;
    };
    std::vector<RowResult> results;
    // Table order: without RT, RT replaced by residual, ours
    for (Variant variant : {Variant::NoRT, Variant::ResidualOnly, Variant::Full}) {
        ModelOpts mopts;
        mopts.preset = opts.preset;
        mopts.variant = to_string(variant);
        mopts.resolution = opts.resolution;
        auto model = build_model(mopts.to_config(), opts.common.seed);

        TrainConfig tcfg;
        tcfg.learning_rate = opts.lr;
        tcfg.batch_size = opts.batch_size;
        tcfg.max_steps = opts.steps;
        tcfg.seed = opts.common.seed;

        AdamOptimizer optimizer(model.registry(), tcfg.learning_rate, tcfg.beta1, tcfg.beta2,
                                tcfg.epsilon);
        std::cout << "training variant " << to_string(variant) << " (" << opts.steps << " steps)\n";
        (void)train(model, data, tcfg, optimizer);

        const auto h = model.config().effective_train_height();
        const auto w = model.config().effective_train_width();
        auto report = evaluate_model(model, data, opts.threshold, h, w);
        results.push_back(RowResult{variant, report.aggregate(), model.parameter_count()});
    }

    std::ofstream csv(out_dir / "ablation.csv");
    csv << "method,variant,miou,mdsc,recall,precision,params\n";
    for (const auto& r : results) {
        csv << variant_label(r.variant) << "," << to_string(r.variant) << "," << fmt_double(r.m.iou)
            << "," << fmt_double(r.m.dsc) << "," << fmt_double(r.m.recall) << ","
            << fmt_double(r.m.precision) << "," << r.params << "\n";
    }

    std::ostringstream table;
    table << "Ablation (train-set metrics, seed " << opts.common.seed << ")\n";
    char line[200];
    std::snprintf(line, sizeof(line), "%-49s | %-6s | %-6s | %-6s | %-9s | %s\n", "Method", "mIoU",
                  "mDSC", "Recall", "Precision", "Params");
    table << line << std::string(100, '-') << "\n";
    for (const auto& r : results) {
        std::snprintf(line, sizeof(line), "%-49s | %.4f | %.4f | %.4f | %.4f    | %lld\n",
                      variant_label(r.variant).c_str(), r.m.iou, r.m.dsc, r.m.recall, r.m.precision,
                      static_cast<long long>(r.params));
        table << line;
    }
    std::ofstream(out_dir / "ablation.txt") << table.str();
    std::cout << table.str();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TransNetR polyp segmentation toolkit"};
    app.require_subcommand(1);

    TrainOpts train_opts;
    auto* train_cmd = app.add_subcommand("train", "Train a model");
    train_cmd->add_option("--config", train_opts.config_file,
                          "Flat key=value config file (flags take precedence)");
    train_cmd->add_option("--data", train_opts.data,
                          "Dataset dir or synth:n=..,size=..[,centers=..]");
    add_model_opts(train_cmd, train_opts.model);
    train_cmd->add_option("--steps", train_opts.steps, "Optimization steps");
    train_cmd->add_option("--batch-size", train_opts.batch_size, "Mini-batch size");
    train_cmd->add_option("--lr", train_opts.lr, "Adam learning rate");
    train_cmd->add_option("--beta1", train_opts.beta1, "Adam beta1");
    train_cmd->add_option("--beta2", train_opts.beta2, "Adam beta2");
    train_cmd->add_option("--eps", train_opts.eps, "Adam epsilon");
    train_cmd->add_option("--augment", train_opts.augment,
                          "Augmentations: none, all, or csv of hflip,vflip,rot90,crop,jitter");
    train_cmd->add_option("--ckpt-interval", train_opts.ckpt_interval,
                          "Checkpoint every N steps (0 = final only)");
    train_cmd->add_option("--val-data", train_opts.val_data, "Validation dataset spec");
    train_cmd->add_option("--val-interval", train_opts.val_interval,
                          "Validate every N steps (0 = never)");
    train_cmd->add_option("--resume", train_opts.resume, "Resume from a checkpoint");
    train_cmd->add_option("--import-weights", train_opts.import_weights,
                          "Partial weight import from an archive (pretrained encoder hook)");
    train_cmd->add_option("--out", train_opts.common.out_dir, "Output directory");
    train_cmd->add_option("--seed", train_opts.common.seed, "Seed");

    EvalOpts eval_opts;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint or prediction masks");
    eval_cmd->add_option("--config", eval_opts.config_file,
                         "Flat key=value config file (flags take precedence)");
    eval_cmd->add_option("--data", eval_opts.data, "Dataset dir or synth spec");
    eval_cmd->add_option("--checkpoint", eval_opts.checkpoint, "Checkpoint to evaluate");
    eval_cmd->add_option("--from-masks", eval_opts.from_masks,
                         "Directory of precomputed prediction masks (<id>.pgm)");
    eval_cmd->add_option("--threshold", eval_opts.threshold, "Binarization threshold");
    eval_cmd->add_option("--resolution", eval_opts.resolution,
                         "Eval resolution (0 = checkpoint's train resolution)");
    eval_cmd->add_option("--label", eval_opts.label, "Method label for the report table");
    eval_cmd->add_option("--out", eval_opts.common.out_dir, "Output directory");
    eval_cmd->add_option("--seed", eval_opts.common.seed, "Seed");

    InferOpts infer_opts;
    auto* infer_cmd = app.add_subcommand("infer", "Segment an image or a directory of images");
    infer_cmd->add_option("--checkpoint", infer_opts.checkpoint, "Checkpoint")->required();
    infer_cmd->add_option("--input", infer_opts.input, "Image file or directory")->required();
    infer_cmd->add_option("--threshold", infer_opts.threshold, "Binarization threshold");
    infer_cmd->add_flag("--heatmaps", infer_opts.heatmaps,
                        "Also write per-stage feature heatmaps");
    infer_cmd->add_option("--out", infer_opts.common.out_dir, "Output directory");
    infer_cmd->add_option("--seed", infer_opts.common.seed, "Seed");

    BenchOpts bench_opts;
    auto* bench_cmd = app.add_subcommand("bench", "Report fps, latency, parameters and MACs");
    add_model_opts(bench_cmd, bench_opts.model);
    bench_cmd->add_option("--warmup", bench_opts.warmup, "Unmeasured warmup forwards");
    bench_cmd->add_option("--iters", bench_opts.iters, "Measured forwards");
    bench_cmd->add_option("--out", bench_opts.common.out_dir, "Optional output directory");
    bench_cmd->add_option("--seed", bench_opts.common.seed, "Seed");

    AblateOpts ablate_opts;
    auto* ablate_cmd = app.add_subcommand("ablate", "Train and compare all three variants");
    ablate_cmd->add_option("--config", ablate_opts.config_file,
                           "Flat key=value config file (flags take precedence)");
    ablate_cmd->add_option("--data", ablate_opts.data, "Dataset dir or synth spec");
    ablate_cmd->add_option("--preset", ablate_opts.preset, "Encoder preset")
        ->check(CLI::IsMember({"resnet50", "tiny"}));
    ablate_cmd->add_option("--resolution", ablate_opts.resolution, "Square resolution (0 = default)");
    ablate_cmd->add_option("--steps", ablate_opts.steps, "Steps per variant");
    ablate_cmd->add_option("--batch-size", ablate_opts.batch_size, "Mini-batch size");
    ablate_cmd->add_option("--lr", ablate_opts.lr, "Adam learning rate");
    ablate_cmd->add_option("--threshold", ablate_opts.threshold, "Binarization threshold");
    ablate_cmd->add_option("--out", ablate_opts.common.out_dir, "Output directory");
    ablate_cmd->add_option("--seed", ablate_opts.common.seed, "Seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed()) {
            const KeyBindings bindings = {
                {"data", [&](const std::string& v) { train_opts.data = v; }},
                {"preset", [&](const std::string& v) { train_opts.model.preset = v; }},
                {"variant", [&](const std::string& v) { train_opts.model.variant = v; }},
                {"resolution", [&](const std::string& v) { train_opts.model.resolution = std::stoll(v); }},
                {"steps", [&](const std::string& v) { train_opts.steps = std::stoll(v); }},
                {"batch-size", [&](const std::string& v) { train_opts.batch_size = std::stoi(v); }},
                {"lr", [&](const std::string& v) { train_opts.lr = std::stod(v); }},
                {"beta1", [&](const std::string& v) { train_opts.beta1 = std::stod(v); }},
                {"beta2", [&](const std::string& v) { train_opts.beta2 = std::stod(v); }},
                {"eps", [&](const std::string& v) { train_opts.eps = std::stod(v); }},
                {"augment", [&](const std::string& v) { train_opts.augment = v; }},
                {"ckpt-interval", [&](const std::string& v) { train_opts.ckpt_interval = std::stoll(v); }},
                {"val-data", [&](const std::string& v) { train_opts.val_data = v; }},
                {"val-interval", [&](const std::string& v) { train_opts.val_interval = std::stoll(v); }},
                {"resume", [&](const std::string& v) { train_opts.resume = v; }},
                {"import-weights", [&](const std::string& v) { train_opts.import_weights = v; }},
                {"out", [&](const std::string& v) { train_opts.common.out_dir = v; }},
                {"seed", [&](const std::string& v) { train_opts.common.seed = std::stoull(v); }},
            };
            apply_config_file(train_cmd, train_opts.config_file, bindings);
            require_data(train_opts.data);
            return run_train(train_opts);
        }
        if (eval_cmd->parsed()) {
            const KeyBindings bindings = {
                {"data", [&](const std::string& v) { eval_opts.data = v; }},
                {"checkpoint", [&](const std::string& v) { eval_opts.checkpoint = v; }},
                {"from-masks", [&](const std::string& v) { eval_opts.from_masks = v; }},
                {"threshold", [&](const std::string& v) { eval_opts.threshold = std::stod(v); }},
                {"resolution", [&](const std::string& v) { eval_opts.resolution = std::stoll(v); }},
                {"label", [&](const std::string& v) { eval_opts.label = v; }},
                {"out", [&](const std::string& v) { eval_opts.common.out_dir = v; }},
                {"seed", [&](const std::string& v) { eval_opts.common.seed = std::stoull(v); }},
            };
            apply_config_file(eval_cmd, eval_opts.config_file, bindings);
            require_data(eval_opts.data);
            return run_eval(eval_opts);
        }
        if (infer_cmd->parsed()) return run_infer(infer_opts);
        if (bench_cmd->parsed()) return run_bench(bench_opts);
        if (ablate_cmd->parsed()) {
            const KeyBindings bindings = {
                {"data", [&](const std::string& v) { ablate_opts.data = v; }},
                {"preset", [&](const std::string& v) { ablate_opts.preset = v; }},
                {"resolution", [&](const std::string& v) { ablate_opts.resolution = std::stoll(v); }},
                {"steps", [&](const std::string& v) { ablate_opts.steps = std::stoll(v); }},
                {"batch-size", [&](const std::string& v) { ablate_opts.batch_size = std::stoi(v); }},
                {"lr", [&](const std::string& v) { ablate_opts.lr = std::stod(v); }},
                {"threshold", [&](const std::string& v) { ablate_opts.threshold = std::stod(v); }},
                {"out", [&](const std::string& v) { ablate_opts.common.out_dir = v; }},
                {"seed", [&](const std::string& v) { ablate_opts.common.seed = std::stoull(v); }},
            };
            apply_config_file(ablate_cmd, ablate_opts.config_file, bindings);
            require_data(ablate_opts.data);
            return run_ablate(ablate_opts);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
