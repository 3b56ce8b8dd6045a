#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "oracles.hpp"
#include "transnetr/data.hpp"
#include "transnetr/metrics.hpp"
#include "transnetr/model.hpp"

using namespace transnetr;
namespace fs = std::filesystem;

namespace {

Tensor random_mask(Rng& rng, std::int64_t h, std::int64_t w, double p_fg = 0.4) {
    std::vector<float> data(static_cast<std::size_t>(h * w));
    for (auto& v : data) v = rng.bernoulli(p_fg) ? 1.0f : 0.0f;
    return Tensor::from_vector({1, 1, h, w}, std::move(data));
}

// brute-force per-pixel tally, independent of the library path
ConfusionCounts tally(const Tensor& pred, const Tensor& gt) {
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.values().size(); ++i) {
        const bool p = pred.values()[i] == 1.0f;
        const bool g = gt.values()[i] == 1.0f;
        c.tp += p && g;
        c.fp += p && !g;
        c.fn += !p && g;
        c.tn += !p && !g;
    }
    return c;
}

}  // namespace

TEST_CASE("binarize: boundary convention, idempotence") {
    auto pred = Tensor::from_vector({1, 1, 1, 2}, {0.49f, 0.51f});
    auto mask = binarize(pred, 0.5);
    CHECK(mask.values() == std::vector<float>{0, 1});

    auto half = binarize(Tensor::full({1, 1, 2, 2}, 0.5f), 0.5);
    for (float v : half.values()) CHECK(v == 1.0f);  // >= threshold maps to 1

    auto twice = binarize(mask, 0.5);
    CHECK(twice.values() == mask.values());

    CHECK_THROWS_AS(binarize(pred, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(binarize(pred, 1.0), std::invalid_argument);
}

TEST_CASE("confusion: examples and the brute-force oracle") {
    Rng rng(5);
    auto m = random_mask(rng, 8, 8);
    auto same = confusion(m, m);
    std::int64_t fg = 0;
    for (float v : m.values()) fg += v == 1.0f;
    CHECK(same.tp == fg);
    CHECK(same.fp == 0);
    CHECK(same.fn == 0);
    CHECK(same.total() == 64);

    // complement masks share nothing
    std::vector<float> inv(m.values().size());
    for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = 1.0f - m.values()[i];
    auto comp = confusion(Tensor::from_vector(m.shape(), std::move(inv)), m);
    CHECK(comp.tp == 0);
    CHECK(comp.tn == 0);

    for (int trial = 0; trial < 8; ++trial) {
        auto a = random_mask(rng, 16, 16, 0.3 + 0.05 * trial);
        auto b = random_mask(rng, 16, 16, 0.5);
        auto got = confusion(a, b);
        auto expect = tally(a, b);
        CHECK(got.tp == expect.tp);
        CHECK(got.fp == expect.fp);
        CHECK(got.fn == expect.fn);
        CHECK(got.tn == expect.tn);
    }

    CHECK_THROWS_WITH_AS(confusion(Tensor::full({1, 1, 2, 2}, 0.5f), random_mask(rng, 2, 2)),
                         doctest::Contains("binary"), std::invalid_argument);
    CHECK_THROWS_AS(confusion(random_mask(rng, 2, 2), random_mask(rng, 3, 3)), std::invalid_argument);
}

TEST_CASE("compute_metrics: hand arithmetic and edge conventions") {
    SUBCASE("tp=50 fn=50 fp=0") {
        auto m = compute_metrics(ConfusionCounts{50, 0, 50, 0});
        CHECK(m.precision == doctest::Approx(1.0));
        CHECK(m.recall == doctest::Approx(0.5));
        CHECK(m.iou == doctest::Approx(0.5));
        CHECK(m.dsc == doctest::Approx(2.0 / 3.0).epsilon(1e-4));
        CHECK(m.f2 == doctest::Approx(5.0 * 1.0 * 0.5 / (4.0 + 0.5)).epsilon(1e-4));
    }
    SUBCASE("perfect match") {
        auto m = compute_metrics(ConfusionCounts{10, 0, 0, 54});
        CHECK(m.iou == 1.0);
        CHECK(m.dsc == 1.0);
        CHECK(m.recall == 1.0);
        CHECK(m.precision == 1.0);
        CHECK(m.f2 == 1.0);
    }
    SUBCASE("disjoint masks") {
        auto m = compute_metrics(ConfusionCounts{0, 5, 7, 52});
        CHECK(m.iou == 0.0);
        CHECK(m.dsc == 0.0);
        CHECK(m.f2 == 0.0);
    }
    SUBCASE("both empty: every metric is 1") {
        auto m = compute_metrics(ConfusionCounts{0, 0, 0, 64});
        CHECK(m.iou == 1.0);
        CHECK(m.dsc == 1.0);
        CHECK(m.recall == 1.0);
        CHECK(m.precision == 1.0);
        CHECK(m.f2 == 1.0);
    }
    SUBCASE("exactly one empty: zeros, including the undefined ratio") {
        auto gt_empty = compute_metrics(ConfusionCounts{0, 9, 0, 55});
        CHECK(gt_empty.iou == 0.0);
        CHECK(gt_empty.dsc == 0.0);
        CHECK(gt_empty.recall == 0.0);  // 0/0 resolves to 0
        CHECK(gt_empty.precision == 0.0);
        auto pred_empty = compute_metrics(ConfusionCounts{0, 0, 9, 55});
        CHECK(pred_empty.precision == 0.0);
        CHECK(pred_empty.recall == 0.0);
    }
}

TEST_CASE("metric identities on random counts") {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        ConfusionCounts c;
        c.tp = static_cast<std::int64_t>(rng.uniform_int(40));
        c.fp = static_cast<std::int64_t>(rng.uniform_int(40));
        c.fn = static_cast<std::int64_t>(rng.uniform_int(40));
        c.tn = 256 - c.tp - c.fp - c.fn;
        if (c.tn < 0) continue;
        auto m = compute_metrics(c);

        if (c.tp + c.fn > 0 || c.tp + c.fp > 0) {
            // dsc = 2*iou/(1+iou), exact as a rational identity
            CHECK(m.dsc == doctest::Approx(2 * m.iou / (1 + m.iou)).epsilon(1e-12));
            CHECK(m.iou <= m.dsc + 1e-15);
            if (m.iou != 0.0 && m.iou != 1.0) CHECK(m.iou < m.dsc);

            // dsc is the harmonic mean of precision and recall where defined
            if (m.precision + m.recall > 0) {
                CHECK(m.dsc == doctest::Approx(2 * m.precision * m.recall /
                                               (m.precision + m.recall))
                                   .epsilon(1e-12));
            }
            // f2 lies between precision and recall
            if (c.tp > 0) {
                CHECK(m.f2 >= std::min(m.precision, m.recall) - 1e-12);
                CHECK(m.f2 <= std::max(m.precision, m.recall) + 1e-12);
            }
        }
        for (double v : {m.iou, m.dsc, m.recall, m.precision, m.f2}) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("metrics are invariant under a simultaneous spatial permutation") {
    Rng rng(11);
    auto a = random_mask(rng, 8, 8);
    auto b = random_mask(rng, 8, 8);
    auto base = compute_metrics(confusion(a, b));

    auto perm = identity_permutation(64);
    rng.shuffle(perm);
    std::vector<float> pa(64), pb(64);
    for (std::size_t i = 0; i < 64; ++i) {
        pa[i] = a.values()[perm[i]];
        pb[i] = b.values()[perm[i]];
    }
    auto shuffled = compute_metrics(confusion(Tensor::from_vector({1, 1, 8, 8}, std::move(pa)),
                                              Tensor::from_vector({1, 1, 8, 8}, std::move(pb))));
    CHECK(base.iou == shuffled.iou);
    CHECK(base.dsc == shuffled.dsc);
    CHECK(base.f2 == shuffled.f2);
}

TEST_CASE("evaluate_masks: ground-truth predictions score 1.0 and errors name samples") {
    auto dir = fs::temp_directory_path() / "transnetr_metrics_eval";
    fs::remove_all(dir);
    SynthConfig synth;
    synth.n = 6;
    synth.size = 32;
    synth.centers = 2;
    synth.seed = 9;
    auto manifest = synth_dataset(synth, dir / "data");

    // predictions = the ground truth masks themselves
    const auto pred_dir = dir / "preds";
    for (const auto& rec : manifest.records) {
        fs::create_directories((pred_dir / rec.id).parent_path());
        fs::copy_file(rec.mask_path, pred_dir / (rec.id + ".pgm"));
    }
    auto report = evaluate_masks(pred_dir, manifest, 0.5);
    REQUIRE(report.rows.size() == 6);
    CHECK(report.aggregate().dsc == 1.0);
    CHECK(report.aggregate().iou == 1.0);

    // per-center means, weighted by size, reproduce the overall mean
    double weighted = 0;
    std::size_t total = 0;
    for (const auto& agg : report.per_center()) {
        weighted += agg.mean.dsc * static_cast<double>(agg.count);
        total += agg.count;
    }
    CHECK(total == report.rows.size());
    CHECK(weighted / static_cast<double>(total) == doctest::Approx(report.aggregate().dsc).epsilon(1e-12));

    fs::remove(pred_dir / (manifest.records[0].id + ".pgm"));
    CHECK_THROWS_WITH_AS(evaluate_masks(pred_dir, manifest, 0.5),
                         doctest::Contains(manifest.records[0].id.c_str()), std::runtime_error);
}

TEST_CASE("evaluate_masks matches an independent scalar recomputation") {
    auto dir = fs::temp_directory_path() / "transnetr_metrics_oracle";
    fs::remove_all(dir);
    SynthConfig synth;
    synth.n = 5;
    synth.size = 32;
    synth.seed = 21;
    auto manifest = synth_dataset(synth, dir / "data");

    // predictions = masks of the *next* sample (deliberately wrong)
    const auto pred_dir = dir / "preds";
    fs::create_directories(pred_dir);
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        const auto& next = manifest.records[(i + 1) % manifest.records.size()];
        fs::copy_file(next.mask_path, pred_dir / (manifest.records[i].id + ".pgm"));
    }
    auto report = evaluate_masks(pred_dir, manifest, 0.5);

    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        auto gt = load_sample(manifest.records[i]);
        auto pr = load_sample(manifest.records[(i + 1) % manifest.records.size()]);
        auto expect = compute_metrics(tally(pr.mask, gt.mask));
        CHECK(report.rows[i].m.iou == doctest::Approx(expect.iou).epsilon(1e-12));
        CHECK(report.rows[i].m.dsc == doctest::Approx(expect.dsc).epsilon(1e-12));
        CHECK(report.rows[i].m.f2 == doctest::Approx(expect.f2).epsilon(1e-12));
    }
}

TEST_CASE("report serialization: csv columns and table sectioning") {
    MetricsReport report;
    report.rows.push_back({"C1/a", "C1", PerImageMetrics{1, 1, 1, 1, 1}});
    report.rows.push_back({"C2/b", "C2", PerImageMetrics{0, 0, 0, 0, 0}});

    auto dir = fs::temp_directory_path() / "transnetr_metrics_csv";
    fs::create_directories(dir);
    report.write_csv(dir / "per_image.csv");
    report.write_summary_csv(dir / "summary.csv");

    std::ifstream in(dir / "per_image.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "id,center,iou,dsc,recall,precision,f2");
    std::string row;
    std::getline(in, row);
    CHECK(row.rfind("C1/a,C1,1,", 0) == 0);

    std::ifstream sum(dir / "summary.csv");
    std::getline(sum, header);
    CHECK(header == "center,count,miou,mdsc,recall,precision,f2");
    std::getline(sum, row);
    CHECK(row.rfind("All,2,0.5,", 0) == 0);

    auto table = report.human_table("TransNetR (Ours)", "synthetic");
    CHECK(table.find("synthetic (All)") != std::string::npos);
    CHECK(table.find("synthetic (C1)") != std::string::npos);
    CHECK(table.find("synthetic (C2)") != std::string::npos);
    CHECK(table.find("mIoU") != std::string::npos);
    CHECK(table.find("TransNetR (Ours)") != std::string::npos);

    // per-center aggregates: one image each
    auto centers = report.per_center();
    REQUIRE(centers.size() == 2);
    CHECK(centers[0].mean.dsc == 1.0);
    CHECK(centers[1].mean.dsc == 0.0);
    CHECK(report.aggregate().dsc == doctest::Approx(0.5));
}

TEST_CASE("fps_benchmark produces finite positive figures") {
    ModelConfig cfg;
    cfg.encoder_preset = EncoderPreset::Tiny;
    auto model = build_model(cfg, 3);
    auto report = fps_benchmark(model, 64, 64, 1, 3);
    CHECK(report.fps > 0);
    CHECK(std::isfinite(report.fps));
    CHECK(report.p50_ms > 0);
    CHECK(report.p99_ms >= report.p50_ms);
    CHECK(report.iterations == 3);
    CHECK_THROWS_AS(fps_benchmark(model, 64, 64, 0, 0), std::invalid_argument);
}

TEST_CASE("fps_benchmark: stability under doubled iterations and cost ordering") {
    ModelConfig tiny;
    tiny.encoder_preset = EncoderPreset::Tiny;
    auto small = build_model(tiny, 3);
    auto short_run = fps_benchmark(small, 64, 64, 2, 10);
    auto long_run = fps_benchmark(small, 64, 64, 2, 20);
    const double rel = std::abs(long_run.fps - short_run.fps) / short_run.fps;
    CHECK(rel < 0.20);

    auto big = build_model(ModelConfig{}, 3);  // resnet50 preset
    auto heavy = fps_benchmark(big, 256, 256, 1, 2);
    CHECK(short_run.fps > heavy.fps);
}
