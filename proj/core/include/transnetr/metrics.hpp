#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "transnetr/data.hpp"
#include "transnetr/model.hpp"
#include "transnetr/tensor.hpp"

namespace transnetr {

struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    std::int64_t total() const { return tp + fp + fn + tn; }
};

// pixel >= threshold -> 1 else 0
Tensor binarize(const Tensor& pred, double threshold = 0.5);

// Both masks must be binary (exact 0/1 values) and shape-matched.
ConfusionCounts confusion(const Tensor& pred_mask, const Tensor& gt_mask);

struct PerImageMetrics {
    double iou = 0, dsc = 0, recall = 0, precision = 0, f2 = 0;
};

// Empty-mask conventions: both masks empty -> every metric is 1; exactly one
// empty -> iou = dsc = 0 and any 0/0 ratio resolves to 0.
PerImageMetrics compute_metrics(const ConfusionCounts& c);

struct CenterAggregate {
    std::string center;
    std::size_t count = 0;
    PerImageMetrics mean;
};

struct MetricsReport {
    struct Row {
        std::string id;
        std::string center;
        PerImageMetrics m;
    };
    std::vector<Row> rows;
    std::optional<double> fps;
    std::optional<std::int64_t> parameter_count;
    std::optional<std::int64_t> mac_count;

    PerImageMetrics aggregate() const;
    std::vector<CenterAggregate> per_center() const;  // center-sorted, untagged last

    // id,center,iou,dsc,recall,precision,f2 with full float precision
    void write_csv(const std::filesystem::path& path) const;
    // center,count,miou,mdsc,recall,precision,f2 per center plus an All row
    void write_summary_csv(const std::filesystem::path& path) const;
    // Paper-style sections: an (All) sub-table followed by one per center.
    std::string human_table(const std::string& method_label, const std::string& dataset_label) const;
};

// Runs the model over every sample at the given resolution (eval mode).
MetricsReport evaluate_model(TransNetRModel& model, const DatasetManifest& data, double threshold,
                             std::int64_t height, std::int64_t width);

// Pure recomputation over precomputed prediction rasters: pred_dir/<id>.pgm,
// compared at the ground truth's native resolution.
MetricsReport evaluate_masks(const std::filesystem::path& pred_dir, const DatasetManifest& data,
                             double threshold);

struct FpsReport {
    double fps = 0;
    double p50_ms = 0, p90_ms = 0, p99_ms = 0;
    int iterations = 0;
};

// Batch-1 eval-mode forwards timed with a monotonic clock.
FpsReport fps_benchmark(TransNetRModel& model, std::int64_t height, std::int64_t width, int warmup,
                        int iters);

}  // namespace transnetr
