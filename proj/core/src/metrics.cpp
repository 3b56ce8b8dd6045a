#include "transnetr/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace transnetr {

Tensor binarize(const Tensor& pred, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw std::invalid_argument("binarize: threshold must be in (0,1)");
    }
    std::vector<float> out(pred.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = pred.values()[i] >= static_cast<float>(threshold) ? 1.0f : 0.0f;
    }
    return Tensor::from_vector(pred.shape(), std::move(out));
}

ConfusionCounts confusion(const Tensor& pred_mask, const Tensor& gt_mask) {
    if (pred_mask.shape() != gt_mask.shape()) {
        throw std::invalid_argument("confusion: shape mismatch, " + shape_str(pred_mask.shape()) +
                                    " vs " + shape_str(gt_mask.shape()));
    }
    ConfusionCounts c;
    const auto& p = pred_mask.values();
    const auto& g = gt_mask.values();
    for (std::size_t i = 0; i < p.size(); ++i) {
        if ((p[i] != 0.0f && p[i] != 1.0f) || (g[i] != 0.0f && g[i] != 1.0f)) {
            throw std::invalid_argument("confusion: masks must be binary");
        }
        const bool pp = p[i] == 1.0f, gg = g[i] == 1.0f;
        if (pp && gg) ++c.tp;
        else if (pp && !gg) ++c.fp;
        else if (!pp && gg) ++c.fn;
        else ++c.tn;
    }
    return c;
}

PerImageMetrics compute_metrics(const ConfusionCounts& c) {
    PerImageMetrics m;
    const std::int64_t gt_fg = c.tp + c.fn;
    const std::int64_t pred_fg = c.tp + c.fp;
    if (gt_fg == 0 && pred_fg == 0) {
        m.iou = m.dsc = m.recall = m.precision = m.f2 = 1.0;
        return m;
    }
    const auto ratio = [](std::int64_t num, std::int64_t den) {
        return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
    };
    m.iou = ratio(c.tp, c.tp + c.fp + c.fn);
    m.dsc = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
    m.recall = ratio(c.tp, c.tp + c.fn);
    m.precision = ratio(c.tp, c.tp + c.fp);
    const double denom = 4.0 * m.precision + m.recall;
    m.f2 = denom == 0.0 ? 0.0 : 5.0 * m.precision * m.recall / denom;
    return m;
}

// ------------------------------------------------------------------ report

namespace {

PerImageMetrics mean_of(const std::vector<const PerImageMetrics*>& items) {
    PerImageMetrics sum;
    for (const auto* m : items) {
        sum.iou += m->iou;
        sum.dsc += m->dsc;
        sum.recall += m->recall;
        sum.precision += m->precision;
        sum.f2 += m->f2;
    }
    const double n = static_cast<double>(items.size());
    if (n > 0) {
        sum.iou /= n;
        sum.dsc /= n;
        sum.recall /= n;
        sum.precision /= n;
        sum.f2 /= n;
    }
    return sum;
}

std::string fmt_full(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt4(double v) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

}  // namespace

PerImageMetrics MetricsReport::aggregate() const {
    std::vector<const PerImageMetrics*> all;
    all.reserve(rows.size());
    for (const auto& r : rows) all.push_back(&r.m);
    return mean_of(all);
}

std::vector<CenterAggregate> MetricsReport::per_center() const {
    std::map<std::string, std::vector<const PerImageMetrics*>> groups;
    for (const auto& r : rows) {
        groups[r.center.empty() ? "untagged" : r.center].push_back(&r.m);
    }
    std::vector<CenterAggregate> out;
    for (const auto& [center, items] : groups) {
        if (center == "untagged") continue;
        out.push_back(CenterAggregate{center, items.size(), mean_of(items)});
    }
    if (auto it = groups.find("untagged"); it != groups.end()) {
        out.push_back(CenterAggregate{"untagged", it->second.size(), mean_of(it->second)});
    }
    return out;
}

void MetricsReport::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write report: " + path.string());
    out << "id,center,iou,dsc,recall,precision,f2\n";
    for (const auto& r : rows) {
        out << r.id << "," << r.center << "," << fmt_full(r.m.iou) << "," << fmt_full(r.m.dsc) << ","
            << fmt_full(r.m.recall) << "," << fmt_full(r.m.precision) << "," << fmt_full(r.m.f2)
            << "\n";
    }
}

void MetricsReport::write_summary_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write summary: " + path.string());
    out << "center,count,miou,mdsc,recall,precision,f2\n";
    auto line = [&](const std::string& center, std::size_t count, const PerImageMetrics& m) {
        out << center << "," << count << "," << fmt_full(m.iou) << "," << fmt_full(m.dsc) << ","
            << fmt_full(m.recall) << "," << fmt_full(m.precision) << "," << fmt_full(m.f2) << "\n";
    };
    line("All", rows.size(), aggregate());
    for (const auto& agg : per_center()) line(agg.center, agg.count, agg.mean);
}

std::string MetricsReport::human_table(const std::string& method_label,
                                       const std::string& dataset_label) const {
    std::ostringstream os;
    auto section = [&](const std::string& title, const PerImageMetrics& m, std::size_t count) {
        os << "Test dataset: " << title << " [" << count << " images]\n";
        os << "Method                                            | mIoU   | mDSC   | Recall | "
              "Precision | F2\n";
        os << std::string(100, '-') << "\n";
        char row[256];
        std::snprintf(row, sizeof(row), "%-49s | %s | %s | %s | %s    | %s\n", method_label.c_str(),
                      fmt4(m.iou).c_str(), fmt4(m.dsc).c_str(), fmt4(m.recall).c_str(),
                      fmt4(m.precision).c_str(), fmt4(m.f2).c_str());
        os << row << "\n";
    };
    section(dataset_label + " (All)", aggregate(), rows.size());
    const auto centers = per_center();
    if (centers.size() > 1 || (centers.size() == 1 && centers[0].center != "untagged")) {
        for (const auto& agg : centers) {
            section(dataset_label + " (" + agg.center + ")", agg.mean, agg.count);
        }
    }
    if (fps || parameter_count || mac_count) {
        os << "Cost:";
        if (fps) os << " fps=" << fmt4(*fps);
        if (parameter_count) os << " parameters=" << *parameter_count;
        if (mac_count) os << " macs=" << *mac_count;
        os << "\n";
    }
    return os.str();
}

// ------------------------------------------------------------------ evaluation

MetricsReport evaluate_model(TransNetRModel& model, const DatasetManifest& data, double threshold,
                             std::int64_t height, std::int64_t width) {
    MetricsReport report;
    for (const auto& record : data.records) {
        Sample sample = load_sample(record, height, width);
        auto pred = model.forward(sample.image, false);
        auto mask = binarize(pred, threshold);
        report.rows.push_back(
            MetricsReport::Row{record.id, record.center, compute_metrics(confusion(mask, sample.mask))});
    }
    return report;
}

MetricsReport evaluate_masks(const std::filesystem::path& pred_dir, const DatasetManifest& data,
                             double threshold) {
    MetricsReport report;
    for (const auto& record : data.records) {
        const auto pred_path = pred_dir / (record.id + ".pgm");
        if (!std::filesystem::exists(pred_path)) {
            throw std::runtime_error("missing prediction for sample '" + record.id + "' (expected " +
                                     pred_path.string() + ")");
        }
        Sample sample = load_sample(record);  // native resolution
        ImageU8 pred_img = read_image(pred_path);
        if (pred_img.width != sample.mask.dim(3) || pred_img.height != sample.mask.dim(2)) {
            throw std::runtime_error("prediction for sample '" + record.id + "' is " +
                                     std::to_string(pred_img.width) + "x" +
                                     std::to_string(pred_img.height) + " but ground truth is " +
                                     std::to_string(sample.mask.dim(3)) + "x" +
                                     std::to_string(sample.mask.dim(2)));
        }
        std::vector<float> pred_vals(pred_img.pixels.size());
        for (std::size_t i = 0; i < pred_vals.size(); ++i) {
            pred_vals[i] = static_cast<float>(pred_img.pixels[i * pred_img.channels]) / 255.0f;
        }
        auto pred =
            Tensor::from_vector({1, 1, pred_img.height, pred_img.width}, std::move(pred_vals));
        auto mask = binarize(pred, threshold);
        report.rows.push_back(
            MetricsReport::Row{record.id, record.center, compute_metrics(confusion(mask, sample.mask))});
    }
    return report;
}

FpsReport fps_benchmark(TransNetRModel& model, std::int64_t height, std::int64_t width, int warmup,
                        int iters) {
    if (iters < 1) throw std::invalid_argument("fps_benchmark: iters must be >= 1");
    Rng rng(7);
    std::vector<float> data(static_cast<std::size_t>(3 * height * width));
    for (auto& v : data) v = static_cast<float>(rng.uniform(0.0, 1.0));
    auto image = Tensor::from_vector({1, 3, height, width}, std::move(data));

    for (int i = 0; i < warmup; ++i) (void)model.forward(image, false);

    std::vector<double> latencies_ms;
    latencies_ms.reserve(static_cast<std::size_t>(iters));
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < iters; ++i) {
        const auto s = std::chrono::steady_clock::now();
        (void)model.forward(image, false);
        const auto e = std::chrono::steady_clock::now();
        latencies_ms.push_back(std::chrono::duration<double, std::milli>(e - s).count());
    }
    const auto t1 = std::chrono::steady_clock::now();
    const double elapsed_s = std::chrono::duration<double>(t1 - t0).count();

    std::sort(latencies_ms.begin(), latencies_ms.end());
    auto percentile = [&](double p) {
        const std::size_t idx = static_cast<std::size_t>(
            std::min<double>(std::ceil(p * iters) - 1, iters - 1));
        return latencies_ms[std::max<std::size_t>(idx, 0)];
    };
    FpsReport report;
    report.iterations = iters;
    report.fps = iters / elapsed_s;
    report.p50_ms = percentile(0.50);
    report.p90_ms = percentile(0.90);
    report.p99_ms = percentile(0.99);
    return report;
}

}  // namespace transnetr
