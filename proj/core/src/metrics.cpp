#include "speckle/metrics.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace speckle {

namespace {

void check_pair(const MetricImage& a, const MetricImage& b, const char* who) {
    if (a.height != b.height || a.width != b.width) {
        throw std::invalid_argument(std::string(who) + ": shape mismatch");
    }
    if (a.height <= 0 || a.width <= 0 ||
        a.values.size() != static_cast<std::size_t>(a.height) * a.width ||
        b.values.size() != a.values.size()) {
        throw std::invalid_argument(std::string(who) + ": malformed image");
    }
}

}  // namespace

MetricImage metric_image(const GrayImage& img) {
    MetricImage m;
    m.height = img.height;
    m.width = img.width;
    m.values.assign(img.pixels.begin(), img.pixels.end());
    return m;
}

MetricImage metric_image(int height, int width, std::vector<double> values) {
    if (values.size() != static_cast<std::size_t>(height) * width) {
        throw std::invalid_argument("metric_image: size mismatch");
    }
    MetricImage m;
    m.height = height;
    m.width = width;
    m.values = std::move(values);
    return m;
}

double avg_gray_diff(const MetricImage& real_img, const MetricImage& out_img) {
    check_pair(real_img, out_img, "avg_gray_diff");
    double sum = 0.0;
    for (std::size_t i = 0; i < real_img.values.size(); ++i) {
        sum += std::abs(real_img.values[i] - out_img.values[i]);
    }
    return sum / static_cast<double>(real_img.values.size());
}

double psnr(const MetricImage& real_img, const MetricImage& out_img) {
    check_pair(real_img, out_img, "psnr");
    double mse = 0.0;
    for (std::size_t i = 0; i < real_img.values.size(); ++i) {
        const double d = real_img.values[i] - out_img.values[i];
        mse += d * d;
    }
    mse /= static_cast<double>(real_img.values.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 20.0 * std::log10(255.0 / std::sqrt(mse));
}

double ssim(const MetricImage& real_img, const MetricImage& out_img) {
    check_pair(real_img, out_img, "ssim");
    const std::size_t n = real_img.values.size();
    if (n < 2) throw std::invalid_argument("ssim: need at least 2 pixels");
    const double c1 = (0.01 * 255.0) * (0.01 * 255.0);
    const double c2 = (0.03 * 255.0) * (0.03 * 255.0);

    double mu_a = 0.0, mu_b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mu_a += real_img.values[i];
        mu_b += out_img.values[i];
    }
    mu_a /= static_cast<double>(n);
    mu_b /= static_cast<double>(n);

    double var_a = 0.0, var_b = 0.0, cov = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = real_img.values[i] - mu_a;
        const double db = out_img.values[i] - mu_b;
        var_a += da * da;
        var_b += db * db;
        cov += da * db;
    }
    var_a /= static_cast<double>(n);
    var_b /= static_cast<double>(n);
    cov /= static_cast<double>(n);

    return ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) /
           ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
}

QualityReport evaluate_set(const std::vector<std::pair<MetricImage, MetricImage>>& pairs) {
    if (pairs.empty()) throw std::invalid_argument("evaluate_set: empty pair list");
    QualityReport report;
    report.sample_count = static_cast<int>(pairs.size());
    double psnr_sum = 0.0;
    int psnr_n = 0;
    for (const auto& [real_img, out_img] : pairs) {
        report.avg_gray_diff += avg_gray_diff(real_img, out_img);
        report.ssim += ssim(real_img, out_img);
        const double p = psnr(real_img, out_img);
        if (std::isinf(p)) {
            ++report.psnr_excluded;
        } else {
            psnr_sum += p;
            ++psnr_n;
        }
    }
    report.avg_gray_diff /= pairs.size();
    report.ssim /= pairs.size();
    report.psnr_db = psnr_n > 0 ? psnr_sum / psnr_n : std::numeric_limits<double>::infinity();
    return report;
}

std::string quality_csv_header() { return "dataset,model,avg_gray_diff,psnr_db,ssim,n\n"; }

std::string quality_csv_row(const std::string& dataset, const std::string& model,
                            const QualityReport& report) {
    std::ostringstream out;
    out.precision(17);
    out << dataset << "," << model << "," << report.avg_gray_diff << "," << report.psnr_db << ","
        << report.ssim << "," << report.sample_count << "\n";
    return out.str();
}

}  // namespace speckle
