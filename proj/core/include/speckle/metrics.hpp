#pragma once

#include <string>
#include <utility>
#include <vector>

#include "speckle/image.hpp"

namespace speckle {

// Real-valued image on the [0,255] gray scale. Network outputs are
// mapped here by multiplying by 255, without rounding, so the metrics
// stay continuous in the output.
struct MetricImage {
    int height = 0;
    int width = 0;
    std::vector<double> values;
};

MetricImage metric_image(const GrayImage& img);
MetricImage metric_image(int height, int width, std::vector<double> values);

// mean absolute gray difference
double avg_gray_diff(const MetricImage& real_img, const MetricImage& out_img);

// 20*log10(255/sqrt(mean squared error)); +infinity for identical images
double psnr(const MetricImage& real_img, const MetricImage& out_img);

// Single-window SSIM over the whole image, population statistics,
// c1 = (0.01*255)^2, c2 = (0.03*255)^2.
double ssim(const MetricImage& real_img, const MetricImage& out_img);

struct QualityReport {
    double avg_gray_diff = 0.0;
    double psnr_db = 0.0;
    double ssim = 0.0;
    int sample_count = 0;
    int psnr_excluded = 0;  // +infinity entries left out of the mean
};

// Per-pair metrics averaged over the set.
QualityReport evaluate_set(const std::vector<std::pair<MetricImage, MetricImage>>& pairs);

// CSV row: dataset,model,avg_gray_diff,psnr_db,ssim,n
std::string quality_csv_header();
std::string quality_csv_row(const std::string& dataset, const std::string& model,
                            const QualityReport& report);

}  // namespace speckle
