#pragma once

#include <string>
#include <vector>

#include "meshtex/geometry.hpp"
#include "meshtex/image.hpp"
#include "meshtex/losses.hpp"
#include "meshtex/render.hpp"

namespace meshtex::metrics {

// Frechet distance between Gaussian fits of two vector sets [n, d]:
// ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)). Covariances are
// regularized with 1e-6 on the diagonal; the matrix square root goes through
// an eigendecomposition of the symmetrized product.
double frechet_distance(const std::vector<std::vector<double>>& a,
                        const std::vector<std::vector<double>>& b);

// Per-image pooled feature vector: spatial channel means of every tapped
// layer, concatenated.
std::vector<double> pooled_features(const img::Image& image,
                                    const loss::FeatureExtractor<float>& extractor);

double feature_distance(const std::vector<img::Image>& real,
                        const std::vector<img::Image>& fake,
                        const loss::FeatureExtractor<float>& extractor);

double iou(const img::Image& a, const img::Image& b);
double masked_l1(const img::Image& a, const img::Image& b, const img::Image& mask);

struct TurntableParams {
    int n_views = 12;
    int resolution = 64;
    double scale = 0.8;
    double elevation_deg = 12.0;
};
std::vector<render::RenderOutput<float>> render_turntable(
    const geo::TriMesh& mesh, const ad::Tensor<float>& texture,
    const TurntableParams& params);

struct PerViewMetrics {
    int index = 0;
    double iou = 0;
    double masked_l1 = 0;
};

struct MetricReport {
    double iou = 0;               // mean over evaluated views
    double masked_l1 = 0;         // mean over evaluated views
    double feature_distance = 0;  // turntable renders vs training images
    std::vector<PerViewMetrics> per_view;

    std::string to_json() const;
    void save(const std::string& json_path, const std::string& csv_path) const;
};

}  // namespace meshtex::metrics
