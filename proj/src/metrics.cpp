#include "meshtex/metrics.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>
#include <lapacke.h>

#include "meshtex/synth.hpp"

namespace meshtex::metrics {

namespace {

struct Gaussian {
    std::vector<double> mean;
    std::vector<double> cov;  // d x d row-major
    std::size_t dim = 0;
};

Gaussian fit(const std::vector<std::vector<double>>& samples) {
    MESHTEX_CHECK(samples.size() >= 2, NumericalError,
                  "need at least 2 samples for a Gaussian fit, got ", samples.size());
    Gaussian g;
    g.dim = samples[0].size();
    g.mean.assign(g.dim, 0.0);
    for (const auto& s : samples) {
        MESHTEX_CHECK(s.size() == g.dim, ShapeError, "inconsistent feature dimensions");
        for (std::size_t i = 0; i < g.dim; ++i) g.mean[i] += s[i];
    }
    for (auto& m : g.mean) m /= static_cast<double>(samples.size());
    g.cov.assign(g.dim * g.dim, 0.0);
    for (const auto& s : samples)
        for (std::size_t i = 0; i < g.dim; ++i) {
            const double di = s[i] - g.mean[i];
            for (std::size_t j = i; j < g.dim; ++j)
                g.cov[i * g.dim + j] += di * (s[j] - g.mean[j]);
        }
    const double denom = static_cast<double>(samples.size() - 1);
    for (std::size_t i = 0; i < g.dim; ++i)
        for (std::size_t j = i; j < g.dim; ++j) {
            g.cov[i * g.dim + j] /= denom;
            g.cov[j * g.dim + i] = g.cov[i * g.dim + j];
        }
    for (std::size_t i = 0; i < g.dim; ++i) g.cov[i * g.dim + i] += 1e-6;
    return g;
}

// Symmetric eigendecomposition; returns eigenvalues, eigenvectors as columns
// of V stored row-major in `a`.
void sym_eig(std::vector<double>& a, std::vector<double>& eigvals, std::size_t d) {
    eigvals.assign(d, 0.0);
    const int info = LAPACKE_dsyevd(LAPACK_ROW_MAJOR, 'V', 'U', static_cast<int>(d),
                                    a.data(), static_cast<int>(d), eigvals.data());
    MESHTEX_CHECK(info == 0, NumericalError, "eigendecomposition failed, info=", info);
}

std::vector<double> matmul_sq(const std::vector<double>& a, const std::vector<double>& b,
                              std::size_t d) {
    std::vector<double> out(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t k = 0; k < d; ++k) {
            const double av = a[i * d + k];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < d; ++j) out[i * d + j] += av * b[k * d + j];
        }
    return out;
}

}  // namespace

double frechet_distance(const std::vector<std::vector<double>>& a,
                        const std::vector<std::vector<double>>& b) {
    Gaussian ga = fit(a), gb = fit(b);
    MESHTEX_CHECK(ga.dim == gb.dim, ShapeError, "feature dimension mismatch: ", ga.dim,
                  " vs ", gb.dim);
    const std::size_t d = ga.dim;

    double mean_term = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double diff = ga.mean[i] - gb.mean[i];
        mean_term += diff * diff;
    }
    double tr_a = 0.0, tr_b = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        tr_a += ga.cov[i * d + i];
        tr_b += gb.cov[i * d + i];
    }

    // sqrtm(S_a) via eigendecomposition
    std::vector<double> va = ga.cov, eig_a;
    sym_eig(va, eig_a, d);
    std::vector<double> sqrt_a(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double lam = std::sqrt(std::max(eig_a[k], 0.0));
                acc += va[i * d + k] * lam * va[j * d + k];
            }
            sqrt_a[i * d + j] = acc;
        }

    // symmetrized product M = sqrt(S_a) S_b sqrt(S_a)
    auto m = matmul_sq(matmul_sq(sqrt_a, gb.cov, d), sqrt_a, d);
    // enforce symmetry against round-off before the eigensolve
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i + 1; j < d; ++j) {
            const double s = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = s;
            m[j * d + i] = s;
        }
    std::vector<double> eig_m;
    sym_eig(m, eig_m, d);
    double tr_sqrt = 0.0;
    for (double lam : eig_m) tr_sqrt += std::sqrt(std::max(lam, 0.0));

    return std::max(0.0, mean_term + tr_a + tr_b - 2.0 * tr_sqrt);
}

std::vector<double> pooled_features(const img::Image& image,
                                    const loss::FeatureExtractor<float>& extractor) {
    auto taps = extractor.features(img::to_tensor<float>(image));
    std::vector<double> out;
    for (const auto& tap : taps) {
        const std::int64_t c = tap.dim(1), hw = tap.dim(2) * tap.dim(3);
        for (std::int64_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            const float* p = tap.value().data() + ch * hw;
            for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
            out.push_back(acc / static_cast<double>(hw));
        }
    }
    return out;
}

double feature_distance(const std::vector<img::Image>& real,
                        const std::vector<img::Image>& fake,
                        const loss::FeatureExtractor<float>& extractor) {
    MESHTEX_CHECK(real.size() >= 2 && fake.size() >= 2, NumericalError,
                  "feature_distance needs at least 2 images per set");
    std::vector<std::vector<double>> fa, fb;
    fa.reserve(real.size());
    fb.reserve(fake.size());
    for (const auto& im : real) fa.push_back(pooled_features(im, extractor));
    for (const auto& im : fake) fb.push_back(pooled_features(im, extractor));
    return frechet_distance(fa, fb);
}

double iou(const img::Image& a, const img::Image& b) {
    MESHTEX_CHECK(a.height == b.height && a.width == b.width, ShapeError,
                  "iou mask size mismatch");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.pixel_count(); ++i) {
        const bool pa = a.data[i] >= 0.5f;
        const bool pb = b.data[i] >= 0.5f;
        if (pa && pb) ++inter;
        if (pa || pb) ++uni;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double masked_l1(const img::Image& a, const img::Image& b, const img::Image& mask) {
    MESHTEX_CHECK(a.channels == b.channels && a.height == b.height && a.width == b.width,
                  ShapeError, "masked_l1 image size mismatch");
    double acc = 0.0;
    std::size_t count = 0;
    for (int y = 0; y < a.height; ++y)
        for (int x = 0; x < a.width; ++x) {
            if (mask.at(0, y, x) < 0.5f) continue;
            for (int c = 0; c < a.channels; ++c)
                acc += std::abs(a.at(c, y, x) - b.at(c, y, x));
            count += a.channels;
        }
    return count == 0 ? 0.0 : acc / static_cast<double>(count);
}

std::vector<render::RenderOutput<float>> render_turntable(
    const geo::TriMesh& mesh, const ad::Tensor<float>& texture,
    const TurntableParams& params) {
    std::vector<render::RenderOutput<float>> out;
    out.reserve(params.n_views);
    for (int i = 0; i < params.n_views; ++i) {
        const double theta = 360.0 * i / params.n_views;
        auto cam = synth::turntable_camera(theta, params.scale, params.elevation_deg);
        out.push_back(render::render_view(mesh, cam, texture, params.resolution));
    }
    return out;
}

std::string MetricReport::to_json() const {
    nlohmann::json j;
    j["iou"] = iou;
    j["masked_l1"] = masked_l1;
    j["feature_distance"] = feature_distance;
    j["per_view"] = nlohmann::json::array();
    for (const auto& v : per_view)
        j["per_view"].push_back(
            {{"index", v.index}, {"iou", v.iou}, {"masked_l1", v.masked_l1}});
    return j.dump(2);
}

void MetricReport::save(const std::string& json_path, const std::string& csv_path) const {
    namespace fs = std::filesystem;
    {
        const std::string tmp = json_path + ".tmp";
        std::ofstream out(tmp);
        MESHTEX_CHECK(out.good(), IoError, "cannot write ", json_path);
        out << to_json() << "\n";
        out.close();
        fs::rename(tmp, json_path);
    }
    {
        const std::string tmp = csv_path + ".tmp";
        std::ofstream out(tmp);
        MESHTEX_CHECK(out.good(), IoError, "cannot write ", csv_path);
        out << "view,iou,masked_l1\n";
        for (const auto& v : per_view)
            out << v.index << "," << v.iou << "," << v.masked_l1 << "\n";
        out.close();
        fs::rename(tmp, csv_path);
    }
}

}  // namespace meshtex::metrics
