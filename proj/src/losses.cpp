#include "meshtex/losses.hpp"

#include <cmath>

#include "meshtex/rng.hpp"

namespace meshtex::loss {

using ad::Tensor;

template <typename T>
FeatureExtractor<T> FeatureExtractor<T>::random_default(std::uint64_t seed) {
    Rng rng(seed);
    FeatureExtractor<T> fx;
    int cin = 3;
    for (int cout : {16, 32, 64}) {
        typename FeatureExtractor<T>::Stage st;
        const double scale = std::sqrt(2.0 / (cin * 9));
        Rng wr = rng.fork(cat("stage", cout));
        st.weight = Tensor<T>::zeros({cout, cin, 3, 3});
        wr.fill_normal(st.weight.value(), 0.0, scale);
        st.bias = Tensor<T>::zeros({cout});
        fx.stages.push_back(std::move(st));
        cin = cout;
    }
    fx.taps = {1, 2, 3};
    return fx;
}

template <typename T>
std::vector<Tensor<T>> FeatureExtractor<T>::features(const Tensor<T>& img) const {
    Tensor<T> x = img;
    if (x.ndim() == 3)
        x = ad::reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
    MESHTEX_CHECK(x.ndim() == 4, ShapeError, "feature extractor expects [b,c,h,w], got ",
                  ad::shape_str(img.shape()));
    std::vector<Tensor<T>> out;
    std::vector<Tensor<T>> per_stage;
    per_stage.push_back(x);
    for (const auto& st : stages) {
        x = ad::relu(ad::conv2d(x, st.weight, st.bias, st.stride, st.padding));
        per_stage.push_back(x);
    }
    for (int tap : taps) {
        MESHTEX_CHECK(tap >= 0 && tap < static_cast<int>(per_stage.size()), ShapeError,
                      "feature tap ", tap, " out of range");
        out.push_back(per_stage[tap]);
    }
    return out;
}

template <typename T>
Tensor<T> perceptual_loss(const Tensor<T>& image, const Tensor<T>& rendered,
                          const FeatureExtractor<T>& extractor) {
    MESHTEX_CHECK(image.shape() == rendered.shape(), ShapeError,
                  "perceptual_loss resolution mismatch: ", ad::shape_str(image.shape()),
                  " vs ", ad::shape_str(rendered.shape()));
    auto fa = extractor.features(image);
    auto fb = extractor.features(rendered);
    Tensor<T> acc = Tensor<T>::scalar(T(0));
    for (std::size_t j = 0; j < fa.size(); ++j) {
        auto diff = fa[j] - fb[j];
        // element-count-normalized L2: sqrt of the mean squared difference,
        // which keeps layers of different sizes on one scale
        acc = acc + ad::sqrt(ad::sum(diff * diff) *
                             (T(1) / static_cast<T>(fa[j].numel())));
    }
    return acc;
}

template <typename T>
Tensor<T> silhouette_loss(const Tensor<T>& target, const Tensor<T>& rendered) {
    MESHTEX_CHECK(target.shape() == rendered.shape(), ShapeError,
                  "silhouette_loss shape mismatch: ", ad::shape_str(target.shape()),
                  " vs ", ad::shape_str(rendered.shape()));
    for (T v : target.value())
        MESHTEX_CHECK(v >= T(0) && v <= T(1), NumericalError,
                      "silhouette value outside [0,1]: ", static_cast<double>(v));
    for (T v : rendered.value())
        MESHTEX_CHECK(v >= T(0) && v <= T(1), NumericalError,
                      "silhouette value outside [0,1]: ", static_cast<double>(v));
    auto inter = ad::sum(target * rendered);
    auto uni = ad::sum(target + rendered) - inter;
    if (uni.item() == T(0)) return Tensor<T>::scalar(T(0));  // empty vs empty
    return Tensor<T>::scalar(T(1)) - inter / uni;
}

template <typename T>
Tensor<T> camera_loss(const geo::CameraTensors<T>& pred,
                      const geo::WeakPerspectiveCamera& gt) {
    geo::validate_camera(gt);
    // Align the ground-truth sign with the prediction (q and -q coincide).
    double dot = 0.0;
    for (int k = 0; k < 4; ++k)
        dot += static_cast<double>(pred.q.value()[k]) * gt.q[k];
    const double sign = dot < 0.0 ? -1.0 : 1.0;
    std::vector<T> qv(4);
    for (int k = 0; k < 4; ++k) qv[k] = static_cast<T>(sign * gt.q[k]);
    auto gt_q = Tensor<T>::from({4}, std::move(qv));
    auto gt_s = Tensor<T>::scalar(static_cast<T>(gt.s));
    auto gt_t = Tensor<T>::from({2}, {static_cast<T>(gt.t[0]), static_cast<T>(gt.t[1])});

    auto dq = pred.q - gt_q;
    auto ds = pred.s - gt_s;
    auto dt = pred.t - gt_t;
    return ad::sum(dq * dq) + ad::sum(ds * ds) + ad::sum(dt * dt);
}

template <typename T>
Tensor<T> total_loss(const LossTerms<T>& terms, const LossWeights& weights,
                     bool include_camera) {
    MESHTEX_CHECK(weights.perceptual >= 0 && weights.silhouette >= 0 &&
                      weights.camera >= 0 && weights.smoothness >= 0,
                  NumericalError, "negative loss weight");
    auto acc = terms.perceptual * static_cast<T>(weights.perceptual) +
               terms.silhouette * static_cast<T>(weights.silhouette) +
               terms.smoothness * static_cast<T>(weights.smoothness);
    if (include_camera) {
        MESHTEX_CHECK(terms.camera.defined(), NumericalError,
                      "total_loss: camera term requested but missing");
        acc = acc + terms.camera * static_cast<T>(weights.camera);
    }
    return acc;
}

#define MESHTEX_INSTANTIATE_LOSS(T)                                                       \
    template struct FeatureExtractor<T>;                                                  \
    template Tensor<T> perceptual_loss<T>(const Tensor<T>&, const Tensor<T>&,             \
                                          const FeatureExtractor<T>&);                    \
    template Tensor<T> silhouette_loss<T>(const Tensor<T>&, const Tensor<T>&);            \
    template Tensor<T> camera_loss<T>(const geo::CameraTensors<T>&,                       \
                                      const geo::WeakPerspectiveCamera&);                 \
    template Tensor<T> total_loss<T>(const LossTerms<T>&, const LossWeights&, bool);

MESHTEX_INSTANTIATE_LOSS(float)
MESHTEX_INSTANTIATE_LOSS(double)

}  // namespace meshtex::loss
