#pragma once

#include <cstdint>
#include <vector>

#include "meshtex/geometry.hpp"
#include "meshtex/tensor.hpp"

namespace meshtex::loss {

// Fixed (non-trainable) convolutional feature stack for the perceptual loss
// and feature-space metrics. The default is a seeded random-weight stack;
// externally trained weights can be injected through the same structure.
template <typename T>
struct FeatureExtractor {
    struct Stage {
        ad::Tensor<T> weight;  // [cout, cin, k, k]
        ad::Tensor<T> bias;
        int stride = 2;
        int padding = 1;
    };
    std::vector<Stage> stages;
    std::vector<int> taps;  // stage indices whose output is tapped; 0 = input

    // 3 stages of channels 16/32/64 with stride 2, tapped after every stage.
    static FeatureExtractor random_default(std::uint64_t seed);

    // img: [c,h,w] or [b,c,h,w]. Returns one tensor per tap index.
    std::vector<ad::Tensor<T>> features(const ad::Tensor<T>& img) const;
};

struct LossWeights {
    double perceptual = 1.0;
    double silhouette = 1.0;
    double camera = 1.0;
    double smoothness = 0.00005;
};

// Sum over tapped layers of ||phi_j(I) - phi_j(I_r)||_2, each layer
// normalized by its element count. Inputs are expected to be masked to the
// object already.
template <typename T>
ad::Tensor<T> perceptual_loss(const ad::Tensor<T>& image,
                              const ad::Tensor<T>& rendered,
                              const FeatureExtractor<T>& extractor);

// 1 - |S o Sr|_1 / |S + Sr - S o Sr|_1, zero when both silhouettes are empty.
template <typename T>
ad::Tensor<T> silhouette_loss(const ad::Tensor<T>& target, const ad::Tensor<T>& rendered);

// Squared L2 over (q sign-aligned to the ground truth, s, t).
template <typename T>
ad::Tensor<T> camera_loss(const geo::CameraTensors<T>& pred,
                          const geo::WeakPerspectiveCamera& ground_truth);

template <typename T>
struct LossTerms {
    ad::Tensor<T> perceptual;
    ad::Tensor<T> silhouette;
    ad::Tensor<T> camera;  // may be undefined when not applicable
    ad::Tensor<T> smoothness;
};

template <typename T>
ad::Tensor<T> total_loss(const LossTerms<T>& terms, const LossWeights& weights,
                         bool include_camera);

}  // namespace meshtex::loss
