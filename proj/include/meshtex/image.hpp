#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meshtex/common.hpp"
#include "meshtex/tensor.hpp"

namespace meshtex::img {

// Planar float image, values in [0,1]; channels are 1 (mask/gray) or 3 (rgb).
struct Image {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> data;  // [c][h][w]

    static Image zeros(int c, int h, int w) {
        Image out;
        out.channels = c;
        out.height = h;
        out.width = w;
        out.data.assign(static_cast<std::size_t>(c) * h * w, 0.0f);
        return out;
    }
    float& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    float at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }
};

void write_png(const std::string& path, const Image& image);
Image read_png(const std::string& path);

Image resize_bilinear(const Image& image, int out_h, int out_w);

// Binary-mask morphology with a cross structuring element of the given
// radius; operates on channel 0 with threshold 0.5. With uv_topology the
// x axis wraps (texture seam) and out-of-range y is treated as inside, the
// behavior wanted for masks living on an equirectangular atlas.
Image erode(const Image& mask, int radius, bool uv_topology = false);
Image dilate(const Image& mask, int radius, bool uv_topology = false);

// Tiles images (all same size) into a grid with `cols` columns.
Image make_grid(const std::vector<Image>& tiles, int cols);

template <typename T>
Image from_tensor(const ad::Tensor<T>& t) {
    MESHTEX_CHECK(t.ndim() == 3 || t.ndim() == 2, ShapeError,
                  "image tensor must be [c,h,w] or [h,w]");
    Image out;
    if (t.ndim() == 3) {
        out.channels = static_cast<int>(t.dim(0));
        out.height = static_cast<int>(t.dim(1));
        out.width = static_cast<int>(t.dim(2));
    } else {
        out.channels = 1;
        out.height = static_cast<int>(t.dim(0));
        out.width = static_cast<int>(t.dim(1));
    }
    out.data.reserve(t.value().size());
    for (T v : t.value()) out.data.push_back(static_cast<float>(v));
    return out;
}

template <typename T>
ad::Tensor<T> to_tensor(const Image& image, bool keep_channel_dim = true) {
    std::vector<T> data;
    data.reserve(image.data.size());
    for (float v : image.data) data.push_back(static_cast<T>(v));
    if (image.channels == 1 && !keep_channel_dim)
        return ad::Tensor<T>::from({image.height, image.width}, std::move(data));
    return ad::Tensor<T>::from({image.channels, image.height, image.width},
                               std::move(data));
}

}  // namespace meshtex::img
