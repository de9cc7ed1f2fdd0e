#include "meshtex/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <png.h>

namespace meshtex::img {

namespace {

std::uint8_t to_byte(float v) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

}  // namespace

void write_png(const std::string& path, const Image& image) {
    MESHTEX_CHECK(image.channels == 1 || image.channels == 3, IoError,
                  "png write supports 1 or 3 channels, got ", image.channels);
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(image.width);
    png.height = static_cast<png_uint_32>(image.height);
    png.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;

    std::vector<std::uint8_t> interleaved(image.pixel_count() * image.channels);
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < image.channels; ++c)
                interleaved[(static_cast<std::size_t>(y) * image.width + x) *
                                image.channels + c] = to_byte(image.at(c, y, x));

    const std::string tmp = path + ".tmp";
    MESHTEX_CHECK(png_image_write_to_file(&png, tmp.c_str(), 0, interleaved.data(), 0,
                                          nullptr) != 0,
                  IoError, "png write failed for ", path, ": ", png.message);
    std::rename(tmp.c_str(), path.c_str());
}

Image read_png(const std::string& path) {
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    MESHTEX_CHECK(png_image_begin_read_from_file(&png, path.c_str()) != 0, IoError,
                  "cannot read png ", path, ": ", png.message);
    const bool gray = (png.format & PNG_FORMAT_FLAG_COLOR) == 0;
    png.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    const int channels = gray ? 1 : 3;
    std::vector<std::uint8_t> interleaved(static_cast<std::size_t>(png.width) *
                                          png.height * channels);
    MESHTEX_CHECK(png_image_finish_read(&png, nullptr, interleaved.data(), 0, nullptr) !=
                      0,
                  IoError, "png decode failed for ", path, ": ", png.message);

    Image out = Image::zeros(channels, static_cast<int>(png.height),
                             static_cast<int>(png.width));
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < channels; ++c)
                out.at(c, y, x) =
                    interleaved[(static_cast<std::size_t>(y) * out.width + x) * channels +
                                c] /
                    255.0f;
    return out;
}

Image resize_bilinear(const Image& image, int out_h, int out_w) {
    MESHTEX_CHECK(out_h >= 1 && out_w >= 1, ShapeError, "invalid resize target");
    Image out = Image::zeros(image.channels, out_h, out_w);
    const double sy = out_h > 1 ? static_cast<double>(image.height - 1) / (out_h - 1) : 0;
    const double sx = out_w > 1 ? static_cast<double>(image.width - 1) / (out_w - 1) : 0;
    for (int y = 0; y < out_h; ++y) {
        const double fy = y * sy;
        const int y0 = std::min(static_cast<int>(fy), image.height - 1);
        const int y1 = std::min(y0 + 1, image.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = x * sx;
            const int x0 = std::min(static_cast<int>(fx), image.width - 1);
            const int x1 = std::min(x0 + 1, image.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < image.channels; ++c) {
                const double v = (1 - wy) * ((1 - wx) * image.at(c, y0, x0) +
                                             wx * image.at(c, y0, x1)) +
                                 wy * ((1 - wx) * image.at(c, y1, x0) +
                                       wx * image.at(c, y1, x1));
                out.at(c, y, x) = static_cast<float>(v);
            }
        }
    }
    return out;
}

namespace {

Image morph(const Image& mask, int radius, bool erode_mode, bool uv_topology) {
    Image out = Image::zeros(1, mask.height, mask.width);
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x) {
            bool acc = erode_mode;
            for (int dy = -radius; dy <= radius && (erode_mode ? acc : !acc); ++dy)
                for (int dx = -radius + std::abs(dy); dx <= radius - std::abs(dy);
                     ++dx) {
                    int yy = y + dy, xx = x + dx;
                    bool inside;
                    if (uv_topology) {
                        xx = (xx % mask.width + mask.width) % mask.width;
                        if (yy < 0 || yy >= mask.height) {
                            inside = erode_mode;  // border does not erode
                        } else {
                            inside = mask.at(0, yy, xx) >= 0.5f;
                        }
                    } else {
                        inside = yy >= 0 && yy < mask.height && xx >= 0 &&
                                 xx < mask.width && mask.at(0, yy, xx) >= 0.5f;
                    }
                    if (erode_mode) {
                        if (!inside) {
                            acc = false;
                            break;
                        }
                    } else if (inside) {
                        acc = true;
                        break;
                    }
                }
            out.at(0, y, x) = acc ? 1.0f : 0.0f;
        }
    return out;
}

}  // namespace

Image erode(const Image& mask, int radius, bool uv_topology) {
    return morph(mask, radius, true, uv_topology);
}
Image dilate(const Image& mask, int radius, bool uv_topology) {
    return morph(mask, radius, false, uv_topology);
}

Image make_grid(const std::vector<Image>& tiles, int cols) {
    MESHTEX_CHECK(!tiles.empty() && cols >= 1, ShapeError, "make_grid needs tiles");
    const int rows = (static_cast<int>(tiles.size()) + cols - 1) / cols;
    const int th = tiles[0].height, tw = tiles[0].width, c = tiles[0].channels;
    Image out = Image::zeros(c, rows * th, cols * tw);
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        MESHTEX_CHECK(tiles[i].height == th && tiles[i].width == tw &&
                          tiles[i].channels == c,
                      ShapeError, "make_grid tiles must share one size");
        const int r = static_cast<int>(i) / cols, col = static_cast<int>(i) % cols;
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < th; ++y)
                std::memcpy(&out.at(ch, r * th + y, col * tw),
                            tiles[i].data.data() +
                                (static_cast<std::size_t>(ch) * th + y) * tw,
                            sizeof(float) * tw);
    }
    return out;
}

}  // namespace meshtex::img
