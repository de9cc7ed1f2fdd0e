#pragma once

#include <cstdint>
#include <vector>

#include "meshtex/geometry.hpp"
#include "meshtex/image.hpp"
#include "meshtex/tensor.hpp"

namespace meshtex::render {

// Screen space is NDC [-1,1]^2 with y up; pixel (row i, col j) covers the
// center   x = -1 + 2(j+0.5)/W,  y = 1 - 2(i+0.5)/H.
inline double pixel_x(int j, int width) { return -1.0 + 2.0 * (j + 0.5) / width; }
inline double pixel_y(int i, int height) { return 1.0 - 2.0 * (i + 0.5) / height; }

// Per-pixel result of hard rasterization. face_id -1 marks uncovered pixels;
// covered pixels carry convex barycentrics, the interpolated seam-aware UV and
// the barycentric-interpolated camera depth of the nearest front-facing face.
struct FragmentBuffer {
    int height = 0;
    int width = 0;
    std::vector<std::int32_t> face_id;
    std::vector<double> bary;   // 3 per pixel
    std::vector<double> uv;     // 2 per pixel
    std::vector<double> depth;  // +inf where uncovered
    std::vector<std::int64_t> covered;  // pixel indices with a face

    bool has(std::int64_t pix) const { return face_id[pix] >= 0; }
};

FragmentBuffer rasterize(const geo::TriMesh& mesh,
                         const geo::WeakPerspectiveCamera& camera, int resolution);

// Rasterize from already-projected screen/depth values (used internally and by
// pipelines that carry deformed vertices).
FragmentBuffer rasterize_projected(const std::vector<geo::Vec2>& screen,
                                   const std::vector<double>& depth,
                                   const geo::TriMesh& topology, int resolution);

template <typename T>
struct RenderOutput {
    ad::Tensor<T> rgb;    // [3,H,W], zero outside coverage
    ad::Tensor<T> alpha;  // [H,W]
};

// Textured shading of the covered pixels: barycentrics are recomputed
// differentiably from `screen`, the UV interpolated per face corner, and the
// texture sampled bilinearly. Differentiable wrt screen (hence vertices and
// camera) and texture.
template <typename T>
ad::Tensor<T> shade(const FragmentBuffer& fragments, const geo::TriMesh& topology,
                    const ad::Tensor<T>& screen, const ad::Tensor<T>& texture);

// Probabilistic coverage: per face p = sigmoid(d/sigma) with d the signed
// screen-space distance to the face boundary (positive inside), aggregated as
// alpha = 1 - prod(1 - p). Differentiable wrt screen.
template <typename T>
ad::Tensor<T> soft_silhouette(const ad::Tensor<T>& screen, const geo::TriMesh& topology,
                              int resolution, double sigma);

img::Image projected_silhouette(const geo::TriMesh& mesh,
                                const geo::WeakPerspectiveCamera& camera,
                                int resolution);

struct TextureAtlas {
    img::Image texture;     // 3 x Ht x Wt, zero where invisible
    img::Image visibility;  // 1 x Ht x Wt, binary
};

struct InverseRenderOptions {
    double depth_eps_rel = 1e-3;  // times bbox diagonal
    double min_facing_cos = 0.0;  // optional grazing-angle cull (0 = backface only)
    int visibility_erosion = 1;   // texels, against silhouette-edge bleeding
};

// Texel-centric gather of image colors into UV space with a visibility mask.
// `mask` is expected to be the mesh-projected silhouette of this view.
TextureAtlas inverse_render(const img::Image& image, const img::Image& mask,
                            const geo::TriMesh& mesh,
                            const geo::WeakPerspectiveCamera& camera, int tex_h,
                            int tex_w, const InverseRenderOptions& options = {});

// Convenience forward render (no gradients): hard rgb + hard alpha.
RenderOutput<float> render_view(const geo::TriMesh& mesh,
                                const geo::WeakPerspectiveCamera& camera,
                                const ad::Tensor<float>& texture, int resolution);

}  // namespace meshtex::render
