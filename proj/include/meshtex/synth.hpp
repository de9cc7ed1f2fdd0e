#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meshtex/config.hpp"
#include "meshtex/geometry.hpp"
#include "meshtex/image.hpp"
#include "meshtex/render.hpp"

namespace meshtex::synth {

struct SceneParams {
    std::uint64_t seed = 1;
    int subdivisions = 3;
    int tex_h = 64;
    int tex_w = 128;
    int disp_res = 16;          // displacement map is 3 x disp_res x disp_res
    double disp_amplitude = 0.12;
    double camera_scale = 0.8;
    double elevation_deg = 12.0;
};

// Ground-truth object: a seeded smooth deformation of the unit icosphere with
// a seeded bright texture (min channel value 0.25 so baked darkness is
// attributable to masking artifacts, not content).
struct Scene {
    SceneParams params;
    geo::TriMesh template_mesh;
    ad::Tensor<float> displacement_map;  // [3, d, d]
    geo::TriMesh mesh;                   // deformed
    ad::Tensor<float> texture;           // [3, tex_h, tex_w]
};

Scene make_scene(const SceneParams& params);

ad::Tensor<float> checker_texture(int tex_h, int tex_w, int cells_u, int cells_v,
                                  double phase_u = 0.0);

// Turntable ground-truth camera for frame angle theta (degrees), viewing the
// object from the side with a slight elevation.
geo::WeakPerspectiveCamera turntable_camera(double theta_deg, double scale,
                                            double elevation_deg);

// Unit quaternion q perturbed by a rotation of exactly `angle_deg` about a
// seeded random axis.
std::array<double, 4> perturb_rotation(const std::array<double, 4>& q,
                                       double angle_deg, Rng& rng);

struct SequenceParams {
    int n_views = 24;
    double step_deg = 15.0;
    int resolution = 64;
    double camera_noise_deg = 2.0;      // gaussian magnitude on the inits
    std::vector<std::int64_t> flip_frames;  // corrupted with a 180 degree flip
    int mask_corrupt_erode = 0;         // optional Mask-RCNN-style impurity
    int mask_corrupt_dilate = 0;
};

// Renders the sequence, writes images/, masks/, gt_mesh.obj, gt_texture.png,
// scene metadata, and the manifest (a JSON array of frame records) under
// out_dir. Returns the manifest path.
std::string generate_sequence(const Scene& scene, const SequenceParams& params,
                              const std::string& out_dir, std::uint64_t seed);

// Aligned toy texture atlases for adversarial-training experiments: a fixed
// position-dependent layout with per-sample jitter, plus bake-style
// half-visibility masks.
struct ToyAtlas {
    img::Image texture;     // 3 x h x w, zero outside visibility
    img::Image visibility;  // 1 x h x w binary
};
std::vector<ToyAtlas> make_toy_atlases(int count, std::uint64_t seed, int tex_h,
                                       int tex_w);

SceneParams scene_params_from(const cfg::Config& config);
SequenceParams sequence_params_from(const cfg::Config& config);

}  // namespace meshtex::synth
