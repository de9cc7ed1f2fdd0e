#include "meshtex/synth.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include <json.hpp>

namespace meshtex::synth {

namespace fs = std::filesystem;
using geo::WeakPerspectiveCamera;

namespace {
constexpr double kPi = std::numbers::pi;
}

Scene make_scene(const SceneParams& p) {
    Scene scene;
    scene.params = p;
    scene.template_mesh = geo::icosphere(p.subdivisions);

    // Smooth u-periodic displacement field so the texture seam stays seamless.
    Rng rng(p.seed);
    Rng dr = rng.fork("displacement");
    const int d = p.disp_res;
    scene.displacement_map = ad::Tensor<float>::zeros({3, d, d});
    for (int c = 0; c < 3; ++c) {
        const double f1 = 1 + dr.randint(2);  // integer cycles wrap in u
        const double f2 = 1 + dr.randint(3);
        const double ph1 = dr.uniform(0, 2 * kPi);
        const double ph2 = dr.uniform(0, kPi);
        const double a1 = dr.uniform(0.45, 1.0) * p.disp_amplitude;
        const double a2 = dr.uniform(0.2, 0.6) * p.disp_amplitude;
        for (int y = 0; y < d; ++y)
            for (int x = 0; x < d; ++x) {
                const double u = static_cast<double>(x) / (d - 1);
                const double v = static_cast<double>(y) / (d - 1);
                const double val = a1 * std::sin(2 * kPi * f1 * u + ph1) *
                                       std::sin(kPi * std::max(1.0, f2 - 1) * v + ph2) +
                                   a2 * std::cos(2 * kPi * f2 * u + ph2) *
                                       std::sin(kPi * v);
                scene.displacement_map.value()[(c * d + y) * d + x] =
                    static_cast<float>(val);
            }
    }
    // wrap: copy column 0 into the last column for exact u-periodicity
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < d; ++y)
            scene.displacement_map.value()[(c * d + y) * d + (d - 1)] =
                scene.displacement_map.value()[(c * d + y) * d + 0];

    auto base = geo::template_vertices<float>(scene.template_mesh);
    auto deformed =
        geo::apply_deformation(base, scene.template_mesh, scene.displacement_map);
    scene.mesh = scene.template_mesh;
    for (std::size_t i = 0; i < scene.mesh.vertices.size(); ++i)
        for (int k = 0; k < 3; ++k)
            scene.mesh.vertices[i][k] = deformed.value()[i * 3 + k];

    // Bright structured texture: large color cells with mild sinusoidal
    // detail, all channels kept >= 0.25.
    Rng tr = rng.fork("texture");
    const int H = p.tex_h, W = p.tex_w;
    scene.texture = ad::Tensor<float>::zeros({3, H, W});
    const double hue_phase = tr.uniform(0, 2 * kPi);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double u = static_cast<double>(x) / (W - 1);
            const double v = static_cast<double>(y) / (H - 1);
            const int cu = std::min(static_cast<int>(u * 3), 2);
            const int cv = std::min(static_cast<int>(v * 2), 1);
            const int cell = cu + 3 * cv;
            const double detail = 0.08 * std::sin(2 * kPi * 6 * u + hue_phase) *
                                  std::cos(kPi * 5 * v);
            for (int c = 0; c < 3; ++c) {
                const double base_col =
                    0.35 + 0.3 * std::sin(hue_phase + 2.1 * c + 0.9 * cell);
                const double val = std::clamp(base_col + detail, 0.25, 0.95);
                scene.texture.value()[(c * H + y) * W + x] = static_cast<float>(val);
            }
        }
    return scene;
}

ad::Tensor<float> checker_texture(int tex_h, int tex_w, int cells_u, int cells_v,
                                  double phase_u) {
    auto tex = ad::Tensor<float>::zeros({3, tex_h, tex_w});
    for (int y = 0; y < tex_h; ++y)
        for (int x = 0; x < tex_w; ++x) {
            const double u = static_cast<double>(x) / (tex_w - 1);
            const double v = static_cast<double>(y) / (tex_h - 1);
            double uu = u + phase_u;
            uu -= std::floor(uu);
            const int cu = std::min(static_cast<int>(uu * cells_u), cells_u - 1);
            const int cv = std::min(static_cast<int>(v * cells_v), cells_v - 1);
            const bool on = (cu + cv) % 2 == 0;
            const float rgb[3] = {on ? 0.85f : 0.25f, on ? 0.35f : 0.75f,
                                  on ? 0.3f : 0.55f};
            for (int c = 0; c < 3; ++c)
                tex.value()[(c * tex_h + y) * tex_w + x] = rgb[c];
        }
    return tex;
}

WeakPerspectiveCamera turntable_camera(double theta_deg, double scale,
                                       double elevation_deg) {
    const double theta = theta_deg * kPi / 180.0;
    const double elev = elevation_deg * kPi / 180.0;
    // side view (screen up = world z) elevated, then the turntable spin
    auto q_side = geo::axis_angle_quat({1, 0, 0}, -kPi / 2 + elev);
    auto q_spin = geo::axis_angle_quat({0, 0, 1}, theta);
    WeakPerspectiveCamera cam;
    cam.q = geo::normalize_quat_values(geo::quat_mul(q_side, q_spin));
    cam.s = scale;
    cam.t = {0, 0};
    return cam;
}

std::array<double, 4> perturb_rotation(const std::array<double, 4>& q, double angle_deg,
                                       Rng& rng) {
    // uniform random axis
    double ax, ay, az, len2;
    do {
        ax = rng.normal();
        ay = rng.normal();
        az = rng.normal();
        len2 = ax * ax + ay * ay + az * az;
    } while (len2 < 1e-12);
    auto dq = geo::axis_angle_quat({ax, ay, az}, angle_deg * kPi / 180.0);
    return geo::normalize_quat_values(geo::quat_mul(dq, q));
}

std::string generate_sequence(const Scene& scene, const SequenceParams& p,
                              const std::string& out_dir, std::uint64_t seed) {
    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "masks");

    geo::save_obj((fs::path(out_dir) / "gt_mesh.obj").string(), scene.mesh);
    img::write_png((fs::path(out_dir) / "gt_texture.png").string(),
                   img::from_tensor(scene.texture));
    {
        std::map<std::string, ad::Tensor<float>> blob;
        blob.emplace("displacement_map", scene.displacement_map);
        blob.emplace("texture", scene.texture);
        ad::save_checkpoint((fs::path(out_dir) / "gt_scene").string(), blob);
    }

    Rng rng(seed);
    Rng noise = rng.fork("camera_noise");
    nlohmann::json frames = nlohmann::json::array();
    char name[64];
    for (int i = 0; i < p.n_views; ++i) {
        double theta = i * p.step_deg;
        const bool flipped =
            std::find(p.flip_frames.begin(), p.flip_frames.end(),
                      static_cast<std::int64_t>(i)) != p.flip_frames.end();
        auto cam_gt = turntable_camera(theta, scene.params.camera_scale,
                                       scene.params.elevation_deg);
        auto out = render::render_view(scene.mesh, cam_gt, scene.texture, p.resolution);
        auto mask = render::projected_silhouette(scene.mesh, cam_gt, p.resolution);

        img::Image stored_mask = mask;
        if (p.mask_corrupt_erode > 0) stored_mask = img::erode(stored_mask,
                                                               p.mask_corrupt_erode);
        if (p.mask_corrupt_dilate > 0)
            stored_mask = img::dilate(stored_mask, p.mask_corrupt_dilate);

        // the stored image is the raw rendering; consumers mask it themselves
        std::snprintf(name, sizeof name, "images/frame_%03d.png", i);
        const std::string image_rel = name;
        std::snprintf(name, sizeof name, "masks/frame_%03d.png", i);
        const std::string mask_rel = name;
        img::write_png((fs::path(out_dir) / image_rel).string(),
                       img::from_tensor(out.rgb));
        img::write_png((fs::path(out_dir) / mask_rel).string(), stored_mask);

        // init = gt plus rotation noise; flipped frames face the wrong way
        WeakPerspectiveCamera cam_init = cam_gt;
        if (flipped) {
            cam_init = turntable_camera(theta + 180.0, scene.params.camera_scale,
                                        scene.params.elevation_deg);
        }
        if (p.camera_noise_deg > 0) {
            const double mag = std::abs(noise.normal(0.0, p.camera_noise_deg));
            cam_init.q = perturb_rotation(cam_init.q, mag, noise);
        }

        nlohmann::json rec;
        rec["image_path"] = image_rel;
        rec["mask_path"] = mask_rel;
        rec["camera_init"] = {{"q", cam_init.q}, {"s", cam_init.s}, {"t", cam_init.t}};
        rec["camera_gt"] = {{"q", cam_gt.q}, {"s", cam_gt.s}, {"t", cam_gt.t}};
        rec["flipped"] = flipped;
        frames.push_back(rec);
    }

    const std::string manifest_path = (fs::path(out_dir) / "manifest.json").string();
    const std::string tmp = manifest_path + ".tmp";
    {
        std::ofstream out(tmp);
        MESHTEX_CHECK(out.good(), IoError, "cannot write ", manifest_path);
        out << frames.dump(2) << "\n";
    }
    fs::rename(tmp, manifest_path);
    return manifest_path;
}

std::vector<ToyAtlas> make_toy_atlases(int count, std::uint64_t seed, int tex_h,
                                       int tex_w) {
    std::vector<ToyAtlas> out;
    out.reserve(count);
    Rng master(seed);
    const int cell = 32;
    for (int n = 0; n < count; ++n) {
        Rng rng = master.fork(cat("toy", n));
        ToyAtlas atlas;
        atlas.texture = img::Image::zeros(3, tex_h, tex_w);
        atlas.visibility = img::Image::zeros(1, tex_h, tex_w);

        const double jr = rng.uniform(-0.08, 0.08);
        const double jg = rng.uniform(-0.08, 0.08);
        const double jb = rng.uniform(-0.08, 0.08);
        const double phase = rng.uniform(0, 2 * kPi);
        for (int y = 0; y < tex_h; ++y)
            for (int x = 0; x < tex_w; ++x) {
                const int ci = y / cell, cj = x / cell;
                const int kind = (ci * (tex_w / cell) + cj) % 3;
                // position-coded content: the pattern family is a function of
                // the cell location, identical across samples
                double base;
                if (kind == 0)
                    base = (y % 8 < 4) ? 0.85 : 0.3;
                else if (kind == 1)
                    base = (x % 8 < 4) ? 0.8 : 0.35;
                else
                    base = 0.55 + 0.3 * std::sin(2 * kPi * (x + y) / 16.0 + phase);
                const double gx = static_cast<double>(x) / (tex_w - 1);
                const double gy = static_cast<double>(y) / (tex_h - 1);
                atlas.texture.at(0, y, x) =
                    static_cast<float>(std::clamp(base * (0.6 + 0.4 * gx) + jr, 0.0, 1.0));
                atlas.texture.at(1, y, x) =
                    static_cast<float>(std::clamp(base * (0.6 + 0.4 * gy) + jg, 0.0, 1.0));
                atlas.texture.at(2, y, x) = static_cast<float>(
                    std::clamp(base * (1.0 - 0.35 * gx) + jb, 0.0, 1.0));
            }

        // bake-style visibility: a u-band covering roughly half the atlas,
        // with soft jitter at its borders
        const double center = rng.uniform(0.0, 1.0);
        const double half_width = rng.uniform(0.22, 0.3);
        for (int y = 0; y < tex_h; ++y)
            for (int x = 0; x < tex_w; ++x) {
                double u = static_cast<double>(x) / (tex_w - 1);
                double dist = std::abs(u - center);
                dist = std::min(dist, 1.0 - dist);  // u wraps
                const double border = 0.015 * std::sin(y * 0.7 + phase);
                atlas.visibility.at(0, y, x) = dist < half_width + border ? 1.0f : 0.0f;
            }
        for (int y = 0; y < tex_h; ++y)
            for (int x = 0; x < tex_w; ++x)
                if (atlas.visibility.at(0, y, x) < 0.5f)
                    for (int c = 0; c < 3; ++c) atlas.texture.at(c, y, x) = 0.0f;
        out.push_back(std::move(atlas));
    }
    return out;
}

SceneParams scene_params_from(const cfg::Config& c) {
    SceneParams p;
    p.seed = static_cast<std::uint64_t>(c.get_int("synth.scene_seed", 1));
    p.subdivisions = static_cast<int>(c.get_int("synth.subdivisions", 3));
    p.tex_h = static_cast<int>(c.get_int("synth.tex_h", 64));
    p.tex_w = static_cast<int>(c.get_int("synth.tex_w", 128));
    p.disp_res = static_cast<int>(c.get_int("synth.disp_res", 16));
    p.disp_amplitude = c.get_double("synth.disp_amplitude", 0.12);
    p.camera_scale = c.get_double("synth.camera_scale", 0.8);
    p.elevation_deg = c.get_double("synth.elevation_deg", 12.0);
    return p;
}

SequenceParams sequence_params_from(const cfg::Config& c) {
    SequenceParams p;
    p.n_views = static_cast<int>(c.get_int("synth.views", 24));
    p.step_deg = c.get_double("synth.step_deg", 360.0 / p.n_views);
    p.resolution = static_cast<int>(c.get_int("synth.resolution", 64));
    p.camera_noise_deg = c.get_double("synth.camera_noise_deg", 2.0);
    p.flip_frames = c.get_int_list("synth.flip_frames", {});
    p.mask_corrupt_erode = static_cast<int>(c.get_int("synth.mask_corrupt_erode", 0));
    p.mask_corrupt_dilate = static_cast<int>(c.get_int("synth.mask_corrupt_dilate", 0));
    return p;
}

}  // namespace meshtex::synth
