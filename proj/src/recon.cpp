#include "meshtex/recon.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace meshtex::recon {

namespace fs = std::filesystem;
using ad::Tape;
using geo::WeakPerspectiveCamera;

ReconConfig ReconConfig::from(const cfg::Config& c) {
    ReconConfig r;
    r.image_res = static_cast<int>(c.get_int("recon.resolution", 64));
    r.disp_h = static_cast<int>(c.get_int("recon.disp_h", 32));
    r.disp_w = static_cast<int>(c.get_int("recon.disp_w", 32));
    r.tex_h = static_cast<int>(c.get_int("recon.tex_h", 64));
    r.tex_w = static_cast<int>(c.get_int("recon.tex_w", 128));
    r.subdivisions = static_cast<int>(c.get_int("recon.subdivisions", 2));
    r.disp_bound = c.get_double("recon.disp_bound", 0.35);
    r.sigma_rel = c.get_double("recon.sigma_rel", 0.02);
    r.lr = c.get_double("recon.lr", 1e-4);
    r.seed = static_cast<std::uint64_t>(c.get_int("recon.seed", 7));
    r.extractor_seed = static_cast<std::uint64_t>(c.get_int("recon.extractor_seed", 101));
    {
        auto taps = c.get_int_list("recon.percp_taps", {1, 2, 3});
        r.percp_taps.clear();
        for (auto t : taps) r.percp_taps.push_back(static_cast<int>(t));
    }
    r.weights.perceptual = c.get_double("loss.perceptual", 1.0);
    r.weights.silhouette = c.get_double("loss.silhouette", 1.0);
    r.weights.camera = c.get_double("loss.camera", 1.0);
    r.weights.smoothness = c.get_double("loss.smoothness", 0.00005);
    return r;
}

// ---------------------------------------------------------------- model

ReconModel::ReconModel(const ReconConfig& config, std::uint64_t seed)
    : config_(config), init_rng_(seed) {
    template_ = geo::icosphere(config.subdivisions);
    template_verts_ = geo::template_vertices<float>(template_);

    auto conv = [&](const std::string& name, int cin, int cout) {
        param(name + ".w", {cout, cin, 3, 3}, std::sqrt(2.0 / (cin * 9)));
        param(name + ".b", {cout}, 0.0);
    };
    // shared encoder 3 -> 256 over four stride-2 stages
    conv("enc1", 3, 32);
    conv("enc2", 32, 64);
    conv("enc3", 64, 128);
    conv("enc4", 128, 256);

    const int flat = 256 * (config.image_res / 16) * (config.image_res / 16);
    // shared 256-d latent bottleneck keeps the decoder FCs small
    param("latfc.w", {flat, 256}, std::sqrt(1.0 / flat));
    param("latfc.b", {256}, 0.0);
    // displacement decoder: latent -> 128x4x4, three upsamplings to 32x32
    param("dispfc.w", {256, 128 * 4 * 4}, std::sqrt(1.0 / 256.0));
    param("dispfc.b", {128 * 4 * 4}, 0.0);
    conv("dispup1", 128, 64);
    conv("dispup2", 64, 32);
    conv("dispup3", 32, 16);
    conv("disphead", 16, 3);
    // texture decoder: latent -> 128x4x8, four upsamplings to 64x128
    param("texfc.w", {256, 128 * 4 * 8}, std::sqrt(1.0 / 256.0));
    param("texfc.b", {128 * 4 * 8}, 0.0);
    conv("texup1", 128, 64);
    conv("texup2", 64, 32);
    conv("texup3", 32, 16);
    conv("texup4", 16, 16);
    conv("texhead", 16, 3);
    // separate camera regressor
    conv("cam1", 3, 16);
    conv("cam2", 16, 32);
    conv("cam3", 32, 64);
    conv("cam4", 64, 64);
    param("camfc.w", {64, 7}, 1e-3);
    auto camb = param("camfc.b", {7}, 0.0);
    camb.value()[0] = 1.0f;  // identity rotation, unit scale at init
}

Tensor<float> ReconModel::param(const std::string& name, ad::Shape shape,
                                double stddev) {
    auto t = Tensor<float>::zeros(std::move(shape), true);
    if (stddev > 0) {
        Rng r = init_rng_.fork(name);
        r.fill_normal(t.value(), 0.0, stddev);
    }
    params_.emplace(name, t);
    return t;
}

Tensor<float> ReconModel::conv_block(const Tensor<float>& x, const std::string& name,
                                     int stride) const {
    return ad::relu(ad::conv2d(x, params_.at(name + ".w"), params_.at(name + ".b"),
                               stride, 1));
}

namespace {

void check_finite(const Tensor<float>& t, const char* layer) {
    for (float v : t.value())
        MESHTEX_CHECK(std::isfinite(v), DivergenceError,
                      "non-finite activation in layer ", layer);
}

}  // namespace

ReconModel::Maps ReconModel::encode_decode(const Tensor<float>& image) const {
    MESHTEX_CHECK(image.ndim() == 3 && image.dim(0) == 3 &&
                      image.dim(1) == config_.image_res &&
                      image.dim(2) == config_.image_res,
                  ShapeError, "encode_decode expects [3,", config_.image_res, ",",
                  config_.image_res, "], got ", ad::shape_str(image.shape()));
    auto x = ad::reshape(image, {1, 3, config_.image_res, config_.image_res});
    x = conv_block(x, "enc1", 2);
    x = conv_block(x, "enc2", 2);
    x = conv_block(x, "enc3", 2);
    x = conv_block(x, "enc4", 2);
    check_finite(x, "enc4");
    auto latent = ad::relu(ad::matmul(ad::reshape(x, {1, x.numel()}),
                                      params_.at("latfc.w")) +
                           params_.at("latfc.b"));

    auto d = ad::relu(ad::matmul(latent, params_.at("dispfc.w")) +
                      params_.at("dispfc.b"));
    d = ad::reshape(d, {1, 128, 4, 4});
    d = conv_block(ad::upsample_nearest(d, 2), "dispup1", 1);
    d = conv_block(ad::upsample_nearest(d, 2), "dispup2", 1);
    d = conv_block(ad::upsample_nearest(d, 2), "dispup3", 1);
    d = ad::conv2d(d, params_.at("disphead.w"), params_.at("disphead.b"), 1, 1);
    auto disp = ad::tanh_act(d) * static_cast<float>(config_.disp_bound);
    check_finite(disp, "disphead");

    auto t = ad::relu(ad::matmul(latent, params_.at("texfc.w")) + params_.at("texfc.b"));
    t = ad::reshape(t, {1, 128, 4, 8});
    t = conv_block(ad::upsample_nearest(t, 2), "texup1", 1);
    t = conv_block(ad::upsample_nearest(t, 2), "texup2", 1);
    t = conv_block(ad::upsample_nearest(t, 2), "texup3", 1);
    t = conv_block(ad::upsample_nearest(t, 2), "texup4", 1);
    t = ad::conv2d(t, params_.at("texhead.w"), params_.at("texhead.b"), 1, 1);
    auto tex = ad::sigmoid(t);
    check_finite(tex, "texhead");

    Maps maps;
    maps.displacement = ad::reshape(disp, {3, config_.disp_h, config_.disp_w});
    maps.texture = ad::reshape(tex, {3, config_.tex_h, config_.tex_w});
    return maps;
}

geo::CameraTensors<float> ReconModel::predict_camera(const Tensor<float>& image) const {
    auto x = ad::reshape(image, {1, 3, config_.image_res, config_.image_res});
    x = conv_block(x, "cam1", 2);
    x = conv_block(x, "cam2", 2);
    x = conv_block(x, "cam3", 2);
    x = conv_block(x, "cam4", 2);
    // global average pool over the spatial grid
    const std::int64_t c = x.dim(1), hw = x.dim(2) * x.dim(3);
    auto pooled = ad::matmul(ad::reshape(x, {c, hw}),
                             Tensor<float>::full({hw, 1}, 1.0f / hw));
    auto logits = ad::matmul(ad::reshape(pooled, {1, c}), params_.at("camfc.w")) +
                  params_.at("camfc.b");
    auto q_raw = ad::reshape(ad::narrow(logits, 1, 0, 4), {4});
    auto q = q_raw / ad::sqrt(ad::sum(q_raw * q_raw));
    auto s = ad::exp(ad::reshape(ad::narrow(logits, 1, 4, 1), ad::Shape{}));
    auto t = ad::reshape(ad::narrow(logits, 1, 5, 2), {2});
    return {q, s, t};
}

void ReconModel::save(const std::string& path_prefix) const {
    ad::save_checkpoint(path_prefix, params_);
}

void ReconModel::load(const std::string& path_prefix) {
    auto loaded = ad::load_checkpoint<float>(path_prefix);
    for (auto& [name, tensor] : params_) {
        auto it = loaded.find(name);
        MESHTEX_CHECK(it != loaded.end(), IoError, "checkpoint missing parameter ", name);
        MESHTEX_CHECK(it->second.shape() == tensor.shape(), IoError,
                      "checkpoint shape mismatch for ", name);
        std::copy(it->second.value().begin(), it->second.value().end(),
                  tensor.value().begin());
    }
}

// ---------------------------------------------------------------- dataset

WeakPerspectiveCamera Frame::optimized_camera() const {
    geo::CameraOffsetValues off;
    for (int k = 0; k < 4; ++k) off.dq[k] = dq.value()[k];
    off.ds = ds.value()[0];
    off.dt = {dt.value()[0], dt.value()[1]};
    return geo::compose_camera(camera_init, off);
}

namespace {

WeakPerspectiveCamera camera_from_json(const nlohmann::json& j) {
    WeakPerspectiveCamera cam;
    for (int k = 0; k < 4; ++k) cam.q[k] = j.at("q").at(k).get<double>();
    cam.s = j.at("s").get<double>();
    cam.t = {j.at("t").at(0).get<double>(), j.at("t").at(1).get<double>()};
    return cam;
}

nlohmann::json camera_to_json(const WeakPerspectiveCamera& cam) {
    return {{"q", cam.q}, {"s", cam.s}, {"t", cam.t}};
}

}  // namespace

SequenceDataset SequenceDataset::load(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    MESHTEX_CHECK(in.good(), IoError, "cannot read manifest ", manifest_path);
    nlohmann::json manifest = nlohmann::json::parse(in);
    MESHTEX_CHECK(manifest.is_array(), IoError, "manifest must be a JSON array");

    SequenceDataset ds;
    ds.manifest_path = manifest_path;
    ds.root = fs::path(manifest_path).parent_path().string();
    for (const auto& rec : manifest) {
        Frame f;
        f.image_path = rec.at("image_path").get<std::string>();
        f.mask_path = rec.at("mask_path").get<std::string>();
        f.image = img::read_png((fs::path(ds.root) / f.image_path).string());
        f.mask = img::read_png((fs::path(ds.root) / f.mask_path).string());
        MESHTEX_CHECK(f.image.channels == 3, IoError, "frame image must be rgb: ",
                      f.image_path);
        MESHTEX_CHECK(f.mask.height == f.image.height && f.mask.width == f.image.width,
                      ShapeError, "mask not aligned with image: ", f.mask_path);
        f.camera_init = camera_from_json(rec.at("camera_init"));
        geo::validate_camera(f.camera_init);
        if (rec.contains("camera_gt"))
            f.camera_gt = camera_from_json(rec.at("camera_gt"));
        if (rec.contains("pruned")) f.pruned = rec.at("pruned").get<bool>();

        auto masked = img::Image::zeros(3, f.image.height, f.image.width);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < f.image.height; ++y)
                for (int x = 0; x < f.image.width; ++x)
                    masked.at(c, y, x) =
                        f.mask.at(0, y, x) >= 0.5f ? f.image.at(c, y, x) : 0.0f;
        f.image_masked = img::to_tensor<float>(masked);
        f.mask_tensor = img::to_tensor<float>(f.mask, /*keep_channel_dim=*/false);

        f.dq = Tensor<float>::zeros({4}, true);
        f.ds = Tensor<float>::zeros({}, true);
        f.dt = Tensor<float>::zeros({2}, true);
        if (rec.contains("camera_opt")) {
            // resume: fold the stored optimized camera into the offset
            auto opt = camera_from_json(rec.at("camera_opt"));
            for (int k = 0; k < 4; ++k)
                f.dq.value()[k] = static_cast<float>(opt.q[k] - f.camera_init.q[k]);
            f.ds.value()[0] = static_cast<float>(std::log(opt.s / f.camera_init.s));
            f.dt.value()[0] = static_cast<float>(opt.t[0] - f.camera_init.t[0]);
            f.dt.value()[1] = static_cast<float>(opt.t[1] - f.camera_init.t[1]);
        }
        ds.frames.push_back(std::move(f));
    }
    return ds;
}

void SequenceDataset::save_back() const {
    std::ifstream in(manifest_path);
    MESHTEX_CHECK(in.good(), IoError, "cannot read manifest ", manifest_path);
    nlohmann::json manifest = nlohmann::json::parse(in);
    MESHTEX_CHECK(manifest.size() == frames.size(), IoError,
                  "manifest entry count changed");
    for (std::size_t i = 0; i < frames.size(); ++i) {
        manifest[i]["pruned"] = frames[i].pruned;
        manifest[i]["camera_opt"] = camera_to_json(frames[i].optimized_camera());
    }
    const std::string tmp = manifest_path + ".tmp";
    {
        std::ofstream out(tmp);
        out << manifest.dump(2) << "\n";
    }
    fs::rename(tmp, manifest_path);
}

std::vector<int> SequenceDataset::unpruned() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < frames.size(); ++i)
        if (!frames[i].pruned) out.push_back(static_cast<int>(i));
    return out;
}

// ---------------------------------------------------------------- training

Trainer::Trainer(ReconModel& model, const ReconConfig& config)
    : model_(model), config_(config),
      opt_(static_cast<float>(config.lr), static_cast<float>(config.beta1),
           static_cast<float>(config.beta2)),
      extractor_(loss::FeatureExtractor<float>::random_default(config.extractor_seed)) {
    extractor_.taps = config.percp_taps;
    for (auto& [name, p] : model_.parameters()) opt_.add(p);
}

namespace {

Tensor<float> masked_l1(const Tensor<float>& a, const Tensor<float>& b,
                        const Tensor<float>& mask3, float mask_sum) {
    auto diff = a - b;
    auto absdiff = ad::relu(diff) + ad::relu(ad::neg(diff));
    return ad::sum(absdiff * mask3) * (1.0f / std::max(mask_sum, 1.0f));
}

struct RenderedView {
    render::FragmentBuffer frag;
    Tensor<float> rgb;
    Tensor<float> alpha;
    Tensor<float> verts;
};

RenderedView render_with_camera(const ReconModel& model,
                                const ReconModel::Maps& maps,
                                const geo::CameraTensors<float>& camera, int res,
                                double sigma) {
    RenderedView rv;
    rv.verts = geo::apply_deformation(model.template_verts(), model.template_mesh(),
                                      maps.displacement);
    auto proj = geo::project(camera, rv.verts);
    // hard fragments from the current forward values
    std::vector<geo::Vec2> screen_vals(static_cast<std::size_t>(proj.screen.dim(0)));
    std::vector<double> depth_vals(screen_vals.size());
    for (std::size_t i = 0; i < screen_vals.size(); ++i) {
        screen_vals[i] = {static_cast<double>(proj.screen.value()[i * 2]),
                          static_cast<double>(proj.screen.value()[i * 2 + 1])};
        depth_vals[i] = static_cast<double>(proj.depth.value()[i]);
    }
    rv.frag = render::rasterize_projected(screen_vals, depth_vals,
                                          model.template_mesh(), res);
    rv.rgb = render::shade(rv.frag, model.template_mesh(), proj.screen, maps.texture);
    rv.alpha = render::soft_silhouette(proj.screen, model.template_mesh(), res, sigma);
    return rv;
}

}  // namespace

LossRecord Trainer::train_step_two_view(Frame& frame_in, Frame& frame_target) {
    MESHTEX_CHECK(!frame_in.pruned && !frame_target.pruned, NumericalError,
                  "train_step_two_view called with a pruned frame");
    LossRecord rec;
    opt_.zero_grad();
    frame_target.dq.zero_grad();
    frame_target.ds.zero_grad();
    frame_target.dt.zero_grad();

    Tape<float> tape;
    {
        Tape<float>::Scope scope(tape);
        auto maps = model_.encode_decode(frame_in.image_masked);
        auto camera = geo::compose_camera_graph(frame_target.camera_init,
                                                frame_target.dq, frame_target.ds,
                                                frame_target.dt);
        auto view = render_with_camera(model_, maps, camera, config_.image_res,
                                       config_.sigma());
        float max_alpha = 0.0f;
        for (float v : view.alpha.value()) max_alpha = std::max(max_alpha, v);
        MESHTEX_CHECK(max_alpha >= 0.01f, DivergenceError,
                      "degenerate render: alpha everywhere < 0.01");

        loss::LossTerms<float> terms;
        terms.perceptual =
            loss::perceptual_loss(frame_target.image_masked, view.rgb, extractor_);
        terms.silhouette = loss::silhouette_loss(frame_target.mask_tensor, view.alpha);
        terms.smoothness = geo::smoothness_loss(view.verts, model_.template_mesh(),
                                                edge_adjacency());
        auto total = loss::total_loss(terms, config_.weights, /*include_camera=*/false);
        rec.perceptual = terms.perceptual.item();
        rec.silhouette = terms.silhouette.item();
        rec.smoothness = terms.smoothness.item();
        rec.total = total.item();
        tape.backward(total);
    }
    opt_.step();
    const float lr = static_cast<float>(config_.lr);
    ad::adam_step(frame_target.dq, frame_target.adam_dq, lr);
    ad::adam_step(frame_target.ds, frame_target.adam_ds, lr);
    ad::adam_step(frame_target.dt, frame_target.adam_dt, lr);
    return rec;
}

LossRecord Trainer::train_step_single_view(Frame& frame) {
    MESHTEX_CHECK(frame.camera_gt.has_value(), NumericalError,
                  "train_step_single_view requires a ground-truth camera");
    LossRecord rec;
    opt_.zero_grad();

    Tape<float> tape;
    {
        Tape<float>::Scope scope(tape);
        auto maps = model_.encode_decode(frame.image_masked);
        auto camera = geo::camera_constants<float>(*frame.camera_gt);
        auto view = render_with_camera(model_, maps, camera, config_.image_res,
                                       config_.sigma());
        loss::LossTerms<float> terms;
        terms.perceptual =
            loss::perceptual_loss(frame.image_masked, view.rgb, extractor_);
        terms.silhouette = loss::silhouette_loss(frame.mask_tensor, view.alpha);
        terms.smoothness = geo::smoothness_loss(view.verts, model_.template_mesh(),
                                                edge_adjacency());
        auto cam_pred = model_.predict_camera(frame.image_masked);
        terms.camera = loss::camera_loss(cam_pred, *frame.camera_gt);
        auto total = loss::total_loss(terms, config_.weights, /*include_camera=*/true);
        rec.perceptual = terms.perceptual.item();
        rec.silhouette = terms.silhouette.item();
        rec.camera = terms.camera.item();
        rec.smoothness = terms.smoothness.item();
        rec.total = total.item();
        tape.backward(total);
    }
    opt_.step();
    return rec;
}

const geo::EdgeAdjacency& Trainer::edge_adjacency() {
    if (!adjacency_) adjacency_ = geo::EdgeAdjacency::build(model_.template_mesh());
    return *adjacency_;
}

// ---------------------------------------------------------------- pruning

double adaptive_prune_threshold(const std::vector<WeakPerspectiveCamera>& cams) {
    std::vector<double> steps;
    for (std::size_t i = 1; i < cams.size(); ++i)
        steps.push_back(geo::quaternion_geodesic_deg(cams[i - 1].q, cams[i].q));
    MESHTEX_CHECK(!steps.empty(), NumericalError, "not enough cameras for a threshold");
    std::sort(steps.begin(), steps.end());
    const double median = steps[steps.size() / 2];
    return 4.0 * median;
}

SequenceDataset prune_sequence(const SequenceDataset& sequence, double threshold_deg) {
    auto idx = sequence.unpruned();
    MESHTEX_CHECK(idx.size() >= 3, NumericalError,
                  "prune_sequence needs at least 3 unpruned frames, got ", idx.size());
    std::vector<WeakPerspectiveCamera> cams;
    cams.reserve(idx.size());
    for (int i : idx) cams.push_back(sequence.frames[i].optimized_camera());
    const double threshold =
        threshold_deg > 0 ? threshold_deg : adaptive_prune_threshold(cams);

    SequenceDataset out = sequence;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        bool far_prev = true, far_next = true;
        if (k > 0)
            far_prev = geo::quaternion_geodesic_deg(cams[k].q, cams[k - 1].q) > threshold;
        if (k + 1 < idx.size())
            far_next = geo::quaternion_geodesic_deg(cams[k].q, cams[k + 1].q) > threshold;
        // interior frames need both neighbors to disagree; endpoints have one
        if (far_prev && far_next) out.frames[idx[k]].pruned = true;
    }
    return out;
}

// ---------------------------------------------------------------- baking

std::vector<BakeResult> bake_pseudo_textures(const ReconModel& model,
                                             const SequenceDataset& sequence,
                                             bool use_external_masks) {
    std::vector<BakeResult> out;
    const auto& cfg = model.config();
    for (int i : sequence.unpruned()) {
        const Frame& frame = sequence.frames[i];
        auto maps = model.encode_decode(frame.image_masked);
        geo::TriMesh mesh = model.template_mesh();
        auto verts = geo::apply_deformation(model.template_verts(), mesh,
                                            maps.displacement);
        for (std::size_t v = 0; v < mesh.vertices.size(); ++v)
            for (int k = 0; k < 3; ++k) mesh.vertices[v][k] = verts.value()[v * 3 + k];

        const auto camera = frame.optimized_camera();
        auto proj_sil = render::projected_silhouette(mesh, camera, frame.image.height);
        const img::Image& image_mask = use_external_masks ? frame.mask : proj_sil;

        img::Image masked = img::Image::zeros(3, frame.image.height, frame.image.width);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < frame.image.height; ++y)
                for (int x = 0; x < frame.image.width; ++x)
                    masked.at(c, y, x) = image_mask.at(0, y, x) >= 0.5f
                                             ? frame.image.at(c, y, x)
                                             : 0.0f;
        render::TextureAtlas atlas;
        try {
            atlas = render::inverse_render(masked, proj_sil, mesh, camera, cfg.tex_h,
                                           cfg.tex_w);
        } catch (const NumericalError& e) {
            std::fprintf(stderr, "[meshtex] skipping frame %d: %s\n", i, e.what());
            continue;
        }
        std::size_t visible = 0;
        for (float v : atlas.visibility.data)
            if (v >= 0.5f) ++visible;
        if (visible * 100 < atlas.visibility.pixel_count()) {
            std::fprintf(stderr,
                         "[meshtex] skipping frame %d: visibility below 1%% (%zu texels)\n",
                         i, visible);
            continue;
        }
        out.push_back({i, std::move(atlas)});
    }
    return out;
}

// ------------------------------------------------------- camera refinement

void refine_camera_offsets(SequenceDataset& sequence, const geo::TriMesh& mesh,
                           const Tensor<float>& texture, const RefineOptions& options) {
    auto verts = geo::template_vertices<float>(mesh);
    for (int idx : sequence.unpruned()) {
        Frame& frame = sequence.frames[idx];
        AdamState<float> sq, ss, st;
        for (int step = 0; step < options.steps; ++step) {
            frame.dq.zero_grad();
            frame.ds.zero_grad();
            frame.dt.zero_grad();
            Tape<float> tape;
            {
                Tape<float>::Scope scope(tape);
                auto camera = geo::compose_camera_graph(frame.camera_init, frame.dq,
                                                        frame.ds, frame.dt);
                auto proj = geo::project(camera, verts);
                std::vector<geo::Vec2> sv(static_cast<std::size_t>(proj.screen.dim(0)));
                std::vector<double> dv(sv.size());
                for (std::size_t i = 0; i < sv.size(); ++i) {
                    sv[i] = {static_cast<double>(proj.screen.value()[i * 2]),
                             static_cast<double>(proj.screen.value()[i * 2 + 1])};
                    dv[i] = static_cast<double>(proj.depth.value()[i]);
                }
                auto frag = render::rasterize_projected(sv, dv, mesh,
                                                        options.resolution);
                auto rgb = render::shade(frag, mesh, proj.screen, texture);
                auto alpha = render::soft_silhouette(proj.screen, mesh,
                                                     options.resolution, options.sigma);
                // photometric term over the target mask region
                float mask_sum = 0.0f;
                for (float v : frame.mask_tensor.value()) mask_sum += v;
                auto mask3 = ad::tile_batch(frame.mask_tensor, 3);
                auto photo = masked_l1(rgb, frame.image_masked, mask3, mask_sum);
                auto sil = loss::silhouette_loss(frame.mask_tensor, alpha);
                auto loss_total = photo * static_cast<float>(options.photometric_weight) +
                                  sil * static_cast<float>(options.silhouette_weight);
                tape.backward(loss_total);
            }
            const float lr = static_cast<float>(options.lr);
            ad::adam_step(frame.dq, sq, lr);
            ad::adam_step(frame.ds, ss, lr);
            ad::adam_step(frame.dt, st, lr);
        }
    }
}

TrainLogger::TrainLogger(const std::string& csv_path) : path(csv_path) {
    std::ofstream out(path);
    out << "step,perceptual,silhouette,camera,smoothness,total\n";
}

void TrainLogger::log(int step, const LossRecord& r) {
    std::ofstream out(path, std::ios::app);
    out << step << "," << r.perceptual << "," << r.silhouette << "," << r.camera << ","
        << r.smoothness << "," << r.total << "\n";
}

}  // namespace meshtex::recon
