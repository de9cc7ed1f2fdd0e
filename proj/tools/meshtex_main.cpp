#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "meshtex/config.hpp"
#include "meshtex/gan.hpp"
#include "meshtex/metrics.hpp"
#include "meshtex/recon.hpp"
#include "meshtex/synth.hpp"

namespace fs = std::filesystem;
using namespace meshtex;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::int64_t seed = -1;  // -1: take run.seed from the config
    int views = 0;
    int resolution = 0;
    bool fid_export = false;
};

cfg::Config load_config(const CommonArgs& args) {
    cfg::Config c;
    if (!args.config_path.empty()) {
        c = cfg::Config::load(args.config_path);
    } else {
        c.apply_env_overrides();
    }
    if (args.seed >= 0) c.set("run.seed", std::to_string(args.seed));
    if (args.views > 0) c.set("run.views", std::to_string(args.views));
    if (args.resolution > 0) c.set("run.resolution", std::to_string(args.resolution));
    return c;
}

std::uint64_t master_seed(const cfg::Config& c) {
    return static_cast<std::uint64_t>(c.get_int("run.seed", 1));
}

void dump_config(const cfg::Config& c, const std::string& out_dir) {
    fs::create_directories(out_dir);
    c.save((fs::path(out_dir) / "config_used.toml").string());
}

std::string manifest_path(const std::string& out_dir) {
    return (fs::path(out_dir) / "manifest.json").string();
}

recon::ReconModel load_recon_model(const cfg::Config& c, const std::string& out_dir) {
    auto rcfg = recon::ReconConfig::from(c);
    recon::ReconModel model(rcfg, Rng(master_seed(c)).fork("recon").bits());
    model.load((fs::path(out_dir) / "recon" / "model").string());
    return model;
}

// Mesh and texture predicted for the first unpruned frame.
struct ModelArtifacts {
    geo::TriMesh mesh;
    ad::Tensor<float> texture;
};

ModelArtifacts model_artifacts(const recon::ReconModel& model,
                               const recon::SequenceDataset& ds) {
    auto idx = ds.unpruned();
    MESHTEX_CHECK(!idx.empty(), NumericalError, "no unpruned frames");
    auto maps = model.encode_decode(ds.frames[idx[0]].image_masked);
    ModelArtifacts art;
    art.mesh = model.template_mesh();
    auto verts = geo::apply_deformation(model.template_verts(), art.mesh,
                                        maps.displacement);
    for (std::size_t v = 0; v < art.mesh.vertices.size(); ++v)
        for (int k = 0; k < 3; ++k) art.mesh.vertices[v][k] = verts.value()[v * 3 + k];
    art.texture = maps.texture;
    return art;
}

ModelArtifacts gt_artifacts(const std::string& out_dir) {
    ModelArtifacts art;
    art.mesh = geo::load_obj((fs::path(out_dir) / "gt_mesh.obj").string());
    auto tex = img::read_png((fs::path(out_dir) / "gt_texture.png").string());
    art.texture = img::to_tensor<float>(tex);
    return art;
}

int cmd_synth_data(const CommonArgs& args) {
    auto c = load_config(args);
    dump_config(c, args.out_dir);
    auto sp = synth::scene_params_from(c);
    if (!c.has("synth.scene_seed")) sp.seed = Rng(master_seed(c)).fork("scene").bits();
    auto scene = synth::make_scene(sp);
    auto qp = synth::sequence_params_from(c);
    if (c.has("run.views")) qp.n_views = static_cast<int>(c.get_int("run.views", qp.n_views));
    if (c.has("run.resolution"))
        qp.resolution = static_cast<int>(c.get_int("run.resolution", qp.resolution));
    auto path = synth::generate_sequence(scene, qp, args.out_dir,
                                         Rng(master_seed(c)).fork("sequence").bits());
    std::printf("wrote %s (%d views)\n", path.c_str(), qp.n_views);
    return 0;
}

int cmd_train_recon(const CommonArgs& args) {
    auto c = load_config(args);
    auto ds = recon::SequenceDataset::load(manifest_path(args.out_dir));
    auto rcfg = recon::ReconConfig::from(c);
    recon::ReconModel model(rcfg, Rng(master_seed(c)).fork("recon").bits());

    const std::string ckpt = (fs::path(args.out_dir) / "recon" / "model").string();
    fs::create_directories(fs::path(args.out_dir) / "recon");
    const bool resume = c.get_bool("recon.resume", false);
    if (resume && fs::exists(ckpt + ".json")) model.load(ckpt);

    recon::Trainer trainer(model, rcfg);
    recon::TrainLogger logger(
        (fs::path(args.out_dir) / "recon" / "train_log.csv").string());

    auto idx = ds.unpruned();
    MESHTEX_CHECK(idx.size() >= 2, NumericalError, "need at least 2 unpruned frames");
    const int steps = static_cast<int>(c.get_int("recon.steps", 2000));
    const int log_every = static_cast<int>(c.get_int("recon.log_every", 25));
    Rng rng(Rng(master_seed(c)).fork("pairs").bits());
    for (int step = 0; step < steps; ++step) {
        const int a = idx[rng.randint(static_cast<std::int64_t>(idx.size()))];
        int b = idx[rng.randint(static_cast<std::int64_t>(idx.size()))];
        auto rec = trainer.train_step_two_view(ds.frames[a], ds.frames[b]);
        if (step % log_every == 0 || step + 1 == steps) logger.log(step, rec);
    }
    model.save(ckpt);
    ds.save_back();
    std::printf("trained %d steps; checkpoint at %s\n", steps, ckpt.c_str());
    return 0;
}

int cmd_prune(const CommonArgs& args) {
    auto c = load_config(args);
    auto ds = recon::SequenceDataset::load(manifest_path(args.out_dir));
    const double threshold = c.get_double("recon.prune_threshold_deg", 0.0);
    auto pruned = recon::prune_sequence(ds, threshold);
    pruned.save_back();
    std::size_t flagged = 0;
    for (const auto& f : pruned.frames)
        if (f.pruned) ++flagged;
    std::printf("pruned %zu of %zu frames\n", flagged, pruned.frames.size());
    return 0;
}

int cmd_bake(const CommonArgs& args) {
    auto c = load_config(args);
    auto ds = recon::SequenceDataset::load(manifest_path(args.out_dir));
    auto model = load_recon_model(c, args.out_dir);
    const bool external = c.get_bool("bake.use_external_masks", false);
    auto bakes = recon::bake_pseudo_textures(model, ds, external);
    MESHTEX_CHECK(!bakes.empty(), NumericalError, "no frames produced atlases");

    const fs::path dir = fs::path(args.out_dir) / "bake";
    fs::create_directories(dir);
    nlohmann::json index = nlohmann::json::array();
    char name[64];
    for (const auto& bake : bakes) {
        std::snprintf(name, sizeof name, "atlas_%03d.png", bake.frame_index);
        img::write_png((dir / name).string(), bake.atlas.texture);
        nlohmann::json rec;
        rec["frame"] = bake.frame_index;
        rec["texture"] = name;
        std::snprintf(name, sizeof name, "vis_%03d.png", bake.frame_index);
        img::write_png((dir / name).string(), bake.atlas.visibility);
        rec["visibility"] = name;
        index.push_back(rec);
    }
    std::ofstream out((dir / "index.json").string());
    out << index.dump(2) << "\n";
    std::printf("baked %zu atlases into %s\n", bakes.size(), dir.string().c_str());
    return 0;
}

std::vector<synth::ToyAtlas> load_baked_atlases(const std::string& out_dir) {
    const fs::path dir = fs::path(out_dir) / "bake";
    std::ifstream in((dir / "index.json").string());
    MESHTEX_CHECK(in.good(), IoError, "missing bake index ", (dir / "index.json").string(),
                  " (run `meshtex bake` first)");
    nlohmann::json index = nlohmann::json::parse(in);
    std::vector<synth::ToyAtlas> atlases;
    for (const auto& rec : index) {
        synth::ToyAtlas a;
        a.texture = img::read_png((dir / rec.at("texture").get<std::string>()).string());
        a.visibility =
            img::read_png((dir / rec.at("visibility").get<std::string>()).string());
        atlases.push_back(std::move(a));
    }
    return atlases;
}

int cmd_train_gan(const CommonArgs& args) {
    auto c = load_config(args);
    auto atlases = load_baked_atlases(args.out_dir);
    MESHTEX_CHECK(atlases.size() >= 2, NumericalError, "need at least 2 baked atlases");
    auto gcfg = gan::GanConfig::from(c);
    const int H = atlases[0].texture.height;
    MESHTEX_CHECK(H == gcfg.out_h() && atlases[0].texture.width == gcfg.out_w(),
                  ShapeError, "gan topology emits ", gcfg.out_h(), "x", gcfg.out_w(),
                  " but atlases are ", H, "x", atlases[0].texture.width);

    gan::Generator g(gcfg, Rng(master_seed(c)).fork("gan_g").bits());
    gan::Discriminator d(gcfg, Rng(master_seed(c)).fork("gan_d").bits());
    gan::GanTrainer trainer(g, d, gcfg);

    const fs::path dir = fs::path(args.out_dir) / "gan";
    fs::create_directories(dir);
    std::ofstream log((dir / "train_log.csv").string());
    log << "step,d_loss,g_loss,d_real,d_fake\n";
    std::ofstream fdlog((dir / "fd_log.csv").string());
    fdlog << "step,feature_distance\n";

    auto fx = loss::FeatureExtractor<float>::random_default(
        static_cast<std::uint64_t>(c.get_int("eval.extractor_seed", 404)));
    std::vector<img::Image> real_images;
    for (const auto& a : atlases) real_images.push_back(a.texture);
    auto eval_fd = [&](std::uint64_t sample_seed) {
        auto samples = g.sample_textures(
            static_cast<int>(c.get_int("gan.eval_samples", 32)), sample_seed);
        Rng vr(sample_seed ^ 0xabcdef);
        std::vector<img::Image> fakes;
        for (auto& s : samples) {
            auto im = img::from_tensor(s);
            const auto& vis =
                atlases[vr.randint(static_cast<std::int64_t>(atlases.size()))].visibility;
            for (int y = 0; y < im.height; ++y)
                for (int x = 0; x < im.width; ++x)
                    if (vis.at(0, y, x) < 0.5f)
                        for (int ch = 0; ch < 3; ++ch) im.at(ch, y, x) = 0.0f;
            fakes.push_back(std::move(im));
        }
        return metrics::feature_distance(real_images, fakes, fx);
    };

    const int steps = static_cast<int>(c.get_int("gan.steps", 2000));
    const int fd_every = static_cast<int>(c.get_int("gan.fd_every", 500));
    Rng rng(Rng(master_seed(c)).fork("gan_steps").bits());
    double best_fd = 1e300;
    for (int step = 0; step < steps; ++step) {
        if (step % fd_every == 0) {
            const double fd = eval_fd(master_seed(c) + step);
            best_fd = std::min(best_fd, fd);
            fdlog << step << "," << fd << "\n";
            fdlog.flush();
        }
        std::vector<int> idx;
        for (int i = 0; i < gcfg.batch; ++i)
            idx.push_back(static_cast<int>(rng.randint(
                static_cast<std::int64_t>(atlases.size()))));
        auto batch = gan::make_batch(atlases, idx);
        auto rec = trainer.step(batch, rng);
        if (step % 25 == 0 || step + 1 == steps)
            log << step << "," << rec.d_loss << "," << rec.g_loss << "," << rec.d_real
                << "," << rec.d_fake << "\n";
    }
    const double final_fd = eval_fd(master_seed(c) + steps);
    best_fd = std::min(best_fd, final_fd);
    fdlog << steps << "," << final_fd << "\n";
    fdlog << "best," << best_fd << "\n";

    ad::save_checkpoint((dir / "generator").string(), g.state());
    // the paper's figures show 9 samples per model
    auto samples = g.sample_textures(9, master_seed(c) ^ 0x5a5a);
    fs::create_directories(dir / "samples");
    std::vector<img::Image> tiles;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        auto im = img::from_tensor(samples[i]);
        char nm[32];
        std::snprintf(nm, sizeof nm, "sample_%zu.png", i);
        img::write_png((dir / "samples" / nm).string(), im);
        tiles.push_back(std::move(im));
    }
    img::write_png((dir / "samples" / "grid.png").string(), img::make_grid(tiles, 3));
    std::printf("gan trained %d steps; best feature distance %.4f\n", steps, best_fd);
    return 0;
}

ModelArtifacts artifacts_for(const cfg::Config& c, const std::string& out_dir,
                             const std::string& source) {
    if (source == "gt") return gt_artifacts(out_dir);
    auto ds = recon::SequenceDataset::load(manifest_path(out_dir));
    auto model = load_recon_model(c, out_dir);
    auto art = model_artifacts(model, ds);
    if (source == "gan") {
        auto gcfg = gan::GanConfig::from(c);
        gan::Generator g(gcfg, Rng(master_seed(c)).fork("gan_g").bits());
        auto state = ad::load_checkpoint<float>(
            (fs::path(out_dir) / "gan" / "generator").string());
        g.load_state(state);
        auto sample = g.sample_textures(1, master_seed(c) ^ 0x77)[0];
        MESHTEX_CHECK(sample.dim(1) == art.texture.dim(1) &&
                          sample.dim(2) == art.texture.dim(2),
                      ShapeError, "generator texture size does not match the recon UV map");
        art.texture = sample;
    }
    return art;
}

int cmd_render(const CommonArgs& args) {
    auto c = load_config(args);
    const std::string source = c.get_string("render.source", "recon");
    auto art = artifacts_for(c, args.out_dir, source);

    metrics::TurntableParams tp;
    tp.n_views = static_cast<int>(c.get_int("run.views", c.get_int("render.views", 12)));
    tp.resolution = static_cast<int>(
        c.get_int("run.resolution", c.get_int("render.resolution", 128)));
    tp.scale = c.get_double("synth.camera_scale", 0.8);
    tp.elevation_deg = c.get_double("synth.elevation_deg", 12.0);
    auto views = metrics::render_turntable(art.mesh, art.texture, tp);

    const fs::path dir = fs::path(args.out_dir) / "renders";
    fs::create_directories(dir);
    std::vector<img::Image> tiles;
    char name[64];
    for (std::size_t i = 0; i < views.size(); ++i) {
        auto im = img::from_tensor(views[i].rgb);
        std::snprintf(name, sizeof name, "view_%03zu.png", i);
        img::write_png((dir / name).string(), im);
        tiles.push_back(std::move(im));
    }
    const int cols = static_cast<int>(std::ceil(std::sqrt(double(tiles.size()))));
    img::write_png((dir / "contact_sheet.png").string(), img::make_grid(tiles, cols));
    if (args.fid_export || c.get_bool("render.fid_export", false)) {
        const fs::path fid_dir = fs::path(args.out_dir) / "fid_export";
        fs::create_directories(fid_dir);
        for (std::size_t i = 0; i < tiles.size(); ++i) {
            std::snprintf(name, sizeof name, "view_%03zu.png", i);
            img::write_png((fid_dir / name).string(),
                           img::resize_bilinear(tiles[i], 299, 299));
        }
    }
    std::printf("rendered %zu views into %s\n", views.size(), dir.string().c_str());
    return 0;
}

int cmd_export_fid(const CommonArgs& args) {
    CommonArgs sub = args;
    sub.fid_export = true;
    return cmd_render(sub);
}

int cmd_eval(const CommonArgs& args) {
    auto c = load_config(args);
    auto ds = recon::SequenceDataset::load(manifest_path(args.out_dir));
    const std::string source = c.get_string("eval.source", "recon");
    auto art = artifacts_for(c, args.out_dir, source);
    auto idx = ds.unpruned();
    MESHTEX_CHECK(!idx.empty(), NumericalError, "no unpruned frames to evaluate");

    int n_eval = static_cast<int>(c.get_int("eval.views", 0));
    if (n_eval <= 0 || n_eval > static_cast<int>(idx.size()))
        n_eval = static_cast<int>(idx.size());

    metrics::MetricReport report;
    const int res = ds.frames[idx[0]].image.height;
    for (int k = 0; k < n_eval; ++k) {
        const int i = idx[k * static_cast<int>(idx.size()) / n_eval];
        const auto& frame = ds.frames[i];
        const auto cam = source == "gt" && frame.camera_gt ? *frame.camera_gt
                                                           : frame.optimized_camera();
        auto out = render::render_view(art.mesh, cam, art.texture, res);
        auto sil = render::projected_silhouette(art.mesh, cam, res);
        metrics::PerViewMetrics pv;
        pv.index = i;
        pv.iou = metrics::iou(sil, frame.mask);
        pv.masked_l1 = metrics::masked_l1(img::from_tensor(out.rgb), frame.image,
                                          frame.mask);
        report.per_view.push_back(pv);
        report.iou += pv.iou;
        report.masked_l1 += pv.masked_l1;
    }
    report.iou /= report.per_view.size();
    report.masked_l1 /= report.per_view.size();

    metrics::TurntableParams tp;
    tp.n_views = static_cast<int>(c.get_int("eval.fid_views", 12));
    tp.resolution = res;
    tp.scale = c.get_double("synth.camera_scale", 0.8);
    tp.elevation_deg = c.get_double("synth.elevation_deg", 12.0);
    auto turntable = metrics::render_turntable(art.mesh, art.texture, tp);
    std::vector<img::Image> renders, references;
    for (const auto& v : turntable) renders.push_back(img::from_tensor(v.rgb));
    for (int i : idx) references.push_back(img::from_tensor(ds.frames[i].image_masked));
    auto fx = loss::FeatureExtractor<float>::random_default(
        static_cast<std::uint64_t>(c.get_int("eval.extractor_seed", 404)));
    report.feature_distance = metrics::feature_distance(references, renders, fx);
    MESHTEX_CHECK(std::isfinite(report.feature_distance) && std::isfinite(report.iou) &&
                      std::isfinite(report.masked_l1),
                  NumericalError, "non-finite metric in the report");

    report.save((fs::path(args.out_dir) / "report.json").string(),
                (fs::path(args.out_dir) / "report.csv").string());
    std::printf("eval: iou=%.4f masked_l1=%.4f feature_distance=%.4f\n", report.iou,
                report.masked_l1, report.feature_distance);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"meshtex: textured 3D mesh reconstruction and texture synthesis"};
    app.require_subcommand(1);
    app.fallthrough();

    CommonArgs args;
    app.add_option("--config", args.config_path, "config file (TOML-style key = value)");
    app.add_option("--seed", args.seed, "master seed override");
    app.add_option("--out", args.out_dir, "working/output directory");
    app.add_option("--views", args.views, "view count override");
    app.add_option("--resolution", args.resolution, "resolution override");
    app.add_flag("--fid-export", args.fid_export, "also export 299x299 renders");

    auto* synth_cmd = app.add_subcommand("synth-data", "generate a synthetic sequence");
    auto* train_recon = app.add_subcommand("train-recon", "stage-1 two-view training");
    auto* prune = app.add_subcommand("prune", "flag frames with inconsistent cameras");
    auto* bake = app.add_subcommand("bake", "bake pseudo ground-truth texture atlases");
    auto* train_gan = app.add_subcommand("train-gan", "stage-2 adversarial training");
    auto* render_cmd = app.add_subcommand("render", "turntable renders of the artifacts");
    auto* eval_cmd = app.add_subcommand("eval", "metric report against the dataset");
    auto* export_fid = app.add_subcommand("export-fid", "299x299 renders for external FID");

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth_cmd->parsed()) return cmd_synth_data(args);
        if (train_recon->parsed()) return cmd_train_recon(args);
        if (prune->parsed()) return cmd_prune(args);
        if (bake->parsed()) return cmd_bake(args);
        if (train_gan->parsed()) return cmd_train_gan(args);
        if (render_cmd->parsed()) return cmd_render(args);
        if (eval_cmd->parsed()) return cmd_eval(args);
        if (export_fid->parsed()) return cmd_export_fid(args);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
