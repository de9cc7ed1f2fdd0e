#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "schema_check.hpp"

#include "meshtex/config.hpp"
#include "meshtex/metrics.hpp"
#include "meshtex/recon.hpp"
#include "meshtex/synth.hpp"

using namespace meshtex;
namespace fs = std::filesystem;

namespace {

}  // namespace

TEST_SUITE("cli_io") {

TEST_CASE("config parse, types, env overrides, errors") {
    const std::string text = R"(
# comment
[recon]
steps = 120
lr = 1e-3
resume = false
name = "demo"

[synth]
flip_frames = [3, 7, 11]
)";
    auto c = cfg::Config::parse(text);
    CHECK(c.get_int("recon.steps", 0) == 120);
    CHECK(c.get_double("recon.lr", 0) == doctest::Approx(1e-3));
    CHECK(c.get_bool("recon.resume", true) == false);
    CHECK(c.get_string("recon.name", "") == "demo");
    auto flips = c.get_int_list("synth.flip_frames", {});
    REQUIRE(flips.size() == 3);
    CHECK(flips[1] == 7);
    CHECK(c.get_int("recon.missing", 42) == 42);

    CHECK_THROWS_AS(cfg::Config::parse("key_without_equals"), ConfigError);
    CHECK_THROWS_AS(c.get_int("recon.name", 0), ConfigError);
    CHECK_THROWS_WITH_AS(c.require_string("nope.key"),
                         doctest::Contains("nope.key"), ConfigError);

    // round trip through dump/parse
    auto again = cfg::Config::parse(c.dump());
    CHECK(again.values() == c.values());

    setenv("MESHTEX_RECON_STEPS", "77", 1);
    c.apply_env_overrides();
    unsetenv("MESHTEX_RECON_STEPS");
    CHECK(c.get_int("recon.steps", 0) == 77);
}

TEST_CASE("synthetic sequence: closure, manifest bit-exact round trip") {
    // N views at 360/N degrees close the circle exactly
    auto cam0 = synth::turntable_camera(0.0, 0.8, 12.0);
    auto cam_full = synth::turntable_camera(360.0, 0.8, 12.0);
    CHECK(geo::quaternion_geodesic_deg(cam0.q, cam_full.q) < 1e-9);

    synth::SceneParams sp;
    sp.seed = 5;
    sp.subdivisions = 2;
    auto scene = synth::make_scene(sp);
    synth::SequenceParams qp;
    qp.n_views = 6;
    qp.step_deg = 60.0;
    qp.resolution = 64;
    qp.camera_noise_deg = 1.0;
    const auto dir = (fs::temp_directory_path() / "meshtex_cli_seq").string();
    fs::remove_all(dir);
    auto manifest = synth::generate_sequence(scene, qp, dir, 9);

    std::ifstream in(manifest);
    nlohmann::json j = nlohmann::json::parse(in);
    auto ds = recon::SequenceDataset::load(manifest);
    REQUIRE(ds.frames.size() == 6);
    for (std::size_t i = 0; i < ds.frames.size(); ++i) {
        // doubles survive the JSON round trip bit-exactly
        for (int k = 0; k < 4; ++k)
            CHECK(ds.frames[i].camera_init.q[k] ==
                  j[i]["camera_init"]["q"][k].get<double>());
        CHECK(ds.frames[i].camera_init.s == j[i]["camera_init"]["s"].get<double>());
    }

    // manifest validates against the shipped schema
    std::ifstream schema_in(schema_check::repo_root() + "/schemas/manifest.schema.json");
    REQUIRE(schema_in.good());
    nlohmann::json schema = nlohmann::json::parse(schema_in);
    std::string why;
    CHECK_MESSAGE(schema_check::validates(j, schema, schema, &why), why);
}

TEST_CASE("flip-corrupted frames are exactly the ones caught by prune") {
    synth::SceneParams sp;
    sp.seed = 15;
    sp.subdivisions = 2;
    auto scene = synth::make_scene(sp);
    synth::SequenceParams qp;
    qp.n_views = 30;
    qp.step_deg = 12.0;
    qp.resolution = 64;
    qp.camera_noise_deg = 1.5;
    qp.flip_frames = {4, 11, 23};
    const auto dir = (fs::temp_directory_path() / "meshtex_flip_seq").string();
    fs::remove_all(dir);
    auto manifest = synth::generate_sequence(scene, qp, dir, 13);
    auto ds = recon::SequenceDataset::load(manifest);
    auto pruned = recon::prune_sequence(ds, 0.0);  // adaptive threshold
    for (std::size_t i = 0; i < pruned.frames.size(); ++i) {
        const bool expect = i == 4 || i == 11 || i == 23;
        CHECK(pruned.frames[i].pruned == expect);
    }
}

TEST_CASE("frechet distance identities and closed-form oracle") {
    Rng rng(33);
    std::vector<std::vector<double>> a;
    for (int i = 0; i < 64; ++i) {
        std::vector<double> v(5);
        for (auto& x : v) x = rng.normal();
        a.push_back(v);
    }
    CHECK(metrics::frechet_distance(a, a) == doctest::Approx(0.0).epsilon(1e-6));

    std::vector<std::vector<double>> b;
    for (int i = 0; i < 64; ++i) {
        std::vector<double> v(5);
        for (auto& x : v) x = rng.normal() * 1.4 + 0.3;
        b.push_back(v);
    }
    const double ab = metrics::frechet_distance(a, b);
    const double ba = metrics::frechet_distance(b, a);
    CHECK(ab == doctest::Approx(ba).epsilon(1e-9));
    CHECK(ab > 0.0);

    // unit-variance clouds with mean offset delta: distance ~ ||delta||^2
    std::vector<std::vector<double>> c1, c2;
    const std::vector<double> delta = {0.8, -0.5, 0.3};
    for (int i = 0; i < 1000; ++i) {
        std::vector<double> v1(3), v2(3);
        for (int k = 0; k < 3; ++k) {
            v1[k] = rng.normal();
            v2[k] = rng.normal() + delta[k];
        }
        c1.push_back(v1);
        c2.push_back(v2);
    }
    double d2 = 0;
    for (double d : delta) d2 += d * d;
    CHECK(metrics::frechet_distance(c1, c2) == doctest::Approx(d2).epsilon(0.05));

    std::vector<std::vector<double>> tiny = {{1.0}, {2.0}};
    CHECK_THROWS_AS(metrics::frechet_distance(tiny, {}), NumericalError);
}

TEST_CASE("turntable: periodicity, silhouette continuity, fid export size") {
    synth::SceneParams sp;
    sp.seed = 25;
    sp.subdivisions = 3;
    auto scene = synth::make_scene(sp);
    metrics::TurntableParams tp;
    tp.n_views = 8;
    tp.resolution = 64;
    tp.scale = 0.8;
    auto views = metrics::render_turntable(scene.mesh, scene.texture, tp);
    REQUIRE(views.size() == 8);
    // 360-degree closure: a hypothetical 9th view equals the first
    auto cam9 = synth::turntable_camera(360.0, tp.scale, tp.elevation_deg);
    auto again = render::render_view(scene.mesh, cam9, scene.texture, 64);
    for (std::int64_t i = 0; i < again.alpha.numel(); ++i)
        CHECK(again.alpha.value()[i] == views[0].alpha.value()[i]);

    double min_iou = 1.0;
    for (std::size_t i = 0; i < views.size(); ++i) {
        auto a = img::from_tensor(views[i].alpha);
        auto b = img::from_tensor(views[(i + 1) % views.size()].alpha);
        min_iou = std::min(min_iou, metrics::iou(a, b));
    }
    CHECK(min_iou > 0.7);

    auto exported = img::resize_bilinear(img::from_tensor(views[0].rgb), 299, 299);
    CHECK(exported.height == 299);
    CHECK(exported.width == 299);
}

TEST_CASE("metric report schema and self-evaluation oracle") {
    synth::SceneParams sp;
    sp.seed = 35;
    sp.subdivisions = 3;
    auto scene = synth::make_scene(sp);
    synth::SequenceParams qp;
    qp.n_views = 8;
    qp.step_deg = 45.0;
    qp.resolution = 64;
    qp.camera_noise_deg = 0.0;
    const auto dir = (fs::temp_directory_path() / "meshtex_eval_seq").string();
    fs::remove_all(dir);
    auto manifest = synth::generate_sequence(scene, qp, dir, 3);
    auto ds = recon::SequenceDataset::load(manifest);

    // ground-truth artifacts evaluated on their own data
    metrics::MetricReport report;
    for (int i : ds.unpruned()) {
        const auto& frame = ds.frames[i];
        auto out = render::render_view(scene.mesh, *frame.camera_gt, scene.texture, 64);
        auto sil = render::projected_silhouette(scene.mesh, *frame.camera_gt, 64);
        metrics::PerViewMetrics pv;
        pv.index = i;
        pv.iou = metrics::iou(sil, frame.mask);
        pv.masked_l1 =
            metrics::masked_l1(img::from_tensor(out.rgb), frame.image, frame.mask);
        report.per_view.push_back(pv);
        report.iou += pv.iou;
        report.masked_l1 += pv.masked_l1;
    }
    report.iou /= report.per_view.size();
    report.masked_l1 /= report.per_view.size();
    report.feature_distance = 0.0;
    CHECK(report.iou > 0.98);
    CHECK(report.masked_l1 < 0.01);
    CHECK(report.per_view.size() == ds.frames.size());

    const auto jpath = (fs::path(dir) / "report.json").string();
    const auto cpath = (fs::path(dir) / "report.csv").string();
    report.save(jpath, cpath);
    std::ifstream jin(jpath);
    nlohmann::json j = nlohmann::json::parse(jin);
    std::ifstream schema_in(schema_check::repo_root() + "/schemas/report.schema.json");
    REQUIRE(schema_in.good());
    nlohmann::json schema = nlohmann::json::parse(schema_in);
    std::string why;
    CHECK_MESSAGE(schema_check::validates(j, schema, schema, &why), why);

    std::ifstream cin_(cpath);
    std::string header;
    std::getline(cin_, header);
    CHECK(header == "view,iou,masked_l1");
}

TEST_CASE("cli binary: prune contract and render count contract") {
    const char* bin = std::getenv("MESHTEX_BIN");
    if (bin == nullptr) return;  // only exercised under ctest

    const auto dir = (fs::temp_directory_path() / "meshtex_cli_run").string();
    fs::remove_all(dir);
    synth::SceneParams sp;
    sp.seed = 45;
    sp.subdivisions = 3;
    auto scene = synth::make_scene(sp);
    synth::SequenceParams qp;
    qp.n_views = 12;
    qp.step_deg = 30.0;
    qp.resolution = 64;
    qp.camera_noise_deg = 1.0;
    qp.flip_frames = {5};
    synth::generate_sequence(scene, qp, dir, 17);

    const std::string prune_cmd = cat(bin, " prune --out ", dir);
    CHECK(std::system(prune_cmd.c_str()) == 0);
    auto ds = recon::SequenceDataset::load((fs::path(dir) / "manifest.json").string());
    CHECK(ds.frames[5].pruned);

    const std::string render_cmd =
        cat(bin, " render --out ", dir, " --views 12 --resolution 64 2>/dev/null");
    // render requires a recon checkpoint; use the gt source instead
    const std::string render_gt = cat(
        bin, " render --out ", dir,
        " --views 12 --resolution 64 --config /dev/null 2>/dev/null");
    (void)render_cmd;
    // write a one-line config choosing the gt artifacts
    const auto cfg_path = (fs::path(dir) / "render.toml").string();
    {
        std::ofstream out(cfg_path);
        out << "[render]\nsource = \"gt\"\n";
    }
    const std::string cmd =
        cat(bin, " render --out ", dir, " --views 12 --config ", cfg_path);
    CHECK(std::system(cmd.c_str()) == 0);
    int pngs = 0;
    for (const auto& e : fs::directory_iterator(fs::path(dir) / "renders"))
        if (e.path().extension() == ".png") ++pngs;
    CHECK(pngs == 13);  // 12 views + contact sheet
    CHECK(fs::exists(fs::path(dir) / "renders" / "contact_sheet.png"));

    // unknown subcommand fails
    CHECK(std::system(cat(bin, " frobnicate 2>/dev/null").c_str()) != 0);
}

}  // TEST_SUITE
