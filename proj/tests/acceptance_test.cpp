// Acceptance suite: one test case per criterion, each printing a PASS/FAIL
// line with its measured quantities and runtime.

#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "gradcheck.hpp"
#include "schema_check.hpp"

#include "meshtex/gan.hpp"
#include "meshtex/metrics.hpp"
#include "meshtex/recon.hpp"
#include "meshtex/synth.hpp"

using namespace meshtex;
namespace fs = std::filesystem;
using D = ad::Tensor<double>;
using F = ad::Tensor<float>;
using Clock = std::chrono::steady_clock;

namespace {

struct Stopwatch {
    Clock::time_point start = Clock::now();
    double seconds() const {
        return std::chrono::duration<double>(Clock::now() - start).count();
    }
};

void report(int criterion, bool pass, const std::string& detail, double seconds) {
    std::printf("[criterion %d] %s: %s (%.1f s)\n", criterion, pass ? "PASS" : "FAIL",
                detail.c_str(), seconds);
    std::fflush(stdout);
}

D random_d(ad::Shape shape, Rng& rng, bool rg = true, double scale = 1.0) {
    auto t = D::zeros(std::move(shape), rg);
    rng.fill_normal(t.value(), 0.0, scale);
    return t;
}

}  // namespace

TEST_CASE("criterion_1_gradient_suite") {
    Stopwatch watch;
    double worst_tight = 0.0, worst_std = 0.0, worst_render = 0.0, worst_soft = 0.0;
    Rng rng(20260811);

    // elementwise / matmul / softmax at 1e-6
    for (int inst = 0; inst < 10; ++inst) {
        auto a = random_d({3, 4}, rng);
        auto b = random_d({3, 4}, rng);
        auto wts = random_d({3, 4}, rng, false);
        for (auto op : {ad::EwOp::Add, ad::EwOp::Sub, ad::EwOp::Mul}) {
            worst_tight = std::max(worst_tight, gradcheck::check_gradients({a, b}, [&] {
                return ad::sum(elementwise(op, a, b) * wts);
            }));
        }
        auto den = random_d({3, 4}, rng, true);
        for (auto& v : den.value()) v = v < 0 ? v - 0.5 : v + 0.5;  // away from 0
        worst_tight = std::max(worst_tight, gradcheck::check_gradients({a, den}, [&] {
            return ad::sum(elementwise(ad::EwOp::Div, a, den));
        }));
        auto base = random_d({3, 4}, rng);
        for (auto& v : base.value()) v = std::abs(v) + 0.5;  // positive base for pow
        worst_tight = std::max(worst_tight, gradcheck::check_gradients({base}, [&] {
            return ad::sum(ad::pow(base, 1.7));
        }));

        auto m1 = random_d({4, 5}, rng);
        auto m2 = random_d({5, 3}, rng);
        worst_tight = std::max(worst_tight, gradcheck::check_gradients({m1, m2}, [&] {
            return ad::sum(ad::matmul(m1, m2));
        }));
        auto sm = random_d({2, 7}, rng);
        auto w = random_d({2, 7}, rng, false);
        worst_tight = std::max(worst_tight, gradcheck::check_gradients({sm}, [&] {
            return ad::sum(ad::softmax(sm, 1) * w);
        }));
    }
    CHECK(worst_tight < 1e-6);

    // standard ops at 1e-4
    for (int inst = 0; inst < 10; ++inst) {
        auto x = random_d({1, 2, 5, 5}, rng);
        auto w = random_d({3, 2, 3, 3}, rng);
        auto b = random_d({3}, rng);
        worst_std = std::max(worst_std, gradcheck::check_gradients({x, w, b}, [&] {
            return ad::mean(ad::conv2d(x, w, b, 2, 1));
        }));

        auto act = random_d({24}, rng);
        for (auto& v : act.value()) v = v < 0 ? v - 0.3 : v + 0.3;  // off the relu kink
        auto wact = random_d({24}, rng, false);
        worst_std = std::max(worst_std, gradcheck::check_gradients({act}, [&] {
            return ad::sum((ad::relu(act) + ad::tanh_act(act) + ad::sigmoid(act)) * wact);
        }));

        auto bx = random_d({3, 2, 3, 3}, rng);
        auto gamma = random_d({2}, rng);
        auto beta = random_d({2}, rng);
        auto wb = random_d({3, 2, 3, 3}, rng, false);
        worst_std = std::max(worst_std, gradcheck::check_gradients({bx, gamma, beta}, [&] {
            std::vector<double> rm, rv;
            return ad::sum(ad::batch_norm(bx, gamma, beta, rm, rv, true) * wb);
        }));

        auto ux = random_d({1, 2, 3, 3}, rng);
        auto wu = random_d({1, 2, 6, 6}, rng, false);
        worst_std = std::max(worst_std, gradcheck::check_gradients({ux}, [&] {
            return ad::sum(ad::upsample_nearest(ux, 2) * wu);
        }));

        auto map = random_d({2, 5, 6}, rng);
        auto coords = D::zeros({5, 2}, true);
        for (auto& v : coords.value()) v = 0.1 + 0.8 * rng.uniform();
        worst_std = std::max(worst_std, gradcheck::check_gradients({map, coords}, [&] {
            return ad::sum(ad::bilinear_sample(map, coords));
        }));

        // geometry: rotation, projection, composed camera
        auto q = random_d({4}, rng);
        auto s = D::scalar(1.0 + 0.5 * rng.uniform(), true);
        auto t = random_d({2}, rng);
        auto verts = random_d({6, 3}, rng);
        auto wscreen = random_d({6, 2}, rng, false);
        worst_std = std::max(worst_std,
                             gradcheck::check_gradients({q, s, t, verts}, [&] {
            geo::CameraTensors<double> cam{q, s, t};
            auto proj = geo::project(cam, verts);
            return ad::sum(proj.screen * wscreen) + ad::mean(proj.depth);
        }));

        // deformation sampling + smoothness on a perturbed sphere
        auto mesh = geo::icosphere(1);
        auto adj = geo::EdgeAdjacency::build(mesh);
        auto dmap = random_d({3, 4, 4}, rng, true, 0.05);
        auto base_v = geo::template_vertices<double>(mesh);
        worst_std = std::max(worst_std, gradcheck::check_gradients({dmap}, [&] {
            auto deformed = geo::apply_deformation(base_v, mesh, dmap);
            return geo::smoothness_loss(deformed, mesh, adj);
        }));

        // loss suite
        auto fx = loss::FeatureExtractor<double>::random_default(900 + inst);
        auto img_a = D::zeros({3, 8, 8});
        rng.fill_uniform(img_a.value());
        auto img_b = D::zeros({3, 8, 8}, true);
        rng.fill_uniform(img_b.value());
        worst_std = std::max(worst_std, gradcheck::check_gradients({img_b}, [&] {
            return loss::perceptual_loss(img_a, img_b, fx);
        }));
        auto sil_a = D::zeros({6, 6});
        rng.fill_uniform(sil_a.value());
        auto sil_b = D::zeros({6, 6}, true);
        for (auto& v : sil_b.value()) v = 0.05 + 0.9 * rng.uniform();
        worst_std = std::max(worst_std, gradcheck::check_gradients({sil_b}, [&] {
            return loss::silhouette_loss(sil_a, sil_b);
        }));
    }
    CHECK(worst_std < 1e-4);

    // renderer texture gradients at 1e-4
    for (int inst = 0; inst < 10; ++inst) {
        auto mesh = geo::icosphere(1);
        geo::WeakPerspectiveCamera cam;
        cam.q = synth::perturb_rotation({1, 0, 0, 0}, 25.0 + 10.0 * inst, rng);
        cam.s = 0.8;
        auto frag = render::rasterize(mesh, cam, 16);
        std::vector<geo::Vec2> sv;
        std::vector<double> dv;
        geo::project_points(cam, mesh.vertices, sv, dv);
        std::vector<double> sdata;
        for (const auto& p : sv) {
            sdata.push_back(p[0]);
            sdata.push_back(p[1]);
        }
        auto screen = D::from({static_cast<std::int64_t>(sv.size()), 2}, sdata, true);
        auto tex = D::zeros({3, 4, 8}, true);
        rng.fill_uniform(tex.value(), 0.2, 0.8);
        auto wp = random_d({3, 16, 16}, rng, false);
        worst_render = std::max(worst_render,
                                gradcheck::check_gradients({tex, screen}, [&] {
            return ad::sum(render::shade(frag, mesh, screen, tex) * wp);
        }));
    }
    CHECK(worst_render < 1e-4);

    // soft-silhouette vertex and camera gradients at 1e-2
    for (int inst = 0; inst < 10; ++inst) {
        auto mesh = geo::icosphere(0);
        auto q = D::from({4}, {1, 0, 0, 0}, true);
        {
            auto qv = synth::perturb_rotation({1, 0, 0, 0}, 20.0 + 7.0 * inst, rng);
            for (int k = 0; k < 4; ++k) q.value()[k] = qv[k];
        }
        auto s = D::scalar(0.7, true);
        auto t = random_d({2}, rng, true, 0.05);
        auto base_v = geo::template_vertices<double>(mesh);
        base_v.set_requires_grad(true);
        worst_soft = std::max(worst_soft,
                              gradcheck::check_gradients({base_v, q, s, t}, [&] {
            geo::CameraTensors<double> cam{q, s, t};
            auto proj = geo::project(cam, base_v);
            return ad::mean(render::soft_silhouette(proj.screen, mesh, 24, 0.02));
        }));
    }
    CHECK(worst_soft < 1e-2);

    const double secs = watch.seconds();
    const bool pass = worst_tight < 1e-6 && worst_std < 1e-4 && worst_render < 1e-4 &&
                      worst_soft < 1e-2 && secs < 120.0;
    CHECK(secs < 120.0);
    report(1, pass,
           cat("rel err: tight ", worst_tight, ", standard ", worst_std, ", texture ",
               worst_render, ", soft-sil ", worst_soft),
           secs);
}

TEST_CASE("criterion_2_loss_identities") {
    Stopwatch watch;
    auto s = D::from({2, 2}, {1, 1, 0, 0});
    auto r = D::from({2, 2}, {1, 0, 0, 0});
    auto disjoint = D::from({2, 2}, {0, 0, 1, 1});
    const double iou_same = loss::silhouette_loss(s, s).item();
    const double iou_disj = loss::silhouette_loss(s, disjoint).item();
    const double iou_half = loss::silhouette_loss(s, r).item();

    loss::LossWeights w;
    loss::LossTerms<double> ones{D::scalar(1), D::scalar(1), D::scalar(1), D::scalar(1)};
    const double with_cam = loss::total_loss(ones, w, true).item();
    const double without_cam = loss::total_loss(ones, w, false).item();

    const bool pass = iou_same == 0.0 && iou_disj == 1.0 && iou_half == 0.5 &&
                      std::abs(with_cam - 3.00005) < 1e-12 &&
                      std::abs(without_cam - 2.00005) < 1e-12;
    CHECK(iou_same == 0.0);
    CHECK(iou_disj == 1.0);
    CHECK(iou_half == 0.5);
    CHECK(with_cam == doctest::Approx(3.00005).epsilon(1e-12));
    CHECK(without_cam == doctest::Approx(2.00005).epsilon(1e-12));
    report(2, pass,
           cat("silhouette {", iou_same, ",", iou_disj, ",", iou_half, "}, total ",
               with_cam, " / ", without_cam),
           watch.seconds());
}

TEST_CASE("criterion_3_inverse_render_round_trip") {
    Stopwatch watch;
    auto mesh = geo::icosphere(3);
    // checker with boundaries at u = 0.25 / 0.75; the camera at 90 degrees
    // puts those meridians on the silhouette rim
    auto tex = synth::checker_texture(64, 128, 2, 2, 0.25);
    auto cam = synth::turntable_camera(90.0, 0.85, 0.0);
    auto out = render::render_view(mesh, cam, tex, 128);
    auto mask = render::projected_silhouette(mesh, cam, 128);
    auto atlas = render::inverse_render(img::from_tensor(out.rgb), mask, mesh, cam, 64,
                                        128);
    std::int64_t visible = 0, close = 0;
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 128; ++x) {
            if (atlas.visibility.at(0, y, x) < 0.5f) continue;
            ++visible;
            bool ok = true;
            for (int c = 0; c < 3; ++c) {
                const float expect = tex.value()[(c * 64 + y) * 128 + x];
                if (std::abs(atlas.texture.at(c, y, x) - expect) > 2.0f / 255.0f)
                    ok = false;
            }
            if (ok) ++close;
        }
    const double frac =
        visible ? static_cast<double>(close) / static_cast<double>(visible) : 0.0;
    const double secs = watch.seconds();
    CHECK(visible > 2000);
    CHECK(frac >= 0.95);
    CHECK(secs < 60.0);
    report(3, visible > 2000 && frac >= 0.95 && secs < 60.0,
           cat(close, "/", visible, " visible texels within 2/255 (", 100.0 * frac, "%)"),
           secs);
}

TEST_CASE("criterion_4_camera_recovery") {
    Stopwatch watch;
    synth::SceneParams sp;
    sp.seed = 404;
    sp.subdivisions = 3;
    auto scene = synth::make_scene(sp);
    synth::SequenceParams qp;
    qp.n_views = 8;
    qp.step_deg = 45.0;
    qp.resolution = 64;
    qp.camera_noise_deg = 0.0;
    const auto dir = (fs::temp_directory_path() / "meshtex_acc4").string();
    fs::remove_all(dir);
    auto manifest = synth::generate_sequence(scene, qp, dir, 11);
    auto ds = recon::SequenceDataset::load(manifest);

    // perturb every init by exactly 10 degrees
    Rng rng(515);
    for (auto& f : ds.frames) {
        REQUIRE(f.camera_gt.has_value());
        f.camera_init.q = synth::perturb_rotation(f.camera_gt->q, 10.0, rng);
    }
    recon::RefineOptions opts;  // 400 steps, within the 500-step budget
    recon::refine_camera_offsets(ds, scene.mesh, scene.texture, opts);

    double worst = 0.0;
    for (const auto& f : ds.frames) {
        const auto cam = f.optimized_camera();
        worst = std::max(worst, geo::quaternion_geodesic_deg(cam.q, f.camera_gt->q));
    }
    const double secs = watch.seconds();
    CHECK(worst < 2.0);
    CHECK(secs < 300.0);
    report(4, worst < 2.0 && secs < 300.0,
           cat("worst geodesic error after ", opts.steps, " steps: ", worst, " deg"), secs);
}

TEST_CASE("criterion_5_pruning") {
    Stopwatch watch;
    synth::SceneParams sp;
    sp.seed = 505;
    sp.subdivisions = 3;
    auto scene = synth::make_scene(sp);
    synth::SequenceParams qp;
    qp.n_views = 100;
    qp.step_deg = 3.6;
    qp.resolution = 64;
    qp.camera_noise_deg = 2.0;
    qp.flip_frames = {10, 30, 51, 72, 90};
    const auto dir = (fs::temp_directory_path() / "meshtex_acc5").string();
    fs::remove_all(dir);
    auto manifest = synth::generate_sequence(scene, qp, dir, 21);
    auto ds = recon::SequenceDataset::load(manifest);
    auto pruned = recon::prune_sequence(ds, 0.0);  // adaptive threshold

    int tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pruned.frames.size(); ++i) {
        const bool is_bad = std::find(qp.flip_frames.begin(), qp.flip_frames.end(),
                                      static_cast<std::int64_t>(i)) !=
                            qp.flip_frames.end();
        if (pruned.frames[i].pruned && is_bad) ++tp;
        if (pruned.frames[i].pruned && !is_bad) ++fp;
        if (!pruned.frames[i].pruned && is_bad) ++fn;
    }
    const bool pass = tp == 5 && fp == 0 && fn == 0;
    const double secs = watch.seconds();
    CHECK(pass);
    CHECK(secs < 120.0);
    report(5, pass && secs < 120.0,
           cat("precision=", tp / std::max(1.0, double(tp + fp)),
               " recall=", tp / std::max(1.0, double(tp + fn))),
           secs);
}

TEST_CASE("criterion_6_stage1_overfit") {
    Stopwatch watch;
    synth::SceneParams sp;
    sp.seed = 606;
    sp.subdivisions = 3;
    auto scene = synth::make_scene(sp);
    synth::SequenceParams qp;
    qp.n_views = 24;
    qp.step_deg = 15.0;
    qp.resolution = 64;
    qp.camera_noise_deg = 2.0;
    const auto dir = (fs::temp_directory_path() / "meshtex_acc6").string();
    fs::remove_all(dir);
    auto manifest = synth::generate_sequence(scene, qp, dir, 31);
    auto ds = recon::SequenceDataset::load(manifest);

    recon::ReconConfig rc;
    rc.image_res = 64;
    rc.subdivisions = 2;
    rc.lr = 1e-3;
    rc.sigma_rel = 0.0075;
    rc.percp_taps = {0, 1, 2, 3};
    recon::ReconModel model(rc, 61);
    recon::Trainer trainer(model, rc);
    Rng rng(71);
    auto idx = ds.unpruned();
    for (int step = 0; step < 2000; ++step) {
        const int a = idx[rng.randint(static_cast<std::int64_t>(idx.size()))];
        const int b = idx[rng.randint(static_cast<std::int64_t>(idx.size()))];
        trainer.train_step_two_view(ds.frames[a], ds.frames[b]);
    }

    double mean_iou = 0.0, mean_l1 = 0.0;
    for (int i : idx) {
        const auto& frame = ds.frames[i];
        auto maps = model.encode_decode(frame.image_masked);
        geo::TriMesh mesh = model.template_mesh();
        auto verts = geo::apply_deformation(model.template_verts(), mesh,
                                            maps.displacement);
        for (std::size_t v = 0; v < mesh.vertices.size(); ++v)
            for (int k = 0; k < 3; ++k) mesh.vertices[v][k] = verts.value()[v * 3 + k];
        const auto cam = frame.optimized_camera();
        auto out = render::render_view(mesh, cam, maps.texture, 64);
        auto sil = render::projected_silhouette(mesh, cam, 64);
        mean_iou += metrics::iou(sil, frame.mask);
        mean_l1 += metrics::masked_l1(img::from_tensor(out.rgb), frame.image,
                                      frame.mask);
    }
    mean_iou /= idx.size();
    mean_l1 /= idx.size();
    const double secs = watch.seconds();
    CHECK(mean_iou > 0.9);
    CHECK(mean_l1 < 0.05);
    CHECK(secs < 900.0);
    report(6, mean_iou > 0.9 && mean_l1 < 0.05 && secs < 900.0,
           cat("IoU ", mean_iou, ", masked-L1 ", mean_l1, " after 2000 steps"), secs);
}

TEST_CASE("criterion_7_gan_mechanism_suite") {
    Stopwatch watch;
    bool pass = true;

    // attention identities on the desk generator
    gan::GanConfig gc;
    gc.base_channels = 64;
    gc.upsamples = 4;  // 3x128x128
    {
        Rng arng(771);
        auto at = gan::PositionAttention<float>::make(64, gc.p_channels, gc.qk_channels,
                                                      gc.heads, 4, 8, "position", arng);
        Rng frng(772);
        auto f1 = F::zeros({2, 64, 4, 8});
        frng.fill_normal(f1.value());
        auto f2 = F::zeros({1, 64, 4, 8});
        frng.fill_normal(f2.value());
        auto a1 = at.attention_map(f1);
        auto a2 = at.attention_map(f2);
        for (std::int64_t i = 0; i < a1.numel(); ++i)
            if (a1.value()[i] != a2.value()[i]) pass = false;  // bit-exact
        const std::int64_t n = 32;
        for (std::int64_t h = 0; h < gc.heads; ++h)
            for (std::int64_t r = 0; r < n; ++r) {
                double row = 0;
                for (std::int64_t c = 0; c < n; ++c)
                    row += a1.value()[(h * n + r) * n + c];
                if (std::abs(row - 1.0) > 1e-6) pass = false;
            }
        auto out = at.forward(f1, true);  // V zero-initialized: exact identity
        for (std::int64_t i = 0; i < f1.numel(); ++i)
            if (out.value()[i] != f1.value()[i]) pass = false;
        CHECK(pass);
    }

    // generator shape and exact reflection symmetry
    {
        gan::Generator g(gc, 773);
        Rng zr(774);
        auto z = F::zeros({2, gc.latent_dim});
        zr.fill_normal(z.value());
        auto out = g.forward(z, false);
        if (out.shape() != ad::Shape{2, 3, 128, 128}) pass = false;
        for (std::int64_t b = 0; b < 2 && pass; ++b)
            for (std::int64_t c = 0; c < 3; ++c)
                for (std::int64_t y = 0; y < 64; ++y)
                    for (std::int64_t x = 0; x < 128; ++x) {
                        const float top = out.value()[((b * 3 + c) * 128 + y) * 128 + x];
                        const float bot =
                            out.value()[((b * 3 + c) * 128 + (127 - y)) * 128 + x];
                        if (top != bot) {
                            pass = false;
                            break;
                        }
                    }
        CHECK(pass);
    }

    // position-embedding sensitivity: discriminator trained on real toys vs
    // position-scrambled fakes; swapping two blocks of a real texture must
    // lower its mean patch logit (sign test over 50 samples, p < 0.01)
    double p_value = 1.0;
    {
        auto toys = synth::make_toy_atlases(80, 775, 128, 128);
        Rng rng(776);
        auto swap_blocks = [](img::Image& im, int y1, int x1, int y2, int x2) {
            for (int c = 0; c < 3; ++c)
                for (int dy = 0; dy < 32; ++dy)
                    for (int dx = 0; dx < 32; ++dx)
                        std::swap(im.at(c, y1 + dy, x1 + dx), im.at(c, y2 + dy, x2 + dx));
        };
        std::vector<synth::ToyAtlas> scrambled = toys;
        for (auto& s : scrambled) {
            // permute several 32-aligned blocks inside the visible band
            for (int k = 0; k < 4; ++k) {
                const int y1 = 32 * static_cast<int>(rng.randint(4));
                const int x1 = 32 * static_cast<int>(rng.randint(4));
                const int y2 = 32 * static_cast<int>(rng.randint(4));
                const int x2 = 32 * static_cast<int>(rng.randint(4));
                swap_blocks(s.texture, y1, x1, y2, x2);
            }
        }
        gan::Discriminator disc(gc, 777);
        ad::Adam<float> opt(2e-4f);
        for (auto& [name, p] : disc.parameters()) opt.add(p);
        for (int step = 0; step < 400; ++step) {
            std::vector<int> idx;
            for (int i = 0; i < 4; ++i)
                idx.push_back(static_cast<int>(rng.randint(80)));
            auto real = gan::make_batch(toys, idx);
            auto fake = gan::make_batch(scrambled, idx);
            opt.zero_grad();
            ad::Tape<float> tape;
            {
                ad::Tape<float>::Scope scope(tape);
                auto lr_ = disc.forward(real.textures, real.visibility);
                auto lf_ = disc.forward(fake.textures, fake.visibility);
                auto loss = (ad::mean(ad::relu(F::scalar(1.0f) - lr_.patch16)) +
                             ad::mean(ad::relu(lf_.patch16 + 1.0f)) +
                             ad::mean(ad::relu(F::scalar(1.0f) - lr_.patch32)) +
                             ad::mean(ad::relu(lf_.patch32 + 1.0f))) *
                            0.5f;
                tape.backward(loss);
            }
            opt.step();
        }
        // paired comparison over 50 held samples
        auto eval_mean_logit = [&](const synth::ToyAtlas& a) {
            auto batch = gan::make_batch({a}, {0});
            auto lg = disc.forward(batch.textures, batch.visibility);
            return 0.5 * (ad::mean(lg.patch16).item() + ad::mean(lg.patch32).item());
        };
        auto held = synth::make_toy_atlases(50, 779, 128, 128);
        int wins = 0;
        for (auto& h : held) {
            const double before = eval_mean_logit(h);
            synth::ToyAtlas swapped = h;
            swap_blocks(swapped.texture, 0, 32, 96, 96);
            swap_blocks(swapped.texture, 32, 0, 64, 64);
            const double after = eval_mean_logit(swapped);
            if (after < before) ++wins;
        }
        // one-sided sign test: P(X >= wins), X ~ Binomial(50, 1/2)
        double tail = 0.0;
        for (int k = wins; k <= 50; ++k) {
            double logc = std::lgamma(51.0) - std::lgamma(k + 1.0) -
                          std::lgamma(51.0 - k);
            tail += std::exp(logc - 50.0 * std::log(2.0));
        }
        p_value = tail;
        if (p_value >= 0.01) pass = false;
        CHECK(p_value < 0.01);
    }
    const double secs = watch.seconds();
    CHECK(secs < 600.0);
    report(7, pass && secs < 600.0, cat("swap sign-test p = ", p_value), secs);
}

namespace {

struct GanRunResult {
    double fd_start = 0;
    double fd_end = 0;
};

GanRunResult run_gan_training(const std::vector<synth::ToyAtlas>& toys,
                              gan::GanConfig gc, std::uint64_t seed, int steps) {
    gan::Generator g(gc, seed);
    gan::Discriminator d(gc, seed + 1);
    gan::GanTrainer trainer(g, d, gc);
    auto fx = loss::FeatureExtractor<float>::random_default(808);
    std::vector<img::Image> real_images;
    for (const auto& a : toys) real_images.push_back(a.texture);

    auto eval_fd = [&](std::uint64_t s) {
        auto samples = g.sample_textures(32, s);
        Rng vr(s ^ 0x9999);
        std::vector<img::Image> fakes;
        for (auto& smp : samples) {
            auto im = img::from_tensor(smp);
            const auto& vis =
                toys[vr.randint(static_cast<std::int64_t>(toys.size()))].visibility;
            for (int y = 0; y < im.height; ++y)
                for (int x = 0; x < im.width; ++x)
                    if (vis.at(0, y, x) < 0.5f)
                        for (int c = 0; c < 3; ++c) im.at(c, y, x) = 0.0f;
            fakes.push_back(std::move(im));
        }
        return metrics::feature_distance(real_images, fakes, fx);
    };

    GanRunResult res;
    res.fd_start = eval_fd(12345);
    Rng rng(seed + 7);
    for (int step = 0; step < steps; ++step) {
        std::vector<int> idx;
        for (int i = 0; i < gc.batch; ++i)
            idx.push_back(static_cast<int>(rng.randint(
                static_cast<std::int64_t>(toys.size()))));
        auto batch = gan::make_batch(toys, idx);
        trainer.step(batch, rng);
    }
    res.fd_end = eval_fd(12345);
    return res;
}

}  // namespace

TEST_CASE("criterion_8_gan_training_trend") {
    Stopwatch watch;
    auto toys = synth::make_toy_atlases(200, 881, 128, 128);

    gan::GanConfig base;
    base.base_channels = 64;
    base.upsamples = 4;  // desk generator, 3x128x128
    base.batch = 2;
    const int steps = 2000;

    auto full = run_gan_training(toys, base, 1001, steps);
    gan::GanConfig nomask = base;
    nomask.mask_fakes = false;
    auto ablation_mask = run_gan_training(toys, nomask, 1001, steps);
    gan::GanConfig noemb = base;
    noemb.emb_channels = 0;
    auto ablation_emb = run_gan_training(toys, noemb, 1001, steps);

    const double drop = (full.fd_start - full.fd_end) / full.fd_start;
    const bool pass = drop >= 0.5 && ablation_mask.fd_end > full.fd_end &&
                      ablation_emb.fd_end >= full.fd_end;
    const double secs = watch.seconds();
    CHECK(drop >= 0.5);
    CHECK(ablation_mask.fd_end > full.fd_end);
    CHECK(ablation_emb.fd_end >= full.fd_end);
    CHECK(secs < 1800.0);
    report(8, pass && secs < 1800.0,
           cat("fd ", full.fd_start, " -> ", full.fd_end, " (", 100.0 * drop,
               "% drop); no-mask ", ablation_mask.fd_end, "; no-emb ",
               ablation_emb.fd_end),
           secs);
}

TEST_CASE("criterion_9_mask_corruption_ablation") {
    Stopwatch watch;
    synth::SceneParams sp;
    sp.seed = 909;
    sp.subdivisions = 3;
    auto scene = synth::make_scene(sp);

    std::size_t clean_dark = 0, corrupted_dark = 0;
    for (int view = 0; view < 8; ++view) {
        auto cam = synth::turntable_camera(45.0 * view, 0.85, 10.0);
        auto out = render::render_view(scene.mesh, cam, scene.texture, 128);
        auto proj_sil = render::projected_silhouette(scene.mesh, cam, 128);
        auto image = img::from_tensor(out.rgb);

        // external mask with Mask-RCNN-style border impurity
        img::Image external = view % 2 == 0 ? img::erode(proj_sil, 3)
                                            : img::dilate(proj_sil, 3);
        auto masked_by = [&](const img::Image& m) {
            img::Image out_img = image;
            for (int y = 0; y < image.height; ++y)
                for (int x = 0; x < image.width; ++x)
                    if (m.at(0, y, x) < 0.5f)
                        for (int c = 0; c < 3; ++c) out_img.at(c, y, x) = 0.0f;
            return out_img;
        };
        auto count_dark = [&](const render::TextureAtlas& atlas) {
            std::size_t dark = 0;
            const std::size_t hw = atlas.visibility.data.size();
            for (std::size_t i = 0; i < hw; ++i) {
                if (atlas.visibility.data[i] < 0.5f) continue;
                float mx = 0;
                for (int c = 0; c < 3; ++c)
                    mx = std::max(mx, atlas.texture.data[c * hw + i]);
                if (mx < 0.1f) ++dark;  // ground-truth texture is >= 0.25 everywhere
            }
            return dark;
        };
        clean_dark += count_dark(render::inverse_render(masked_by(proj_sil), proj_sil,
                                                        scene.mesh, cam, 64, 128));
        corrupted_dark += count_dark(render::inverse_render(masked_by(external),
                                                            proj_sil, scene.mesh, cam,
                                                            64, 128));
    }
    const double secs = watch.seconds();
    const bool pass = corrupted_dark > clean_dark;
    CHECK(pass);
    CHECK(secs < 120.0);
    report(9, pass && secs < 120.0,
           cat("spurious dark visible texels: external ", corrupted_dark,
               " vs projected ", clean_dark),
           secs);
}

TEST_CASE("criterion_10_end_to_end_smoke") {
    Stopwatch watch;
    const char* bin = std::getenv("MESHTEX_BIN");
    REQUIRE_MESSAGE(bin != nullptr, "MESHTEX_BIN must point at the CLI (set by ctest)");
    const std::string config = schema_check::repo_root() + "/configs/toy.toml";
    REQUIRE(fs::exists(config));

    auto run_chain = [&](const std::string& dir) {
        fs::remove_all(dir);
        for (const char* step :
             {"synth-data", "train-recon", "prune", "bake", "train-gan", "eval"}) {
            const std::string cmd = cat(bin, " ", step, " --config ", config, " --seed 7",
                                        " --out ", dir, " >/dev/null 2>&1");
            REQUIRE_MESSAGE(std::system(cmd.c_str()) == 0, "step failed: ", step);
        }
    };
    const std::string dir_a = (fs::temp_directory_path() / "meshtex_e2e_a").string();
    const std::string dir_b = (fs::temp_directory_path() / "meshtex_e2e_b").string();
    run_chain(dir_a);
    run_chain(dir_b);

    auto slurp = [](const std::string& p) {
        std::ifstream in(p, std::ios::binary);
        REQUIRE_MESSAGE(in.good(), "missing ", p);
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    bool identical = true;
    for (const char* rel : {"manifest.json", "report.json", "report.csv"}) {
        if (slurp(dir_a + "/" + rel) != slurp(dir_b + "/" + rel)) identical = false;
    }
    CHECK(identical);

    // the report is a valid MetricReport per the shipped schema
    std::ifstream rin(dir_a + "/report.json");
    nlohmann::json report_json = nlohmann::json::parse(rin);
    std::ifstream sin(schema_check::repo_root() + "/schemas/report.schema.json");
    nlohmann::json schema = nlohmann::json::parse(sin);
    std::string why;
    const bool valid = schema_check::validates(report_json, schema, schema, &why);
    CHECK_MESSAGE(valid, why);

    const double secs = watch.seconds();
    CHECK(secs < 3600.0);
    report(10, identical && valid && secs < 3600.0,
           cat("chain reproducible bit-for-bit, report valid; iou=",
               report_json["iou"].get<double>()),
           secs);
}
