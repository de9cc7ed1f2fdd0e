#include "meshtex/render.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>

#include "meshtex/parallel.hpp"

namespace meshtex::render {

using ad::Tape;
using ad::Tensor;
using geo::TriMesh;
using geo::Vec2;
using geo::WeakPerspectiveCamera;

namespace {

struct ScreenTri {
    double ax, ay, bx, by, cx, cy;
    double signed_area2() const {
        return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
    }
};

// Convex weights of p in the triangle; valid when signed_area2 != 0.
inline void barycentric(const ScreenTri& t, double px, double py, double& wa,
                        double& wb, double& wc) {
    const double d = t.signed_area2();
    const double nb = (px - t.ax) * (t.cy - t.ay) - (py - t.ay) * (t.cx - t.ax);
    const double nc = (t.bx - t.ax) * (py - t.ay) - (t.by - t.ay) * (px - t.ax);
    wb = nb / d;
    wc = nc / d;
    wa = 1.0 - wb - wc;
}

std::atomic<bool> g_seam_warned{false};
void warn_uv_clamp() {
    if (!g_seam_warned.exchange(true))
        std::fprintf(stderr,
                     "[meshtex] warning: interpolated UV outside [0,1], clamping at the "
                     "texture seam\n");
}

}  // namespace

// ---------------------------------------------------------------- rasterize

FragmentBuffer rasterize_projected(const std::vector<Vec2>& screen,
                                   const std::vector<double>& depth,
                                   const TriMesh& topology, int resolution) {
    MESHTEX_CHECK(resolution >= 8, ShapeError, "rasterize resolution must be >= 8, got ",
                  resolution);
    const int H = resolution, W = resolution;
    FragmentBuffer frag;
    frag.height = H;
    frag.width = W;
    frag.face_id.assign(static_cast<std::size_t>(H) * W, -1);
    frag.bary.assign(static_cast<std::size_t>(H) * W * 3, 0.0);
    frag.uv.assign(static_cast<std::size_t>(H) * W * 2, 0.0);
    frag.depth.assign(static_cast<std::size_t>(H) * W,
                      std::numeric_limits<double>::infinity());

    const int nf = static_cast<int>(topology.faces.size());
    // Deterministic parallelism: split rows into chunks, every chunk scans the
    // faces in index order.
    parallel_for_chunks(0, H, [&](std::int64_t row_lo, std::int64_t row_hi) {
        for (int f = 0; f < nf; ++f) {
            const auto& fc = topology.faces[f];
            const ScreenTri tri{screen[fc[0]][0], screen[fc[0]][1], screen[fc[1]][0],
                                screen[fc[1]][1], screen[fc[2]][0], screen[fc[2]][1]};
            if (tri.signed_area2() >= 0.0) continue;  // back or edge-on: culled
            const double xmin = std::min({tri.ax, tri.bx, tri.cx});
            const double xmax = std::max({tri.ax, tri.bx, tri.cx});
            const double ymin = std::min({tri.ay, tri.by, tri.cy});
            const double ymax = std::max({tri.ay, tri.by, tri.cy});
            // pixel ranges covering the bbox
            int j0 = static_cast<int>(std::floor((xmin + 1.0) * W / 2.0 - 0.5));
            int j1 = static_cast<int>(std::ceil((xmax + 1.0) * W / 2.0 - 0.5));
            int i0 = static_cast<int>(std::floor((1.0 - ymax) * H / 2.0 - 0.5));
            int i1 = static_cast<int>(std::ceil((1.0 - ymin) * H / 2.0 - 0.5));
            j0 = std::max(j0, 0);
            j1 = std::min(j1, W - 1);
            i0 = std::max<int>(i0, static_cast<int>(row_lo));
            i1 = std::min<int>(i1, static_cast<int>(row_hi) - 1);
            for (int i = i0; i <= i1; ++i) {
                const double py = pixel_y(i, H);
                for (int j = j0; j <= j1; ++j) {
                    const double px = pixel_x(j, W);
                    double wa, wb, wc;
                    barycentric(tri, px, py, wa, wb, wc);
                    const double tol = -1e-12;
                    if (wa < tol || wb < tol || wc < tol) continue;
                    const double d = wa * depth[fc[0]] + wb * depth[fc[1]] +
                                     wc * depth[fc[2]];
                    const std::int64_t pix = static_cast<std::int64_t>(i) * W + j;
                    const double cur = frag.depth[pix];
                    if (d < cur || (d == cur && f < frag.face_id[pix])) {
                        frag.depth[pix] = d;
                        frag.face_id[pix] = f;
                        frag.bary[pix * 3] = wa;
                        frag.bary[pix * 3 + 1] = wb;
                        frag.bary[pix * 3 + 2] = wc;
                        const auto& tf = topology.uv_faces[f];
                        frag.uv[pix * 2] = wa * topology.uv[tf[0]][0] +
                                           wb * topology.uv[tf[1]][0] +
                                           wc * topology.uv[tf[2]][0];
                        frag.uv[pix * 2 + 1] = wa * topology.uv[tf[0]][1] +
                                               wb * topology.uv[tf[1]][1] +
                                               wc * topology.uv[tf[2]][1];
                    }
                }
            }
        }
    }, 8);

    for (std::int64_t pix = 0; pix < static_cast<std::int64_t>(frag.face_id.size());
         ++pix)
        if (frag.face_id[pix] >= 0) frag.covered.push_back(pix);
    return frag;
}

FragmentBuffer rasterize(const TriMesh& mesh, const WeakPerspectiveCamera& camera,
                         int resolution) {
    std::vector<Vec2> screen;
    std::vector<double> depth;
    geo::project_points(camera, mesh.vertices, screen, depth);
    return rasterize_projected(screen, depth, mesh, resolution);
}

// ---------------------------------------------------------------- shade

template <typename T>
Tensor<T> shade(const FragmentBuffer& frag, const TriMesh& topology,
                const Tensor<T>& screen, const Tensor<T>& texture) {
    MESHTEX_CHECK(texture.ndim() == 3 && texture.dim(0) == 3, ShapeError,
                  "shade texture must be [3,Ht,Wt], got ", ad::shape_str(texture.shape()));
    MESHTEX_CHECK(screen.ndim() == 2 && screen.dim(1) == 2 &&
                      screen.dim(0) == static_cast<std::int64_t>(topology.vertices.size()),
                  ShapeError, "shade screen must be [N,2] matching the mesh");
    const int H = frag.height, W = frag.width;
    const std::int64_t Ht = texture.dim(1), Wt = texture.dim(2);
    Tensor<T> out = Tensor<T>::zeros({3, H, W});

    const T* ps = screen.value().data();
    const T* pt = texture.value().data();
    T* po = out.value().data();
    bool clamped_any = false;

    auto sample_pixel = [&](std::int64_t pix, T* rgb_out) {
        const int f = frag.face_id[pix];
        const auto& fc = topology.faces[f];
        const auto& tf = topology.uv_faces[f];
        const int i = static_cast<int>(pix / W), j = static_cast<int>(pix % W);
        const ScreenTri tri{
            static_cast<double>(ps[fc[0] * 2]), static_cast<double>(ps[fc[0] * 2 + 1]),
            static_cast<double>(ps[fc[1] * 2]), static_cast<double>(ps[fc[1] * 2 + 1]),
            static_cast<double>(ps[fc[2] * 2]), static_cast<double>(ps[fc[2] * 2 + 1])};
        double wa, wb, wc;
        barycentric(tri, pixel_x(j, W), pixel_y(i, H), wa, wb, wc);
        double u = wa * topology.uv[tf[0]][0] + wb * topology.uv[tf[1]][0] +
                   wc * topology.uv[tf[2]][0];
        double v = wa * topology.uv[tf[0]][1] + wb * topology.uv[tf[1]][1] +
                   wc * topology.uv[tf[2]][1];
        if (u < 0.0 || u > 1.0 || v < 0.0 || v > 1.0) clamped_any = true;
        u = std::clamp(u, 0.0, 1.0);
        v = std::clamp(v, 0.0, 1.0);
        const double x = u * (Wt - 1), y = v * (Ht - 1);
        const std::int64_t x0 = std::min<std::int64_t>(static_cast<std::int64_t>(x),
                                                       std::max<std::int64_t>(Wt - 2, 0));
        const std::int64_t y0 = std::min<std::int64_t>(static_cast<std::int64_t>(y),
                                                       std::max<std::int64_t>(Ht - 2, 0));
        const std::int64_t x1 = std::min(x0 + 1, Wt - 1), y1 = std::min(y0 + 1, Ht - 1);
        const double fx = x - x0, fy = y - y0;
        for (int c = 0; c < 3; ++c) {
            const T* m = pt + c * Ht * Wt;
            const double val = (1 - fy) * ((1 - fx) * m[y0 * Wt + x0] +
                                           fx * m[y0 * Wt + x1]) +
                               fy * ((1 - fx) * m[y1 * Wt + x0] + fx * m[y1 * Wt + x1]);
            rgb_out[c] = static_cast<T>(val);
        }
    };

    for (std::int64_t pix : frag.covered) {
        T rgb[3];
        sample_pixel(pix, rgb);
        for (int c = 0; c < 3; ++c) po[c * H * W + pix] = rgb[c];
    }
    if (clamped_any) warn_uv_clamp();

    if (ad::recording<T>({&screen, &texture})) {
        out.set_requires_grad(true);
        auto sd = screen.ptr();
        auto td = texture.ptr();
        auto od = out.ptr();
        auto faces = topology.faces;
        auto uv_faces = topology.uv_faces;
        auto uvs = topology.uv;
        auto covered = frag.covered;
        auto face_id = frag.face_id;
        Tape<T>::current()->push({od}, [=] {
            if (sd->requires_grad) sd->ensure_grad();
            if (td->requires_grad) td->ensure_grad();
            const T* ps = sd->value.data();
            const T* pt = td->value.data();
            const T* pg = od->grad.data();
            for (std::int64_t pix : covered) {
                const int f = face_id[pix];
                const auto& fc = faces[f];
                const auto& tf = uv_faces[f];
                const int i = static_cast<int>(pix / W), j = static_cast<int>(pix % W);
                const double px = pixel_x(j, W), py = pixel_y(i, H);
                const double ax = ps[fc[0] * 2], ay = ps[fc[0] * 2 + 1];
                const double bx = ps[fc[1] * 2], by = ps[fc[1] * 2 + 1];
                const double cx = ps[fc[2] * 2], cy = ps[fc[2] * 2 + 1];
                const double e1x = bx - ax, e1y = by - ay;
                const double e2x = cx - ax, e2y = cy - ay;
                const double pax = px - ax, pay = py - ay;
                const double D = e1x * e2y - e1y * e2x;
                const double Nb = pax * e2y - pay * e2x;
                const double Nc = e1x * pay - e1y * pax;
                const double wb = Nb / D, wc = Nc / D, wa = 1.0 - wb - wc;

                double u = wa * uvs[tf[0]][0] + wb * uvs[tf[1]][0] + wc * uvs[tf[2]][0];
                double v = wa * uvs[tf[0]][1] + wb * uvs[tf[1]][1] + wc * uvs[tf[2]][1];
                const bool clamped_u = u < 0.0 || u > 1.0;
                const bool clamped_v = v < 0.0 || v > 1.0;
                u = std::clamp(u, 0.0, 1.0);
                v = std::clamp(v, 0.0, 1.0);
                const double x = u * (Wt - 1), y = v * (Ht - 1);
                const std::int64_t x0 = std::min<std::int64_t>(
                    static_cast<std::int64_t>(x), std::max<std::int64_t>(Wt - 2, 0));
                const std::int64_t y0 = std::min<std::int64_t>(
                    static_cast<std::int64_t>(y), std::max<std::int64_t>(Ht - 2, 0));
                const std::int64_t x1 = std::min(x0 + 1, Wt - 1),
                                   y1 = std::min(y0 + 1, Ht - 1);
                const double fx = x - x0, fy = y - y0;

                double du = 0.0, dv = 0.0;
                for (int c = 0; c < 3; ++c) {
                    const double g = pg[c * H * W + pix];
                    if (g == 0.0) continue;
                    const T* m = pt + c * Ht * Wt;
                    if (td->requires_grad) {
                        T* gm = td->grad.data() + c * Ht * Wt;
                        gm[y0 * Wt + x0] += static_cast<T>(g * (1 - fy) * (1 - fx));
                        gm[y0 * Wt + x1] += static_cast<T>(g * (1 - fy) * fx);
                        gm[y1 * Wt + x0] += static_cast<T>(g * fy * (1 - fx));
                        gm[y1 * Wt + x1] += static_cast<T>(g * fy * fx);
                    }
                    du += g * ((1 - fy) * (m[y0 * Wt + x1] - m[y0 * Wt + x0]) +
                               fy * (m[y1 * Wt + x1] - m[y1 * Wt + x0]));
                    dv += g * ((1 - fx) * (m[y1 * Wt + x0] - m[y0 * Wt + x0]) +
                               fx * (m[y1 * Wt + x1] - m[y0 * Wt + x1]));
                }
                if (!sd->requires_grad) continue;
                du *= clamped_u ? 0.0 : static_cast<double>(Wt - 1);
                dv *= clamped_v ? 0.0 : static_cast<double>(Ht - 1);
                // gradient wrt barycentrics through the UV interpolation
                const double gwa = du * uvs[tf[0]][0] + dv * uvs[tf[0]][1];
                const double gwb = du * uvs[tf[1]][0] + dv * uvs[tf[1]][1];
                const double gwc = du * uvs[tf[2]][0] + dv * uvs[tf[2]][1];
                const double gb = gwb - gwa;  // wa = 1 - wb - wc
                const double gc = gwc - gwa;
                // quotient rule for wb = Nb/D, wc = Nc/D
                const double dNb[6] = {-e2y + pay, e2x - pax, 0.0, 0.0, -pay, pax};
                const double dNc[6] = {-pay + e1y, pax - e1x, pay, -pax, 0.0, 0.0};
                const double dD[6] = {-e2y + e1y, e2x - e1x, e2y, -e2x, -e1y, e1x};
                T* gs = sd->grad.data();
                for (int k = 0; k < 6; ++k) {
                    const double dwb = (dNb[k] - wb * dD[k]) / D;
                    const double dwc = (dNc[k] - wc * dD[k]) / D;
                    const double g = gb * dwb + gc * dwc;
                    const int vert = fc[k / 2];
                    gs[vert * 2 + (k % 2)] += static_cast<T>(g);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- soft sil

namespace {

// Signed distance of p to the triangle boundary, positive inside. Also
// reports the nearest edge and its closest-point parameter for the backward.
// The inside test avoids dividing by the (possibly tiny) face area so sliver
// faces degrade to "outside everywhere".
inline double signed_tri_distance(const ScreenTri& t, double px, double py,
                                  int& edge_out, double& param_out) {
    const double vx[3] = {t.ax, t.bx, t.cx};
    const double vy[3] = {t.ay, t.by, t.cy};
    double best = std::numeric_limits<double>::infinity();
    edge_out = 0;
    param_out = 0.0;
    for (int e = 0; e < 3; ++e) {
        const int e2 = (e + 1) % 3;
        const double ex = vx[e2] - vx[e], ey = vy[e2] - vy[e];
        const double qx = px - vx[e], qy = py - vy[e];
        const double len2 = ex * ex + ey * ey;
        double tt = len2 > 0 ? (qx * ex + qy * ey) / len2 : 0.0;
        tt = std::clamp(tt, 0.0, 1.0);
        const double dx = qx - tt * ex, dy = qy - tt * ey;
        const double d = std::sqrt(dx * dx + dy * dy);
        if (d < best) {
            best = d;
            edge_out = e;
            param_out = tt;
        }
    }
    const double D = t.signed_area2();
    const double nb = (px - t.ax) * (t.cy - t.ay) - (py - t.ay) * (t.cx - t.ax);
    const double nc = (t.bx - t.ax) * (py - t.ay) - (t.by - t.ay) * (px - t.ax);
    const double na = D - nb - nc;
    const bool inside = D < 0 ? (na <= 0 && nb <= 0 && nc <= 0)
                              : D > 0 ? (na >= 0 && nb >= 0 && nc >= 0) : false;
    return inside ? best : -best;
}

constexpr double kSoftBandSigmas = 12.0;  // sigmoid(-12) ~ 6e-6

}  // namespace

template <typename T>
Tensor<T> soft_silhouette(const Tensor<T>& screen, const TriMesh& topology,
                          int resolution, double sigma) {
    MESHTEX_CHECK(sigma > 0.0, NumericalError, "soft_silhouette sigma must be > 0, got ",
                  sigma);
    MESHTEX_CHECK(resolution >= 8, ShapeError, "soft_silhouette resolution must be >= 8");
    const int H = resolution, W = resolution;
    const int nf = static_cast<int>(topology.faces.size());
    const T* ps = screen.value().data();
    const double band = kSoftBandSigmas * sigma;

    // Log-space accumulation: L = sum log(1 - p_f); alpha = 1 - exp(L).
    std::vector<double> log_miss(static_cast<std::size_t>(H) * W, 0.0);
    parallel_for_chunks(0, H, [&](std::int64_t row_lo, std::int64_t row_hi) {
        for (int f = 0; f < nf; ++f) {
            const auto& fc = topology.faces[f];
            const ScreenTri tri{
                static_cast<double>(ps[fc[0] * 2]), static_cast<double>(ps[fc[0] * 2 + 1]),
                static_cast<double>(ps[fc[1] * 2]), static_cast<double>(ps[fc[1] * 2 + 1]),
                static_cast<double>(ps[fc[2] * 2]),
                static_cast<double>(ps[fc[2] * 2 + 1])};
            const double xmin = std::min({tri.ax, tri.bx, tri.cx}) - band;
            const double xmax = std::max({tri.ax, tri.bx, tri.cx}) + band;
            const double ymin = std::min({tri.ay, tri.by, tri.cy}) - band;
            const double ymax = std::max({tri.ay, tri.by, tri.cy}) + band;
            int j0 = std::max(0, static_cast<int>(std::floor((xmin + 1.0) * W / 2.0 - 0.5)));
            int j1 = std::min(W - 1,
                              static_cast<int>(std::ceil((xmax + 1.0) * W / 2.0 - 0.5)));
            int i0 = std::max<int>(static_cast<int>(row_lo),
                                   static_cast<int>(std::floor((1.0 - ymax) * H / 2.0 - 0.5)));
            int i1 = std::min<int>(static_cast<int>(row_hi) - 1,
                                   static_cast<int>(std::ceil((1.0 - ymin) * H / 2.0 - 0.5)));
            for (int i = i0; i <= i1; ++i)
                for (int j = j0; j <= j1; ++j) {
                    int edge;
                    double tt;
                    const double d =
                        signed_tri_distance(tri, pixel_x(j, W), pixel_y(i, H), edge, tt);
                    const double z = d / sigma;
                    if (z < -kSoftBandSigmas) continue;
                    double p = 1.0 / (1.0 + std::exp(-z));
                    p = std::min(p, 1.0 - 1e-12);
                    log_miss[static_cast<std::size_t>(i) * W + j] += std::log1p(-p);
                }
        }
    }, 8);

    Tensor<T> out = Tensor<T>::zeros({H, W});
    T* po = out.value().data();
    for (std::size_t i = 0; i < log_miss.size(); ++i)
        po[i] = static_cast<T>(1.0 - std::exp(log_miss[i]));

    if (ad::recording<T>({&screen})) {
        out.set_requires_grad(true);
        auto sd = screen.ptr();
        auto od = out.ptr();
        auto faces = topology.faces;
        auto miss = log_miss;  // exp(L) = 1 - alpha, saved for the backward
        Tape<T>::current()->push({od}, [=, faces = std::move(faces),
                                        miss = std::move(miss)] {
            sd->ensure_grad();
            const T* ps = sd->value.data();
            const T* pg = od->grad.data();
            T* gs = sd->grad.data();
            const int nf = static_cast<int>(faces.size());
            // Deterministic parallel accumulation: each row-chunk writes a
            // private buffer; chunks merge in fixed order afterwards.
            const int n_chunks = std::min(hardware_threads(), 4);
            const std::size_t n_screen = sd->value.size();
            std::vector<std::vector<double>> partial(
                n_chunks, std::vector<double>(n_screen, 0.0));
            const int rows_per = (H + n_chunks - 1) / n_chunks;
            parallel_for(0, n_chunks, [&](std::int64_t chunk) {
            const int row_lo = static_cast<int>(chunk) * rows_per;
            const int row_hi = std::min(H, row_lo + rows_per);
            double* gacc = partial[chunk].data();
            for (int f = 0; f < nf; ++f) {
                const auto& fc = faces[f];
                const ScreenTri tri{static_cast<double>(ps[fc[0] * 2]),
                                    static_cast<double>(ps[fc[0] * 2 + 1]),
                                    static_cast<double>(ps[fc[1] * 2]),
                                    static_cast<double>(ps[fc[1] * 2 + 1]),
                                    static_cast<double>(ps[fc[2] * 2]),
                                    static_cast<double>(ps[fc[2] * 2 + 1])};
                const double xmin = std::min({tri.ax, tri.bx, tri.cx}) - band;
                const double xmax = std::max({tri.ax, tri.bx, tri.cx}) + band;
                const double ymin = std::min({tri.ay, tri.by, tri.cy}) - band;
                const double ymax = std::max({tri.ay, tri.by, tri.cy}) + band;
                const int j0 =
                    std::max(0, static_cast<int>(std::floor((xmin + 1.0) * W / 2.0 - 0.5)));
                const int j1 = std::min(
                    W - 1, static_cast<int>(std::ceil((xmax + 1.0) * W / 2.0 - 0.5)));
                const int i0 = std::max(
                    row_lo, static_cast<int>(std::floor((1.0 - ymax) * H / 2.0 - 0.5)));
                const int i1 = std::min(
                    row_hi - 1, static_cast<int>(std::ceil((1.0 - ymin) * H / 2.0 - 0.5)));
                const double vx[3] = {tri.ax, tri.bx, tri.cx};
                const double vy[3] = {tri.ay, tri.by, tri.cy};
                for (int i = i0; i <= i1; ++i)
                    for (int j = j0; j <= j1; ++j) {
                        const std::size_t pix = static_cast<std::size_t>(i) * W + j;
                        const double galpha = pg[pix];
                        if (galpha == 0.0) continue;
                        int edge;
                        double tt;
                        const double px = pixel_x(j, W), py = pixel_y(i, H);
                        const double d = signed_tri_distance(tri, px, py, edge, tt);
                        const double z = d / sigma;
                        if (z < -kSoftBandSigmas) continue;
                        const double p =
                            std::min(1.0 / (1.0 + std::exp(-z)), 1.0 - 1e-12);
                        // d alpha / d d_f = exp(L) * p / sigma
                        const double gd = galpha * std::exp(miss[pix]) * p / sigma;
                        if (gd == 0.0) continue;
                        const double sign = d >= 0 ? 1.0 : -1.0;
                        const int e0 = edge, e1 = (edge + 1) % 3;
                        const double ex = vx[e1] - vx[e0], ey = vy[e1] - vy[e0];
                        const double qx = px - (vx[e0] + tt * ex),
                                     qy = py - (vy[e0] + tt * ey);
                        const double dist = std::sqrt(qx * qx + qy * qy);
                        double nx, ny;
                        if (dist >= 1e-12) {
                            nx = qx / dist;
                            ny = qy / dist;
                        } else {
                            // Pixel exactly on the edge: the signed distance is
                            // smooth there, with the interior-oriented edge
                            // normal as its gradient direction. Degenerate
                            // faces have no usable orientation.
                            const double elen = std::sqrt(ex * ex + ey * ey);
                            if (elen < 1e-18 || std::abs(tri.signed_area2()) < 1e-15)
                                continue;
                            if (tri.signed_area2() < 0.0) {
                                nx = ey / elen;
                                ny = -ex / elen;
                            } else {
                                nx = -ey / elen;
                                ny = ex / elen;
                            }
                        }
                        // d dist / d v_e0 = -(1-t) n, d dist / d v_e1 = -t n
                        const double coeff = gd * sign;
                        gacc[fc[e0] * 2] += coeff * -(1.0 - tt) * nx;
                        gacc[fc[e0] * 2 + 1] += coeff * -(1.0 - tt) * ny;
                        gacc[fc[e1] * 2] += coeff * -tt * nx;
                        gacc[fc[e1] * 2 + 1] += coeff * -tt * ny;
                    }
            }
            }, 1);
            for (int chunk = 0; chunk < n_chunks; ++chunk)
                for (std::size_t i = 0; i < n_screen; ++i)
                    gs[i] += static_cast<T>(partial[chunk][i]);
        });
    }
    return out;
}

// ------------------------------------------------------- hard silhouette

img::Image projected_silhouette(const TriMesh& mesh, const WeakPerspectiveCamera& camera,
                                int resolution) {
    auto frag = rasterize(mesh, camera, resolution);
    img::Image mask = img::Image::zeros(1, frag.height, frag.width);
    for (std::int64_t pix : frag.covered) mask.data[pix] = 1.0f;
    return mask;
}

// ---------------------------------------------------------------- baking

TextureAtlas inverse_render(const img::Image& image, const img::Image& mask,
                            const TriMesh& mesh, const WeakPerspectiveCamera& camera,
                            int tex_h, int tex_w, const InverseRenderOptions& options) {
    MESHTEX_CHECK(image.channels == 3, ShapeError, "inverse_render expects an rgb image");
    MESHTEX_CHECK(mask.height == image.height && mask.width == image.width, ShapeError,
                  "mask/image size mismatch");
    MESHTEX_CHECK(image.height == image.width, ShapeError,
                  "inverse_render expects square images, got ", image.width, "x",
                  image.height);
    const int H = image.height, W = image.width;
    std::size_t mask_on = 0;
    for (std::size_t i = 0; i < mask.pixel_count(); ++i)
        if (mask.data[i] >= 0.5f) ++mask_on;
    MESHTEX_CHECK(mask_on * 100 >= mask.pixel_count(), NumericalError,
                  "degenerate view: mask covers ", mask_on, " of ", mask.pixel_count(),
                  " pixels (< 1%)");

    std::vector<Vec2> screen;
    std::vector<double> depth;
    geo::project_points(camera, mesh.vertices, screen, depth);
    auto frag = rasterize_projected(screen, depth, mesh, std::max(H, 8));
    const double depth_eps = options.depth_eps_rel * geo::bbox_diagonal(mesh);

    TextureAtlas atlas;
    atlas.texture = img::Image::zeros(3, tex_h, tex_w);
    atlas.visibility = img::Image::zeros(1, tex_h, tex_w);

    // Texel ownership: best (nearest-depth) face whose UV triangle contains
    // the texel center; ties resolved by face order.
    const int nf = static_cast<int>(mesh.faces.size());
    std::vector<std::int32_t> owner(static_cast<std::size_t>(tex_h) * tex_w, -1);
    std::vector<double> owner_depth(owner.size(),
                                    std::numeric_limits<double>::infinity());
    std::vector<double> owner_bary(owner.size() * 3, 0.0);
    for (int f = 0; f < nf; ++f) {
        const auto& tf = mesh.uv_faces[f];
        const auto& fc = mesh.faces[f];
        const ScreenTri uvtri{mesh.uv[tf[0]][0], mesh.uv[tf[0]][1], mesh.uv[tf[1]][0],
                              mesh.uv[tf[1]][1], mesh.uv[tf[2]][0], mesh.uv[tf[2]][1]};
        if (uvtri.signed_area2() == 0.0) continue;
        const double umin = std::min({uvtri.ax, uvtri.bx, uvtri.cx});
        const double umax = std::max({uvtri.ax, uvtri.bx, uvtri.cx});
        const double vmin = std::min({uvtri.ay, uvtri.by, uvtri.cy});
        const double vmax = std::max({uvtri.ay, uvtri.by, uvtri.cy});
        // align-corners texel grid: texel (tx,ty) sits at uv (tx/(Wt-1), ty/(Ht-1))
        int tx0 = std::max(0, static_cast<int>(std::floor(umin * (tex_w - 1))));
        int tx1 = std::min(tex_w - 1, static_cast<int>(std::ceil(umax * (tex_w - 1))));
        int ty0 = std::max(0, static_cast<int>(std::floor(vmin * (tex_h - 1))));
        int ty1 = std::min(tex_h - 1, static_cast<int>(std::ceil(vmax * (tex_h - 1))));
        for (int ty = ty0; ty <= ty1; ++ty)
            for (int tx = tx0; tx <= tx1; ++tx) {
                const double u = static_cast<double>(tx) / (tex_w - 1);
                const double v = static_cast<double>(ty) / (tex_h - 1);
                double wa, wb, wc;
                barycentric(uvtri, u, v, wa, wb, wc);
                const double tol = -1e-9;
                if (wa < tol || wb < tol || wc < tol) continue;
                const double d = wa * depth[fc[0]] + wb * depth[fc[1]] +
                                 wc * depth[fc[2]];
                const std::size_t ti = static_cast<std::size_t>(ty) * tex_w + tx;
                if (d < owner_depth[ti] ||
                    (d == owner_depth[ti] && (owner[ti] < 0 || f < owner[ti]))) {
                    owner[ti] = f;
                    owner_depth[ti] = d;
                    owner_bary[ti * 3] = wa;
                    owner_bary[ti * 3 + 1] = wb;
                    owner_bary[ti * 3 + 2] = wc;
                }
            }
    }

    // Pole rows and sliver gaps sit outside every UV triangle; adopt the
    // nearest owned texel's face and clamp the barycentrics onto it. Two
    // passes so freshly filled texels can seed their neighbors.
    for (int pass = 0; pass < 2; ++pass) {
        std::vector<std::int32_t> filled = owner;
        std::vector<double> filled_bary = owner_bary;
        for (int ty = 0; ty < tex_h; ++ty)
            for (int tx = 0; tx < tex_w; ++tx) {
                const std::size_t ti = static_cast<std::size_t>(ty) * tex_w + tx;
                if (owner[ti] >= 0) continue;
                for (int r = 1; r <= 4 && filled[ti] < 0; ++r)
                    for (int k = 0; k < 4 && filled[ti] < 0; ++k) {
                        const int ny = ty + (k == 0 ? -r : k == 1 ? r : 0);
                        int nx = tx + (k == 2 ? -r : k == 3 ? r : 0);
                        if (ny < 0 || ny >= tex_h) continue;
                        nx = (nx % tex_w + tex_w) % tex_w;  // u wraps at the seam
                        const std::size_t ni = static_cast<std::size_t>(ny) * tex_w + nx;
                        if (owner[ni] < 0) continue;
                        const int f = owner[ni];
                        const auto& tf = mesh.uv_faces[f];
                        const ScreenTri uvtri{mesh.uv[tf[0]][0], mesh.uv[tf[0]][1],
                                              mesh.uv[tf[1]][0], mesh.uv[tf[1]][1],
                                              mesh.uv[tf[2]][0], mesh.uv[tf[2]][1]};
                        double wa, wb, wc;
                        barycentric(uvtri, static_cast<double>(tx) / (tex_w - 1),
                                    static_cast<double>(ty) / (tex_h - 1), wa, wb, wc);
                        wa = std::max(wa, 0.0);
                        wb = std::max(wb, 0.0);
                        wc = std::max(wc, 0.0);
                        const double total = wa + wb + wc;
                        if (total <= 0.0) continue;
                        filled[ti] = f;
                        filled_bary[ti * 3] = wa / total;
                        filled_bary[ti * 3 + 1] = wb / total;
                        filled_bary[ti * 3 + 2] = wc / total;
                    }
            }
        owner = std::move(filled);
        owner_bary = std::move(filled_bary);
    }

    for (int ty = 0; ty < tex_h; ++ty)
        for (int tx = 0; tx < tex_w; ++tx) {
            const std::size_t ti = static_cast<std::size_t>(ty) * tex_w + tx;
            const int f = owner[ti];
            if (f < 0) continue;
            const auto& fc = mesh.faces[f];
            // Facing: outward normal must point at the camera with margin.
            const double wa = owner_bary[ti * 3], wb = owner_bary[ti * 3 + 1],
                         wc = owner_bary[ti * 3 + 2];
            const auto& A = screen[fc[0]];
            const auto& B = screen[fc[1]];
            const auto& C = screen[fc[2]];
            const ScreenTri tri{A[0], A[1], B[0], B[1], C[0], C[1]};
            const double area2 = tri.signed_area2();
            if (area2 >= 0.0) continue;  // back-facing
            // cos of the viewing angle from the 3D normal (camera looks +z).
            const geo::Vec3 a3 = geo::rotate(camera.q, mesh.vertices[fc[0]]);
            const geo::Vec3 b3 = geo::rotate(camera.q, mesh.vertices[fc[1]]);
            const geo::Vec3 c3 = geo::rotate(camera.q, mesh.vertices[fc[2]]);
            const double ux = b3[0] - a3[0], uy = b3[1] - a3[1], uz = b3[2] - a3[2];
            const double vx = c3[0] - a3[0], vy = c3[1] - a3[1], vz = c3[2] - a3[2];
            const double nx = uy * vz - uz * vy, ny = uz * vx - ux * vz,
                         nz = ux * vy - uy * vx;
            const double nlen = std::sqrt(nx * nx + ny * ny + nz * nz);
            if (nlen <= 0.0 || -nz / nlen < options.min_facing_cos) continue;

            const double sx = wa * A[0] + wb * B[0] + wc * C[0];
            const double sy = wa * A[1] + wb * B[1] + wc * C[1];
            // continuous pixel coordinates of the screen point
            const double fpx = (sx + 1.0) * W / 2.0 - 0.5;
            const double fpy = (1.0 - sy) * H / 2.0 - 0.5;
            if (fpx < 0.0 || fpx > W - 1 || fpy < 0.0 || fpy > H - 1) continue;
            // Candidate pixels: rounded center first, then the rest of the
            // 2x2 bilinear cell (grazing texels can round onto an uncovered
            // pixel while a neighbor still sees the surface).
            const int cx0 = std::min(static_cast<int>(fpx), W - 2 >= 0 ? W - 2 : 0);
            const int cy0 = std::min(static_cast<int>(fpy), H - 2 >= 0 ? H - 2 : 0);
            const int candidates[5][2] = {
                {static_cast<int>(std::lround(fpy)), static_cast<int>(std::lround(fpx))},
                {cy0, cx0},
                {cy0, std::min(cx0 + 1, W - 1)},
                {std::min(cy0 + 1, H - 1), cx0},
                {std::min(cy0 + 1, H - 1), std::min(cx0 + 1, W - 1)}};
            int rpx = -1, rpy = -1;
            for (const auto& cand : candidates) {
                const int py_c = cand[0], px_c = cand[1];
                const std::int64_t pix =
                    static_cast<std::int64_t>(py_c) * frag.width + px_c;
                if (!frag.has(pix)) continue;
                // Occlusion: the texel's own face winning the z-buffer settles
                // it; otherwise compare this face's depth plane at the pixel
                // center against the z-buffer entry, at one location.
                if (frag.face_id[pix] != f) {
                    double pa, pb, pc;
                    barycentric(tri, pixel_x(px_c, W), pixel_y(py_c, H), pa, pb, pc);
                    const double d_center =
                        pa * depth[fc[0]] + pb * depth[fc[1]] + pc * depth[fc[2]];
                    if (d_center > frag.depth[pix] + depth_eps) continue;
                }
                if (mask.at(0, py_c, px_c) < 0.5f) continue;
                rpy = py_c;
                rpx = px_c;
                break;
            }
            if (rpx < 0) continue;

            // Mask-aware bilinear image sample at (fpx, fpy): weights are
            // renormalized over in-mask pixels so background never bleeds in.
            const int x0 = std::min(static_cast<int>(fpx), W - 2 >= 0 ? W - 2 : 0);
            const int y0 = std::min(static_cast<int>(fpy), H - 2 >= 0 ? H - 2 : 0);
            const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
            const double fx = fpx - x0, fy = fpy - y0;
            const int cxs[4] = {x0, x1, x0, x1};
            const int cys[4] = {y0, y0, y1, y1};
            const double ws[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx),
                                  fy * fx};
            double wsum = 0.0;
            double rgb[3] = {0, 0, 0};
            for (int k = 0; k < 4; ++k) {
                if (mask.at(0, cys[k], cxs[k]) < 0.5f) continue;
                wsum += ws[k];
                for (int c = 0; c < 3; ++c)
                    rgb[c] += ws[k] * image.at(c, cys[k], cxs[k]);
            }
            if (wsum < 1e-9) continue;
            for (int c = 0; c < 3; ++c)
                atlas.texture.at(c, ty, tx) = static_cast<float>(rgb[c] / wsum);
            atlas.visibility.at(0, ty, tx) = 1.0f;
        }

    if (options.visibility_erosion > 0) {
        atlas.visibility =
            img::erode(atlas.visibility, options.visibility_erosion, /*uv_topology=*/true);
    }
    for (int ty = 0; ty < tex_h; ++ty)
        for (int tx = 0; tx < tex_w; ++tx)
            if (atlas.visibility.at(0, ty, tx) < 0.5f)
                for (int c = 0; c < 3; ++c) atlas.texture.at(c, ty, tx) = 0.0f;
    return atlas;
}

RenderOutput<float> render_view(const TriMesh& mesh, const WeakPerspectiveCamera& camera,
                                const Tensor<float>& texture, int resolution) {
    auto frag = rasterize(mesh, camera, resolution);
    std::vector<Vec2> screen;
    std::vector<double> depth;
    geo::project_points(camera, mesh.vertices, screen, depth);
    std::vector<float> sdata;
    sdata.reserve(screen.size() * 2);
    for (const auto& s : screen) {
        sdata.push_back(static_cast<float>(s[0]));
        sdata.push_back(static_cast<float>(s[1]));
    }
    auto screen_t = Tensor<float>::from(
        {static_cast<std::int64_t>(screen.size()), 2}, std::move(sdata));
    RenderOutput<float> out;
    out.rgb = shade(frag, mesh, screen_t, texture);
    auto alpha = Tensor<float>::zeros({frag.height, frag.width});
    for (std::int64_t pix : frag.covered) alpha.value()[pix] = 1.0f;
    out.alpha = alpha;
    return out;
}

#define MESHTEX_INSTANTIATE_RENDER(T)                                                     \
    template Tensor<T> shade<T>(const FragmentBuffer&, const TriMesh&, const Tensor<T>&, \
                                const Tensor<T>&);                                        \
    template Tensor<T> soft_silhouette<T>(const Tensor<T>&, const TriMesh&, int, double);

MESHTEX_INSTANTIATE_RENDER(float)
MESHTEX_INSTANTIATE_RENDER(double)

}  // namespace meshtex::render
