#include "meshtex/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

namespace meshtex::geo {

using ad::Tensor;
using ad::Tape;

namespace {

constexpr double kPi = std::numbers::pi;

Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0]};
}
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
Vec3 scaled(const Vec3& a, double f) { return {a[0] * f, a[1] * f, a[2] * f}; }

}  // namespace

void validate_mesh(const TriMesh& mesh) {
    const int n = static_cast<int>(mesh.vertices.size());
    const int nuv = static_cast<int>(mesh.uv.size());
    MESHTEX_CHECK(mesh.uv_faces.size() == mesh.faces.size(), TopologyError,
                  "uv_faces/faces size mismatch");
    MESHTEX_CHECK(nuv >= n, TopologyError, "every vertex needs a canonical UV: ", nuv,
                  " uvs for ", n, " vertices");
    for (const auto& f : mesh.faces) {
        for (int k = 0; k < 3; ++k)
            MESHTEX_CHECK(f[k] >= 0 && f[k] < n, TopologyError, "face index ", f[k],
                          " out of range (", n, " vertices)");
        MESHTEX_CHECK(f[0] != f[1] && f[1] != f[2] && f[0] != f[2], TopologyError,
                      "degenerate face (", f[0], ",", f[1], ",", f[2], ")");
    }
    for (const auto& f : mesh.uv_faces)
        for (int k = 0; k < 3; ++k)
            MESHTEX_CHECK(f[k] >= 0 && f[k] < nuv, TopologyError, "uv index out of range");
    for (const auto& t : mesh.uv) {
        MESHTEX_CHECK(t[0] >= 0.0 && t[0] <= 1.0 && t[1] >= 0.0 && t[1] <= 1.0,
                      TopologyError, "uv (", t[0], ",", t[1], ") outside [0,1]^2");
    }
}

double bbox_diagonal(const TriMesh& mesh) {
    Vec3 lo{1e300, 1e300, 1e300}, hi{-1e300, -1e300, -1e300};
    for (const auto& v : mesh.vertices)
        for (int k = 0; k < 3; ++k) {
            lo[k] = std::min(lo[k], v[k]);
            hi[k] = std::max(hi[k], v[k]);
        }
    return norm(sub(hi, lo));
}

// ---------------------------------------------------------------- icosphere

namespace {

struct MidpointCache {
    std::map<std::pair<int, int>, int> cache;
    int midpoint(std::vector<Vec3>& verts, int a, int b) {
        auto key = std::minmax(a, b);
        auto it = cache.find(key);
        if (it != cache.end()) return it->second;
        Vec3 m = {(verts[a][0] + verts[b][0]) / 2, (verts[a][1] + verts[b][1]) / 2,
                  (verts[a][2] + verts[b][2]) / 2};
        const double len = norm(m);
        m = scaled(m, 1.0 / len);
        verts.push_back(m);
        const int idx = static_cast<int>(verts.size()) - 1;
        cache.emplace(key, idx);
        return idx;
    }
};

bool is_pole(const Vec3& v) { return v[0] == 0.0 && v[1] == 0.0; }

}  // namespace

TriMesh icosphere(int subdivisions) {
    MESHTEX_CHECK(subdivisions >= 0 && subdivisions <= 6, ShapeError,
                  "icosphere subdivisions must be in [0,6], got ", subdivisions);
    const double t = (1.0 + std::sqrt(5.0)) / 2.0;
    std::vector<Vec3> verts = {
        {-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0},
        {0, -1, t}, {0, 1, t}, {0, -1, -t}, {0, 1, -t},
        {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1},
    };
    for (auto& v : verts) v = scaled(v, 1.0 / norm(v));
    std::vector<std::array<int, 3>> faces = {
        {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
        {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
        {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
        {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1},
    };

    for (int level = 0; level < subdivisions; ++level) {
        MidpointCache mc;
        std::vector<std::array<int, 3>> next;
        next.reserve(faces.size() * 4);
        for (const auto& f : faces) {
            const int ab = mc.midpoint(verts, f[0], f[1]);
            const int bc = mc.midpoint(verts, f[1], f[2]);
            const int ca = mc.midpoint(verts, f[2], f[0]);
            next.push_back({f[0], ab, ca});
            next.push_back({f[1], bc, ab});
            next.push_back({f[2], ca, bc});
            next.push_back({ab, bc, ca});
        }
        faces = std::move(next);
    }

    TriMesh mesh;
    mesh.vertices = std::move(verts);
    mesh.faces = std::move(faces);

    // Canonical per-vertex equirectangular UVs. atan2(+0, x<0) = pi puts the
    // seam column at u = 1; poles get u = 0.5 (resolved per face below).
    const int n = static_cast<int>(mesh.vertices.size());
    mesh.uv.resize(n);
    for (int i = 0; i < n; ++i) {
        const Vec3& v = mesh.vertices[i];
        double u = is_pole(v) ? 0.5 : std::atan2(v[1], v[0]) / (2.0 * kPi) + 0.5;
        double vv = std::acos(std::clamp(v[2], -1.0, 1.0)) / kPi;
        mesh.uv[i] = {u, vv};
    }

    // Per-face uv indices; duplicate the seam column (u=1 vertices re-emitted
    // at u=0 for east-side faces) and give pole corners the mean azimuth of
    // their face so interpolation stays continuous.
    mesh.uv_faces.resize(mesh.faces.size());
    std::map<std::pair<int, long long>, int> dedup;
    auto uv_index = [&](int vertex, double u, double v) {
        const Vec2 canon = mesh.uv[vertex];
        if (u == canon[0] && v == canon[1]) return vertex;
        const long long key = static_cast<long long>(std::llround(u * 1e9));
        auto it = dedup.find({vertex, key});
        if (it != dedup.end()) return it->second;
        mesh.uv.push_back({u, v});
        const int idx = static_cast<int>(mesh.uv.size()) - 1;
        dedup.emplace(std::make_pair(vertex, key), idx);
        return idx;
    };

    for (std::size_t fi = 0; fi < mesh.faces.size(); ++fi) {
        const auto& f = mesh.faces[fi];
        std::array<double, 3> u{}, vv{};
        std::array<bool, 3> pole{};
        for (int k = 0; k < 3; ++k) {
            u[k] = mesh.uv[f[k]][0];
            vv[k] = mesh.uv[f[k]][1];
            pole[k] = is_pole(mesh.vertices[f[k]]);
        }
        // Seam: only faces holding a u=1 seam vertex next to low-u corners
        // wrap; remap their seam corners onto the duplicated u=0 column.
        double lo = 2.0, hi = -1.0;
        for (int k = 0; k < 3; ++k)
            if (!pole[k]) {
                lo = std::min(lo, u[k]);
                hi = std::max(hi, u[k]);
            }
        if (hi - lo > 0.5) {
            for (int k = 0; k < 3; ++k)
                if (!pole[k] && u[k] > 0.5) u[k] -= 1.0;
        }
        for (int k = 0; k < 3; ++k)
            if (pole[k]) {
                double acc = 0.0;
                int cnt = 0;
                for (int j = 0; j < 3; ++j)
                    if (!pole[j]) {
                        acc += u[j];
                        ++cnt;
                    }
                u[k] = cnt ? acc / cnt : 0.5;
            }
        for (int k = 0; k < 3; ++k) {
            const double uk = std::clamp(u[k], 0.0, 1.0);
            mesh.uv_faces[fi][k] = uv_index(f[k], uk, vv[k]);
        }
    }
    return mesh;
}

// ---------------------------------------------------------------- OBJ

void save_obj(const std::string& path, const TriMesh& mesh) {
    std::ofstream out(path);
    MESHTEX_CHECK(out.good(), IoError, "cannot write ", path);
    char buf[256];
    for (const auto& v : mesh.vertices) {
        std::snprintf(buf, sizeof buf, "v %.17g %.17g %.17g\n", v[0], v[1], v[2]);
        out << buf;
    }
    for (const auto& t : mesh.uv) {
        std::snprintf(buf, sizeof buf, "vt %.17g %.17g\n", t[0], t[1]);
        out << buf;
    }
    for (std::size_t i = 0; i < mesh.faces.size(); ++i) {
        const auto& f = mesh.faces[i];
        const auto& tf = mesh.uv_faces[i];
        out << "f " << f[0] + 1 << "/" << tf[0] + 1 << " " << f[1] + 1 << "/" << tf[1] + 1
            << " " << f[2] + 1 << "/" << tf[2] + 1 << "\n";
    }
}

TriMesh load_obj(const std::string& path) {
    std::ifstream in(path);
    MESHTEX_CHECK(in.good(), IoError, "cannot read ", path);
    TriMesh mesh;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "v") {
            Vec3 v;
            ls >> v[0] >> v[1] >> v[2];
            mesh.vertices.push_back(v);
        } else if (tag == "vt") {
            Vec2 t;
            ls >> t[0] >> t[1];
            mesh.uv.push_back(t);
        } else if (tag == "f") {
            std::array<int, 3> f{}, tf{};
            for (int k = 0; k < 3; ++k) {
                std::string token;
                ls >> token;
                const auto slash = token.find('/');
                MESHTEX_CHECK(slash != std::string::npos, IoError,
                              "OBJ face without vt index: ", token);
                f[k] = std::stoi(token.substr(0, slash)) - 1;
                tf[k] = std::stoi(token.substr(slash + 1)) - 1;
            }
            mesh.faces.push_back(f);
            mesh.uv_faces.push_back(tf);
        }
    }
    validate_mesh(mesh);
    return mesh;
}

// ---------------------------------------------------------------- cameras

void validate_camera(const WeakPerspectiveCamera& cam) {
    const double n = std::sqrt(cam.q[0] * cam.q[0] + cam.q[1] * cam.q[1] +
                               cam.q[2] * cam.q[2] + cam.q[3] * cam.q[3]);
    MESHTEX_CHECK(std::abs(n - 1.0) <= 1e-6, NumericalError,
                  "camera quaternion norm ", n, " is not 1 +- 1e-6");
    MESHTEX_CHECK(cam.s > 0.0, NumericalError, "camera scale must be positive, got ",
                  cam.s);
}

std::array<double, 9> quat_to_rotmat_values(const std::array<double, 4>& q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)};
}

Vec3 rotate(const std::array<double, 4>& q, const Vec3& v) {
    const auto R = quat_to_rotmat_values(q);
    return {R[0] * v[0] + R[1] * v[1] + R[2] * v[2],
            R[3] * v[0] + R[4] * v[1] + R[5] * v[2],
            R[6] * v[0] + R[7] * v[1] + R[8] * v[2]};
}

std::array<double, 4> normalize_quat_values(const std::array<double, 4>& q) {
    const double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    MESHTEX_CHECK(n > 1e-12, NumericalError, "zero-norm quaternion");
    return {q[0] / n, q[1] / n, q[2] / n, q[3] / n};
}

std::array<double, 4> quat_mul(const std::array<double, 4>& a,
                               const std::array<double, 4>& b) {
    return {a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]};
}

std::array<double, 4> axis_angle_quat(const Vec3& axis, double angle_rad) {
    const double len = norm(axis);
    const double s = std::sin(angle_rad / 2.0) / (len > 0 ? len : 1.0);
    return {std::cos(angle_rad / 2.0), axis[0] * s, axis[1] * s, axis[2] * s};
}

void project_points(const WeakPerspectiveCamera& cam, const std::vector<Vec3>& verts,
                    std::vector<Vec2>& screen, std::vector<double>& depth) {
    const auto qn = normalize_quat_values(cam.q);
    const auto R = quat_to_rotmat_values(qn);
    screen.resize(verts.size());
    depth.resize(verts.size());
    for (std::size_t i = 0; i < verts.size(); ++i) {
        const Vec3& v = verts[i];
        const double cx = R[0] * v[0] + R[1] * v[1] + R[2] * v[2];
        const double cy = R[3] * v[0] + R[4] * v[1] + R[5] * v[2];
        const double cz = R[6] * v[0] + R[7] * v[1] + R[8] * v[2];
        screen[i] = {cam.s * cx + cam.t[0], cam.s * cy + cam.t[1]};
        depth[i] = cz;
    }
}

double quaternion_geodesic_deg(const std::array<double, 4>& q1,
                               const std::array<double, 4>& q2) {
    auto check_unit = [](const std::array<double, 4>& q) {
        const double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
        MESHTEX_CHECK(std::abs(n - 1.0) <= 1e-6, NumericalError,
                      "quaternion_geodesic requires unit quaternions, norm ", n);
    };
    check_unit(q1);
    check_unit(q2);
    const double d = std::abs(q1[0] * q2[0] + q1[1] * q2[1] + q1[2] * q2[2] +
                              q1[3] * q2[3]);
    return 2.0 * std::acos(std::min(1.0, d)) * 180.0 / kPi;
}

WeakPerspectiveCamera compose_camera(const WeakPerspectiveCamera& init,
                                     const CameraOffsetValues& off) {
    validate_camera(init);
    WeakPerspectiveCamera out;
    const bool zero_dq =
        off.dq[0] == 0 && off.dq[1] == 0 && off.dq[2] == 0 && off.dq[3] == 0;
    if (zero_dq) {
        out.q = init.q;  // exact identity round trip
    } else {
        std::array<double, 4> sum{init.q[0] + off.dq[0], init.q[1] + off.dq[1],
                                  init.q[2] + off.dq[2], init.q[3] + off.dq[3]};
        const double n = std::sqrt(sum[0] * sum[0] + sum[1] * sum[1] + sum[2] * sum[2] +
                                   sum[3] * sum[3]);
        MESHTEX_CHECK(n > 1e-12, NumericalError, "zero-norm quaternion sum in compose");
        out.q = {sum[0] / n, sum[1] / n, sum[2] / n, sum[3] / n};
    }
    out.s = off.ds == 0.0 ? init.s : init.s * std::exp(off.ds);
    out.t = {init.t[0] + off.dt[0], init.t[1] + off.dt[1]};
    return out;
}

// ------------------------------------------------------- differentiable ops

template <typename T>
CameraTensors<T> camera_constants(const WeakPerspectiveCamera& cam) {
    CameraTensors<T> out;
    out.q = Tensor<T>::from({4}, {static_cast<T>(cam.q[0]), static_cast<T>(cam.q[1]),
                                  static_cast<T>(cam.q[2]), static_cast<T>(cam.q[3])});
    out.s = Tensor<T>::scalar(static_cast<T>(cam.s));
    out.t = Tensor<T>::from({2}, {static_cast<T>(cam.t[0]), static_cast<T>(cam.t[1])});
    return out;
}

template <typename T>
CameraTensors<T> compose_camera_graph(const WeakPerspectiveCamera& init,
                                      const Tensor<T>& dq, const Tensor<T>& ds,
                                      const Tensor<T>& dt) {
    auto base = camera_constants<T>(init);
    CameraTensors<T> out;
    auto qsum = base.q + dq;
    double norm_sq = 0.0;
    for (T v : qsum.value()) norm_sq += static_cast<double>(v) * static_cast<double>(v);
    MESHTEX_CHECK(norm_sq > 1e-24, NumericalError, "zero-norm quaternion sum in compose");
    out.q = qsum;  // normalized inside project()
    out.s = base.s * ad::exp(ds);
    out.t = base.t + dt;
    return out;
}

template <typename T>
Tensor<T> quat_to_rotmat(const Tensor<T>& q) {
    MESHTEX_CHECK(q.numel() == 4, ShapeError, "quat_to_rotmat expects 4 values, got ",
                  ad::shape_str(q.shape()));
    const T w = q.value()[0], x = q.value()[1], y = q.value()[2], z = q.value()[3];
    Tensor<T> R = Tensor<T>::from(
        {3, 3}, {1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
                 2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
                 2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)});
    if (ad::recording<T>({&q})) {
        R.set_requires_grad(true);
        auto qd = q.ptr();
        auto rd = R.ptr();
        Tape<T>::current()->push({rd}, [qd, rd] {
            qd->ensure_grad();
            const T w = qd->value[0], x = qd->value[1], y = qd->value[2],
                    z = qd->value[3];
            const T* g = rd->grad.data();
            // Rows of dR/dq, entry by entry.
            T dw = -2 * z * g[1] + 2 * y * g[2] + 2 * z * g[3] - 2 * x * g[5] -
                   2 * y * g[6] + 2 * x * g[7];
            T dx = 2 * y * g[1] + 2 * z * g[2] + 2 * y * g[3] - 4 * x * g[4] -
                   2 * w * g[5] + 2 * z * g[6] + 2 * w * g[7] - 4 * x * g[8];
            T dy = -4 * y * g[0] + 2 * x * g[1] + 2 * w * g[2] + 2 * x * g[3] +
                   2 * z * g[5] - 2 * w * g[6] + 2 * z * g[7] - 4 * y * g[8];
            T dz = -4 * z * g[0] - 2 * w * g[1] + 2 * x * g[2] + 2 * w * g[3] -
                   4 * z * g[4] + 2 * y * g[5] + 2 * x * g[6] + 2 * y * g[7];
            qd->grad[0] += dw;
            qd->grad[1] += dx;
            qd->grad[2] += dy;
            qd->grad[3] += dz;
        });
    }
    return R;
}

template <typename T>
Projection<T> project(const CameraTensors<T>& cam, const Tensor<T>& verts) {
    MESHTEX_CHECK(verts.ndim() == 2 && verts.dim(1) == 3, ShapeError,
                  "project expects [N,3] vertices, got ", ad::shape_str(verts.shape()));
    auto qn = cam.q / ad::sqrt(ad::sum(cam.q * cam.q));
    auto R = quat_to_rotmat(qn);
    auto cam_space = ad::matmul(verts, R, false, true);  // rows are R*v
    auto xy = ad::narrow(cam_space, 1, 0, 2);
    Projection<T> out;
    out.screen = xy * cam.s + cam.t;
    out.depth = ad::narrow(cam_space, 1, 2, 1);
    return out;
}

template <typename T>
Tensor<T> template_vertices(const TriMesh& mesh) {
    std::vector<T> data;
    data.reserve(mesh.vertices.size() * 3);
    for (const auto& v : mesh.vertices)
        for (double c : v) data.push_back(static_cast<T>(c));
    return Tensor<T>::from({static_cast<std::int64_t>(mesh.vertices.size()), 3},
                           std::move(data));
}

template <typename T>
Tensor<T> apply_deformation(const Tensor<T>& base_verts, const TriMesh& topology,
                            const Tensor<T>& displacement_map) {
    MESHTEX_CHECK(displacement_map.ndim() == 3 && displacement_map.dim(0) == 3,
                  ShapeError, "displacement map must be [3,Hd,Wd], got ",
                  ad::shape_str(displacement_map.shape()));
    for (T v : displacement_map.value())
        MESHTEX_CHECK(std::isfinite(static_cast<double>(v)), NumericalError,
                      "non-finite displacement value");
    const std::int64_t n = base_verts.dim(0);
    std::vector<T> coords;
    coords.reserve(n * 2);
    for (std::int64_t i = 0; i < n; ++i) {
        coords.push_back(static_cast<T>(topology.uv[i][0]));
        coords.push_back(static_cast<T>(topology.uv[i][1]));
    }
    auto uv = Tensor<T>::from({n, 2}, std::move(coords));
    auto offsets = ad::bilinear_sample(displacement_map, uv);  // [N,3]
    return base_verts + offsets;
}

// ---------------------------------------------------------------- smoothness

EdgeAdjacency EdgeAdjacency::build(const TriMesh& mesh) {
    std::map<std::pair<int, int>, std::vector<int>> edges;
    for (std::size_t fi = 0; fi < mesh.faces.size(); ++fi) {
        const auto& f = mesh.faces[fi];
        for (int k = 0; k < 3; ++k) {
            auto key = std::minmax(f[k], f[(k + 1) % 3]);
            edges[key].push_back(static_cast<int>(fi));
        }
    }
    EdgeAdjacency adj;
    adj.edge_faces.reserve(edges.size());
    for (const auto& [key, fs] : edges) {
        MESHTEX_CHECK(fs.size() == 2, TopologyError, "edge (", key.first, ",", key.second,
                      ") shared by ", fs.size(), " faces on a mesh declared closed");
        adj.edge_faces.push_back({fs[0], fs[1]});
    }
    return adj;
}

template <typename T>
Tensor<T> smoothness_loss(const Tensor<T>& verts, const TriMesh& topology,
                          const EdgeAdjacency& adjacency) {
    const std::size_t nf = topology.faces.size();
    const std::size_t ne = adjacency.edge_faces.size();
    MESHTEX_CHECK(ne > 0, TopologyError, "smoothness_loss on a mesh with no edges");

    const T* pv = verts.value().data();
    auto vert = [&](int i) { return Vec3{static_cast<double>(pv[i * 3]),
                                         static_cast<double>(pv[i * 3 + 1]),
                                         static_cast<double>(pv[i * 3 + 2])}; };
    std::vector<Vec3> unit_normals(nf);
    std::vector<double> lengths(nf);
    for (std::size_t f = 0; f < nf; ++f) {
        const auto& fc = topology.faces[f];
        const Vec3 u = sub(vert(fc[1]), vert(fc[0]));
        const Vec3 v = sub(vert(fc[2]), vert(fc[0]));
        Vec3 nrm = cross(u, v);
        const double len = norm(nrm);
        lengths[f] = len;
        unit_normals[f] = len > 1e-30 ? scaled(nrm, 1.0 / len) : Vec3{0, 0, 0};
    }
    double acc = 0.0;
    for (const auto& e : adjacency.edge_faces)
        acc += 1.0 - dot(unit_normals[e[0]], unit_normals[e[1]]);
    acc /= static_cast<double>(ne);

    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
    if (ad::recording<T>({&verts})) {
        out.set_requires_grad(true);
        auto vd = verts.ptr();
        auto od = out.ptr();
        // Copies keep the closure self-contained; topology may be a temporary.
        auto faces = topology.faces;
        auto edges = adjacency.edge_faces;
        Tape<T>::current()->push({od}, [vd, od, faces = std::move(faces),
                                        edges = std::move(edges),
                                        unit_normals = std::move(unit_normals),
                                        lengths = std::move(lengths)] {
            vd->ensure_grad();
            const double g = static_cast<double>(od->grad[0]);
            const double coef = -g / static_cast<double>(edges.size());
            std::vector<Vec3> gn(unit_normals.size(), Vec3{0, 0, 0});
            for (const auto& e : edges) {
                const Vec3& ni = unit_normals[e[0]];
                const Vec3& nj = unit_normals[e[1]];
                for (int k = 0; k < 3; ++k) {
                    gn[e[0]][k] += coef * nj[k];
                    gn[e[1]][k] += coef * ni[k];
                }
            }
            const T* pv = vd->value.data();
            T* gv = vd->grad.data();
            for (std::size_t f = 0; f < faces.size(); ++f) {
                if (lengths[f] <= 1e-30) continue;
                const auto& fc = faces[f];
                auto vert = [&](int i) {
                    return Vec3{static_cast<double>(pv[i * 3]),
                                static_cast<double>(pv[i * 3 + 1]),
                                static_cast<double>(pv[i * 3 + 2])};
                };
                const Vec3 u = sub(vert(fc[1]), vert(fc[0]));
                const Vec3 v = sub(vert(fc[2]), vert(fc[0]));
                const Vec3& nh = unit_normals[f];
                // d(unit n)/d(raw n) = (I - n n^T) / |n|
                Vec3 graw;
                const double proj = dot(gn[f], nh);
                for (int k = 0; k < 3; ++k)
                    graw[k] = (gn[f][k] - proj * nh[k]) / lengths[f];
                const Vec3 gu = cross(v, graw);
                const Vec3 gvv = cross(graw, u);
                for (int k = 0; k < 3; ++k) {
                    gv[fc[1] * 3 + k] += static_cast<T>(gu[k]);
                    gv[fc[2] * 3 + k] += static_cast<T>(gvv[k]);
                    gv[fc[0] * 3 + k] -= static_cast<T>(gu[k] + gvv[k]);
                }
            }
        });
    }
    return out;
}

#define MESHTEX_INSTANTIATE_GEO(T)                                                        \
    template CameraTensors<T> camera_constants<T>(const WeakPerspectiveCamera&);          \
    template CameraTensors<T> compose_camera_graph<T>(                                    \
        const WeakPerspectiveCamera&, const Tensor<T>&, const Tensor<T>&,                 \
        const Tensor<T>&);                                                                \
    template Tensor<T> quat_to_rotmat<T>(const Tensor<T>&);                               \
    template Projection<T> project<T>(const CameraTensors<T>&, const Tensor<T>&);         \
    template Tensor<T> template_vertices<T>(const TriMesh&);                              \
    template Tensor<T> apply_deformation<T>(const Tensor<T>&, const TriMesh&,             \
                                            const Tensor<T>&);                            \
    template Tensor<T> smoothness_loss<T>(const Tensor<T>&, const TriMesh&,               \
                                          const EdgeAdjacency&);

MESHTEX_INSTANTIATE_GEO(float)
MESHTEX_INSTANTIATE_GEO(double)

}  // namespace meshtex::geo
