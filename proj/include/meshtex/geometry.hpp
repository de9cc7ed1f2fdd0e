#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "meshtex/tensor.hpp"

namespace meshtex::geo {

using Vec3 = std::array<double, 3>;
using Vec2 = std::array<double, 2>;

// Triangle mesh deformed from a sphere template. Faces index into `vertices`;
// texture coordinates are stored OBJ-style with their own index triple per
// face so the equirectangular seam column can be duplicated without breaking
// the closed topology. uv[i] for i < vertex count is the canonical coordinate
// of vertex i (used when sampling per-vertex fields such as displacement maps).
struct TriMesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<int, 3>> faces;      // CCW when seen from outside
    std::vector<Vec2> uv;                       // size >= vertices.size()
    std::vector<std::array<int, 3>> uv_faces;   // parallel to faces

    std::size_t vertex_count() const { return vertices.size(); }
    std::size_t face_count() const { return faces.size(); }
};

void validate_mesh(const TriMesh& mesh);
double bbox_diagonal(const TriMesh& mesh);

// Unit icosphere with equirectangular UVs (u from azimuth, v from inclination)
// and a duplicated seam column so every face has continuous UVs.
TriMesh icosphere(int subdivisions);

void save_obj(const std::string& path, const TriMesh& mesh);
TriMesh load_obj(const std::string& path);

struct WeakPerspectiveCamera {
    std::array<double, 4> q{1, 0, 0, 0};  // (w, x, y, z), unit
    double s = 1.0;
    std::array<double, 2> t{0, 0};
};

void validate_camera(const WeakPerspectiveCamera& cam);

// Plain-value camera math (no autodiff), used by rasterization and tooling.
std::array<double, 9> quat_to_rotmat_values(const std::array<double, 4>& q);
Vec3 rotate(const std::array<double, 4>& q, const Vec3& v);
std::array<double, 4> normalize_quat_values(const std::array<double, 4>& q);
std::array<double, 4> quat_mul(const std::array<double, 4>& a,
                               const std::array<double, 4>& b);
std::array<double, 4> axis_angle_quat(const Vec3& axis, double angle_rad);
void project_points(const WeakPerspectiveCamera& cam, const std::vector<Vec3>& verts,
                    std::vector<Vec2>& screen, std::vector<double>& depth);

// Minimal rotation angle between two unit quaternions, in degrees (sign
// invariant: q and -q describe the same orientation).
double quaternion_geodesic_deg(const std::array<double, 4>& q1,
                               const std::array<double, 4>& q2);

struct CameraOffsetValues {
    std::array<double, 4> dq{0, 0, 0, 0};
    double ds = 0.0;
    std::array<double, 2> dt{0, 0};
};

// q' = normalize(q + dq), s' = s * exp(ds), t' = t + dt; exact identity for a
// zero offset.
WeakPerspectiveCamera compose_camera(const WeakPerspectiveCamera& init,
                                     const CameraOffsetValues& offset);

// --- differentiable camera/mesh graph pieces ---

template <typename T>
struct CameraTensors {
    ad::Tensor<T> q;  // [4], normalized by project()
    ad::Tensor<T> s;  // scalar
    ad::Tensor<T> t;  // [2]
};

template <typename T>
CameraTensors<T> camera_constants(const WeakPerspectiveCamera& cam);

// Differentiable composition given learnable offset tensors.
template <typename T>
CameraTensors<T> compose_camera_graph(const WeakPerspectiveCamera& init,
                                      const ad::Tensor<T>& dq, const ad::Tensor<T>& ds,
                                      const ad::Tensor<T>& dt);

// Rotation matrix from a unit quaternion, differentiable wrt q. [4] -> [3,3].
template <typename T>
ad::Tensor<T> quat_to_rotmat(const ad::Tensor<T>& q);

template <typename T>
struct Projection {
    ad::Tensor<T> screen;  // [N,2]
    ad::Tensor<T> depth;   // [N,1]
};

// screen = s * (R(q) v)_xy + t, depth = (R(q) v)_z.
template <typename T>
Projection<T> project(const CameraTensors<T>& cam, const ad::Tensor<T>& verts);

// Vertices of `base` displaced by bilinear samples of a [3,Hd,Wd] map taken at
// each vertex's canonical UV. Differentiable wrt the map (and base verts).
template <typename T>
ad::Tensor<T> apply_deformation(const ad::Tensor<T>& base_verts, const TriMesh& topology,
                                const ad::Tensor<T>& displacement_map);

template <typename T>
ad::Tensor<T> template_vertices(const TriMesh& mesh);

// Interior-edge adjacency for the smoothness regularizer; throws
// TopologyError if any edge is not shared by exactly two faces.
struct EdgeAdjacency {
    std::vector<std::array<int, 2>> edge_faces;
    static EdgeAdjacency build(const TriMesh& mesh);
};

// Mean over interior edges of (1 - cos angle(face normals)).
template <typename T>
ad::Tensor<T> smoothness_loss(const ad::Tensor<T>& verts, const TriMesh& topology,
                              const EdgeAdjacency& adjacency);

}  // namespace meshtex::geo
