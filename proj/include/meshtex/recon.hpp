#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "meshtex/config.hpp"
#include "meshtex/geometry.hpp"
#include "meshtex/image.hpp"
#include "meshtex/losses.hpp"
#include "meshtex/render.hpp"
#include "meshtex/tensor.hpp"

namespace meshtex::recon {

using ad::AdamState;
using ad::Tensor;

struct ReconConfig {
    int image_res = 64;
    int disp_h = 32, disp_w = 32;
    int tex_h = 64, tex_w = 128;
    int subdivisions = 2;
    double disp_bound = 0.35;     // |displacement| cap via tanh scaling
    double sigma_rel = 0.02;      // soft-silhouette sigma as a fraction of NDC width
    double lr = 1e-4;
    double beta1 = 0.9, beta2 = 0.999;
    std::uint64_t seed = 7;
    loss::LossWeights weights;
    std::uint64_t extractor_seed = 101;
    std::vector<int> percp_taps = {1, 2, 3};  // 0 taps the raw input

    double sigma() const { return sigma_rel * 2.0; }  // NDC image width is 2
    static ReconConfig from(const cfg::Config& config);
};

// Shared conv encoder with displacement/texture decoders and a separate
// camera-regressor head.
class ReconModel {
  public:
    ReconModel(const ReconConfig& config, std::uint64_t seed);

    struct Maps {
        Tensor<float> displacement;  // [3, disp_h, disp_w]
        Tensor<float> texture;       // [3, tex_h, tex_w]
    };
    // image: [3, res, res], masked to the object.
    Maps encode_decode(const Tensor<float>& image) const;

    // Camera regressor: returns (q,s,t) tensors in the active tape.
    geo::CameraTensors<float> predict_camera(const Tensor<float>& image) const;

    std::map<std::string, Tensor<float>> parameters() const { return params_; }
    const ReconConfig& config() const { return config_; }
    const geo::TriMesh& template_mesh() const { return template_; }
    Tensor<float> template_verts() const { return template_verts_; }

    void save(const std::string& path_prefix) const;
    void load(const std::string& path_prefix);

  private:
    Tensor<float> param(const std::string& name, ad::Shape shape, double stddev);
    Tensor<float> conv_block(const Tensor<float>& x, const std::string& name,
                             int stride) const;

    ReconConfig config_;
    geo::TriMesh template_;
    Tensor<float> template_verts_;
    std::map<std::string, Tensor<float>> params_;
    mutable Rng init_rng_;
};

struct Frame {
    std::string image_path, mask_path;
    img::Image image;             // raw rgb
    img::Image mask;              // stored mask (external, possibly imperfect)
    Tensor<float> image_masked;   // [3,res,res] image * mask
    Tensor<float> mask_tensor;    // [res,res]
    geo::WeakPerspectiveCamera camera_init;
    std::optional<geo::WeakPerspectiveCamera> camera_gt;
    bool pruned = false;

    // learnable offset (dq, ds, dt) with its own optimizer state
    Tensor<float> dq, ds, dt;
    AdamState<float> adam_dq, adam_ds, adam_dt;

    geo::WeakPerspectiveCamera optimized_camera() const;
};

struct SequenceDataset {
    std::string root;
    std::string manifest_path;
    std::vector<Frame> frames;

    static SequenceDataset load(const std::string& manifest_path);
    // Writes pruned flags and optimized cameras back into the manifest.
    void save_back() const;
    std::vector<int> unpruned() const;
};

struct LossRecord {
    double perceptual = 0, silhouette = 0, camera = 0, smoothness = 0, total = 0;
};

class Trainer {
  public:
    Trainer(ReconModel& model, const ReconConfig& config);

    // Two-view step: encode frame_in, render from frame_target's composed
    // camera, update the model and frame_target's offsets jointly.
    LossRecord train_step_two_view(Frame& frame_in, Frame& frame_target);

    // Single-view step with the camera-regressor loss against the frame's
    // ground-truth camera.
    LossRecord train_step_single_view(Frame& frame);

    ad::Adam<float>& optimizer() { return opt_; }
    const loss::FeatureExtractor<float>& extractor() const { return extractor_; }
    const geo::EdgeAdjacency& edge_adjacency();

  private:
    ReconModel& model_;
    ReconConfig config_;
    ad::Adam<float> opt_;
    loss::FeatureExtractor<float> extractor_;
    std::optional<geo::EdgeAdjacency> adjacency_;
};

// Flags frames whose optimized camera is farther than threshold_deg from both
// ordered neighbors. threshold_deg <= 0 selects the adaptive rule (4x the
// median consecutive step).
SequenceDataset prune_sequence(const SequenceDataset& sequence, double threshold_deg);
double adaptive_prune_threshold(const std::vector<geo::WeakPerspectiveCamera>& cams);

struct BakeResult {
    int frame_index;
    render::TextureAtlas atlas;
};

// Pseudo ground-truth baking: per unpruned frame the image is masked by the
// mesh-projected silhouette (or, as the degradation ablation, by the stored
// external mask) and gathered into UV space with the optimized camera.
std::vector<BakeResult> bake_pseudo_textures(const ReconModel& model,
                                             const SequenceDataset& sequence,
                                             bool use_external_masks = false);

// Per-frame camera-offset refinement against a fixed mesh and texture.
struct RefineOptions {
    int steps = 400;
    double lr = 0.01;
    double sigma = 0.025;  // NDC units
    int resolution = 64;
    double silhouette_weight = 1.0;
    double photometric_weight = 4.0;
};
void refine_camera_offsets(SequenceDataset& sequence, const geo::TriMesh& mesh,
                           const Tensor<float>& texture, const RefineOptions& options);

struct TrainLogger {
    explicit TrainLogger(const std::string& csv_path);
    void log(int step, const LossRecord& record);
    std::string path;
};

}  // namespace meshtex::recon
