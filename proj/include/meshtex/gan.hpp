#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "meshtex/config.hpp"
#include "meshtex/image.hpp"
#include "meshtex/rng.hpp"
#include "meshtex/synth.hpp"
#include "meshtex/tensor.hpp"

namespace meshtex::gan {

using ad::Tensor;

template <typename T>
struct BatchNorm2d {
    Tensor<T> gamma, beta;
    std::vector<T> running_mean, running_var;

    static BatchNorm2d make(int channels) {
        BatchNorm2d bn;
        bn.gamma = Tensor<T>::full({channels}, T(1), true);
        bn.beta = Tensor<T>::zeros({channels}, true);
        return bn;
    }
    Tensor<T> operator()(const Tensor<T>& x, bool training) {
        return ad::batch_norm(x, gamma, beta, running_mean, running_var, training);
    }
};

struct GanConfig {
    int latent_dim = 64;
    int base_h = 4, base_w = 8;
    int base_channels = 128;    // 512 for the full-size topology
    int upsamples = 4;          // 6 for the full-size topology
    int residual_blocks = 7;
    int heads = 4;
    int qk_channels = 32;
    int p_channels = 32;
    int emb_channels = 8;       // discriminator positional embedding; 0 disables
    std::string attention = "position";  // position | self | none (negative control)
    bool mask_fakes = true;
    double lr = 1e-4, beta1 = 0.9, beta2 = 0.999;
    int batch = 4;
    std::uint64_t seed = 1234;

    int half_h() const { return base_h << upsamples; }
    int out_w() const { return base_w << upsamples; }
    int out_h() const { return 2 * half_h(); }  // reflection doubles the first axis

    static GanConfig desk();
    static GanConfig full_size();
    static GanConfig from(const cfg::Config& config);
};

// Multi-head attention whose map comes from a learnable positional embedding
// alone (or from the features themselves in the self-attention control).
template <typename T>
struct PositionAttention {
    int heads = 4;
    std::string mode = "position";
    Tensor<T> embedding;  // [p_channels, H, W]
    Tensor<T> wq, bq, wk, bk, wv, bv;
    BatchNorm2d<T> bn;

    static PositionAttention make(int feat_channels, int p_channels, int qk_channels,
                                  int heads, int h, int w, const std::string& mode,
                                  Rng& rng);

    // Attention map over flattened positions, [heads, N, N] in position mode
    // ([b*heads, N, N] for self mode); rows sum to 1.
    Tensor<T> attention_map(const Tensor<T>& features) const;
    Tensor<T> forward(const Tensor<T>& features, bool training);

    void collect(const std::string& prefix,
                 std::map<std::string, Tensor<T>>& params) const;
};

class Generator {
  public:
    Generator(const GanConfig& config, std::uint64_t seed);

    // z: [b, latent_dim] -> textures [b, 3, out_h, out_w] in [-1, 1]; the
    // second half of the first spatial axis is an exact mirror of the first.
    Tensor<float> forward(const Tensor<float>& z, bool training);

    std::vector<Tensor<float>> sample_textures(int n, std::uint64_t seed);

    std::map<std::string, Tensor<float>> parameters() const;
    std::map<std::string, Tensor<float>> state() const;  // parameters + bn stats
    void load_state(const std::map<std::string, Tensor<float>>& state);
    const GanConfig& config() const { return config_; }
    const PositionAttention<float>& attention() const { return attention_; }
    PositionAttention<float>& attention() { return attention_; }

  private:
    struct Block {
        Tensor<float> w1, b1, w2, b2;
        BatchNorm2d<float> bn1, bn2;
    };
    Tensor<float> residual(Block& block, const Tensor<float>& x, bool training);

    GanConfig config_;
    Tensor<float> fc_w_, fc_b_;
    std::vector<int> stage_channels_;
    std::vector<int> blocks_per_stage_;
    std::vector<Block> blocks_;
    std::vector<Tensor<float>> up_w_, up_b_;
    std::vector<BatchNorm2d<float>> up_bn_;
    Tensor<float> head_w_, head_b_;
    PositionAttention<float> attention_;
};

class Discriminator {
  public:
    Discriminator(const GanConfig& config, std::uint64_t seed);

    struct Logits {
        Tensor<float> patch16;  // [b, 1, H/16, W/16]
        Tensor<float> patch32;  // [b, 1, H/32, W/32]
    };
    // texture: [b,3,H,W] in [0,1], pre-masked for fakes; visibility [b,1,H,W].
    Logits forward(const Tensor<float>& texture, const Tensor<float>& visibility);

    std::map<std::string, Tensor<float>> parameters() const;
    const GanConfig& config() const { return config_; }
    const Tensor<float>& embedding() const { return embedding_; }

  private:
    GanConfig config_;
    Tensor<float> embedding_;  // [emb_channels, H, W]; may be empty (E = 0)
    struct Branch {
        std::vector<Tensor<float>> w, b;
        Tensor<float> head_w, head_b;
    };
    Branch patch16_, patch32_;
    Tensor<float> branch_forward(Branch& branch, const Tensor<float>& input);
};

struct GanBatch {
    Tensor<float> textures;    // [b,3,H,W] in [0,1], masked
    Tensor<float> visibility;  // [b,1,H,W]
};

GanBatch make_batch(const std::vector<synth::ToyAtlas>& atlases,
                    const std::vector<int>& indices);

struct GanStepRecord {
    double d_loss = 0, g_loss = 0;
    double d_real = 0, d_fake = 0;
};

class GanTrainer {
  public:
    GanTrainer(Generator& g, Discriminator& d, const GanConfig& config);

    GanStepRecord step(const GanBatch& real, Rng& rng);
    void set_checkpoint_reference(const std::string& path) { last_checkpoint_ = path; }

  private:
    Generator& g_;
    Discriminator& d_;
    GanConfig config_;
    ad::Adam<float> opt_g_, opt_d_;
    std::optional<std::string> last_checkpoint_;
};

}  // namespace meshtex::gan
