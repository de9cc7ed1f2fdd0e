#include "meshtex/gan.hpp"

#include <cmath>

namespace meshtex::gan {

using ad::Shape;
using ad::Tape;

GanConfig GanConfig::desk() { return GanConfig{}; }

GanConfig GanConfig::full_size() {
    GanConfig c;
    c.base_channels = 512;
    c.upsamples = 6;
    return c;
}

GanConfig GanConfig::from(const cfg::Config& c) {
    GanConfig g;
    g.latent_dim = static_cast<int>(c.get_int("gan.latent_dim", 64));
    g.base_channels = static_cast<int>(c.get_int("gan.base_channels", 128));
    g.upsamples = static_cast<int>(c.get_int("gan.upsamples", 4));
    g.heads = static_cast<int>(c.get_int("gan.heads", 4));
    g.qk_channels = static_cast<int>(c.get_int("gan.qk_channels", 32));
    g.p_channels = static_cast<int>(c.get_int("gan.p_channels", 32));
    g.emb_channels = static_cast<int>(c.get_int("gan.emb_channels", 8));
    g.attention = c.get_string("gan.attention", "position");
    g.mask_fakes = c.get_bool("gan.mask_fakes", true);
    g.lr = c.get_double("gan.lr", 1e-4);
    g.batch = static_cast<int>(c.get_int("gan.batch", 4));
    g.seed = static_cast<std::uint64_t>(c.get_int("gan.seed", 1234));
    return g;
}

// ---------------------------------------------------------------- attention

template <typename T>
PositionAttention<T> PositionAttention<T>::make(int feat_channels, int p_channels,
                                                int qk_channels, int heads, int h,
                                                int w, const std::string& mode,
                                                Rng& rng) {
    MESHTEX_CHECK(qk_channels % heads == 0 && feat_channels % heads == 0, ShapeError,
                  "attention channels must divide by the head count");
    PositionAttention<T> at;
    at.heads = heads;
    at.mode = mode;
    at.embedding = Tensor<T>::zeros({p_channels, h, w}, true);
    Rng er = rng.fork("P");
    er.fill_normal(at.embedding.value(), 0.0, 0.02);
    const int qk_in = mode == "self" ? feat_channels : p_channels;
    auto conv1x1 = [&](const char* tag, int cin, int cout, Tensor<T>& wout,
                       Tensor<T>& bout, double stddev) {
        wout = Tensor<T>::zeros({cout, cin, 1, 1}, true);
        Rng r = rng.fork(tag);
        r.fill_normal(wout.value(), 0.0, stddev);
        bout = Tensor<T>::zeros({cout}, true);
    };
    conv1x1("wq", qk_in, qk_channels, at.wq, at.bq, std::sqrt(1.0 / qk_in));
    conv1x1("wk", qk_in, qk_channels, at.wk, at.bk, std::sqrt(1.0 / qk_in));
    // value projection starts at zero so the module begins as the identity
    conv1x1("wv", feat_channels, feat_channels, at.wv, at.bv, 0.0);
    at.bn = BatchNorm2d<T>::make(feat_channels);
    return at;
}

template <typename T>
Tensor<T> PositionAttention<T>::attention_map(const Tensor<T>& features) const {
    const bool self_mode = mode == "self";
    Tensor<T> src;
    if (self_mode) {
        src = features;  // [b, C, H, W]
    } else {
        const auto& e = embedding;
        src = ad::reshape(e, {1, e.dim(0), e.dim(1), e.dim(2)});
    }
    const std::int64_t b = src.dim(0);
    const std::int64_t h = src.dim(2), w = src.dim(3);
    const std::int64_t n = h * w;
    auto q = ad::conv2d(src, wq, bq, 1, 0);  // [b, qk, h, w]
    auto k = ad::conv2d(src, wk, bk, 1, 0);
    const std::int64_t dq = q.dim(1) / heads;
    auto qh = ad::reshape(q, {b, heads, dq, n});
    auto kh = ad::reshape(k, {b, heads, dq, n});
    auto scores = ad::matmul(qh, kh, /*trans_a=*/true) *
                  static_cast<T>(1.0 / std::sqrt(static_cast<double>(dq)));
    auto attn = ad::softmax(scores, 3);  // rows over key positions
    if (!self_mode) attn = ad::reshape(attn, {heads, n, n});
    return attn;
}

template <typename T>
Tensor<T> PositionAttention<T>::forward(const Tensor<T>& features, bool training) {
    if (mode == "none") return features;
    const std::int64_t b = features.dim(0), c = features.dim(1);
    const std::int64_t h = features.dim(2), w = features.dim(3);
    if (mode != "self") {
        MESHTEX_CHECK(h == embedding.dim(1) && w == embedding.dim(2), ShapeError,
                      "attention embedding is ", ad::shape_str(embedding.shape()),
                      " but features are ", ad::shape_str(features.shape()));
    }
    const std::int64_t n = h * w;
    auto attn = attention_map(features);
    auto v = ad::conv2d(features, wv, bv, 1, 0);  // [b, C, h, w]
    auto vh = ad::reshape(v, {b, heads, c / heads, n});
    // out[:, p] = sum_m A[p, m] * v[:, m]  ->  V . A^T
    auto mixed = ad::matmul(vh, attn, /*trans_a=*/false, /*trans_b=*/true);
    auto bar = ad::reshape(mixed, {b, c, h, w});
    bar = bn(bar, training);
    return bar + features;
}

template <typename T>
void PositionAttention<T>::collect(const std::string& prefix,
                                   std::map<std::string, Tensor<T>>& params) const {
    params.emplace(prefix + ".P", embedding);
    params.emplace(prefix + ".wq", wq);
    params.emplace(prefix + ".bq", bq);
    params.emplace(prefix + ".wk", wk);
    params.emplace(prefix + ".bk", bk);
    params.emplace(prefix + ".wv", wv);
    params.emplace(prefix + ".bv", bv);
    params.emplace(prefix + ".bn.gamma", bn.gamma);
    params.emplace(prefix + ".bn.beta", bn.beta);
}

template struct PositionAttention<float>;
template struct PositionAttention<double>;

// ---------------------------------------------------------------- generator

namespace {

ad::Tensor<float> make_param(Rng& rng, const std::string& tag, Shape shape,
                             double stddev) {
    auto t = ad::Tensor<float>::zeros(std::move(shape), true);
    if (stddev > 0) {
        Rng r = rng.fork(tag);
        r.fill_normal(t.value(), 0.0, stddev);
    }
    return t;
}

}  // namespace

Generator::Generator(const GanConfig& config, std::uint64_t seed) : config_(config) {
    Rng rng(seed);
    // channel schedule: halve per upsampling stage, floor 8
    stage_channels_.push_back(config.base_channels);
    for (int s = 1; s <= config.upsamples; ++s)
        stage_channels_.push_back(std::max(8, stage_channels_[s - 1] / 2));
    // residual blocks: two in the first stages until the budget is spent
    blocks_per_stage_.assign(stage_channels_.size(), 0);
    int remaining = config.residual_blocks;
    for (std::size_t s = 0; s < blocks_per_stage_.size() && remaining > 0; ++s) {
        const int take = std::min(remaining, 2);
        blocks_per_stage_[s] = take;
        remaining -= take;
    }
    const int c0 = stage_channels_[0];
    fc_w_ = make_param(rng, "fc.w", {config.latent_dim, c0 * config.base_h * config.base_w},
                       std::sqrt(1.0 / config.latent_dim));
    fc_b_ = ad::Tensor<float>::zeros({c0 * config.base_h * config.base_w}, true);

    for (std::size_t s = 0; s < stage_channels_.size(); ++s) {
        const int c = stage_channels_[s];
        for (int bidx = 0; bidx < blocks_per_stage_[s]; ++bidx) {
            Block blk;
            const std::string tag = cat("block", s, "_", bidx);
            blk.w1 = make_param(rng, tag + ".w1", {c, c, 3, 3}, std::sqrt(2.0 / (c * 9)));
            blk.b1 = ad::Tensor<float>::zeros({c}, true);
            blk.w2 = make_param(rng, tag + ".w2", {c, c, 3, 3}, std::sqrt(2.0 / (c * 9)));
            blk.b2 = ad::Tensor<float>::zeros({c}, true);
            blk.bn1 = BatchNorm2d<float>::make(c);
            blk.bn2 = BatchNorm2d<float>::make(c);
            blocks_.push_back(std::move(blk));
        }
        if (s + 1 < stage_channels_.size()) {
            const int cn = stage_channels_[s + 1];
            up_w_.push_back(make_param(rng, cat("up", s, ".w"), {cn, c, 3, 3},
                                       std::sqrt(2.0 / (c * 9))));
            up_b_.push_back(ad::Tensor<float>::zeros({cn}, true));
            up_bn_.push_back(BatchNorm2d<float>::make(cn));
        }
    }
    head_w_ = make_param(rng, "head.w", {3, stage_channels_.back(), 3, 3},
                         std::sqrt(1.0 / (stage_channels_.back() * 9)));
    head_b_ = ad::Tensor<float>::zeros({3}, true);

    Rng ar = rng.fork("attention");
    attention_ = PositionAttention<float>::make(c0, config.p_channels,
                                                config.qk_channels, config.heads,
                                                config.base_h, config.base_w,
                                                config.attention, ar);
}

Tensor<float> Generator::residual(Block& blk, const Tensor<float>& x, bool training) {
    auto h = ad::relu(blk.bn1(ad::conv2d(x, blk.w1, blk.b1, 1, 1), training));
    h = blk.bn2(ad::conv2d(h, blk.w2, blk.b2, 1, 1), training);
    return ad::relu(h + x);
}

Tensor<float> Generator::forward(const Tensor<float>& z, bool training) {
    MESHTEX_CHECK(z.ndim() == 2 && z.dim(1) == config_.latent_dim, ShapeError,
                  "generator expects z of shape [b,", config_.latent_dim, "], got ",
                  ad::shape_str(z.shape()));
    for (float v : z.value())
        MESHTEX_CHECK(std::isfinite(v), NumericalError, "non-finite latent input");
    const std::int64_t b = z.dim(0);
    auto x = ad::matmul(z, fc_w_) + fc_b_;
    x = ad::reshape(x, {b, stage_channels_[0], config_.base_h, config_.base_w});

    std::size_t block_cursor = 0;
    int applied_blocks = 0;
    for (std::size_t s = 0; s < stage_channels_.size(); ++s) {
        for (int bidx = 0; bidx < blocks_per_stage_[s]; ++bidx) {
            x = residual(blocks_[block_cursor++], x, training);
            ++applied_blocks;
            // position-based attention sits in the second layer of the stack
            if (applied_blocks == 2 && config_.attention != "none")
                x = attention_.forward(x, training);
        }
        if (s + 1 < stage_channels_.size()) {
            x = ad::upsample_nearest(x, 2);
            x = ad::relu(up_bn_[s](ad::conv2d(x, up_w_[s], up_b_[s], 1, 1), training));
        }
    }
    auto half = ad::tanh_act(ad::conv2d(x, head_w_, head_b_, 1, 1));
    // reflection symmetry along the first spatial axis
    auto mirrored = ad::flip(half, 2);
    return ad::concat<float>({half, mirrored}, 2);
}

std::vector<Tensor<float>> Generator::sample_textures(int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<float>> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        auto z = Tensor<float>::zeros({1, config_.latent_dim});
        rng.fill_normal(z.value());
        auto tex = forward(z, /*training=*/false);
        auto tex01 = (tex + 1.0f) * 0.5f;
        out.push_back(ad::reshape(tex01, {3, config_.out_h(), config_.out_w()}));
    }
    return out;
}

std::map<std::string, Tensor<float>> Generator::parameters() const {
    std::map<std::string, Tensor<float>> params;
    params.emplace("fc.w", fc_w_);
    params.emplace("fc.b", fc_b_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const auto tag = cat("block", i);
        params.emplace(tag + ".w1", blocks_[i].w1);
        params.emplace(tag + ".b1", blocks_[i].b1);
        params.emplace(tag + ".w2", blocks_[i].w2);
        params.emplace(tag + ".b2", blocks_[i].b2);
        params.emplace(tag + ".bn1.gamma", blocks_[i].bn1.gamma);
        params.emplace(tag + ".bn1.beta", blocks_[i].bn1.beta);
        params.emplace(tag + ".bn2.gamma", blocks_[i].bn2.gamma);
        params.emplace(tag + ".bn2.beta", blocks_[i].bn2.beta);
    }
    for (std::size_t i = 0; i < up_w_.size(); ++i) {
        params.emplace(cat("up", i, ".w"), up_w_[i]);
        params.emplace(cat("up", i, ".b"), up_b_[i]);
        params.emplace(cat("up", i, ".bn.gamma"), up_bn_[i].gamma);
        params.emplace(cat("up", i, ".bn.beta"), up_bn_[i].beta);
    }
    params.emplace("head.w", head_w_);
    params.emplace("head.b", head_b_);
    if (config_.attention != "none") attention_.collect("attn", params);
    return params;
}

namespace {

template <typename T>
ad::Tensor<T> stats_tensor(const std::vector<T>& v) {
    return ad::Tensor<T>::from({static_cast<std::int64_t>(v.size())},
                               std::vector<T>(v));
}

}  // namespace

std::map<std::string, Tensor<float>> Generator::state() const {
    auto params = parameters();
    auto add_bn = [&](const std::string& tag, const BatchNorm2d<float>& bn) {
        if (!bn.running_mean.empty()) {
            params.emplace(tag + ".running_mean", stats_tensor(bn.running_mean));
            params.emplace(tag + ".running_var", stats_tensor(bn.running_var));
        }
    };
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        add_bn(cat("block", i, ".bn1"), blocks_[i].bn1);
        add_bn(cat("block", i, ".bn2"), blocks_[i].bn2);
    }
    for (std::size_t i = 0; i < up_bn_.size(); ++i) add_bn(cat("up", i, ".bn"), up_bn_[i]);
    if (config_.attention != "none") add_bn("attn.bn", attention_.bn);
    return params;
}

void Generator::load_state(const std::map<std::string, Tensor<float>>& state) {
    auto params = parameters();
    for (auto& [name, tensor] : params) {
        auto it = state.find(name);
        MESHTEX_CHECK(it != state.end(), IoError, "generator state missing ", name);
        MESHTEX_CHECK(it->second.shape() == tensor.shape(), IoError,
                      "generator state shape mismatch for ", name);
        std::copy(it->second.value().begin(), it->second.value().end(),
                  tensor.value().begin());
    }
    auto load_bn = [&](const std::string& tag, BatchNorm2d<float>& bn) {
        auto mit = state.find(tag + ".running_mean");
        auto vit = state.find(tag + ".running_var");
        if (mit == state.end() || vit == state.end()) return;
        bn.running_mean.assign(mit->second.value().begin(), mit->second.value().end());
        bn.running_var.assign(vit->second.value().begin(), vit->second.value().end());
    };
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        load_bn(cat("block", i, ".bn1"), blocks_[i].bn1);
        load_bn(cat("block", i, ".bn2"), blocks_[i].bn2);
    }
    for (std::size_t i = 0; i < up_bn_.size(); ++i) load_bn(cat("up", i, ".bn"), up_bn_[i]);
    if (config_.attention != "none") load_bn("attn.bn", attention_.bn);
}

// ------------------------------------------------------------ discriminator

Discriminator::Discriminator(const GanConfig& config, std::uint64_t seed)
    : config_(config) {
    Rng rng(seed);
    const int H = config.out_h(), W = config.out_w();
    if (config.emb_channels > 0) {
        embedding_ = Tensor<float>::zeros({config.emb_channels, H, W}, true);
        Rng er = rng.fork("E");
        er.fill_normal(embedding_.value(), 0.0, 0.02);
    }
    const int cin = 3 + 1 + config.emb_channels;
    auto build_branch = [&](const char* tag, int downsamples) {
        Branch br;
        int c = cin;
        const int widths[5] = {16, 32, 64, 128, 128};
        for (int i = 0; i < downsamples; ++i) {
            const int cn = widths[i];
            br.w.push_back(make_param(rng, cat(tag, ".w", i), {cn, c, 2, 2},
                                      std::sqrt(2.0 / (c * 4))));
            br.b.push_back(Tensor<float>::zeros({cn}, true));
            c = cn;
        }
        br.head_w = make_param(rng, cat(tag, ".head"), {1, c, 1, 1},
                               std::sqrt(1.0 / c));
        br.head_b = Tensor<float>::zeros({1}, true);
        return br;
    };
    patch16_ = build_branch("p16", 4);  // receptive field 16x16, map H/16
    patch32_ = build_branch("p32", 5);  // receptive field 32x32, map H/32
}

Tensor<float> Discriminator::branch_forward(Branch& br, const Tensor<float>& input) {
    auto x = input;
    for (std::size_t i = 0; i < br.w.size(); ++i)
        x = ad::leaky_relu(ad::conv2d(x, br.w[i], br.b[i], 2, 0), 0.2f);
    return ad::conv2d(x, br.head_w, br.head_b, 1, 0);
}

Discriminator::Logits Discriminator::forward(const Tensor<float>& texture,
                                             const Tensor<float>& visibility) {
    MESHTEX_CHECK(texture.ndim() == 4 && visibility.ndim() == 4 &&
                      texture.dim(0) == visibility.dim(0) &&
                      texture.dim(2) == visibility.dim(2) &&
                      texture.dim(3) == visibility.dim(3),
                  ShapeError, "discriminator texture/visibility mismatch: ",
                  ad::shape_str(texture.shape()), " vs ",
                  ad::shape_str(visibility.shape()));
    std::vector<Tensor<float>> parts = {texture, visibility};
    if (embedding_.defined())
        parts.push_back(ad::tile_batch(embedding_, texture.dim(0)));
    auto input = ad::concat<float>(parts, 1);
    Logits out;
    out.patch16 = branch_forward(patch16_, input);
    out.patch32 = branch_forward(patch32_, input);
    return out;
}

std::map<std::string, Tensor<float>> Discriminator::parameters() const {
    std::map<std::string, Tensor<float>> params;
    if (embedding_.defined()) params.emplace("E", embedding_);
    auto add_branch = [&](const char* tag, const Branch& br) {
        for (std::size_t i = 0; i < br.w.size(); ++i) {
            params.emplace(cat(tag, ".w", i), br.w[i]);
            params.emplace(cat(tag, ".b", i), br.b[i]);
        }
        params.emplace(cat(tag, ".head_w"), br.head_w);
        params.emplace(cat(tag, ".head_b"), br.head_b);
    };
    add_branch("p16", patch16_);
    add_branch("p32", patch32_);
    return params;
}

// ---------------------------------------------------------------- training

GanBatch make_batch(const std::vector<synth::ToyAtlas>& atlases,
                    const std::vector<int>& indices) {
    MESHTEX_CHECK(!indices.empty(), ShapeError, "empty batch");
    const int H = atlases[indices[0]].texture.height;
    const int W = atlases[indices[0]].texture.width;
    const std::int64_t b = static_cast<std::int64_t>(indices.size());
    GanBatch batch;
    batch.textures = Tensor<float>::zeros({b, 3, H, W});
    batch.visibility = Tensor<float>::zeros({b, 1, H, W});
    for (std::int64_t i = 0; i < b; ++i) {
        const auto& atlas = atlases[indices[i]];
        std::copy(atlas.texture.data.begin(), atlas.texture.data.end(),
                  batch.textures.value().begin() + i * 3 * H * W);
        std::copy(atlas.visibility.data.begin(), atlas.visibility.data.end(),
                  batch.visibility.value().begin() + i * H * W);
    }
    return batch;
}

GanTrainer::GanTrainer(Generator& g, Discriminator& d, const GanConfig& config)
    : g_(g), d_(d), config_(config),
      opt_g_(static_cast<float>(config.lr), static_cast<float>(config.beta1),
             static_cast<float>(config.beta2)),
      opt_d_(static_cast<float>(config.lr), static_cast<float>(config.beta1),
             static_cast<float>(config.beta2)) {
    for (auto& [name, p] : g_.parameters()) opt_g_.add(p);
    for (auto& [name, p] : d_.parameters()) opt_d_.add(p);
}

namespace {

Tensor<float> hinge_real(const Tensor<float>& logits) {
    return ad::mean(ad::relu(Tensor<float>::scalar(1.0f) - logits));
}
Tensor<float> hinge_fake(const Tensor<float>& logits) {
    return ad::mean(ad::relu(logits + 1.0f));
}

}  // namespace

GanStepRecord GanTrainer::step(const GanBatch& real, Rng& rng) {
    GanStepRecord rec;
    const std::int64_t b = real.textures.dim(0);

    // fakes for the discriminator pass (no G gradients wanted: detach)
    auto z = Tensor<float>::zeros({b, config_.latent_dim});
    rng.fill_normal(z.value());
    Tensor<float> fake_masked_detached;
    {
        auto fake = g_.forward(z, /*training=*/true);  // no tape: plain forward
        auto fake01 = (fake + 1.0f) * 0.5f;
        auto masked = config_.mask_fakes ? fake01 * real.visibility : fake01;
        fake_masked_detached = masked.detach();
    }

    // D step
    opt_d_.zero_grad();
    {
        Tape<float> tape;
        Tape<float>::Scope scope(tape);
        auto logits_real = d_.forward(real.textures, real.visibility);
        auto logits_fake = d_.forward(fake_masked_detached, real.visibility);
        auto d_loss = (hinge_real(logits_real.patch16) + hinge_real(logits_real.patch32) +
                       hinge_fake(logits_fake.patch16) +
                       hinge_fake(logits_fake.patch32)) *
                      0.5f;
        rec.d_loss = d_loss.item();
        rec.d_real = 0.5 * (ad::mean(logits_real.patch16).item() +
                            ad::mean(logits_real.patch32).item());
        rec.d_fake = 0.5 * (ad::mean(logits_fake.patch16).item() +
                            ad::mean(logits_fake.patch32).item());
        tape.backward(d_loss);
    }
    opt_d_.step();

    // G step
    opt_g_.zero_grad();
    opt_d_.zero_grad();  // discard D gradients produced by the G objective
    {
        Tape<float> tape;
        Tape<float>::Scope scope(tape);
        auto z2 = Tensor<float>::zeros({b, config_.latent_dim});
        rng.fill_normal(z2.value());
        auto fake = g_.forward(z2, /*training=*/true);
        auto fake01 = (fake + 1.0f) * 0.5f;
        auto masked = config_.mask_fakes ? fake01 * real.visibility : fake01;
        auto logits = d_.forward(masked, real.visibility);
        auto g_loss = (ad::mean(ad::neg(logits.patch16)) +
                       ad::mean(ad::neg(logits.patch32))) *
                      0.5f;
        rec.g_loss = g_loss.item();
        tape.backward(g_loss);
    }
    opt_g_.step();

    MESHTEX_CHECK(std::isfinite(rec.d_loss) && std::isfinite(rec.g_loss),
                  DivergenceError, "non-finite adversarial loss; last good checkpoint: ",
                  last_checkpoint_.value_or("<none>"));
    return rec;
}

}  // namespace meshtex::gan
