#pragma once

#include "madan/autodiff.hpp"
#include "madan/rng.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace madan::nn {

// Named trainable tensor handle; modules expose their parameters through
// collect() so optimizers and checkpoints address them by stable names.
template <typename T>
struct Param {
    std::string name;
    ad::Var<T> var;
};

template <typename T>
using ParamList = std::vector<Param<T>>;

template <typename T>
void set_requires_grad(ParamList<T>& params, bool on);

// ------------------------------------------------------------------ layers

template <typename T>
struct Conv2d {
    ad::Var<T> w, b;  // w: [Cout, Cin, k, k], b: [Cout]
    int stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(int cin, int cout, int k, int stride, int pad);

    // detach_params: run with parameters cut out of the graph (stop-gradient
    // through weights while gradients still flow to the input).
    ad::Var<T> forward(const ad::Var<T>& x, bool detach_params = false) const;
    void init_gaussian(rng::SplitMix64& g, T stddev);
    void init_he(rng::SplitMix64& g);
    void collect(const std::string& prefix, ParamList<T>& out);
};

template <typename T>
struct InstanceNorm {
    ad::Var<T> gamma, beta;  // [C]

    InstanceNorm() = default;
    explicit InstanceNorm(int c);
    ad::Var<T> forward(const ad::Var<T>& x, bool detach_params = false) const;
    void collect(const std::string& prefix, ParamList<T>& out);
};

// ----------------------------------------------------------------- networks

// Residual image-to-image generator: 7x7 stem, two stride-2 downsamplers,
// R residual blocks, two nearest-upsample+conv upsamplers, 7x7 tanh head.
// Input/output: B x 3 x H x W in [-1, 1], H and W divisible by 4.
template <typename T>
struct Generator {
    int base = 32, res_blocks = 4;
    Conv2d<T> stem, down1, down2, up1, up2, head;
    InstanceNorm<T> in_stem, in_down1, in_down2, in_up1, in_up2;
    struct ResBlock {
        Conv2d<T> c1, c2;
        InstanceNorm<T> n1, n2;
    };
    std::vector<ResBlock> res;

    Generator() = default;
    Generator(int base, int res_blocks);
    ad::Var<T> forward(const ad::Var<T>& x) const;
    void init(rng::SplitMix64& g);
    void collect(const std::string& prefix, ParamList<T>& out);
};

// Patch discriminator: n_layers stride-2 4x4 convs (channels doubling from
// `base`, capped at 8*base), LeakyReLU(0.2), no normalization, then a 3x3
// 1-channel head. Output: B x 1 x (H/2^n) x (W/2^n) logits. Inputs smaller
// than 2^n x 2^n are rejected.
template <typename T>
struct Discriminator {
    int base = 32, n_layers = 4;
    std::vector<Conv2d<T>> convs;
    Conv2d<T> head;

    Discriminator() = default;
    Discriminator(int in_channels, int base, int n_layers);
    ad::Var<T> forward(const ad::Var<T>& x) const;
    void init(rng::SplitMix64& g);
    void collect(const std::string& prefix, ParamList<T>& out);
    int min_input() const { return 1 << n_layers; }
};

// Segmentation network F: 4-block encoder (channels base/2b/4b/4b, three
// stride-2 downsamplers), skip-connected decoder back to full resolution,
// 1x1 L-channel logit head. The feature tap F_f is the encoder tail
// activation: B x 4*base x H/8 x W/8. H, W divisible by 8.
template <typename T>
struct Segmenter {
    int base = 16, classes = 5;
    Conv2d<T> e1, e2, e3, e4, d3, d2, d1, head;
    InstanceNorm<T> ne1, ne2, ne3, ne4, nd3, nd2, nd1;

    struct Out {
        ad::Var<T> logits;   // B x L x H x W
        ad::Var<T> feature;  // B x C_f x H/8 x W/8
    };

    Segmenter() = default;
    Segmenter(int in_channels, int base, int classes);
    Out forward(const ad::Var<T>& x, bool detach_params = false) const;
    void init(rng::SplitMix64& g);
    void collect(const std::string& prefix, ParamList<T>& out);
    int feature_channels() const { return 4 * base; }
};

// Feature discriminator D_F: three stride-1 3x3 convs + 1x1 head over the
// segmenter's feature tap.
template <typename T>
struct FeatureDiscriminator {
    int width = 64;
    Conv2d<T> c1, c2, c3, head;

    FeatureDiscriminator() = default;
    FeatureDiscriminator(int in_channels, int width);
    ad::Var<T> forward(const ad::Var<T>& x) const;
    void init(rng::SplitMix64& g);
    void collect(const std::string& prefix, ParamList<T>& out);
};

// ------------------------------------------------------------------- bundle

struct BundleConfig {
    int sources = 2;       // M
    int classes = 5;       // L
    int img_channels = 3;
    int gen_base = 32;
    int gen_res = 4;
    int disc_base = 32;
    int disc_layers = 4;
    int seg_base = 16;
    int feat_disc_width = 64;
    std::uint64_t seed = 1;
};

// All MADAN networks. Per source i: forward/inverse generators, the
// cross-domain cycle discriminator D_i, the sub-domain aggregation
// discriminator D_A^i, and a frozen pretrained segmenter F_i. Shared: the
// target-side discriminator D_T, the feature discriminator D_F, and the
// segmenter F. F_A *is* F — f_a() returns the same object, so any update
// through F is observable through F_A without copying.
template <typename T>
struct ModelBundle {
    BundleConfig cfg;
    std::vector<Generator<T>> g_s2t, g_t2s;
    std::vector<Discriminator<T>> d_src;  // D_i
    std::vector<Discriminator<T>> d_agg;  // D_A^i
    Discriminator<T> d_target;            // D_T
    FeatureDiscriminator<T> d_feat;       // D_F
    Segmenter<T> f;                       // F
    std::vector<Segmenter<T>> f_src;      // F_i, frozen after stage-1 pretraining

    Segmenter<T>& f_a() { return f; }
    const Segmenter<T>& f_a() const { return f; }

    // Parameter groups, stable names ("g_s2t.0.stem.w", ...).
    ParamList<T> params_generators();          // all G_{Si->T}, G_{T->Si}
    ParamList<T> params_d_target();
    ParamList<T> params_d_src(int i);
    ParamList<T> params_d_agg(int i);
    ParamList<T> params_d_feat();
    ParamList<T> params_f();
    ParamList<T> params_f_src(int i);
    ParamList<T> params_all();  // everything, checkpoint order

    void zero_all_grads();
};

template <typename T>
ModelBundle<T> init_bundle(const BundleConfig& cfg);

template <typename T>
std::size_t param_count(ParamList<T>& params);

} // namespace madan::nn
