#include "madan/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace madan::nn {

using ad::Var;

template <typename T>
void set_requires_grad(ParamList<T>& params, bool on) {
    for (auto& p : params) p.var.node()->requires_grad = on;
}

// ------------------------------------------------------------------ Conv2d

template <typename T>
Conv2d<T>::Conv2d(int cin, int cout, int k, int stride_, int pad_) : stride(stride_), pad(pad_) {
    w = ad::leaf(Tensor<T>({cout, cin, k, k}), true);
    b = ad::leaf(Tensor<T>({cout}), true);
}

template <typename T>
Var<T> Conv2d<T>::forward(const Var<T>& x, bool detach_params) const {
    if (detach_params)
        return ad::conv2d(x, ad::detach(w), ad::detach(b), stride, pad);
    return ad::conv2d(x, w, b, stride, pad);
}

template <typename T>
void Conv2d<T>::init_gaussian(rng::SplitMix64& g, T stddev) {
    Tensor<T>& wt = w.value();
    for (std::size_t i = 0; i < wt.numel(); ++i)
        wt[i] = static_cast<T>(g.next_gaussian()) * stddev;
    b.value().zero();
}

template <typename T>
void Conv2d<T>::init_he(rng::SplitMix64& g) {
    Tensor<T>& wt = w.value();
    const int fan_in = wt.dim(1) * wt.dim(2) * wt.dim(3);
    const T stddev = static_cast<T>(std::sqrt(2.0 / fan_in));
    for (std::size_t i = 0; i < wt.numel(); ++i)
        wt[i] = static_cast<T>(g.next_gaussian()) * stddev;
    b.value().zero();
}

template <typename T>
void Conv2d<T>::collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
}

// -------------------------------------------------------------- InstanceNorm

template <typename T>
InstanceNorm<T>::InstanceNorm(int c) {
    gamma = ad::leaf(Tensor<T>({c}, T(1)), true);
    beta = ad::leaf(Tensor<T>({c}), true);
}

template <typename T>
Var<T> InstanceNorm<T>::forward(const Var<T>& x, bool detach_params) const {
    if (detach_params)
        return ad::instance_norm(x, ad::detach(gamma), ad::detach(beta), T(1e-5));
    return ad::instance_norm(x, gamma, beta, T(1e-5));
}

template <typename T>
void InstanceNorm<T>::collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
}

// --------------------------------------------------------------- Generator

template <typename T>
Generator<T>::Generator(int base_, int res_blocks_) : base(base_), res_blocks(res_blocks_) {
    const int c1 = base, c2 = 2 * base, c3 = 4 * base;
    stem = Conv2d<T>(3, c1, 7, 1, 3);
    in_stem = InstanceNorm<T>(c1);
    down1 = Conv2d<T>(c1, c2, 3, 2, 1);
    in_down1 = InstanceNorm<T>(c2);
    down2 = Conv2d<T>(c2, c3, 3, 2, 1);
    in_down2 = InstanceNorm<T>(c3);
    res.resize(static_cast<std::size_t>(res_blocks));
    for (auto& r : res) {
        r.c1 = Conv2d<T>(c3, c3, 3, 1, 1);
        r.n1 = InstanceNorm<T>(c3);
        r.c2 = Conv2d<T>(c3, c3, 3, 1, 1);
        r.n2 = InstanceNorm<T>(c3);
    }
    up1 = Conv2d<T>(c3, c2, 3, 1, 1);
    in_up1 = InstanceNorm<T>(c2);
    up2 = Conv2d<T>(c2, c1, 3, 1, 1);
    in_up2 = InstanceNorm<T>(c1);
    head = Conv2d<T>(c1, 3, 7, 1, 3);
}

template <typename T>
Var<T> Generator<T>::forward(const Var<T>& x) const {
    const Tensor<T>& xv = x.value();
    if (xv.ndim() != 4 || xv.dim(1) != 3)
        throw std::runtime_error("generator: expected B x 3 x H x W input, got " +
                                 Tensor<T>::shape_str(xv.shape()));
    if (xv.dim(2) % 4 != 0 || xv.dim(3) % 4 != 0)
        throw std::runtime_error("generator: spatial dims must be divisible by 4, got " +
                                 Tensor<T>::shape_str(xv.shape()));
    Var<T> h = ad::relu(in_stem.forward(stem.forward(x)));
    h = ad::relu(in_down1.forward(down1.forward(h)));
    h = ad::relu(in_down2.forward(down2.forward(h)));
    for (const auto& r : res) {
        Var<T> t = ad::relu(r.n1.forward(r.c1.forward(h)));
        t = r.n2.forward(r.c2.forward(t));
        h = ad::add(h, t);
    }
    h = ad::relu(in_up1.forward(up1.forward(ad::upsample_nearest2(h))));
    h = ad::relu(in_up2.forward(up2.forward(ad::upsample_nearest2(h))));
    return ad::tanh_op(head.forward(h));
}

template <typename T>
void Generator<T>::init(rng::SplitMix64& g) {
    const T s = T(0.02);
    stem.init_gaussian(g, s);
    down1.init_gaussian(g, s);
    down2.init_gaussian(g, s);
    for (auto& r : res) {
        r.c1.init_gaussian(g, s);
        r.c2.init_gaussian(g, s);
    }
    up1.init_gaussian(g, s);
    up2.init_gaussian(g, s);
    head.init_gaussian(g, s);
}

template <typename T>
void Generator<T>::collect(const std::string& prefix, ParamList<T>& out) {
    stem.collect(prefix + ".stem", out);
    in_stem.collect(prefix + ".in_stem", out);
    down1.collect(prefix + ".down1", out);
    in_down1.collect(prefix + ".in_down1", out);
    down2.collect(prefix + ".down2", out);
    in_down2.collect(prefix + ".in_down2", out);
    for (std::size_t i = 0; i < res.size(); ++i) {
        const std::string rp = prefix + ".res" + std::to_string(i);
        res[i].c1.collect(rp + ".c1", out);
        res[i].n1.collect(rp + ".n1", out);
        res[i].c2.collect(rp + ".c2", out);
        res[i].n2.collect(rp + ".n2", out);
    }
    up1.collect(prefix + ".up1", out);
    in_up1.collect(prefix + ".in_up1", out);
    up2.collect(prefix + ".up2", out);
    in_up2.collect(prefix + ".in_up2", out);
    head.collect(prefix + ".head", out);
}

// ------------------------------------------------------------ Discriminator

template <typename T>
Discriminator<T>::Discriminator(int in_channels, int base_, int n_layers_)
    : base(base_), n_layers(n_layers_) {
    int cin = in_channels;
    for (int i = 0; i < n_layers; ++i) {
        const int cout = std::min(base << i, 8 * base);
        convs.emplace_back(cin, cout, 4, 2, 1);
        cin = cout;
    }
    head = Conv2d<T>(cin, 1, 3, 1, 1);
}

template <typename T>
Var<T> Discriminator<T>::forward(const Var<T>& x) const {
    const Tensor<T>& xv = x.value();
    if (xv.ndim() != 4)
        throw std::runtime_error("discriminator: expected 4-d input");
    const int lo = min_input();
    if (xv.dim(2) < lo || xv.dim(3) < lo)
        throw std::runtime_error("discriminator: input " + Tensor<T>::shape_str(xv.shape()) +
                                 " smaller than minimum " + std::to_string(lo) + "x" + std::to_string(lo));
    Var<T> h = x;
    for (const auto& c : convs)
        h = ad::leaky_relu(c.forward(h), T(0.2));
    return head.forward(h);
}

template <typename T>
void Discriminator<T>::init(rng::SplitMix64& g) {
    for (auto& c : convs) c.init_gaussian(g, T(0.02));
    head.init_gaussian(g, T(0.02));
}

template <typename T>
void Discriminator<T>::collect(const std::string& prefix, ParamList<T>& out) {
    for (std::size_t i = 0; i < convs.size(); ++i)
        convs[i].collect(prefix + ".conv" + std::to_string(i), out);
    head.collect(prefix + ".head", out);
}

// --------------------------------------------------------------- Segmenter

template <typename T>
Segmenter<T>::Segmenter(int in_channels, int base_, int classes_) : base(base_), classes(classes_) {
    const int c1 = base, c2 = 2 * base, c3 = 4 * base, c4 = 4 * base;
    e1 = Conv2d<T>(in_channels, c1, 3, 1, 1);
    ne1 = InstanceNorm<T>(c1);
    e2 = Conv2d<T>(c1, c2, 3, 2, 1);
    ne2 = InstanceNorm<T>(c2);
    e3 = Conv2d<T>(c2, c3, 3, 2, 1);
    ne3 = InstanceNorm<T>(c3);
    e4 = Conv2d<T>(c3, c4, 3, 2, 1);
    ne4 = InstanceNorm<T>(c4);
    d3 = Conv2d<T>(c4 + c3, c3, 3, 1, 1);
    nd3 = InstanceNorm<T>(c3);
    d2 = Conv2d<T>(c3 + c2, c2, 3, 1, 1);
    nd2 = InstanceNorm<T>(c2);
    d1 = Conv2d<T>(c2 + c1, c1, 3, 1, 1);
    nd1 = InstanceNorm<T>(c1);
    head = Conv2d<T>(c1, classes, 1, 1, 0);
}

template <typename T>
typename Segmenter<T>::Out Segmenter<T>::forward(const Var<T>& x, bool dp) const {
    const Tensor<T>& xv = x.value();
    if (xv.ndim() != 4)
        throw std::runtime_error("segmenter: expected 4-d input");
    if (xv.dim(2) % 8 != 0 || xv.dim(3) % 8 != 0)
        throw std::runtime_error("segmenter: spatial dims must be divisible by 8, got " +
                                 Tensor<T>::shape_str(xv.shape()));
    Var<T> h1 = ad::relu(ne1.forward(e1.forward(x, dp), dp));                       // H
    Var<T> h2 = ad::relu(ne2.forward(e2.forward(h1, dp), dp));                      // H/2
    Var<T> h3 = ad::relu(ne3.forward(e3.forward(h2, dp), dp));                      // H/4
    Var<T> feat = ad::relu(ne4.forward(e4.forward(h3, dp), dp));                    // H/8, tap
    Var<T> u3 = ad::relu(nd3.forward(d3.forward(ad::concat_channels(ad::upsample_nearest2(feat), h3), dp), dp));
    Var<T> u2 = ad::relu(nd2.forward(d2.forward(ad::concat_channels(ad::upsample_nearest2(u3), h2), dp), dp));
    Var<T> u1 = ad::relu(nd1.forward(d1.forward(ad::concat_channels(ad::upsample_nearest2(u2), h1), dp), dp));
    return {head.forward(u1, dp), feat};
}

template <typename T>
void Segmenter<T>::init(rng::SplitMix64& g) {
    e1.init_he(g);
    e2.init_he(g);
    e3.init_he(g);
    e4.init_he(g);
    d3.init_he(g);
    d2.init_he(g);
    d1.init_he(g);
    head.init_he(g);
}

template <typename T>
void Segmenter<T>::collect(const std::string& prefix, ParamList<T>& out) {
    e1.collect(prefix + ".e1", out);
    ne1.collect(prefix + ".ne1", out);
    e2.collect(prefix + ".e2", out);
    ne2.collect(prefix + ".ne2", out);
    e3.collect(prefix + ".e3", out);
    ne3.collect(prefix + ".ne3", out);
    e4.collect(prefix + ".e4", out);
    ne4.collect(prefix + ".ne4", out);
    d3.collect(prefix + ".d3", out);
    nd3.collect(prefix + ".nd3", out);
    d2.collect(prefix + ".d2", out);
    nd2.collect(prefix + ".nd2", out);
    d1.collect(prefix + ".d1", out);
    nd1.collect(prefix + ".nd1", out);
    head.collect(prefix + ".head", out);
}

// ---------------------------------------------------- FeatureDiscriminator

template <typename T>
FeatureDiscriminator<T>::FeatureDiscriminator(int in_channels, int width_) : width(width_) {
    c1 = Conv2d<T>(in_channels, width, 3, 1, 1);
    c2 = Conv2d<T>(width, width, 3, 1, 1);
    c3 = Conv2d<T>(width, width, 3, 1, 1);
    head = Conv2d<T>(width, 1, 1, 1, 0);
}

template <typename T>
Var<T> FeatureDiscriminator<T>::forward(const Var<T>& x) const {
    Var<T> h = ad::leaky_relu(c1.forward(x), T(0.2));
    h = ad::leaky_relu(c2.forward(h), T(0.2));
    h = ad::leaky_relu(c3.forward(h), T(0.2));
    return head.forward(h);
}

template <typename T>
void FeatureDiscriminator<T>::init(rng::SplitMix64& g) {
    c1.init_gaussian(g, T(0.02));
    c2.init_gaussian(g, T(0.02));
    c3.init_gaussian(g, T(0.02));
    head.init_gaussian(g, T(0.02));
}

template <typename T>
void FeatureDiscriminator<T>::collect(const std::string& prefix, ParamList<T>& out) {
    c1.collect(prefix + ".c1", out);
    c2.collect(prefix + ".c2", out);
    c3.collect(prefix + ".c3", out);
    head.collect(prefix + ".head", out);
}

// ------------------------------------------------------------------- bundle

template <typename T>
ParamList<T> ModelBundle<T>::params_generators() {
    ParamList<T> out;
    for (int i = 0; i < cfg.sources; ++i) {
        g_s2t[static_cast<std::size_t>(i)].collect("g_s2t." + std::to_string(i), out);
        g_t2s[static_cast<std::size_t>(i)].collect("g_t2s." + std::to_string(i), out);
    }
    return out;
}

template <typename T>
ParamList<T> ModelBundle<T>::params_d_target() {
    ParamList<T> out;
    d_target.collect("d_target", out);
    return out;
}

template <typename T>
ParamList<T> ModelBundle<T>::params_d_src(int i) {
    ParamList<T> out;
    d_src[static_cast<std::size_t>(i)].collect("d_src." + std::to_string(i), out);
    return out;
}

template <typename T>
ParamList<T> ModelBundle<T>::params_d_agg(int i) {
    ParamList<T> out;
    d_agg[static_cast<std::size_t>(i)].collect("d_agg." + std::to_string(i), out);
    return out;
}

template <typename T>
ParamList<T> ModelBundle<T>::params_d_feat() {
    ParamList<T> out;
    d_feat.collect("d_feat", out);
    return out;
}

template <typename T>
ParamList<T> ModelBundle<T>::params_f() {
    ParamList<T> out;
    f.collect("f", out);
    return out;
}

template <typename T>
ParamList<T> ModelBundle<T>::params_f_src(int i) {
    ParamList<T> out;
    f_src[static_cast<std::size_t>(i)].collect("f_src." + std::to_string(i), out);
    return out;
}

template <typename T>
ParamList<T> ModelBundle<T>::params_all() {
    ParamList<T> out = params_generators();
    for (int i = 0; i < cfg.sources; ++i) {
        auto p = params_d_src(i);
        out.insert(out.end(), p.begin(), p.end());
    }
    for (int i = 0; i < cfg.sources; ++i) {
        auto p = params_d_agg(i);
        out.insert(out.end(), p.begin(), p.end());
    }
    {
        auto p = params_d_target();
        out.insert(out.end(), p.begin(), p.end());
    }
    {
        auto p = params_d_feat();
        out.insert(out.end(), p.begin(), p.end());
    }
    {
        auto p = params_f();
        out.insert(out.end(), p.begin(), p.end());
    }
    for (int i = 0; i < cfg.sources; ++i) {
        auto p = params_f_src(i);
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

template <typename T>
void ModelBundle<T>::zero_all_grads() {
    auto all = params_all();
    for (auto& p : all) p.var.zero_grad();
}

template <typename T>
ModelBundle<T> init_bundle(const BundleConfig& cfg) {
    if (cfg.sources < 1)
        throw std::invalid_argument("init_bundle: number of sources must be >= 1, got " +
                                    std::to_string(cfg.sources));
    if (cfg.classes < 2)
        throw std::invalid_argument("init_bundle: class count must be >= 2, got " +
                                    std::to_string(cfg.classes));
    ModelBundle<T> b;
    b.cfg = cfg;
    rng::SplitMix64 g = rng::substream(cfg.seed, "model-init");
    for (int i = 0; i < cfg.sources; ++i) {
        b.g_s2t.emplace_back(cfg.gen_base, cfg.gen_res);
        b.g_s2t.back().init(g);
        b.g_t2s.emplace_back(cfg.gen_base, cfg.gen_res);
        b.g_t2s.back().init(g);
        b.d_src.emplace_back(cfg.img_channels, cfg.disc_base, cfg.disc_layers);
        b.d_src.back().init(g);
        b.d_agg.emplace_back(cfg.img_channels, cfg.disc_base, cfg.disc_layers);
        b.d_agg.back().init(g);
    }
    b.d_target = Discriminator<T>(cfg.img_channels, cfg.disc_base, cfg.disc_layers);
    b.d_target.init(g);
    b.f = Segmenter<T>(cfg.img_channels, cfg.seg_base, cfg.classes);
    b.f.init(g);
    b.d_feat = FeatureDiscriminator<T>(b.f.feature_channels(), cfg.feat_disc_width);
    b.d_feat.init(g);
    for (int i = 0; i < cfg.sources; ++i) {
        b.f_src.emplace_back(cfg.img_channels, cfg.seg_base, cfg.classes);
        b.f_src.back().init(g);
    }
    return b;
}

template <typename T>
std::size_t param_count(ParamList<T>& params) {
    std::size_t n = 0;
    for (auto& p : params) n += p.var.value().numel();
    return n;
}

#define MADAN_NN_INSTANTIATE(T)                                  \
    template void set_requires_grad<T>(ParamList<T>&, bool);     \
    template struct Conv2d<T>;                                   \
    template struct InstanceNorm<T>;                             \
    template struct Generator<T>;                                \
    template struct Discriminator<T>;                            \
    template struct Segmenter<T>;                                \
    template struct FeatureDiscriminator<T>;                     \
    template struct ModelBundle<T>;                              \
    template ModelBundle<T> init_bundle<T>(const BundleConfig&); \
    template std::size_t param_count<T>(ParamList<T>&);

MADAN_NN_INSTANTIATE(float)
MADAN_NN_INSTANTIATE(double)

#undef MADAN_NN_INSTANTIATE

} // namespace madan::nn
