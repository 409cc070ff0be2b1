#include "madan/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace madan::losses {

using ad::Var;

namespace {

template <typename T>
Var<T> accumulate(Var<T> sum, const Var<T>& term, T w) {
    if (!term.defined()) return sum;
    Var<T> t = (w == T(1)) ? term : ad::scale(term, w);
    return sum.defined() ? ad::add(sum, t) : t;
}

template <typename T>
void check_term(const char* name, int index, const Var<T>& v) {
    if (!v.defined()) return;
    const T x = v.item();
    if (std::isnan(static_cast<double>(x)))
        throw std::runtime_error(std::string("total_loss: term '") + name +
                                 (index >= 0 ? "[" + std::to_string(index) + "]" : "") + "' is NaN");
}

} // namespace

template <typename T>
Var<T> adversarial_loss(const Var<T>& logits_real, const Var<T>& logits_fake, Side side) {
    if (!logits_fake.defined())
        throw std::runtime_error("adversarial_loss: fake logits required");
    if (side == Side::generator)
        return ad::bce_with_logits_mean(logits_fake, T(1));
    if (!logits_real.defined())
        throw std::runtime_error("adversarial_loss: real logits required on the discriminator side");
    Var<T> lr = ad::bce_with_logits_mean(logits_real, T(1));
    Var<T> lf = ad::bce_with_logits_mean(logits_fake, T(0));
    return ad::scale(ad::add(lr, lf), T(0.5));
}

template <typename T>
Var<T> cycle_loss(const Var<T>& x, const Var<T>& x_roundtrip) {
    return ad::mean_abs_diff(x, x_roundtrip);
}

template <typename T>
Var<T> dsc_loss(const Var<T>& adapted_logits, const Tensor<T>& source_logits_frozen) {
    return ad::kl_softmax_mean(adapted_logits, source_logits_frozen);
}

template <typename T>
Var<T> sad_loss(const std::vector<Var<T>>& adapted, int own_index,
                const nn::Discriminator<T>& d_agg_i, Side side) {
    const int m = static_cast<int>(adapted.size());
    if (m < 2)
        throw std::invalid_argument("sad_loss: needs at least 2 source domains, got " + std::to_string(m));
    if (own_index < 0 || own_index >= m)
        throw std::invalid_argument("sad_loss: own_index out of range");
    const T inv = T(1) / static_cast<T>(m - 1);

    if (side == Side::discriminator) {
        Var<T> real = ad::bce_with_logits_mean(d_agg_i.forward(ad::detach(adapted[static_cast<std::size_t>(own_index)])), T(1));
        Var<T> fake;
        for (int j = 0; j < m; ++j) {
            if (j == own_index) continue;
            Var<T> term = ad::bce_with_logits_mean(d_agg_i.forward(ad::detach(adapted[static_cast<std::size_t>(j)])), T(0));
            fake = fake.defined() ? ad::add(fake, term) : term;
        }
        return ad::scale(ad::add(real, ad::scale(fake, inv)), T(0.5));
    }
    Var<T> sum;
    for (int j = 0; j < m; ++j) {
        if (j == own_index) continue;
        Var<T> term = ad::bce_with_logits_mean(d_agg_i.forward(adapted[static_cast<std::size_t>(j)]), T(1));
        sum = sum.defined() ? ad::add(sum, term) : term;
    }
    return ad::scale(sum, inv);
}

template <typename T>
Var<T> ccd_loss(const Var<T>& source_images, const std::vector<Var<T>>& cross_roundtrips,
                const nn::Discriminator<T>& d_i, Side side) {
    const int k = static_cast<int>(cross_roundtrips.size());
    if (k < 1)
        throw std::invalid_argument("ccd_loss: needs at least one cross-domain round-trip (M >= 2)");
    const T inv = T(1) / static_cast<T>(k);

    if (side == Side::discriminator) {
        Var<T> real = ad::bce_with_logits_mean(d_i.forward(ad::detach(source_images)), T(1));
        Var<T> fake;
        for (const auto& rt : cross_roundtrips) {
            Var<T> term = ad::bce_with_logits_mean(d_i.forward(ad::detach(rt)), T(0));
            fake = fake.defined() ? ad::add(fake, term) : term;
        }
        return ad::scale(ad::add(real, ad::scale(fake, inv)), T(0.5));
    }
    Var<T> sum;
    for (const auto& rt : cross_roundtrips) {
        Var<T> term = ad::bce_with_logits_mean(d_i.forward(rt), T(1));
        sum = sum.defined() ? ad::add(sum, term) : term;
    }
    return ad::scale(sum, inv);
}

template <typename T>
Var<T> task_loss(const Var<T>& logits, const std::vector<LabelMap>& labels) {
    return ad::softmax_ce_mean(logits, labels);
}

template <typename T>
Var<T> feat_loss(const Var<T>& feat_adapted, const Var<T>& feat_target,
                 const nn::FeatureDiscriminator<T>& d_f, Side side) {
    if (!feat_adapted.value().same_shape(feat_target.value()))
        throw std::runtime_error("feat_loss: feature shape mismatch " +
                                 Tensor<T>::shape_str(feat_adapted.value().shape()) + " vs " +
                                 Tensor<T>::shape_str(feat_target.value().shape()));
    if (side == Side::discriminator) {
        Var<T> real = ad::bce_with_logits_mean(d_f.forward(ad::detach(feat_target)), T(1));
        Var<T> fake = ad::bce_with_logits_mean(d_f.forward(ad::detach(feat_adapted)), T(0));
        return ad::scale(ad::add(real, fake), T(0.5));
    }
    return ad::bce_with_logits_mean(d_f.forward(feat_adapted), T(1));
}

template <typename T>
Var<T> total_loss(const std::vector<PerSourceTerms<T>>& per_source, const Var<T>& task,
                  const Var<T>& feat, const LossWeights<T>& w, LossReport<T>* report) {
    Var<T> sum;
    T acc_gan_s2t = 0, acc_gan_t2s = 0, acc_cyc = 0, acc_sem = 0, acc_sad = 0, acc_ccd = 0;
    for (std::size_t i = 0; i < per_source.size(); ++i) {
        const auto& ps = per_source[i];
        const int ii = static_cast<int>(i);
        check_term("gan_s2t", ii, ps.gan_s2t);
        check_term("gan_t2s", ii, ps.gan_t2s);
        check_term("cyc", ii, ps.cyc);
        check_term("dsc", ii, ps.sem);
        check_term("sad", ii, ps.sad);
        check_term("ccd", ii, ps.ccd);
        sum = accumulate(sum, ps.gan_s2t, w.gan);
        sum = accumulate(sum, ps.gan_t2s, w.gan);
        sum = accumulate(sum, ps.cyc, w.cyc);
        sum = accumulate(sum, ps.sem, w.sem);
        sum = accumulate(sum, ps.sad, w.sad);
        sum = accumulate(sum, ps.ccd, w.ccd);
        if (ps.gan_s2t.defined()) acc_gan_s2t += ps.gan_s2t.item();
        if (ps.gan_t2s.defined()) acc_gan_t2s += ps.gan_t2s.item();
        if (ps.cyc.defined()) acc_cyc += ps.cyc.item();
        if (ps.sem.defined()) acc_sem += ps.sem.item();
        if (ps.sad.defined()) acc_sad += ps.sad.item();
        if (ps.ccd.defined()) acc_ccd += ps.ccd.item();
    }
    check_term("task", -1, task);
    check_term("feat", -1, feat);
    sum = accumulate(sum, task, w.task);
    sum = accumulate(sum, feat, w.feat);
    if (!sum.defined()) sum = ad::constant(Tensor<T>::scalar(T(0)));
    if (report) {
        report->terms["gan_s2t"] = acc_gan_s2t;
        report->terms["gan_t2s"] = acc_gan_t2s;
        report->terms["cyc"] = acc_cyc;
        report->terms["dsc"] = acc_sem;
        report->terms["sad"] = acc_sad;
        report->terms["ccd"] = acc_ccd;
        report->terms["task"] = task.defined() ? task.item() : T(0);
        report->terms["feat"] = feat.defined() ? feat.item() : T(0);
        report->total = sum.item();
    }
    return sum;
}

#define MADAN_LOSS_INSTANTIATE(T)                                                                  \
    template ad::Var<T> adversarial_loss<T>(const ad::Var<T>&, const ad::Var<T>&, Side);           \
    template ad::Var<T> cycle_loss<T>(const ad::Var<T>&, const ad::Var<T>&);                       \
    template ad::Var<T> dsc_loss<T>(const ad::Var<T>&, const Tensor<T>&);                          \
    template ad::Var<T> sad_loss<T>(const std::vector<ad::Var<T>>&, int, const nn::Discriminator<T>&, Side); \
    template ad::Var<T> ccd_loss<T>(const ad::Var<T>&, const std::vector<ad::Var<T>>&, const nn::Discriminator<T>&, Side); \
    template ad::Var<T> task_loss<T>(const ad::Var<T>&, const std::vector<LabelMap>&);             \
    template ad::Var<T> feat_loss<T>(const ad::Var<T>&, const ad::Var<T>&, const nn::FeatureDiscriminator<T>&, Side); \
    template ad::Var<T> total_loss<T>(const std::vector<PerSourceTerms<T>>&, const ad::Var<T>&,    \
                                      const ad::Var<T>&, const LossWeights<T>&, LossReport<T>*);

MADAN_LOSS_INSTANTIATE(float)
MADAN_LOSS_INSTANTIATE(double)

#undef MADAN_LOSS_INSTANTIATE

} // namespace madan::losses
