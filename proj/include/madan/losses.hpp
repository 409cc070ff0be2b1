#pragma once

#include "madan/autodiff.hpp"
#include "madan/nn.hpp"

#include <map>
#include <string>
#include <vector>

namespace madan::losses {

// Which side of the adversarial game a loss is computed for. Discriminator
// side classifies (real -> 1, fake -> 0); generator side is non-saturating
// (fake -> 1). Printed equations in the source formulation put log D on the
// generated samples; that ordering does not descend, so the standard
// convention is used throughout and documented here once.
enum class Side { discriminator, generator };

// Image-level GAN loss. Discriminator side: 0.5*(BCE(real->1) + BCE(fake->0)),
// so an all-zero-logit discriminator scores ln 2. Generator side uses only
// logits_fake (logits_real may be an undefined Var). All reductions are means
// over batch and patch positions.
template <typename T>
ad::Var<T> adversarial_loss(const ad::Var<T>& logits_real, const ad::Var<T>& logits_fake, Side side);

// Mean absolute difference between an image batch and its round-trip
// reconstruction. One direction only; the caller sums both directions.
template <typename T>
ad::Var<T> cycle_loss(const ad::Var<T>& x, const ad::Var<T>& x_roundtrip);

// Dynamic semantic consistency: mean per-pixel KL(softmax(adapted_logits) ||
// softmax(source_logits_frozen)). The reference logits carry no gradient.
template <typename T>
ad::Var<T> dsc_loss(const ad::Var<T>& adapted_logits, const Tensor<T>& source_logits_frozen);

// Sub-domain aggregation loss for D_A^i. adapted[j] = G_{Sj->T}(x_j) for all
// j; own_index selects the "real" domain. Discriminator side detaches the
// images and averages the M-1 fake terms with weight 1/(M-1); generator side
// pushes every j != own_index to fool D_A^i. M must be >= 2.
template <typename T>
ad::Var<T> sad_loss(const std::vector<ad::Var<T>>& adapted, int own_index,
                    const nn::Discriminator<T>& d_agg_i, Side side);

// Cross-domain cycle loss for D_i. cross_roundtrips[k] = G_{T->Si}(G_{Sj->T}(x_j))
// over the M-1 domains j != i. Discriminator side: native source images real,
// round-trips fake (weight 1/(M-1)); generator side pushes the round-trips to
// fool D_i. Requires at least one round-trip (M >= 2).
template <typename T>
ad::Var<T> ccd_loss(const ad::Var<T>& source_images, const std::vector<ad::Var<T>>& cross_roundtrips,
                    const nn::Discriminator<T>& d_i, Side side);

// Pixel-wise segmentation cross-entropy, mean over batch and pixels.
template <typename T>
ad::Var<T> task_loss(const ad::Var<T>& logits, const std::vector<LabelMap>& labels);

// Feature-level GAN over the segmenter's feature tap: target features real,
// adapted features fake. Discriminator side detaches both feature batches;
// generator side pushes adapted features to look real (gradient reaches the
// encoder that produced them and nothing else).
template <typename T>
ad::Var<T> feat_loss(const ad::Var<T>& feat_adapted, const ad::Var<T>& feat_target,
                     const nn::FeatureDiscriminator<T>& d_f, Side side);

template <typename T>
struct LossWeights {
    T gan = 1, cyc = 1, sem = 1, sad = 1, ccd = 1, task = 1, feat = 1;
};

// Per-source generator-side terms; undefined Vars are inactive (contribute 0).
template <typename T>
struct PerSourceTerms {
    ad::Var<T> gan_s2t, gan_t2s, cyc, sem, sad, ccd;
};

template <typename T>
struct LossReport {
    std::map<std::string, T> terms;  // per-family values summed over sources
    T total = 0;
};

// Composite objective: sum over sources of the six per-source terms plus the
// shared task and feature terms, each scaled by its weight. Returns the
// differentiable total; `report` (optional) receives plain values. Any NaN
// term is rejected with an error naming it.
template <typename T>
ad::Var<T> total_loss(const std::vector<PerSourceTerms<T>>& per_source, const ad::Var<T>& task,
                      const ad::Var<T>& feat, const LossWeights<T>& w, LossReport<T>* report = nullptr);

} // namespace madan::losses
