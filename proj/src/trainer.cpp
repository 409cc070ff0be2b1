#include "madan/trainer.hpp"

#include "madan/image_io.hpp"
#include "madan/parallel.hpp"
#include "madan/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <stdexcept>

namespace madan::train {

namespace fs = std::filesystem;
using ad::Var;
using losses::Side;

struct Trainer::Phase {
    std::string stage;  // "1-cyc", "1-fsrc", "1-f", "2", "3", "so"
    int round = 1;
    int epochs = 0;
};

namespace {

constexpr const char* kCsvHeader =
    "round,stage,epoch,gan_s2t,gan_t2s,cyc,dsc,sad,ccd,task,feat,target_miou\n";

std::string fmt_hex64(std::uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::vector<int> shuffled(int n, rng::SplitMix64& g) {
    std::vector<int> v(static_cast<std::size_t>(n));
    std::iota(v.begin(), v.end(), 0);
    for (int i = n - 1; i > 0; --i) {
        const int j = static_cast<int>(g.next_below(static_cast<std::uint64_t>(i) + 1));
        std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
    return v;
}

rng::SplitMix64 epoch_stream(std::uint64_t seed, const char* kind, int round,
                             const std::string& stage, int epoch) {
    return rng::substream(seed, std::string(kind) + "/r" + std::to_string(round) + "/" + stage +
                                    "/e" + std::to_string(epoch));
}

// Copies (optionally cropped) images into a fresh B x 3 x h x w batch.
// Wraps around the permutation when step*B exceeds it. Crop offsets are drawn
// per image in batch order.
TensorF gather_images(const std::vector<const TensorF*>& images, const std::vector<int>& order,
                      int step, int batch, int crop, rng::SplitMix64& crop_rng) {
    const TensorF& first = *images[static_cast<std::size_t>(order[0])];
    const int C = first.dim(0), H = first.dim(1), W = first.dim(2);
    const int h = crop > 0 ? crop : H, w = crop > 0 ? crop : W;
    TensorF out({batch, C, h, w});
    for (int b = 0; b < batch; ++b) {
        const std::size_t at = (static_cast<std::size_t>(step) * batch + b) % order.size();
        const TensorF& img = *images[static_cast<std::size_t>(order[at])];
        int dy = 0, dx = 0;
        if (h < H) dy = static_cast<int>(crop_rng.next_below(static_cast<std::uint64_t>(H - h + 1)));
        if (w < W) dx = static_cast<int>(crop_rng.next_below(static_cast<std::uint64_t>(W - w + 1)));
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < h; ++y)
                std::memcpy(&out.at4(b, c, y, 0), &img[(static_cast<std::size_t>(c) * H + dy + y) * W + dx],
                            static_cast<std::size_t>(w) * sizeof(float));
    }
    return out;
}

std::vector<const TensorF*> image_ptrs(const data::Dataset& ds) {
    std::vector<const TensorF*> p;
    p.reserve(ds.samples.size());
    for (const auto& s : ds.samples) p.push_back(&s.image);
    return p;
}

std::vector<LabelMap> gather_labels(const std::vector<const LabelMap*>& labels,
                                    const std::vector<int>& order, int step, int batch) {
    std::vector<LabelMap> out;
    out.reserve(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) {
        const std::size_t at = (static_cast<std::size_t>(step) * batch + b) % order.size();
        out.push_back(*labels[static_cast<std::size_t>(order[at])]);
    }
    return out;
}

// Temporarily drops requires_grad on a parameter group (inference forwards
// build no graph at all while the guard lives).
class FreezeGuard {
public:
    explicit FreezeGuard(nn::ParamList<float> params) : p_(std::move(params)) {
        nn::set_requires_grad(p_, false);
    }
    ~FreezeGuard() { nn::set_requires_grad(p_, true); }
    FreezeGuard(const FreezeGuard&) = delete;
    FreezeGuard& operator=(const FreezeGuard&) = delete;

private:
    nn::ParamList<float> p_;
};

float report_term(const losses::LossReport<float>& r, const char* key) {
    auto it = r.terms.find(key);
    return it == r.terms.end() ? 0.0f : it->second;
}

void accumulate_report(losses::LossReport<float>& sum, const losses::LossReport<float>& step) {
    for (const auto& [k, v] : step.terms) sum.terms[k] += v;
    sum.total += step.total;
}

void write_adam(ckpt::Archive& a, const std::string& group, nn::Adam<float>& opt) {
    a.set("adam." + group + ".t", std::to_string(opt.steps()));
    for (auto& s : opt.slots()) {
        a.add("adam." + group + ".m." + s.name, s.m);
        a.add("adam." + group + ".v." + s.name, s.v);
    }
}

void read_adam(const ckpt::Archive& a, const std::string& group, nn::Adam<float>& opt) {
    opt.set_steps(static_cast<std::int64_t>(a.get_u64("adam." + group + ".t")));
    for (auto& s : opt.slots()) {
        for (const char* part : {"m", "v"}) {
            const std::string name = "adam." + group + "." + part + "." + s.name;
            const TensorF* t = a.find_array(name);
            if (!t) throw std::runtime_error("checkpoint: missing optimizer array '" + name + "'");
            Tensor<float>& dst = *part == 'm' ? s.m : s.v;
            if (!t->same_shape(dst))
                throw std::runtime_error("checkpoint: optimizer array '" + name + "' has the wrong shape");
            std::memcpy(dst.data(), t->data(), t->numel() * sizeof(float));
        }
    }
}

} // namespace

TrainConfig TrainConfig::from(const cfg::RunConfig& rc) {
    cfg::validate(rc);
    TrainConfig t;
    t.sources = rc.sources;
    t.stage1_epochs = rc.stage1_epochs >= 0 ? rc.stage1_epochs : rc.epochs;
    t.stage2_epochs = rc.stage2_epochs >= 0 ? rc.stage2_epochs : rc.epochs;
    t.stage3_epochs = rc.stage3_epochs >= 0 ? rc.stage3_epochs : rc.epochs;
    t.batch_size = rc.batch_size;
    t.learning_rate = rc.learning_rate;
    t.sad_freeze_epochs = std::min(rc.sad_freeze_epochs, t.stage2_epochs);
    t.ccd_freeze_epochs = std::min(rc.ccd_freeze_epochs, t.stage2_epochs);
    t.outer_rounds = rc.outer_rounds;
    t.crop = rc.crop;
    t.checkpoint_every = rc.checkpoint_every;
    t.halt_after_epochs = rc.halt_after_epochs;
    t.eval_batch = rc.eval_batch;
    t.seed = rc.seed;
    t.mode = rc.mode;
    t.weights.gan = static_cast<float>(rc.w_gan);
    t.weights.cyc = static_cast<float>(rc.w_cyc);
    t.weights.sem = static_cast<float>(rc.w_sem);
    t.weights.sad = static_cast<float>(rc.w_sad);
    t.weights.ccd = static_cast<float>(rc.w_ccd);
    t.weights.task = static_cast<float>(rc.w_task);
    t.weights.feat = static_cast<float>(rc.w_feat);
    t.dsc_detach = rc.dsc_detach;
    t.f_reinit_stage3 = rc.f_reinit_stage3;
    if (t.mode == "cycle_only") {
        // Same phase plan and RNG streams as the full run, with every
        // adaptation term inactive: translation + segmentation only.
        t.weights.sad = 0;
        t.weights.ccd = 0;
        t.weights.sem = 0;
        t.weights.feat = 0;
    }
    if (t.sad_freeze_epochs > t.ccd_freeze_epochs)
        throw std::runtime_error("config: sad_freeze_epochs must be <= ccd_freeze_epochs");
    return t;
}

TrainData load_train_data(const std::string& root, int sources) {
    TrainData d;
    for (int i = 0; i < sources; ++i) {
        const std::string dir = root + "/src" + std::to_string(i);
        d.sources.push_back(data::load_dataset(dir));
        if (!d.sources.back().manifest.labeled)
            throw std::runtime_error("trainer: source dataset " + dir + " is unlabeled");
    }
    d.target = data::load_dataset(root + "/target");
    const std::string eval_dir = root + "/target_eval";
    if (fs::exists(eval_dir)) {
        d.target_eval = data::load_dataset(eval_dir);
        if (!d.target_eval->manifest.labeled)
            throw std::runtime_error("trainer: evaluation dataset " + eval_dir + " is unlabeled");
    }
    const int H = d.target.manifest.height, W = d.target.manifest.width;
    for (const auto& ds : d.sources)
        if (ds.manifest.height != H || ds.manifest.width != W)
            throw std::runtime_error("trainer: dataset image sizes differ across domains");
    if (d.target_eval && (d.target_eval->manifest.height != H || d.target_eval->manifest.width != W))
        throw std::runtime_error("trainer: dataset image sizes differ across domains");
    return d;
}

Trainer::Trainer(TrainConfig cfg, nn::BundleConfig bcfg, TrainData data, std::string out_dir)
    : cfg_(std::move(cfg)), data_(std::move(data)), out_dir_(std::move(out_dir)),
      bundle_(nn::init_bundle<float>(bcfg)) {
    if (static_cast<int>(data_.sources.size()) != cfg_.sources)
        throw std::invalid_argument("trainer: expected " + std::to_string(cfg_.sources) +
                                    " source datasets, got " + std::to_string(data_.sources.size()));
    for (const auto& ds : data_.sources)
        if (ds.samples.empty()) throw std::invalid_argument("trainer: empty source dataset");
    if (data_.target.samples.empty()) throw std::invalid_argument("trainer: empty target dataset");

    const auto lr = static_cast<float>(cfg_.learning_rate);
    opt_gen_ = nn::Adam<float>(bundle_.params_generators(), lr, 0.5f, 0.999f);
    opt_dt_ = nn::Adam<float>(bundle_.params_d_target(), lr, 0.5f, 0.999f);
    opt_df_ = nn::Adam<float>(bundle_.params_d_feat(), lr, 0.5f, 0.999f);
    opt_f_ = nn::Adam<float>(bundle_.params_f(), lr, 0.9f, 0.999f);
    for (int i = 0; i < cfg_.sources; ++i) {
        opt_dsrc_.emplace_back(bundle_.params_d_src(i), lr, 0.5f, 0.999f);
        opt_dagg_.emplace_back(bundle_.params_d_agg(i), lr, 0.5f, 0.999f);
        opt_fsrc_.emplace_back(bundle_.params_f_src(i), lr, 0.9f, 0.999f);
    }
    // F_i are only trainable inside their pretraining phase.
    for (int i = 0; i < cfg_.sources; ++i) {
        auto p = bundle_.params_f_src(i);
        nn::set_requires_grad(p, false);
    }
    fs::create_directories(out_dir_);
}

int Trainer::spe_src() const {
    std::size_t n = data_.target.samples.size();
    for (const auto& ds : data_.sources) n = std::max(n, ds.samples.size());
    return static_cast<int>((n + cfg_.batch_size - 1) / cfg_.batch_size);
}

int Trainer::spe_union() const {
    std::size_t n = 0;
    for (const auto& ds : data_.sources) n += ds.samples.size();
    return static_cast<int>((n + cfg_.batch_size - 1) / cfg_.batch_size);
}

std::vector<Trainer::Phase> Trainer::plan() const {
    std::vector<Phase> p;
    if (cfg_.mode == "source_only") {
        p.push_back({"so", 1, cfg_.stage1_epochs + cfg_.outer_rounds * cfg_.stage3_epochs});
        return p;
    }
    p.push_back({"1-cyc", 1, cfg_.stage1_epochs});
    p.push_back({"1-fsrc", 1, cfg_.stage1_epochs});
    p.push_back({"1-f", 1, cfg_.stage1_epochs});
    for (int r = 1; r <= cfg_.outer_rounds; ++r) {
        p.push_back({"2", r, cfg_.stage2_epochs});
        p.push_back({"3", r, cfg_.stage3_epochs});
    }
    return p;
}

StepCounts Trainer::expected_steps() const {
    StepCounts e;
    const auto su = static_cast<std::uint64_t>(spe_union());
    const auto ss = static_cast<std::uint64_t>(spe_src());
    if (cfg_.mode == "source_only") {
        e.source_only =
            (static_cast<std::uint64_t>(cfg_.stage1_epochs) +
             static_cast<std::uint64_t>(cfg_.outer_rounds) * cfg_.stage3_epochs) * su;
        return e;
    }
    e.stage1_cyc = static_cast<std::uint64_t>(cfg_.stage1_epochs) * ss;
    e.stage1_fsrc = static_cast<std::uint64_t>(cfg_.stage1_epochs) * ss;
    e.stage1_f = static_cast<std::uint64_t>(cfg_.stage1_epochs) * su;
    e.stage2 = static_cast<std::uint64_t>(cfg_.outer_rounds) * cfg_.stage2_epochs * ss;
    e.stage3 = static_cast<std::uint64_t>(cfg_.outer_rounds) * cfg_.stage3_epochs * su;
    return e;
}

void Trainer::write_metrics_header_if_new() {
    const std::string path = out_dir_ + "/metrics.csv";
    if (!fs::exists(path) || fs::file_size(path) == 0) io::atomic_write_file(path, kCsvHeader);
}

void Trainer::run() {
    write_metrics_header_if_new();
    const auto phases = plan();
    for (int pi = 0; pi < static_cast<int>(phases.size()); ++pi) {
        const Phase& ph = phases[static_cast<std::size_t>(pi)];
        if (pi < resume_plan_) {
            if (ph.stage == "1-f") stage1_done_ = true;
            if (ph.stage == "2") stage2_done_ = true;
            continue;
        }
        const int offset = pi == resume_plan_ ? resume_epoch_ : 0;
        run_phase(ph, pi, offset);
        if (halted_) return;
    }
    save_checkpoint(out_dir_ + "/final.ckpt", static_cast<int>(phases.size()), 0);
    restore_best_into_f();
    save_checkpoint(out_dir_ + "/best.ckpt", static_cast<int>(phases.size()), 0);
}

void Trainer::stage1() {
    if (cfg_.mode == "source_only") throw std::logic_error("stage1: not part of source_only mode");
    write_metrics_header_if_new();
    const auto phases = plan();
    for (int pi = 0; pi < 3; ++pi) {
        run_phase(phases[static_cast<std::size_t>(pi)], pi, 0);
        if (halted_) return;
    }
}

void Trainer::stage2(int round) {
    if (!stage1_done_) throw std::logic_error("stage2: requires completed stage-1 state");
    write_metrics_header_if_new();
    const int pi = 3 + 2 * (round - 1);
    run_phase({"2", round, cfg_.stage2_epochs}, pi, 0);
}

void Trainer::stage3(int round) {
    if (!stage2_done_) throw std::logic_error("stage3: requires completed stage-2 state");
    write_metrics_header_if_new();
    const int pi = 4 + 2 * (round - 1);
    run_phase({"3", round, cfg_.stage3_epochs}, pi, 0);
}

void Trainer::run_phase(const Phase& ph, int plan_idx, int epoch_offset) {
    try {
        // Phase-entry side effects (idempotent, replayed on resume).
        {
            for (int i = 0; i < cfg_.sources; ++i) {
                auto p = bundle_.params_f_src(i);
                nn::set_requires_grad(p, ph.stage == "1-fsrc");
            }
        }
        Pool pool;
        bool feat_on = false;
        const bool any_epochs = epoch_offset < ph.epochs;
        if (any_epochs && (ph.stage == "1-f" || ph.stage == "3")) pool = adapted_pool();
        if (any_epochs && ph.stage == "so") pool = raw_pool();
        if (ph.stage == "3" && any_epochs) {
            feat_on = cfg_.weights.feat > 0;
            // Reinit belongs to phase entry; a mid-phase resume must not redo it.
            if (cfg_.f_reinit_stage3 && epoch_offset == 0) {
                rng::SplitMix64 g =
                    rng::substream(cfg_.seed, "f-reinit/r" + std::to_string(ph.round));
                bundle_.f.init(g);
                opt_f_ = nn::Adam<float>(bundle_.params_f(), static_cast<float>(cfg_.learning_rate),
                                         0.9f, 0.999f);
            }
        }

        for (int e = epoch_offset; e < ph.epochs; ++e) {
            losses::LossReport<float> sum;
            int divisor = 1;
            if (ph.stage == "1-cyc") {
                pixel_epoch(ph.round, ph.stage, e, false, false, false, sum);
                divisor = spe_src();
            } else if (ph.stage == "2") {
                const bool dsc_on = cfg_.weights.sem > 0;
                const bool sad_on = cfg_.weights.sad > 0 && e >= cfg_.sad_freeze_epochs;
                const bool ccd_on = cfg_.weights.ccd > 0 && e >= cfg_.ccd_freeze_epochs;
                pixel_epoch(ph.round, ph.stage, e, dsc_on, sad_on, ccd_on, sum);
                divisor = spe_src();
            } else if (ph.stage == "1-fsrc") {
                fsrc_epoch(ph.round, e, sum);
                divisor = spe_src();
            } else {
                seg_epoch(pool, ph.round, ph.stage, e, feat_on, sum);
                divisor = spe_union();
            }
            for (auto& [k, v] : sum.terms) v /= static_cast<float>(divisor);

            double miou = -1;
            if ((ph.stage == "3" || ph.stage == "so") && data_.target_eval) {
                miou = evaluate_target().miou;
                track_best(miou);
            }
            end_epoch(ph, plan_idx, e, sum, miou);
            if (halted_) return;
        }

        if (ph.stage == "1-fsrc")
            for (int i = 0; i < cfg_.sources; ++i) {
                auto p = bundle_.params_f_src(i);
                nn::set_requires_grad(p, false);
            }
        if (ph.stage == "1-f") stage1_done_ = true;
        if (ph.stage == "2") stage2_done_ = true;
        save_checkpoint(out_dir_ + "/latest.ckpt", plan_idx + 1, 0);
    } catch (const std::exception& err) {
        throw std::runtime_error("round " + std::to_string(ph.round) + " stage " + ph.stage +
                                 ": " + err.what());
    }
}

void Trainer::pixel_epoch(int round, const std::string& stage, int epoch, bool dsc_on, bool sad_on,
                          bool ccd_on, losses::LossReport<float>& report) {
    const int M = cfg_.sources, B = cfg_.batch_size;
    const bool gan_on = cfg_.weights.gan > 0;
    rng::SplitMix64 og = epoch_stream(cfg_.seed, "order", round, stage, epoch);
    rng::SplitMix64 cg = epoch_stream(cfg_.seed, "crop", round, stage, epoch);

    std::vector<std::vector<int>> perm(static_cast<std::size_t>(M));
    std::vector<std::vector<const TensorF*>> src_imgs(static_cast<std::size_t>(M));
    for (int i = 0; i < M; ++i) {
        const auto iu = static_cast<std::size_t>(i);
        perm[iu] = shuffled(static_cast<int>(data_.sources[iu].samples.size()), og);
        src_imgs[iu] = image_ptrs(data_.sources[iu]);
    }
    std::vector<int> permT = shuffled(static_cast<int>(data_.target.samples.size()), og);
    const std::vector<const TensorF*> tgt_imgs = image_ptrs(data_.target);

    const int steps = spe_src();
    for (int s = 0; s < steps; ++s) {
        std::vector<Var<float>> xs(static_cast<std::size_t>(M));
        for (int i = 0; i < M; ++i)
            xs[static_cast<std::size_t>(i)] = ad::constant(
                gather_images(src_imgs[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(i)], s, B, cfg_.crop, cg));
        Var<float> xt = ad::constant(gather_images(tgt_imgs, permT, s, B, cfg_.crop, cg));

        // Translator forwards (kept for the generator update; discriminator
        // losses see them through detach so D steps never touch G).
        std::vector<Var<float>> a(static_cast<std::size_t>(M)), cyc_s(static_cast<std::size_t>(M)),
            bt(static_cast<std::size_t>(M)), cyc_t(static_cast<std::size_t>(M));
        for (int i = 0; i < M; ++i) {
            const auto iu = static_cast<std::size_t>(i);
            a[iu] = bundle_.g_s2t[iu].forward(xs[iu]);
            cyc_s[iu] = bundle_.g_t2s[iu].forward(a[iu]);
            bt[iu] = bundle_.g_t2s[iu].forward(xt);
            cyc_t[iu] = bundle_.g_s2t[iu].forward(bt[iu]);
        }
        std::vector<std::vector<Var<float>>> cross(static_cast<std::size_t>(M));
        if (ccd_on)
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < M; ++j) {
                    if (j == i) continue;
                    cross[static_cast<std::size_t>(i)].push_back(
                        bundle_.g_t2s[static_cast<std::size_t>(i)].forward(a[static_cast<std::size_t>(j)]));
                }

        // ---- discriminators (see pre-update generator outputs) ----
        if (gan_on) {
            Var<float> dt_real = bundle_.d_target.forward(xt);
            Var<float> dt_loss;
            for (int i = 0; i < M; ++i) {
                Var<float> fake = bundle_.d_target.forward(ad::detach(a[static_cast<std::size_t>(i)]));
                Var<float> term = losses::adversarial_loss(dt_real, fake, Side::discriminator);
                dt_loss = dt_loss.defined() ? ad::add(dt_loss, term) : term;
            }
            dt_loss = ad::scale(dt_loss, cfg_.weights.gan / static_cast<float>(M));
            ad::backward(dt_loss);
            opt_dt_.step();
        }
        for (int i = 0; i < M; ++i) {
            const auto iu = static_cast<std::size_t>(i);
            Var<float> l;
            if (gan_on) {
                Var<float> real = bundle_.d_src[iu].forward(xs[iu]);
                Var<float> fake = bundle_.d_src[iu].forward(ad::detach(bt[iu]));
                l = ad::scale(losses::adversarial_loss(real, fake, Side::discriminator),
                              cfg_.weights.gan);
            }
            if (ccd_on) {
                Var<float> cl = ad::scale(
                    losses::ccd_loss(xs[iu], cross[iu], bundle_.d_src[iu], Side::discriminator),
                    cfg_.weights.ccd);
                l = l.defined() ? ad::add(l, cl) : cl;
            }
            if (l.defined()) {
                ad::backward(l);
                opt_dsrc_[iu].step();
            }
        }
        if (sad_on)
            for (int i = 0; i < M; ++i) {
                const auto iu = static_cast<std::size_t>(i);
                Var<float> l = ad::scale(
                    losses::sad_loss(a, i, bundle_.d_agg[iu], Side::discriminator), cfg_.weights.sad);
                ad::backward(l);
                opt_dagg_[iu].step();
            }

        // ---- generators (one combined step over every translator) ----
        std::vector<losses::PerSourceTerms<float>> ps(static_cast<std::size_t>(M));
        for (int i = 0; i < M; ++i) {
            const auto iu = static_cast<std::size_t>(i);
            if (gan_on) {
                ps[iu].gan_s2t = losses::adversarial_loss(Var<float>{}, bundle_.d_target.forward(a[iu]),
                                                          Side::generator);
                ps[iu].gan_t2s = losses::adversarial_loss(Var<float>{}, bundle_.d_src[iu].forward(bt[iu]),
                                                          Side::generator);
            }
            ps[iu].cyc = ad::add(losses::cycle_loss(xs[iu], cyc_s[iu]), losses::cycle_loss(xt, cyc_t[iu]));
            if (dsc_on) {
                auto fa = bundle_.f.forward(a[iu], cfg_.dsc_detach);
                auto fi = bundle_.f_src[iu].forward(xs[iu]);  // frozen: plain values
                ps[iu].sem = losses::dsc_loss(fa.logits, fi.logits.value());
            }
            if (sad_on) ps[iu].sad = losses::sad_loss(a, i, bundle_.d_agg[iu], Side::generator);
            if (ccd_on) ps[iu].ccd = losses::ccd_loss(xs[iu], cross[iu], bundle_.d_src[iu], Side::generator);
        }
        losses::LossReport<float> rep;
        Var<float> total = losses::total_loss(ps, Var<float>{}, Var<float>{}, cfg_.weights, &rep);
        ad::backward(total);
        opt_gen_.step();
        // Generator-side forwards deposit gradients into discriminator (and,
        // without dsc_detach, segmenter) parameters; clear them.
        bundle_.zero_all_grads();

        accumulate_report(report, rep);
        auto& counter = stage == "1-cyc" ? steps_.stage1_cyc : steps_.stage2;
        ++counter;
    }
}

void Trainer::fsrc_epoch(int round, int epoch, losses::LossReport<float>& report) {
    const int M = cfg_.sources, B = cfg_.batch_size;
    rng::SplitMix64 og = epoch_stream(cfg_.seed, "order", round, "1-fsrc", epoch);
    rng::SplitMix64 cg = epoch_stream(cfg_.seed, "crop", round, "1-fsrc", epoch);  // unused draws: none (full res)

    std::vector<std::vector<int>> perm(static_cast<std::size_t>(M));
    std::vector<std::vector<const TensorF*>> imgs(static_cast<std::size_t>(M));
    std::vector<std::vector<const LabelMap*>> labs(static_cast<std::size_t>(M));
    for (int i = 0; i < M; ++i) {
        const auto iu = static_cast<std::size_t>(i);
        const auto& ds = data_.sources[iu];
        perm[iu] = shuffled(static_cast<int>(ds.samples.size()), og);
        imgs[iu] = image_ptrs(ds);
        for (const auto& s : ds.samples) labs[iu].push_back(&*s.label);
    }
    const int steps = spe_src();
    for (int s = 0; s < steps; ++s) {
        float task_sum = 0;
        for (int i = 0; i < M; ++i) {
            const auto iu = static_cast<std::size_t>(i);
            Var<float> xb = ad::constant(gather_images(imgs[iu], perm[iu], s, B, 0, cg));
            auto yb = gather_labels(labs[iu], perm[iu], s, B);
            auto out = bundle_.f_src[iu].forward(xb);
            Var<float> raw = losses::task_loss(out.logits, yb);
            task_sum += raw.item();
            Var<float> l = ad::scale(raw, cfg_.weights.task);
            ad::backward(l);
            opt_fsrc_[iu].step();
        }
        report.terms["task"] += task_sum / static_cast<float>(M);
        ++steps_.stage1_fsrc;
    }
}

void Trainer::seg_epoch(const Pool& pool, int round, const std::string& stage, int epoch,
                        bool feat_on, losses::LossReport<float>& report) {
    const int B = cfg_.batch_size;
    rng::SplitMix64 og = epoch_stream(cfg_.seed, "order", round, stage, epoch);

    std::vector<int> perm = shuffled(static_cast<int>(pool.images.size()), og);
    std::vector<int> permT;
    std::vector<const TensorF*> tgt_imgs;
    if (feat_on) {
        permT = shuffled(static_cast<int>(data_.target.samples.size()), og);
        tgt_imgs = image_ptrs(data_.target);
    }
    rng::SplitMix64 cg = epoch_stream(cfg_.seed, "crop", round, stage, epoch);  // full res: no draws

    const int steps = spe_union();
    for (int s = 0; s < steps; ++s) {
        Var<float> xb = ad::constant(gather_images(pool.images, perm, s, B, 0, cg));
        auto yb = gather_labels(pool.labels, perm, s, B);
        auto out = bundle_.f.forward(xb);
        Var<float> task = losses::task_loss(out.logits, yb);
        Var<float> feat_term;
        if (feat_on) {
            Var<float> xtb = ad::constant(gather_images(tgt_imgs, permT, s, B, 0, cg));
            auto tgt = bundle_.f.forward(xtb, /*detach_params=*/true);  // graph-free features
            // Discriminator first (alternation: D sees pre-update features).
            Var<float> dl = ad::scale(
                losses::feat_loss(out.feature, tgt.feature, bundle_.d_feat, Side::discriminator),
                cfg_.weights.feat);
            ad::backward(dl);
            opt_df_.step();
            feat_term = losses::feat_loss(out.feature, tgt.feature, bundle_.d_feat, Side::generator);
        }
        losses::LossReport<float> rep;
        Var<float> total = losses::total_loss({}, task, feat_term, cfg_.weights, &rep);
        ad::backward(total);
        opt_f_.step();
        bundle_.zero_all_grads();  // feat term re-forwards D_F: clear its gradients

        accumulate_report(report, rep);
        auto& counter = stage == "1-f" ? steps_.stage1_f
                        : stage == "3" ? steps_.stage3
                                       : steps_.source_only;
        ++counter;
    }
}

Trainer::Pool Trainer::adapted_pool() {
    Pool p;
    FreezeGuard guard(bundle_.params_generators());
    const int B = cfg_.eval_batch;
    for (int i = 0; i < cfg_.sources; ++i) {
        const auto& ds = data_.sources[static_cast<std::size_t>(i)];
        const int N = static_cast<int>(ds.samples.size());
        const int H = ds.manifest.height, W = ds.manifest.width;
        for (int at = 0; at < N; at += B) {
            const int n = std::min(B, N - at);
            TensorF batch({n, 3, H, W});
            for (int b = 0; b < n; ++b)
                std::memcpy(&batch.at4(b, 0, 0, 0), ds.samples[static_cast<std::size_t>(at + b)].image.data(),
                            static_cast<std::size_t>(3) * H * W * sizeof(float));
            Var<float> out = bundle_.g_s2t[static_cast<std::size_t>(i)].forward(ad::constant(batch));
            for (int b = 0; b < n; ++b) {
                TensorF img({3, H, W});
                std::memcpy(img.data(), &out.value().at4(b, 0, 0, 0),
                            static_cast<std::size_t>(3) * H * W * sizeof(float));
                p.storage.push_back(std::move(img));
                p.labels.push_back(&*ds.samples[static_cast<std::size_t>(at + b)].label);
            }
        }
    }
    p.images.reserve(p.storage.size());
    for (const auto& t : p.storage) p.images.push_back(&t);
    return p;
}

Trainer::Pool Trainer::raw_pool() {
    Pool p;
    for (const auto& ds : data_.sources)
        for (const auto& s : ds.samples) {
            p.images.push_back(&s.image);
            p.labels.push_back(&*s.label);
        }
    return p;
}

metrics::IouResult Trainer::evaluate_target() {
    if (!data_.target_eval)
        throw std::runtime_error("trainer: no labeled evaluation split was loaded");
    const auto& ds = *data_.target_eval;
    const int B = cfg_.eval_batch, N = static_cast<int>(ds.samples.size());
    const int H = ds.manifest.height, W = ds.manifest.width;
    metrics::ConfusionMatrix cm(bundle_.cfg.classes);
    for (int at = 0; at < N; at += B) {
        const int n = std::min(B, N - at);
        TensorF batch({n, 3, H, W});
        for (int b = 0; b < n; ++b)
            std::memcpy(&batch.at4(b, 0, 0, 0), ds.samples[static_cast<std::size_t>(at + b)].image.data(),
                        static_cast<std::size_t>(3) * H * W * sizeof(float));
        auto out = bundle_.f.forward(ad::constant(batch), /*detach_params=*/true);
        for (int b = 0; b < n; ++b)
            cm.accumulate(metrics::argmax_labels(out.logits.value(), b),
                          *ds.samples[static_cast<std::size_t>(at + b)].label);
    }
    return metrics::iou(cm);
}

void Trainer::track_best(double miou) {
    if (miou <= best_miou_) return;
    best_miou_ = miou;
    best_f_.clear();
    for (auto& prm : bundle_.params_f()) best_f_.push_back(prm.var.value().clone());
}

void Trainer::restore_best_into_f() {
    if (best_f_.empty()) return;
    auto params = bundle_.params_f();
    for (std::size_t i = 0; i < params.size(); ++i)
        std::memcpy(params[i].var.value().data(), best_f_[i].data(),
                    best_f_[i].numel() * sizeof(float));
}

void Trainer::end_epoch(const Phase& ph, int plan_idx, int epoch,
                        const losses::LossReport<float>& report, double miou) {
    char row[512];
    char miou_str[32] = "";
    if (miou >= 0) std::snprintf(miou_str, sizeof miou_str, "%.6f", miou);
    std::snprintf(row, sizeof row, "%d,%s,%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%s\n",
                  ph.round, ph.stage.c_str(), epoch + 1,
                  static_cast<double>(report_term(report, "gan_s2t")),
                  static_cast<double>(report_term(report, "gan_t2s")),
                  static_cast<double>(report_term(report, "cyc")),
                  static_cast<double>(report_term(report, "dsc")),
                  static_cast<double>(report_term(report, "sad")),
                  static_cast<double>(report_term(report, "ccd")),
                  static_cast<double>(report_term(report, "task")),
                  static_cast<double>(report_term(report, "feat")), miou_str);
    std::FILE* fp = std::fopen((out_dir_ + "/metrics.csv").c_str(), "ab");
    if (!fp) throw std::runtime_error("trainer: cannot append to " + out_dir_ + "/metrics.csv");
    std::fputs(row, fp);
    std::fclose(fp);
    ++rows_;

    if (on_epoch) {
        EpochInfo info;
        info.round = ph.round;
        info.stage = ph.stage;
        info.epoch = epoch + 1;
        info.target_miou = miou;
        on_epoch(info);
    }

    const bool cadence = cfg_.checkpoint_every > 0 && (epoch + 1) % cfg_.checkpoint_every == 0;
    const bool halting = cfg_.halt_after_epochs > 0 && rows_ >= cfg_.halt_after_epochs;
    if (cadence || halting) save_checkpoint(out_dir_ + "/latest.ckpt", plan_idx, epoch + 1);
    if (halting) halted_ = true;
}

void Trainer::save_checkpoint(const std::string& path, int plan_idx, int epochs_done) {
    ckpt::Archive a;
    a.set("config.fnv", fmt_hex64(config_fnv_));
    a.set("train.plan", std::to_string(plan_idx));
    a.set("train.epoch", std::to_string(epochs_done));
    a.set("train.rows", std::to_string(rows_));
    {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", best_miou_);
        a.set("train.best_miou", buf);
    }
    a.set("train.best_valid", best_f_.empty() ? "0" : "1");
    a.set("train.stage1_done", stage1_done_ ? "1" : "0");
    a.set("train.stage2_done", stage2_done_ ? "1" : "0");
    a.set("steps.stage1_cyc", std::to_string(steps_.stage1_cyc));
    a.set("steps.stage1_fsrc", std::to_string(steps_.stage1_fsrc));
    a.set("steps.stage1_f", std::to_string(steps_.stage1_f));
    a.set("steps.stage2", std::to_string(steps_.stage2));
    a.set("steps.stage3", std::to_string(steps_.stage3));
    a.set("steps.source_only", std::to_string(steps_.source_only));
    ckpt::write_bundle(a, bundle_);
    write_adam(a, "gen", opt_gen_);
    write_adam(a, "dt", opt_dt_);
    write_adam(a, "df", opt_df_);
    write_adam(a, "f", opt_f_);
    for (int i = 0; i < cfg_.sources; ++i) {
        const auto iu = static_cast<std::size_t>(i);
        write_adam(a, "dsrc" + std::to_string(i), opt_dsrc_[iu]);
        write_adam(a, "dagg" + std::to_string(i), opt_dagg_[iu]);
        write_adam(a, "fsrc" + std::to_string(i), opt_fsrc_[iu]);
    }
    if (!best_f_.empty()) {
        auto params = bundle_.params_f();
        for (std::size_t i = 0; i < params.size(); ++i) a.add("best." + params[i].name, best_f_[i]);
    }
    ckpt::save_archive(path, a);
}

void Trainer::resume_from(const std::string& ckpt_path, std::uint64_t config_fnv) {
    ckpt::Archive a = ckpt::load_archive(ckpt_path);
    config_fnv_ = config_fnv;
    if (config_fnv != 0 && a.get("config.fnv") != fmt_hex64(config_fnv))
        throw std::runtime_error("resume: checkpoint " + ckpt_path +
                                 " was written under a different configuration");
    const nn::BundleConfig bc = ckpt::config_from_archive(a);
    const nn::BundleConfig& mine = bundle_.cfg;
    if (bc.sources != mine.sources || bc.classes != mine.classes ||
        bc.img_channels != mine.img_channels || bc.gen_base != mine.gen_base ||
        bc.gen_res != mine.gen_res || bc.disc_base != mine.disc_base ||
        bc.disc_layers != mine.disc_layers || bc.seg_base != mine.seg_base ||
        bc.feat_disc_width != mine.feat_disc_width)
        throw std::runtime_error("resume: checkpoint architecture does not match the configuration");
    ckpt::restore_bundle(bundle_, a);
    read_adam(a, "gen", opt_gen_);
    read_adam(a, "dt", opt_dt_);
    read_adam(a, "df", opt_df_);
    read_adam(a, "f", opt_f_);
    for (int i = 0; i < cfg_.sources; ++i) {
        const auto iu = static_cast<std::size_t>(i);
        read_adam(a, "dsrc" + std::to_string(i), opt_dsrc_[iu]);
        read_adam(a, "dagg" + std::to_string(i), opt_dagg_[iu]);
        read_adam(a, "fsrc" + std::to_string(i), opt_fsrc_[iu]);
    }
    resume_plan_ = static_cast<int>(a.get_u64("train.plan"));
    resume_epoch_ = static_cast<int>(a.get_u64("train.epoch"));
    rows_ = static_cast<int>(a.get_u64("train.rows"));
    best_miou_ = a.get_double("train.best_miou");
    stage1_done_ = a.get("train.stage1_done") == "1";
    stage2_done_ = a.get("train.stage2_done") == "1";
    steps_.stage1_cyc = a.get_u64("steps.stage1_cyc");
    steps_.stage1_fsrc = a.get_u64("steps.stage1_fsrc");
    steps_.stage1_f = a.get_u64("steps.stage1_f");
    steps_.stage2 = a.get_u64("steps.stage2");
    steps_.stage3 = a.get_u64("steps.stage3");
    steps_.source_only = a.get_u64("steps.source_only");
    if (a.get("train.best_valid") == "1") {
        best_f_.clear();
        for (auto& prm : bundle_.params_f()) {
            const TensorF* t = a.find_array("best." + prm.name);
            if (!t) throw std::runtime_error("resume: missing best-model array for " + prm.name);
            best_f_.push_back(t->clone());
        }
    }
    // Normalize a position saved exactly at a phase boundary.
    const auto phases = plan();
    while (resume_plan_ < static_cast<int>(phases.size()) &&
           resume_epoch_ >= phases[static_cast<std::size_t>(resume_plan_)].epochs) {
        resume_epoch_ = 0;
        ++resume_plan_;
    }
    // Truncate the metrics log to the checkpointed row count so the resumed
    // run appends exactly the rows the uninterrupted run would have.
    const std::string mpath = out_dir_ + "/metrics.csv";
    if (fs::exists(mpath)) {
        const std::string text = io::read_file(mpath);
        std::string kept;
        std::size_t pos = 0;
        int lines = 0;  // header + rows_
        while (pos < text.size() && lines < rows_ + 1) {
            std::size_t nl = text.find('\n', pos);
            if (nl == std::string::npos) nl = text.size();
            kept += text.substr(pos, nl - pos) + "\n";
            pos = nl + 1;
            ++lines;
        }
        io::atomic_write_file(mpath, kept);
    } else {
        io::atomic_write_file(mpath, kCsvHeader);
    }
}

RunResult run_madan(const cfg::RunConfig& rc, TrainData data, const std::string& out_dir,
                    const std::string& resume_ckpt) {
    TrainConfig tc = TrainConfig::from(rc);
    madan::set_thread_count(rc.threads);

    nn::BundleConfig bc;
    bc.sources = rc.sources;
    bc.classes = data.sources.empty() ? 5 : data.sources[0].manifest.classes;
    bc.img_channels = 3;
    bc.gen_base = rc.gen_base;
    bc.gen_res = rc.gen_res;
    bc.disc_base = rc.disc_base;
    bc.disc_layers = rc.disc_layers;
    bc.seg_base = rc.seg_base;
    bc.feat_disc_width = rc.feat_disc_width;
    bc.seed = rc.seed;

    fs::create_directories(out_dir);
    io::atomic_write_file(out_dir + "/config.resolved.txt", cfg::resolved_text(rc));

    Trainer t(tc, bc, std::move(data), out_dir);
    t.set_config_fingerprint(cfg::config_fingerprint(rc));
    if (!resume_ckpt.empty()) {
        t.resume_from(resume_ckpt, cfg::config_fingerprint(rc));
    } else {
        // Fresh run: reset the metrics log.
        io::atomic_write_file(out_dir + "/metrics.csv", "");
    }
    t.run();

    RunResult r;
    r.best_miou = t.best_miou();
    r.halted = t.halted();
    r.rows = t.rows_written();
    return r;
}

} // namespace madan::train
