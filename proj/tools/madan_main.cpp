// madan: multi-source adversarial domain aggregation for semantic
// segmentation, desk scale. Subcommands: gen-data, train, eval, translate,
// ablate. Config is flat key=value text; any key can be overridden on the
// command line as --key value (dashes map to underscores).

#include "CLI11.hpp"

#include "madan/checkpoint.hpp"
#include "madan/config.hpp"
#include "madan/datagen.hpp"
#include "madan/image_io.hpp"
#include "madan/metrics.hpp"
#include "madan/nn.hpp"
#include "madan/rng.hpp"
#include "madan/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace madan;

namespace {

cfg::RunConfig load_base_config(const std::string& path) {
    cfg::RunConfig rc;
    if (!path.empty()) rc = cfg::parse_config_text(io::read_file(path), rc, path);
    return rc;
}

// Leftover tokens are --key value (or --key=value) config overrides.
void apply_overrides(cfg::RunConfig& rc, const std::vector<std::string>& extras) {
    for (std::size_t i = 0; i < extras.size(); ++i) {
        std::string tok = extras[i];
        if (tok.rfind("--", 0) != 0)
            throw std::runtime_error("cli: unexpected argument '" + tok +
                                     "' (overrides take the form --key value)");
        tok = tok.substr(2);
        std::string key, value;
        const auto eq = tok.find('=');
        if (eq != std::string::npos) {
            key = tok.substr(0, eq);
            value = tok.substr(eq + 1);
        } else {
            key = tok;
            if (i + 1 >= extras.size())
                throw std::runtime_error("cli: override '--" + key + "' is missing a value");
            value = extras[++i];
        }
        for (auto& ch : key)
            if (ch == '-') ch = '_';
        cfg::apply_kv(rc, key, value);
    }
}

// `--sources M` without explicit shifts: spread the default shift ladder.
void fix_default_shifts(cfg::RunConfig& rc) {
    const std::vector<double> builtin = cfg::RunConfig{}.source_shifts;
    if (rc.source_shifts == builtin && rc.sources != static_cast<int>(builtin.size()))
        rc.source_shifts = cfg::default_shifts(rc.sources);
}

void print_manifest_summary(const std::string& dir, const data::DatasetManifest& m) {
    std::printf("%s: domain_id=%s n=%d size=%dx%d classes=%d labeled=%d spec=%016llx\n",
                dir.c_str(), m.domain_id.c_str(), m.n, m.height, m.width, m.classes,
                m.labeled ? 1 : 0, static_cast<unsigned long long>(m.spec_fingerprint));
}

std::uint64_t layout_seed_for(std::uint64_t data_seed, const std::string& tag) {
    return rng::substream(data_seed, "layouts/" + tag).next_u64();
}

int cmd_gen_data(const std::string& out, const cfg::RunConfig& rc, bool force) {
    if (fs::exists(out) && !fs::is_empty(out)) {
        if (!force)
            throw std::runtime_error("gen-data: output directory '" + out +
                                     "' exists and is not empty (pass --force to replace it)");
        fs::remove_all(out);
    }
    fs::create_directories(out);

    const int S = rc.image_size;
    for (int i = 0; i < rc.sources; ++i) {
        const std::string id = "src" + std::to_string(i);
        const data::DomainSpec spec =
            data::sample_domain_spec(id, rc.data_seed, rc.source_shifts[static_cast<std::size_t>(i)]);
        auto m = data::generate_dataset(spec, rc.images_per_domain, out + "/" + id, true,
                                        layout_seed_for(rc.data_seed, id), S, S);
        print_manifest_summary(out + "/" + id, m);
        auto hm = data::generate_dataset(spec, rc.heldout_images, out + "/heldout/" + id, true,
                                         layout_seed_for(rc.data_seed, "heldout/" + id), S, S);
        print_manifest_summary(out + "/heldout/" + id, hm);
    }
    const data::DomainSpec tspec = data::sample_domain_spec("target", rc.data_seed, rc.target_shift);
    auto tm = data::generate_dataset(tspec, rc.images_per_domain, out + "/target", false,
                                     layout_seed_for(rc.data_seed, "target"), S, S);
    print_manifest_summary(out + "/target", tm);
    auto em = data::generate_dataset(tspec, rc.eval_images, out + "/target_eval", true,
                                     layout_seed_for(rc.data_seed, "target_eval"), S, S);
    print_manifest_summary(out + "/target_eval", em);
    return 0;
}

int cmd_train(const std::string& data_root, const std::string& out, const cfg::RunConfig& rc,
              const std::string& resume) {
    train::TrainData data = train::load_train_data(data_root, rc.sources);
    train::RunResult r = train::run_madan(rc, std::move(data), out, resume);
    if (r.halted)
        std::printf("halted after %d epochs; resume with --resume %s/latest.ckpt\n", r.rows,
                    out.c_str());
    else if (r.best_miou >= 0)
        std::printf("done: %d epoch rows, best target mIoU %.4f (best.ckpt)\n", r.rows, r.best_miou);
    else
        std::printf("done: %d epoch rows (no labeled evaluation split; best.ckpt = final)\n", r.rows);
    return 0;
}

std::vector<std::string> class_names_for(int classes) {
    std::vector<std::string> names;
    if (classes == data::kClasses)
        names.assign(data::kClassNames, data::kClassNames + data::kClasses);
    else
        for (int k = 0; k < classes; ++k) names.push_back("class" + std::to_string(k));
    return names;
}

nn::ModelBundle<float> load_bundle(const std::string& ckpt_path) {
    const ckpt::Archive a = ckpt::load_archive(ckpt_path);
    nn::ModelBundle<float> b = nn::init_bundle<float>(ckpt::config_from_archive(a));
    ckpt::restore_bundle(b, a);
    auto all = b.params_all();
    nn::set_requires_grad(all, false);  // inference only: no graphs
    return b;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& out_csv,
             int classes_flag) {
    nn::ModelBundle<float> b = load_bundle(ckpt_path);
    if (classes_flag >= 0 && classes_flag != b.cfg.classes)
        throw std::runtime_error("eval: --classes " + std::to_string(classes_flag) +
                                 " does not match the checkpoint (" + std::to_string(b.cfg.classes) +
                                 " classes)");
    const data::Dataset ds = data::load_dataset(data_dir);
    if (!ds.manifest.labeled)
        throw std::runtime_error("eval: dataset " + data_dir +
                                 " has no labels; evaluation requires a labeled dataset");
    if (ds.manifest.classes != b.cfg.classes)
        throw std::runtime_error("eval: dataset " + data_dir + " has " +
                                 std::to_string(ds.manifest.classes) + " classes, checkpoint has " +
                                 std::to_string(b.cfg.classes));

    const int B = 8, N = static_cast<int>(ds.samples.size());
    const int H = ds.manifest.height, W = ds.manifest.width;
    metrics::ConfusionMatrix cm(b.cfg.classes);
    for (int at = 0; at < N; at += B) {
        const int n = std::min(B, N - at);
        TensorF batch({n, 3, H, W});
        for (int k = 0; k < n; ++k)
            std::memcpy(&batch.at4(k, 0, 0, 0), ds.samples[static_cast<std::size_t>(at + k)].image.data(),
                        static_cast<std::size_t>(3) * H * W * sizeof(float));
        auto out = b.f.forward(ad::constant(batch));
        for (int k = 0; k < n; ++k)
            cm.accumulate(metrics::argmax_labels(out.logits.value(), k),
                          *ds.samples[static_cast<std::size_t>(at + k)].label);
    }
    const std::string csv = metrics::report(cm, class_names_for(b.cfg.classes));
    io::atomic_write_file(out_csv, csv);
    std::fputs(csv.c_str(), stdout);
    return 0;
}

int cmd_translate(const std::string& ckpt_path, const std::string& data_root, const std::string& out,
                  int n) {
    if (n < 1) throw std::runtime_error("translate: n must be >= 1");
    nn::ModelBundle<float> b = load_bundle(ckpt_path);
    fs::create_directories(out);
    for (int i = 0; i < b.cfg.sources; ++i) {
        const std::string id = "src" + std::to_string(i);
        const data::Dataset ds = data::load_dataset(data_root + "/" + id);
        const int N = static_cast<int>(ds.samples.size());
        int take = n;
        if (take > N) {
            std::fprintf(stderr, "translate: %s has only %d images; clamping n from %d\n",
                         id.c_str(), N, n);
            take = N;
        }
        const int H = ds.manifest.height, W = ds.manifest.width;
        TensorF batch({take, 3, H, W});
        for (int k = 0; k < take; ++k)
            std::memcpy(&batch.at4(k, 0, 0, 0), ds.samples[static_cast<std::size_t>(k)].image.data(),
                        static_cast<std::size_t>(3) * H * W * sizeof(float));
        const auto iu = static_cast<std::size_t>(i);
        const TensorF adapted = b.g_s2t[iu].forward(ad::constant(batch)).value();
        const TensorF roundtrip = b.g_t2s[iu].forward(ad::constant(adapted)).value();

        double l1 = 0;
        for (int k = 0; k < take; ++k) {
            TensorF grid({3, H, 3 * W});
            const TensorF* panels[3] = {&batch, &adapted, &roundtrip};
            for (int p = 0; p < 3; ++p)
                for (int c = 0; c < 3; ++c)
                    for (int y = 0; y < H; ++y)
                        for (int x = 0; x < W; ++x)
                            grid[(static_cast<std::size_t>(c) * H + y) * (3 * W) + p * W + x] =
                                panels[p]->at4(k, c, y, x);
            io::write_ppm(out + "/grid_" + id + "_" + std::to_string(k) + ".ppm", grid);
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x)
                        l1 += std::abs(batch.at4(k, c, y, x) - roundtrip.at4(k, c, y, x));
        }
        l1 /= static_cast<double>(take) * 3 * H * W;
        std::printf("%s: wrote %d grids, mean round-trip L1 = %.6f\n", id.c_str(), take, l1);
    }
    return 0;
}

struct AblateRow {
    const char* label;
    const char* flags;  // comma list for apply_ablation; empty = full model
    const char* dir;
};

constexpr AblateRow kAblateRows[] = {
    {"baseline", "no_sad,no_ccd,no_dsc,no_feat", "baseline"},
    {"+SAD", "no_ccd,no_dsc,no_feat", "sad"},
    {"+CCD", "no_sad,no_dsc,no_feat", "ccd"},
    {"+SAD+CCD", "no_dsc,no_feat", "sad_ccd"},
    {"+SAD+DSC", "no_ccd,no_feat", "sad_dsc"},
    {"+CCD+DSC", "no_sad,no_feat", "ccd_dsc"},
    {"+SAD+CCD+DSC", "no_feat", "sad_ccd_dsc"},
    {"+SAD+CCD+DSC+Feat", "", "sad_ccd_dsc_feat"},
};

int cmd_ablate(const std::string& data_root, const std::string& out, const cfg::RunConfig& base) {
    fs::create_directories(out);
    std::string csv = "configuration,best_miou\n";
    for (const AblateRow& row : kAblateRows) {
        cfg::RunConfig rc = base;
        if (row.flags[0] != '\0') cfg::apply_ablation(rc, row.flags);
        std::printf("=== %s ===\n", row.label);
        std::fflush(stdout);
        train::TrainData data = train::load_train_data(data_root, rc.sources);
        train::RunResult r = train::run_madan(rc, std::move(data), out + "/" + row.dir);
        char line[128];
        std::snprintf(line, sizeof line, "%s,%.6f\n", row.label, r.best_miou);
        csv += line;
        std::printf("%s: best target mIoU %.4f\n", row.label, r.best_miou);
        std::fflush(stdout);
    }
    io::atomic_write_file(out + "/ablation.csv", csv);
    std::fputs(csv.c_str(), stdout);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-source adversarial domain aggregation for semantic segmentation"};
    app.require_subcommand(1);

    std::string config_path, out, data_root, ckpt_path, resume, ablate_flags;
    std::uint64_t seed = 0;
    int sources = 0, n_translate = 4, classes_flag = -1;
    bool force = false;

    auto* g = app.add_subcommand("gen-data", "generate the multi-domain synthetic datasets");
    g->add_option("--config", config_path, "key=value config file");
    g->add_option("--out", out, "output root directory")->required();
    g->add_option("--seed", seed, "data seed (maps to data_seed)");
    g->add_option("--sources", sources, "number of source domains");
    g->add_flag("--force", force, "replace an existing non-empty output directory");
    g->allow_extras();

    auto* t = app.add_subcommand("train", "run the staged training procedure");
    t->add_option("--config", config_path, "key=value config file");
    t->add_option("--data", data_root, "dataset root from gen-data")->required();
    t->add_option("--out", out, "run output directory")->required();
    t->add_option("--seed", seed, "training seed");
    t->add_option("--sources", sources, "number of source domains");
    t->add_option("--ablate", ablate_flags, "comma list: no_sad,no_ccd,no_dsc,no_feat");
    t->add_option("--resume", resume, "checkpoint to resume from");
    t->allow_extras();

    auto* e = app.add_subcommand("eval", "per-class IoU + mIoU of a checkpointed segmenter");
    e->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    e->add_option("--data", data_root, "labeled dataset directory")->required();
    e->add_option("--out", out, "output CSV path (default eval.csv)");
    e->add_option("--classes", classes_flag, "expected class count (checked against checkpoint)");

    auto* x = app.add_subcommand("translate", "export source|adapted|round-trip image grids");
    x->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    x->add_option("--data", data_root, "dataset root containing src<i> directories")->required();
    x->add_option("--out", out, "output directory for grids")->required();
    x->add_option("--n", n_translate, "grids per source (clamped to dataset size)");

    auto* a = app.add_subcommand("ablate", "run the 8-row ablation sweep");
    a->add_option("--config", config_path, "key=value config file");
    a->add_option("--data", data_root, "dataset root from gen-data")->required();
    a->add_option("--out", out, "sweep output directory")->required();
    a->add_option("--seed", seed, "training seed");
    a->allow_extras();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        return app.exit(err);
    }

    try {
        if (g->parsed()) {
            cfg::RunConfig rc = load_base_config(config_path);
            if (g->count("--sources")) cfg::apply_kv(rc, "sources", std::to_string(sources));
            apply_overrides(rc, g->remaining());
            if (g->count("--seed")) rc.data_seed = seed;
            fix_default_shifts(rc);
            cfg::validate(rc);
            return cmd_gen_data(out, rc, force);
        }
        if (t->parsed()) {
            cfg::RunConfig rc = load_base_config(config_path);
            if (t->count("--sources")) cfg::apply_kv(rc, "sources", std::to_string(sources));
            apply_overrides(rc, t->remaining());
            if (t->count("--seed")) rc.seed = seed;
            fix_default_shifts(rc);
            if (!ablate_flags.empty()) cfg::apply_ablation(rc, ablate_flags);
            cfg::validate(rc);
            return cmd_train(data_root, out, rc, resume);
        }
        if (e->parsed()) return cmd_eval(ckpt_path, data_root, out.empty() ? "eval.csv" : out, classes_flag);
        if (x->parsed()) return cmd_translate(ckpt_path, data_root, out, n_translate);
        if (a->parsed()) {
            cfg::RunConfig rc = load_base_config(config_path);
            apply_overrides(rc, a->remaining());
            if (a->count("--seed")) rc.seed = seed;
            fix_default_shifts(rc);
            cfg::validate(rc);
            return cmd_ablate(data_root, out, rc);
        }
    } catch (const std::exception& err) {
        std::fprintf(stderr, "madan: %s\n", err.what());
        return 1;
    }
    return 0;
}
