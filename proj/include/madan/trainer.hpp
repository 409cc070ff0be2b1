#pragma once

#include "madan/adam.hpp"
#include "madan/checkpoint.hpp"
#include "madan/config.hpp"
#include "madan/datagen.hpp"
#include "madan/losses.hpp"
#include "madan/metrics.hpp"
#include "madan/nn.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace madan::train {

// Schedule knobs, lifted out of RunConfig and validated. Per-stage epoch
// overrides resolve here; sad/ccd freezes clamp to the stage-2 epoch count so
// the invariant 0 <= sad_freeze <= ccd_freeze <= epochs always holds. Adam
// betas are fixed at (0.5, 0.999) for GAN parts, (0.9, 0.999) for segmenters.
struct TrainConfig {
    int sources = 2;
    int stage1_epochs = 20, stage2_epochs = 20, stage3_epochs = 20;
    int batch_size = 8;
    double learning_rate = 1e-4;
    int sad_freeze_epochs = 5, ccd_freeze_epochs = 10;
    int outer_rounds = 2;
    int crop = 48;
    int checkpoint_every = 0;
    int halt_after_epochs = 0;
    int eval_batch = 8;
    std::uint64_t seed = 1;
    std::string mode = "full";
    losses::LossWeights<float> weights;
    bool dsc_detach = true;
    bool f_reinit_stage3 = false;

    static TrainConfig from(const cfg::RunConfig& rc);  // validates
};

struct TrainData {
    std::vector<data::Dataset> sources;        // labeled
    data::Dataset target;                      // labels ignored if present
    std::optional<data::Dataset> target_eval;  // labeled; enables mIoU tracking
};

// Loads <root>/src0..srcM-1, <root>/target, and (if present)
// <root>/target_eval with full integrity verification.
TrainData load_train_data(const std::string& root, int sources);

// Trainer-iteration counts per phase; the exact budget law
// (epochs x ceil(N / batch) per phase, summed over rounds) is testable via
// expected_steps() == steps().
struct StepCounts {
    std::uint64_t stage1_cyc = 0, stage1_fsrc = 0, stage1_f = 0, stage2 = 0, stage3 = 0,
                  source_only = 0;
    std::uint64_t total() const {
        return stage1_cyc + stage1_fsrc + stage1_f + stage2 + stage3 + source_only;
    }
};

struct EpochInfo {
    int round = 0;
    std::string stage;  // "1-cyc", "1-fsrc", "1-f", "2", "3", "so"
    int epoch = 0;      // 1-based within the phase
    double target_miou = -1;  // < 0 when not evaluated
};

// Orchestrates the staged procedure: stage 1 = per-source image translators
// (adversarial + inverse + cycle terms) plus segmenter pretraining; stage 2 =
// translator refinement with the semantic, aggregation, and cross-cycle
// terms under the freeze schedule; stage 3 = segmenter training on the
// regenerated adapted pool with feature-level alignment. Outer rounds repeat
// stages 2-3; stage 1 runs only in round 1. Deterministic given (config,
// data): per-epoch RNG streams are derived functionally from (seed, round,
// stage, epoch), so a resumed run continues bit-identically.
class Trainer {
public:
    Trainer(TrainConfig cfg, nn::BundleConfig bcfg, TrainData data, std::string out_dir);

    // Full procedure per cfg.mode. Honors halt_after_epochs (halted() tells).
    void run();
    // Resume from a checkpoint written by an earlier run() with a matching
    // config fingerprint (pass the fingerprint the CLI computed; 0 skips the
    // check). Call before run().
    void resume_from(const std::string& ckpt_path, std::uint64_t config_fnv);
    // Fingerprint stamped into checkpoints this trainer writes.
    void set_config_fingerprint(std::uint64_t v) { config_fnv_ = v; }

    // Individual stages (run() composes these). stage2/stage3 require the
    // earlier stage to have completed in this trainer or via resume.
    void stage1();
    void stage2(int round);
    void stage3(int round);

    nn::ModelBundle<float>& bundle() { return bundle_; }
    const StepCounts& steps() const { return steps_; }
    StepCounts expected_steps() const;
    bool halted() const { return halted_; }
    double best_miou() const { return best_miou_; }
    int rows_written() const { return rows_; }

    // Per-class IoU + mIoU of bundle().f on target_eval.
    metrics::IouResult evaluate_target();

    // Test hook: called after every epoch row is appended.
    std::function<void(const EpochInfo&)> on_epoch;

private:
    struct Phase;  // internal plan item

    TrainConfig cfg_;
    TrainData data_;
    std::string out_dir_;
    std::uint64_t config_fnv_ = 0;
    nn::ModelBundle<float> bundle_;

    nn::Adam<float> opt_gen_, opt_dt_, opt_df_, opt_f_;
    std::vector<nn::Adam<float>> opt_dsrc_, opt_dagg_, opt_fsrc_;

    StepCounts steps_;
    int rows_ = 0;
    bool halted_ = false;
    double best_miou_ = -1;
    std::vector<TensorF> best_f_;  // snapshot of f params at best mIoU
    int resume_plan_ = 0, resume_epoch_ = 0;  // fast-forward point
    bool stage1_done_ = false, stage2_done_ = false;

    // Adapted source pool (images rendered through the current translators,
    // labels shared with the originating sources).
    struct Pool {
        std::vector<const TensorF*> images;
        std::vector<const LabelMap*> labels;
        std::vector<TensorF> storage;  // owns adapted images
    };

    std::vector<Phase> plan() const;
    void run_phase(const Phase& ph, int plan_idx, int epoch_offset);
    void pixel_epoch(int round, const std::string& stage, int epoch, bool dsc_on, bool sad_on,
                     bool ccd_on, losses::LossReport<float>& report);
    void fsrc_epoch(int round, int epoch, losses::LossReport<float>& report);
    void seg_epoch(const Pool& pool, int round, const std::string& stage, int epoch, bool feat_on,
                   losses::LossReport<float>& report);
    Pool adapted_pool();
    Pool raw_pool();
    void end_epoch(const Phase& ph, int plan_idx, int epoch, const losses::LossReport<float>& report,
                   double miou);
    void save_checkpoint(const std::string& path, int plan_idx, int epochs_done);
    void write_metrics_header_if_new();
    void track_best(double miou);
    void restore_best_into_f();

    int spe_src() const;    // steps per epoch, per-source phases
    int spe_union() const;  // steps per epoch, pooled segmenter phases
};

// End-to-end entry point used by the CLI: builds the bundle, runs, writes
// final.ckpt and best.ckpt, returns the trainer for inspection.
struct RunResult {
    double best_miou = -1;
    bool halted = false;
    int rows = 0;
};
RunResult run_madan(const cfg::RunConfig& rc, TrainData data, const std::string& out_dir,
                    const std::string& resume_ckpt = "");

} // namespace madan::train
