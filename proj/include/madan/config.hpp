#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace madan::cfg {

// Every knob of the pipeline, flat. A config file is `key=value` lines
// (# comments allowed); command-line overrides reuse the same keys. After
// parsing, resolution is total: resolved_text() dumps every key with its
// effective value and is echoed to config.resolved.txt by training runs.
struct RunConfig {
    // run
    std::string mode = "full";  // full | cycle_only | source_only
    std::uint64_t seed = 1;
    int threads = 1;

    // data generation
    int sources = 2;
    std::vector<double> source_shifts = {0.4, 0.8};
    double target_shift = 0.6;
    int images_per_domain = 200;
    int eval_images = 64;     // labeled target split used for mIoU tracking
    int heldout_images = 16;  // per-source split used by `translate`
    int image_size = 64;
    std::uint64_t data_seed = 7;

    // model widths
    int gen_base = 32;
    int gen_res = 4;
    int disc_base = 32;
    int disc_layers = 4;
    int seg_base = 16;
    int feat_disc_width = 64;

    // schedule. epochs applies to every stage unless a per-stage override
    // (>= 0) is set. Adam betas are fixed: (0.5, 0.999) for GAN parts,
    // (0.9, 0.999) for segmenters.
    int epochs = 20;
    int stage1_epochs = -1;
    int stage2_epochs = -1;
    int stage3_epochs = -1;
    int batch_size = 8;
    double learning_rate = 1e-4;
    int sad_freeze_epochs = 5;
    int ccd_freeze_epochs = 10;
    int outer_rounds = 2;
    int crop = 48;
    int checkpoint_every = 0;   // extra checkpoints every k epochs (0 = phase ends only)
    int halt_after_epochs = 0;  // stop cleanly after k metric rows (0 = never); simulates interruption
    int eval_batch = 8;

    // loss weights
    double w_gan = 1, w_cyc = 1, w_sem = 1, w_sad = 1, w_ccd = 1, w_task = 1, w_feat = 1;

    // interpretation flags
    bool dsc_detach = true;        // stop-gradient into F when computing the semantic term
    bool f_reinit_stage3 = false;  // reinitialize F at stage-3 entry instead of continuing
};

// Parse/apply one key. Unknown key or malformed value -> error naming it.
void apply_kv(RunConfig& c, const std::string& key, const std::string& value);
RunConfig parse_config_text(const std::string& text, RunConfig base, const std::string& context);
RunConfig load_config_file(const std::string& path, RunConfig base);

// Full dump, fixed key order; parse(resolved_text(c)) == c.
std::string resolved_text(const RunConfig& c);

// Hash used to pair checkpoints with configs on resume. halt_after_epochs
// and checkpoint_every are excluded (they may legitimately differ between
// the interrupted and the resuming invocation).
std::uint64_t config_fingerprint(const RunConfig& c);

// Ablation flags: comma-separated subset of {no_sad, no_ccd, no_dsc, no_feat};
// each zeroes the corresponding weight. Unknown flag -> error.
void apply_ablation(RunConfig& c, const std::string& flags);

// Evenly spread shifts for M sources (the 2-source default is {0.4, 0.8}).
std::vector<double> default_shifts(int sources);

// Range/consistency checks; throws with the offending key in the message.
void validate(const RunConfig& c);

} // namespace madan::cfg
