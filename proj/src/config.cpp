#include "madan/config.hpp"

#include "madan/image_io.hpp"
#include "madan/rng.hpp"

#include <cstdio>
#include <cstdlib>
#include <stdexcept>

namespace madan::cfg {

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double to_double(const std::string& key, const std::string& v) {
    char* end = nullptr;
    const double x = std::strtod(v.c_str(), &end);
    if (end == v.c_str() || *end != '\0')
        throw std::runtime_error("config: key '" + key + "' expects a number, got '" + v + "'");
    return x;
}

int to_int(const std::string& key, const std::string& v) {
    char* end = nullptr;
    const long x = std::strtol(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0')
        throw std::runtime_error("config: key '" + key + "' expects an integer, got '" + v + "'");
    return static_cast<int>(x);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    char* end = nullptr;
    const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0')
        throw std::runtime_error("config: key '" + key + "' expects an unsigned integer, got '" + v + "'");
    return x;
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw std::runtime_error("config: key '" + key + "' expects 0/1, got '" + v + "'");
}

std::vector<double> to_double_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos <= v.size()) {
        std::size_t comma = v.find(',', pos);
        if (comma == std::string::npos) comma = v.size();
        out.push_back(to_double(key, v.substr(pos, comma - pos)));
        pos = comma + 1;
        if (comma == v.size()) break;
    }
    return out;
}

} // namespace

void apply_kv(RunConfig& c, const std::string& key, const std::string& value) {
    if (key == "mode") c.mode = value;
    else if (key == "seed") c.seed = to_u64(key, value);
    else if (key == "threads") c.threads = to_int(key, value);
    else if (key == "sources") c.sources = to_int(key, value);
    else if (key == "source_shifts") c.source_shifts = to_double_list(key, value);
    else if (key == "target_shift") c.target_shift = to_double(key, value);
    else if (key == "images_per_domain") c.images_per_domain = to_int(key, value);
    else if (key == "eval_images") c.eval_images = to_int(key, value);
    else if (key == "heldout_images") c.heldout_images = to_int(key, value);
    else if (key == "image_size") c.image_size = to_int(key, value);
    else if (key == "data_seed") c.data_seed = to_u64(key, value);
    else if (key == "gen_base") c.gen_base = to_int(key, value);
    else if (key == "gen_res") c.gen_res = to_int(key, value);
    else if (key == "disc_base") c.disc_base = to_int(key, value);
    else if (key == "disc_layers") c.disc_layers = to_int(key, value);
    else if (key == "seg_base") c.seg_base = to_int(key, value);
    else if (key == "feat_disc_width") c.feat_disc_width = to_int(key, value);
    else if (key == "epochs") c.epochs = to_int(key, value);
    else if (key == "stage1_epochs") c.stage1_epochs = to_int(key, value);
    else if (key == "stage2_epochs") c.stage2_epochs = to_int(key, value);
    else if (key == "stage3_epochs") c.stage3_epochs = to_int(key, value);
    else if (key == "batch_size") c.batch_size = to_int(key, value);
    else if (key == "learning_rate") c.learning_rate = to_double(key, value);
    else if (key == "sad_freeze_epochs") c.sad_freeze_epochs = to_int(key, value);
    else if (key == "ccd_freeze_epochs") c.ccd_freeze_epochs = to_int(key, value);
    else if (key == "outer_rounds") c.outer_rounds = to_int(key, value);
    else if (key == "crop") c.crop = to_int(key, value);
    else if (key == "checkpoint_every") c.checkpoint_every = to_int(key, value);
    else if (key == "halt_after_epochs") c.halt_after_epochs = to_int(key, value);
    else if (key == "eval_batch") c.eval_batch = to_int(key, value);
    else if (key == "w_gan") c.w_gan = to_double(key, value);
    else if (key == "w_cyc") c.w_cyc = to_double(key, value);
    else if (key == "w_sem") c.w_sem = to_double(key, value);
    else if (key == "w_sad") c.w_sad = to_double(key, value);
    else if (key == "w_ccd") c.w_ccd = to_double(key, value);
    else if (key == "w_task") c.w_task = to_double(key, value);
    else if (key == "w_feat") c.w_feat = to_double(key, value);
    else if (key == "dsc_detach") c.dsc_detach = to_bool(key, value);
    else if (key == "f_reinit_stage3") c.f_reinit_stage3 = to_bool(key, value);
    else throw std::runtime_error("config: unknown key '" + key + "'");
}

RunConfig parse_config_text(const std::string& text, RunConfig base, const std::string& context) {
    std::size_t pos = 0;
    int lineno = 0;
    while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        std::string line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        // trim leading spaces
        std::size_t b = line.find_first_not_of(" \t");
        if (b == std::string::npos) continue;
        line = line.substr(b);
        if (line.empty() || line[0] == '#') continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(context + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
        auto trim = [](std::string s) {
            const std::size_t a = s.find_first_not_of(" \t");
            if (a == std::string::npos) return std::string();
            const std::size_t z = s.find_last_not_of(" \t");
            return s.substr(a, z - a + 1);
        };
        try {
            apply_kv(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const std::exception& e) {
            throw std::runtime_error(context + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return base;
}

RunConfig load_config_file(const std::string& path, RunConfig base) {
    return parse_config_text(io::read_file(path), std::move(base), path);
}

std::string resolved_text(const RunConfig& c) {
    std::string s;
    s += "mode=" + c.mode + "\n";
    s += "seed=" + std::to_string(c.seed) + "\n";
    s += "threads=" + std::to_string(c.threads) + "\n";
    s += "sources=" + std::to_string(c.sources) + "\n";
    s += "source_shifts=";
    for (std::size_t i = 0; i < c.source_shifts.size(); ++i)
        s += (i ? "," : "") + fmt_double(c.source_shifts[i]);
    s += "\n";
    s += "target_shift=" + fmt_double(c.target_shift) + "\n";
    s += "images_per_domain=" + std::to_string(c.images_per_domain) + "\n";
    s += "eval_images=" + std::to_string(c.eval_images) + "\n";
    s += "heldout_images=" + std::to_string(c.heldout_images) + "\n";
    s += "image_size=" + std::to_string(c.image_size) + "\n";
    s += "data_seed=" + std::to_string(c.data_seed) + "\n";
    s += "gen_base=" + std::to_string(c.gen_base) + "\n";
    s += "gen_res=" + std::to_string(c.gen_res) + "\n";
    s += "disc_base=" + std::to_string(c.disc_base) + "\n";
    s += "disc_layers=" + std::to_string(c.disc_layers) + "\n";
    s += "seg_base=" + std::to_string(c.seg_base) + "\n";
    s += "feat_disc_width=" + std::to_string(c.feat_disc_width) + "\n";
    s += "epochs=" + std::to_string(c.epochs) + "\n";
    s += "stage1_epochs=" + std::to_string(c.stage1_epochs) + "\n";
    s += "stage2_epochs=" + std::to_string(c.stage2_epochs) + "\n";
    s += "stage3_epochs=" + std::to_string(c.stage3_epochs) + "\n";
    s += "batch_size=" + std::to_string(c.batch_size) + "\n";
    s += "learning_rate=" + fmt_double(c.learning_rate) + "\n";
    s += "sad_freeze_epochs=" + std::to_string(c.sad_freeze_epochs) + "\n";
    s += "ccd_freeze_epochs=" + std::to_string(c.ccd_freeze_epochs) + "\n";
    s += "outer_rounds=" + std::to_string(c.outer_rounds) + "\n";
    s += "crop=" + std::to_string(c.crop) + "\n";
    s += "checkpoint_every=" + std::to_string(c.checkpoint_every) + "\n";
    s += "halt_after_epochs=" + std::to_string(c.halt_after_epochs) + "\n";
    s += "eval_batch=" + std::to_string(c.eval_batch) + "\n";
    s += "w_gan=" + fmt_double(c.w_gan) + "\n";
    s += "w_cyc=" + fmt_double(c.w_cyc) + "\n";
    s += "w_sem=" + fmt_double(c.w_sem) + "\n";
    s += "w_sad=" + fmt_double(c.w_sad) + "\n";
    s += "w_ccd=" + fmt_double(c.w_ccd) + "\n";
    s += "w_task=" + fmt_double(c.w_task) + "\n";
    s += "w_feat=" + fmt_double(c.w_feat) + "\n";
    s += "dsc_detach=" + std::string(c.dsc_detach ? "1" : "0") + "\n";
    s += "f_reinit_stage3=" + std::string(c.f_reinit_stage3 ? "1" : "0") + "\n";
    return s;
}

std::uint64_t config_fingerprint(const RunConfig& c) {
    RunConfig canon = c;
    canon.halt_after_epochs = 0;
    canon.checkpoint_every = 0;
    return rng::fnv1a64(resolved_text(canon));
}

void apply_ablation(RunConfig& c, const std::string& flags) {
    std::size_t pos = 0;
    while (pos <= flags.size()) {
        std::size_t comma = flags.find(',', pos);
        if (comma == std::string::npos) comma = flags.size();
        const std::string f = flags.substr(pos, comma - pos);
        pos = comma + 1;
        if (f.empty() && comma == flags.size()) break;
        if (f == "no_sad") c.w_sad = 0;
        else if (f == "no_ccd") c.w_ccd = 0;
        else if (f == "no_dsc") c.w_sem = 0;
        else if (f == "no_feat") c.w_feat = 0;
        else throw std::runtime_error("config: unknown ablation flag '" + f + "' (expected no_sad, no_ccd, no_dsc, no_feat)");
        if (comma == flags.size()) break;
    }
}

std::vector<double> default_shifts(int sources) {
    std::vector<double> s(static_cast<std::size_t>(sources));
    for (int i = 0; i < sources; ++i)
        s[static_cast<std::size_t>(i)] =
            sources == 1 ? 0.6 : 0.4 + 0.4 * i / (sources - 1);
    return s;
}

void validate(const RunConfig& c) {
    auto fail = [](const std::string& m) { throw std::runtime_error("config: " + m); };
    if (c.mode != "full" && c.mode != "cycle_only" && c.mode != "source_only")
        fail("mode must be full, cycle_only, or source_only, got '" + c.mode + "'");
    if (c.sources < 1) fail("sources must be >= 1");
    if (c.source_shifts.size() != static_cast<std::size_t>(c.sources))
        fail("source_shifts lists " + std::to_string(c.source_shifts.size()) +
             " values for " + std::to_string(c.sources) + " sources");
    for (double s : c.source_shifts)
        if (!(s >= 0 && s <= 1)) fail("source_shifts values must be in [0,1]");
    if (!(c.target_shift >= 0 && c.target_shift <= 1)) fail("target_shift must be in [0,1]");
    if (c.images_per_domain < 1) fail("images_per_domain must be >= 1");
    if (c.eval_images < 0 || c.heldout_images < 0) fail("eval/heldout image counts must be >= 0");
    if (c.image_size < 16 || c.image_size % 8 != 0) fail("image_size must be >= 16 and divisible by 8");
    if (c.epochs < 0) fail("epochs must be >= 0");
    for (int e : {c.stage1_epochs, c.stage2_epochs, c.stage3_epochs})
        if (e < -1) fail("per-stage epoch overrides must be -1 (inherit) or >= 0");
    if (c.batch_size < 1) fail("batch_size must be >= 1");
    if (!(c.learning_rate > 0)) fail("learning_rate must be > 0");
    if (c.sad_freeze_epochs < 0 || c.ccd_freeze_epochs < 0) fail("freeze epochs must be >= 0");
    if (c.sad_freeze_epochs > c.ccd_freeze_epochs)
        fail("sad_freeze_epochs must be <= ccd_freeze_epochs");
    if (c.outer_rounds < 1) fail("outer_rounds must be >= 1");
    if (c.crop < 16 || c.crop % 8 != 0) fail("crop must be >= 16 and divisible by 8");
    if (c.crop > c.image_size) fail("crop must not exceed image_size");
    if (c.checkpoint_every < 0 || c.halt_after_epochs < 0) fail("cadence knobs must be >= 0");
    if (c.eval_batch < 1) fail("eval_batch must be >= 1");
    for (double w : {c.w_gan, c.w_cyc, c.w_sem, c.w_sad, c.w_ccd, c.w_task, c.w_feat})
        if (!(w >= 0)) fail("loss weights must be >= 0");
    if (c.threads < 0) fail("threads must be >= 0");
    if (c.gen_base < 1 || c.gen_res < 0 || c.disc_base < 1 || c.disc_layers < 1 ||
        c.seg_base < 1 || c.feat_disc_width < 1)
        fail("model widths must be positive");
}

} // namespace madan::cfg
