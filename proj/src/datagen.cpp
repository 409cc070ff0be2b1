#include "madan/datagen.hpp"

#include "madan/image_io.hpp"
#include "madan/parallel.hpp"
#include "madan/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <stdexcept>

namespace madan::data {

namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

const std::array<std::array<std::uint8_t, 3>, kClasses> kCanonicalPalette = {{
    {90, 90, 95},    // road
    {70, 130, 200},  // sky
    {150, 110, 90},  // building
    {200, 40, 40},   // car
    {60, 140, 60},   // vegetation
}};

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt_hex64(std::uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

double parse_double(const std::string& s, const std::string& context) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0')
        throw std::runtime_error(context + ": bad numeric value '" + s + "'");
    return v;
}

std::uint64_t parse_u64(const std::string& s, const std::string& context, int base = 10) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s.c_str(), &end, base);
    if (end == s.c_str() || *end != '\0')
        throw std::runtime_error(context + ": bad integer value '" + s + "'");
    return v;
}

// key=value lines in order; returns pairs to preserve duplicates/order.
std::vector<std::pair<std::string, std::string>> parse_kv(const std::string& text,
                                                          const std::string& context) {
    std::vector<std::pair<std::string, std::string>> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        std::string line = text.substr(pos, nl - pos);
        pos = nl + 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(context + ": malformed line '" + line + "'");
        out.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return out;
}

} // namespace

bool operator==(const DomainSpec& a, const DomainSpec& b) {
    return a.domain_id == b.domain_id && a.class_palette == b.class_palette &&
           a.noise_sigma == b.noise_sigma && a.blur_radius == b.blur_radius &&
           a.brightness_shift == b.brightness_shift && a.contrast_scale == b.contrast_scale &&
           a.texture_freq == b.texture_freq && a.rng_seed == b.rng_seed;
}

std::string spec_to_text(const DomainSpec& spec) {
    std::string s;
    s += "domain_id=" + spec.domain_id + "\n";
    s += "classes=" + std::to_string(spec.class_palette.size()) + "\n";
    s += "palette=";
    for (std::size_t c = 0; c < spec.class_palette.size(); ++c) {
        if (c) s += ";";
        s += std::to_string(spec.class_palette[c][0]) + "," +
             std::to_string(spec.class_palette[c][1]) + "," +
             std::to_string(spec.class_palette[c][2]);
    }
    s += "\n";
    s += "noise_sigma=" + fmt_double(spec.noise_sigma) + "\n";
    s += "blur_radius=" + std::to_string(spec.blur_radius) + "\n";
    s += "brightness_shift=" + fmt_double(spec.brightness_shift) + "\n";
    s += "contrast_scale=" + fmt_double(spec.contrast_scale) + "\n";
    s += "texture_freq=" + fmt_double(spec.texture_freq) + "\n";
    s += "rng_seed=" + std::to_string(spec.rng_seed) + "\n";
    return s;
}

DomainSpec spec_from_text(const std::string& text, const std::string& context) {
    DomainSpec spec;
    spec.texture_freq = 0;
    spec.contrast_scale = 0;
    int classes = -1;
    for (auto& [k, v] : parse_kv(text, context)) {
        if (k == "domain_id") {
            spec.domain_id = v;
        } else if (k == "classes") {
            classes = static_cast<int>(parse_u64(v, context));
        } else if (k == "palette") {
            std::size_t pos = 0;
            while (pos < v.size()) {
                std::size_t semi = v.find(';', pos);
                if (semi == std::string::npos) semi = v.size();
                const std::string entry = v.substr(pos, semi - pos);
                pos = semi + 1;
                std::array<std::uint8_t, 3> rgb{};
                if (std::sscanf(entry.c_str(), "%hhu,%hhu,%hhu", &rgb[0], &rgb[1], &rgb[2]) != 3)
                    throw std::runtime_error(context + ": bad palette entry '" + entry + "'");
                spec.class_palette.push_back(rgb);
            }
        } else if (k == "noise_sigma") {
            spec.noise_sigma = parse_double(v, context);
        } else if (k == "blur_radius") {
            spec.blur_radius = static_cast<int>(parse_u64(v, context));
        } else if (k == "brightness_shift") {
            spec.brightness_shift = parse_double(v, context);
        } else if (k == "contrast_scale") {
            spec.contrast_scale = parse_double(v, context);
        } else if (k == "texture_freq") {
            spec.texture_freq = parse_double(v, context);
        } else if (k == "rng_seed") {
            spec.rng_seed = parse_u64(v, context);
        } else {
            throw std::runtime_error(context + ": unknown key '" + k + "'");
        }
    }
    if (classes != static_cast<int>(spec.class_palette.size()))
        throw std::runtime_error(context + ": class count does not match palette size");
    return spec;
}

std::uint64_t spec_hash(const DomainSpec& spec) {
    return rng::fnv1a64(spec_to_text(spec));
}

DomainSpec sample_domain_spec(const std::string& domain_id, std::uint64_t seed, double shift) {
    if (!(shift >= 0.0 && shift <= 1.0))
        throw std::out_of_range("sample_domain_spec: shift_magnitude must be in [0,1], got " +
                                fmt_double(shift));
    rng::SplitMix64 g = rng::substream(seed ^ rng::fnv1a64(domain_id), "domain-spec");
    DomainSpec spec;
    spec.domain_id = domain_id;
    const double ub = g.next_double();
    const double uc = g.next_double();
    const double un = g.next_double();
    const double ublur = g.next_double();
    const double ut = g.next_double();
    spec.brightness_shift = shift * 0.3 * (2 * ub - 1);
    spec.contrast_scale = 1.0 + shift * 0.5 * (2 * uc - 1);
    spec.noise_sigma = shift * (4.0 + 8.0 * un);
    spec.blur_radius = static_cast<int>(std::lround(shift * 2.0 * ublur));
    spec.texture_freq = 3.0 * (1.0 + shift * 0.8 * (2 * ut - 1));
    spec.class_palette.resize(kClasses);
    for (int c = 0; c < kClasses; ++c)
        for (int ch = 0; ch < 3; ++ch) {
            const double delta = shift * 60.0 * (2 * g.next_double() - 1);
            const long v = std::lround(static_cast<double>(kCanonicalPalette[static_cast<std::size_t>(c)][static_cast<std::size_t>(ch)]) + delta);
            spec.class_palette[static_cast<std::size_t>(c)][static_cast<std::size_t>(ch)] =
                static_cast<std::uint8_t>(std::clamp(v, 0l, 255l));
        }
    spec.rng_seed = g.next_u64();
    return spec;
}

Scene sample_scene(std::uint64_t layout_seed, int height, int width) {
    rng::SplitMix64 g = rng::substream(layout_seed, "layout");
    Scene s;
    s.layout_seed = layout_seed;
    s.height = height;
    s.width = width;
    s.horizon = static_cast<int>(height * (0.35 + 0.2 * g.next_double()));

    const int nb = 2 + static_cast<int>(g.next_below(5));  // 2..6
    for (int i = 0; i < nb; ++i) {
        const int wlo = std::max(2, width / 8), whi = std::max(wlo + 1, width / 3);
        const int hlo = std::max(2, height / 6), hhi = std::max(hlo + 1, height / 3);
        const int bw = wlo + static_cast<int>(g.next_below(static_cast<std::uint64_t>(whi - wlo + 1)));
        const int bh = hlo + static_cast<int>(g.next_below(static_cast<std::uint64_t>(hhi - hlo + 1)));
        const int x0 = static_cast<int>(g.next_below(static_cast<std::uint64_t>(std::max(1, width - bw + 1))));
        s.buildings.push_back({x0, std::max(0, s.horizon - bh), std::min(width, x0 + bw), s.horizon});
    }

    const int nv = static_cast<int>(g.next_below(4));  // 0..3
    for (int i = 0; i < nv; ++i) {
        Scene::Tri t;
        t.cx = static_cast<int>(g.next_below(static_cast<std::uint64_t>(width)));
        t.half_w = 3 + static_cast<int>(g.next_below(6));
        t.h = 6 + static_cast<int>(g.next_below(9));
        t.base_y = s.horizon + 1 + static_cast<int>(g.next_below(3));
        s.vegetation.push_back(t);
    }

    const int nc = static_cast<int>(g.next_below(4));  // 0..3
    for (int i = 0; i < nc; ++i) {
        Scene::Circle c;
        c.r = 3 + static_cast<int>(g.next_below(4));
        const int ylo = s.horizon + c.r + 1;
        const int yhi = height - c.r - 1;
        if (ylo >= yhi || 2 * c.r >= width) continue;  // road band too small for this car
        c.cy = ylo + static_cast<int>(g.next_below(static_cast<std::uint64_t>(yhi - ylo)));
        c.cx = c.r + static_cast<int>(g.next_below(static_cast<std::uint64_t>(width - 2 * c.r)));
        s.cars.push_back(c);
    }

    const int lane = (s.horizon + height) / 2;
    const int phase = static_cast<int>(g.next_below(12));
    for (int x = phase; x < width; x += 12)
        s.markings.push_back({x, lane - 1, std::min(width, x + 6), lane + 1});
    return s;
}

LabelMap rasterize(const Scene& s) {
    LabelMap m(s.height, s.width);
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x)
            m.at(y, x) = static_cast<std::uint8_t>(y < s.horizon ? kSky : kRoad);
    auto fill_rect = [&](const Scene::Rect& r, int cls) {
        const int x0 = std::max(0, r.x0), x1 = std::min(s.width, r.x1);
        const int y0 = std::max(0, r.y0), y1 = std::min(s.height, r.y1);
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) m.at(y, x) = static_cast<std::uint8_t>(cls);
    };
    for (const auto& b : s.buildings) fill_rect(b, kBuilding);
    for (const auto& t : s.vegetation) {
        // Row r in [base_y - h, base_y): width shrinks linearly toward the apex.
        for (int y = std::max(0, t.base_y - t.h); y < std::min(s.height, t.base_y); ++y) {
            const int up = t.base_y - 1 - y;  // 0 at base, h-1 at apex row
            const int hw = t.half_w - (t.half_w * up) / t.h;
            for (int x = std::max(0, t.cx - hw); x <= std::min(s.width - 1, t.cx + hw); ++x)
                m.at(y, x) = static_cast<std::uint8_t>(kVegetation);
        }
    }
    for (const auto& c : s.cars) {
        for (int y = std::max(0, c.cy - c.r); y <= std::min(s.height - 1, c.cy + c.r); ++y)
            for (int x = std::max(0, c.cx - c.r); x <= std::min(s.width - 1, c.cx + c.r); ++x) {
                const int dy = y - c.cy, dx = x - c.cx;
                if (dx * dx + dy * dy <= c.r * c.r) m.at(y, x) = static_cast<std::uint8_t>(kCar);
            }
    }
    for (const auto& d : s.markings) fill_rect(d, kRoad);
    return m;
}

std::pair<TensorF, LabelMap> render_scene(const DomainSpec& spec, std::uint64_t layout_seed,
                                          int height, int width) {
    if (spec.class_palette.size() != static_cast<std::size_t>(kClasses))
        throw std::runtime_error("render_scene: palette must have " + std::to_string(kClasses) +
                                 " entries");
    const Scene scene = sample_scene(layout_seed, height, width);
    const LabelMap labels = rasterize(scene);
    const std::size_t plane = static_cast<std::size_t>(height) * width;

    // Work in [0,255] doubles through the style pipeline, quantize at the end.
    std::vector<double> img(3 * plane);

    // Marking pixels share the road class; brighten them so lanes are visible.
    std::vector<std::uint8_t> marked(plane, 0);
    for (const auto& d : scene.markings) {
        const int x0 = std::max(0, d.x0), x1 = std::min(width, d.x1);
        const int y0 = std::max(0, d.y0), y1 = std::min(height, d.y1);
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) marked[static_cast<std::size_t>(y) * width + x] = 1;
    }

    // 1. palette fill
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            const std::size_t px = static_cast<std::size_t>(y) * width + x;
            const auto& rgb = spec.class_palette[labels.at(y, x)];
            for (int ch = 0; ch < 3; ++ch) {
                double v = rgb[static_cast<std::size_t>(ch)];
                if (marked[px] && labels.at(y, x) == kRoad) v = std::min(255.0, v * 1.6 + 30.0);
                img[static_cast<std::size_t>(ch) * plane + px] = v;
            }
        }

    // 2. per-class sinusoidal texture (direction/phase fixed per domain)
    {
        rng::SplitMix64 tg = rng::substream(spec.rng_seed, "texture");
        double ax[kClasses], ay[kClasses], phase[kClasses];
        for (int c = 0; c < kClasses; ++c) {
            const double theta = 2 * kPi * tg.next_double();
            ax[c] = std::cos(theta);
            ay[c] = std::sin(theta);
            phase[c] = 2 * kPi * tg.next_double();
        }
        const double scale = 2 * kPi * spec.texture_freq / std::max(height, width);
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                const int c = labels.at(y, x);
                const double f = 1.0 + 0.12 * std::sin(scale * (ax[c] * x + ay[c] * y) + phase[c]);
                const std::size_t px = static_cast<std::size_t>(y) * width + x;
                for (int ch = 0; ch < 3; ++ch) img[static_cast<std::size_t>(ch) * plane + px] *= f;
            }
    }

    // 3. box blur (in-bounds taps only)
    if (spec.blur_radius > 0) {
        const int r = spec.blur_radius;
        std::vector<double> src = img;
        for (int ch = 0; ch < 3; ++ch)
            for (int y = 0; y < height; ++y)
                for (int x = 0; x < width; ++x) {
                    double acc = 0;
                    int cnt = 0;
                    for (int dy = -r; dy <= r; ++dy) {
                        const int yy = y + dy;
                        if (yy < 0 || yy >= height) continue;
                        for (int dx = -r; dx <= r; ++dx) {
                            const int xx = x + dx;
                            if (xx < 0 || xx >= width) continue;
                            acc += src[(static_cast<std::size_t>(ch) * height + yy) * width + xx];
                            ++cnt;
                        }
                    }
                    img[(static_cast<std::size_t>(ch) * height + y) * width + x] = acc / cnt;
                }
    }

    // 4. additive Gaussian noise, per-sample stream, fixed draw order (ch,y,x)
    if (spec.noise_sigma > 0) {
        rng::SplitMix64 ng = rng::substream(spec.rng_seed ^ rng::fnv1a64_u64(layout_seed), "noise");
        for (std::size_t i = 0; i < img.size(); ++i)
            img[i] += spec.noise_sigma * ng.next_gaussian();
    }

    // 5. brightness/contrast around mid-gray
    for (double& v : img)
        v = (v - 127.5) * spec.contrast_scale + 127.5 + spec.brightness_shift * 127.5;

    // 6. clamp + 8-bit quantization (file round trips are bit-exact)
    TensorF out({3, height, width});
    for (std::size_t i = 0; i < img.size(); ++i) {
        const double c = std::clamp(img[i], 0.0, 255.0);
        const auto q = static_cast<std::uint8_t>(std::lround(c));
        out[i] = io::u8_to_unit(q);
    }
    return {out, labels};
}

std::string manifest_to_text(const DatasetManifest& m) {
    std::string s;
    s += "domain_id=" + m.domain_id + "\n";
    s += "n=" + std::to_string(m.n) + "\n";
    s += "height=" + std::to_string(m.height) + "\n";
    s += "width=" + std::to_string(m.width) + "\n";
    s += "classes=" + std::to_string(m.classes) + "\n";
    s += "rng=" + m.rng_name + "\n";
    s += "spec_hash=" + fmt_hex64(m.spec_fingerprint) + "\n";
    s += "layout_seed0=" + std::to_string(m.layout_seed0) + "\n";
    s += "labeled=" + std::string(m.labeled ? "1" : "0") + "\n";
    for (int i = 0; i < m.n; ++i) {
        const auto idx = static_cast<std::size_t>(i);
        s += "sample." + std::to_string(i) + ".image=" + m.image_files[idx] + "\n";
        s += "sample." + std::to_string(i) + ".image.fnv=" + fmt_hex64(m.image_fnv[idx]) + "\n";
        if (m.labeled) {
            s += "sample." + std::to_string(i) + ".label=" + m.label_files[idx] + "\n";
            s += "sample." + std::to_string(i) + ".label.fnv=" + fmt_hex64(m.label_fnv[idx]) + "\n";
        }
    }
    return s;
}

DatasetManifest manifest_from_text(const std::string& text, const std::string& context) {
    DatasetManifest m;
    auto kv = parse_kv(text, context);
    auto expect_prefix = [&](const std::string& key, const char* prefix, int i) {
        const std::string want = "sample." + std::to_string(i) + "." + prefix;
        if (key != want)
            throw std::runtime_error(context + ": expected key '" + want + "', got '" + key + "'");
    };
    std::size_t at = 0;
    auto next = [&]() -> std::pair<std::string, std::string>& {
        if (at >= kv.size()) throw std::runtime_error(context + ": truncated manifest");
        return kv[at++];
    };
    for (const char* key : {"domain_id", "n", "height", "width", "classes", "rng", "spec_hash",
                            "layout_seed0", "labeled"}) {
        auto& [k, v] = next();
        if (k != key) throw std::runtime_error(context + ": expected key '" + std::string(key) + "', got '" + k + "'");
        if (k == "domain_id") m.domain_id = v;
        else if (k == "n") m.n = static_cast<int>(parse_u64(v, context));
        else if (k == "height") m.height = static_cast<int>(parse_u64(v, context));
        else if (k == "width") m.width = static_cast<int>(parse_u64(v, context));
        else if (k == "classes") m.classes = static_cast<int>(parse_u64(v, context));
        else if (k == "rng") m.rng_name = v;
        else if (k == "spec_hash") m.spec_fingerprint = parse_u64(v, context, 16);
        else if (k == "layout_seed0") m.layout_seed0 = parse_u64(v, context);
        else if (k == "labeled") m.labeled = v == "1";
    }
    for (int i = 0; i < m.n; ++i) {
        {
            auto& [k, v] = next();
            expect_prefix(k, "image", i);
            m.image_files.push_back(v);
        }
        {
            auto& [k, v] = next();
            expect_prefix(k, "image.fnv", i);
            m.image_fnv.push_back(parse_u64(v, context, 16));
        }
        if (m.labeled) {
            {
                auto& [k, v] = next();
                expect_prefix(k, "label", i);
                m.label_files.push_back(v);
            }
            {
                auto& [k, v] = next();
                expect_prefix(k, "label.fnv", i);
                m.label_fnv.push_back(parse_u64(v, context, 16));
            }
        }
    }
    if (at != kv.size()) throw std::runtime_error(context + ": trailing manifest entries");
    return m;
}

DatasetManifest generate_dataset(const DomainSpec& spec, int n, const std::string& out_dir,
                                 bool labeled, std::uint64_t layout_seed0, int height, int width) {
    if (n < 1)
        throw std::invalid_argument("generate_dataset: sample count must be >= 1, got " +
                                    std::to_string(n));
    if (height < 16 || width < 16)
        throw std::invalid_argument("generate_dataset: image size must be at least 16x16");
    const int H = height, W = width;
    fs::create_directories(out_dir);

    DatasetManifest m;
    m.domain_id = spec.domain_id;
    m.n = n;
    m.height = H;
    m.width = W;
    m.classes = static_cast<int>(spec.class_palette.size());
    m.rng_name = "splitmix64";
    m.spec_fingerprint = spec_hash(spec);
    m.layout_seed0 = layout_seed0;
    m.labeled = labeled;
    m.image_files.resize(static_cast<std::size_t>(n));
    m.image_fnv.resize(static_cast<std::size_t>(n));
    if (labeled) {
        m.label_files.resize(static_cast<std::size_t>(n));
        m.label_fnv.resize(static_cast<std::size_t>(n));
    }

    parallel_for(static_cast<std::size_t>(n), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            auto [img, lab] = render_scene(spec, layout_seed0 + i, H, W);
            const std::string img_name = "sample." + std::to_string(i) + ".ppm";
            const std::string img_bytes = io::ppm_bytes(img);
            io::atomic_write_file(out_dir + "/" + img_name, img_bytes);
            m.image_files[i] = img_name;
            m.image_fnv[i] = rng::fnv1a64(img_bytes);
            if (labeled) {
                const std::string lab_name = "sample." + std::to_string(i) + ".pgm";
                const std::string lab_bytes = io::pgm_bytes(lab);
                io::atomic_write_file(out_dir + "/" + lab_name, lab_bytes);
                m.label_files[i] = lab_name;
                m.label_fnv[i] = rng::fnv1a64(lab_bytes);
            }
        }
    });

    io::atomic_write_file(out_dir + "/spec.txt", spec_to_text(spec));
    io::atomic_write_file(out_dir + "/manifest.txt", manifest_to_text(m));
    return m;
}

Dataset load_dataset(const std::string& dir) {
    Dataset ds;
    const std::string manifest_path = dir + "/manifest.txt";
    ds.manifest = manifest_from_text(io::read_file(manifest_path), manifest_path);

    const std::string spec_path = dir + "/spec.txt";
    const std::string spec_text = io::read_file(spec_path);
    if (rng::fnv1a64(spec_text) != ds.manifest.spec_fingerprint)
        throw std::runtime_error("integrity error: " + spec_path + " does not match the manifest fingerprint");
    ds.spec = spec_from_text(spec_text, spec_path);

    ds.samples.reserve(static_cast<std::size_t>(ds.manifest.n));
    for (int i = 0; i < ds.manifest.n; ++i) {
        const auto idx = static_cast<std::size_t>(i);
        Sample s;
        const std::string img_path = dir + "/" + ds.manifest.image_files[idx];
        const std::string img_bytes = io::read_file(img_path);
        if (rng::fnv1a64(img_bytes) != ds.manifest.image_fnv[idx])
            throw std::runtime_error("integrity error: " + img_path + " does not match its manifest hash");
        s.image = io::parse_ppm(img_bytes, img_path);
        if (s.image.dim(1) != ds.manifest.height || s.image.dim(2) != ds.manifest.width)
            throw std::runtime_error("integrity error: " + img_path + " has unexpected dimensions");
        if (ds.manifest.labeled) {
            const std::string lab_path = dir + "/" + ds.manifest.label_files[idx];
            const std::string lab_bytes = io::read_file(lab_path);
            if (rng::fnv1a64(lab_bytes) != ds.manifest.label_fnv[idx])
                throw std::runtime_error("integrity error: " + lab_path + " does not match its manifest hash");
            LabelMap lab = io::parse_pgm(lab_bytes, lab_path);
            if (lab.height() != ds.manifest.height || lab.width() != ds.manifest.width)
                throw std::runtime_error("integrity error: " + lab_path + " has unexpected dimensions");
            for (std::size_t p = 0; p < lab.numel(); ++p)
                if (lab.data()[p] >= ds.manifest.classes)
                    throw std::runtime_error("integrity error: " + lab_path + " contains an out-of-range class id");
            s.label = std::move(lab);
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

} // namespace madan::data
