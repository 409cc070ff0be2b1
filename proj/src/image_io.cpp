#include "madan/image_io.hpp"

#include "madan/rng.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace madan::io {

namespace {

// Parses "P6\n<w> <h>\n<maxval>\n" style headers: magic, then 3 decimal
// fields separated by whitespace/comments, then exactly one whitespace byte.
struct PnmHeader {
    int w = 0, h = 0, maxval = 0;
    std::size_t data_offset = 0;
};

PnmHeader parse_header(const std::string& b, const char* magic, const std::string& context) {
    if (b.size() < 2 || b[0] != magic[0] || b[1] != magic[1])
        throw std::runtime_error(context + ": not a " + magic + " file");
    std::size_t i = 2;
    int fields[3];
    for (int f = 0; f < 3; ++f) {
        while (i < b.size() && (std::isspace(static_cast<unsigned char>(b[i])) || b[i] == '#')) {
            if (b[i] == '#')
                while (i < b.size() && b[i] != '\n') ++i;
            else
                ++i;
        }
        if (i >= b.size() || !std::isdigit(static_cast<unsigned char>(b[i])))
            throw std::runtime_error(context + ": malformed header");
        int v = 0;
        while (i < b.size() && std::isdigit(static_cast<unsigned char>(b[i]))) {
            v = v * 10 + (b[i] - '0');
            ++i;
        }
        fields[f] = v;
    }
    if (i >= b.size() || !std::isspace(static_cast<unsigned char>(b[i])))
        throw std::runtime_error(context + ": malformed header");
    ++i;
    PnmHeader h;
    h.w = fields[0];
    h.h = fields[1];
    h.maxval = fields[2];
    h.data_offset = i;
    if (h.w <= 0 || h.h <= 0 || h.maxval != 255)
        throw std::runtime_error(context + ": unsupported dimensions or maxval");
    return h;
}

} // namespace

float u8_to_unit(std::uint8_t b) {
    return static_cast<float>(b) / 255.0f * 2.0f - 1.0f;
}

std::uint8_t unit_to_u8(float v) {
    float s = (v + 1.0f) * 0.5f * 255.0f;
    int q = static_cast<int>(std::lround(s));
    if (q < 0) q = 0;
    if (q > 255) q = 255;
    return static_cast<std::uint8_t>(q);
}

std::string ppm_bytes(const TensorF& img) {
    if (img.ndim() != 3 || img.dim(0) != 3)
        throw std::runtime_error("ppm_bytes: expected 3 x H x W image, got " +
                                 TensorF::shape_str(img.shape()));
    const int h = img.dim(1), w = img.dim(2);
    std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + static_cast<std::size_t>(3) * h * w);
    const float* r = img.data();
    const float* g = r + static_cast<std::size_t>(h) * w;
    const float* b = g + static_cast<std::size_t>(h) * w;
    for (std::size_t i = 0; i < static_cast<std::size_t>(h) * w; ++i) {
        out.push_back(static_cast<char>(unit_to_u8(r[i])));
        out.push_back(static_cast<char>(unit_to_u8(g[i])));
        out.push_back(static_cast<char>(unit_to_u8(b[i])));
    }
    return out;
}

TensorF parse_ppm(const std::string& bytes, const std::string& context) {
    PnmHeader h = parse_header(bytes, "P6", context);
    const std::size_t need = static_cast<std::size_t>(3) * h.w * h.h;
    if (bytes.size() - h.data_offset != need)
        throw std::runtime_error(context + ": pixel payload size mismatch");
    TensorF img({3, h.h, h.w});
    float* r = img.data();
    float* g = r + static_cast<std::size_t>(h.h) * h.w;
    float* b = g + static_cast<std::size_t>(h.h) * h.w;
    const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data()) + h.data_offset;
    for (std::size_t i = 0; i < static_cast<std::size_t>(h.h) * h.w; ++i) {
        r[i] = u8_to_unit(p[3 * i]);
        g[i] = u8_to_unit(p[3 * i + 1]);
        b[i] = u8_to_unit(p[3 * i + 2]);
    }
    return img;
}

std::string pgm_bytes(const LabelMap& m) {
    std::string out = "P5\n" + std::to_string(m.width()) + " " + std::to_string(m.height()) + "\n255\n";
    out.append(reinterpret_cast<const char*>(m.data()), m.numel());
    return out;
}

LabelMap parse_pgm(const std::string& bytes, const std::string& context) {
    PnmHeader h = parse_header(bytes, "P5", context);
    const std::size_t need = static_cast<std::size_t>(h.w) * h.h;
    if (bytes.size() - h.data_offset != need)
        throw std::runtime_error(context + ": pixel payload size mismatch");
    LabelMap m(h.h, h.w);
    std::copy_n(bytes.data() + h.data_offset, need, reinterpret_cast<char*>(m.data()));
    return m;
}

void atomic_write_file(const std::string& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.parent_path() / (target.filename().string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("write failed: cannot open " + tmp.string());
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw std::runtime_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, target);
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open file: " + path);
    std::string out((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (f.bad()) throw std::runtime_error("read failed: " + path);
    return out;
}

std::uint64_t fnv_file(const std::string& path) {
    return rng::fnv1a64(read_file(path));
}

void write_ppm(const std::string& path, const TensorF& img) {
    atomic_write_file(path, ppm_bytes(img));
}

TensorF read_ppm(const std::string& path) {
    return parse_ppm(read_file(path), path);
}

void write_pgm(const std::string& path, const LabelMap& m) {
    atomic_write_file(path, pgm_bytes(m));
}

LabelMap read_pgm(const std::string& path) {
    return parse_pgm(read_file(path), path);
}

} // namespace madan::io
