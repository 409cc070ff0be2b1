#include "madan/checkpoint.hpp"

#include "madan/image_io.hpp"

#include <cstdio>
#include <cstring>
#include <stdexcept>

namespace madan::ckpt {

namespace {
constexpr const char* kMagic = "MADANCKPT v1";
}

void Archive::set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : header)
        if (k == key) {
            v = value;
            return;
        }
    header.emplace_back(key, value);
}

const std::string* Archive::find(const std::string& key) const {
    for (const auto& [k, v] : header)
        if (k == key) return &v;
    return nullptr;
}

const std::string& Archive::get(const std::string& key) const {
    const std::string* v = find(key);
    if (!v) throw std::runtime_error("checkpoint: missing header key '" + key + "'");
    return *v;
}

std::uint64_t Archive::get_u64(const std::string& key) const {
    const std::string& s = get(key);
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
    if (end == s.c_str() || *end != '\0')
        throw std::runtime_error("checkpoint: header key '" + key + "' is not an integer: '" + s + "'");
    return v;
}

double Archive::get_double(const std::string& key) const {
    const std::string& s = get(key);
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0')
        throw std::runtime_error("checkpoint: header key '" + key + "' is not a number: '" + s + "'");
    return v;
}

void Archive::add(const std::string& name, const TensorF& t) {
    if (!t.defined()) throw std::runtime_error("checkpoint: array '" + name + "' is undefined");
    arrays.emplace_back(name, t);
}

const TensorF* Archive::find_array(const std::string& name) const {
    for (const auto& [n, t] : arrays)
        if (n == name) return &t;
    return nullptr;
}

void save_archive(const std::string& path, const Archive& a) {
    std::string out;
    out += kMagic;
    out += "\n";
    for (const auto& [k, v] : a.header) {
        if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos ||
            v.find('\n') != std::string::npos)
            throw std::runtime_error("checkpoint: header entry '" + k + "' contains a reserved character");
        out += k + "=" + v + "\n";
    }
    out += "@arrays " + std::to_string(a.arrays.size()) + "\n";
    for (const auto& [name, t] : a.arrays) {
        if (name.find(' ') != std::string::npos || name.find('\n') != std::string::npos)
            throw std::runtime_error("checkpoint: array name '" + name + "' contains a reserved character");
        out += name + " f32 " + std::to_string(t.ndim());
        for (int d = 0; d < t.ndim(); ++d) out += " " + std::to_string(t.dim(d));
        out += "\n";
    }
    out += "@data\n";
    for (const auto& [name, t] : a.arrays) {
        const std::size_t bytes = t.numel() * sizeof(float);
        const std::size_t at = out.size();
        out.resize(at + bytes);
        std::memcpy(out.data() + at, t.data(), bytes);
    }
    io::atomic_write_file(path, out);
}

Archive load_archive(const std::string& path) {
    const std::string bytes = io::read_file(path);
    std::size_t pos = 0;
    auto next_line = [&]() -> std::string {
        const std::size_t nl = bytes.find('\n', pos);
        if (nl == std::string::npos) throw std::runtime_error(path + ": truncated checkpoint");
        std::string line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };
    if (next_line() != kMagic)
        throw std::runtime_error(path + ": not a checkpoint file (bad magic line)");
    Archive a;
    std::string line;
    while (true) {
        line = next_line();
        if (line.rfind("@arrays ", 0) == 0) break;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + ": malformed header line '" + line + "'");
        a.header.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    const std::size_t count = std::strtoull(line.c_str() + 8, nullptr, 10);
    std::vector<std::pair<std::string, std::vector<int>>> entries;
    entries.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        line = next_line();
        char name[256];
        int ndim = 0, off = 0;
        if (std::sscanf(line.c_str(), "%255s f32 %d%n", name, &ndim, &off) != 2 || ndim < 1 || ndim > 8)
            throw std::runtime_error(path + ": malformed array line '" + line + "'");
        std::vector<int> shape(static_cast<std::size_t>(ndim));
        const char* p = line.c_str() + off;
        for (int d = 0; d < ndim; ++d) {
            char* end = nullptr;
            shape[static_cast<std::size_t>(d)] = static_cast<int>(std::strtol(p, &end, 10));
            if (end == p || shape[static_cast<std::size_t>(d)] < 1)
                throw std::runtime_error(path + ": malformed array line '" + line + "'");
            p = end;
        }
        entries.emplace_back(name, std::move(shape));
    }
    if (next_line() != "@data") throw std::runtime_error(path + ": missing @data section");
    for (auto& [name, shape] : entries) {
        TensorF t(shape);
        const std::size_t nbytes = t.numel() * sizeof(float);
        if (pos + nbytes > bytes.size()) throw std::runtime_error(path + ": truncated array payload");
        std::memcpy(t.data(), bytes.data() + pos, nbytes);
        pos += nbytes;
        a.arrays.emplace_back(name, std::move(t));
    }
    if (pos != bytes.size()) throw std::runtime_error(path + ": trailing bytes after array payload");
    return a;
}

void write_bundle(Archive& a, nn::ModelBundle<float>& b) {
    const nn::BundleConfig& c = b.cfg;
    a.set("cfg.sources", std::to_string(c.sources));
    a.set("cfg.classes", std::to_string(c.classes));
    a.set("cfg.img_channels", std::to_string(c.img_channels));
    a.set("cfg.gen_base", std::to_string(c.gen_base));
    a.set("cfg.gen_res", std::to_string(c.gen_res));
    a.set("cfg.disc_base", std::to_string(c.disc_base));
    a.set("cfg.disc_layers", std::to_string(c.disc_layers));
    a.set("cfg.seg_base", std::to_string(c.seg_base));
    a.set("cfg.feat_disc_width", std::to_string(c.feat_disc_width));
    a.set("cfg.seed", std::to_string(c.seed));
    for (auto& p : b.params_all()) a.add(p.name, p.var.value());
}

nn::BundleConfig config_from_archive(const Archive& a) {
    nn::BundleConfig c;
    c.sources = static_cast<int>(a.get_u64("cfg.sources"));
    c.classes = static_cast<int>(a.get_u64("cfg.classes"));
    c.img_channels = static_cast<int>(a.get_u64("cfg.img_channels"));
    c.gen_base = static_cast<int>(a.get_u64("cfg.gen_base"));
    c.gen_res = static_cast<int>(a.get_u64("cfg.gen_res"));
    c.disc_base = static_cast<int>(a.get_u64("cfg.disc_base"));
    c.disc_layers = static_cast<int>(a.get_u64("cfg.disc_layers"));
    c.seg_base = static_cast<int>(a.get_u64("cfg.seg_base"));
    c.feat_disc_width = static_cast<int>(a.get_u64("cfg.feat_disc_width"));
    c.seed = a.get_u64("cfg.seed");
    return c;
}

void restore_bundle(nn::ModelBundle<float>& b, const Archive& a) {
    for (auto& p : b.params_all()) {
        const TensorF* t = a.find_array(p.name);
        if (!t) throw std::runtime_error("checkpoint: missing parameter array '" + p.name + "'");
        if (!t->same_shape(p.var.value()))
            throw std::runtime_error("checkpoint: parameter '" + p.name + "' has shape " +
                                     TensorF::shape_str(t->shape()) + ", expected " +
                                     TensorF::shape_str(p.var.value().shape()));
        std::memcpy(p.var.value().data(), t->data(), t->numel() * sizeof(float));
    }
}

} // namespace madan::ckpt
