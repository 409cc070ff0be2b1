#pragma once

#include "madan/nn.hpp"
#include "madan/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace madan::ckpt {

// Single-file binary archive:
//
//   MADANCKPT v1\n
//   <key>=<value>\n ...            (text header, order preserved)
//   @arrays <count>\n
//   <name> f32 <ndim> <d0> ...\n   (one line per array)
//   @data\n
//   <raw float32 little-endian payloads, concatenated in array order>
//
// The same container stores model parameters, optimizer moments, and any
// bookkeeping the writer wants in the header. Stable across versions: readers
// must reject an unknown magic/version line rather than guess.
struct Archive {
    std::vector<std::pair<std::string, std::string>> header;
    std::vector<std::pair<std::string, TensorF>> arrays;

    void set(const std::string& key, const std::string& value);
    const std::string* find(const std::string& key) const;
    // Missing key -> error naming the key.
    const std::string& get(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    double get_double(const std::string& key) const;

    void add(const std::string& name, const TensorF& t);
    const TensorF* find_array(const std::string& name) const;
};

void save_archive(const std::string& path, const Archive& a);
Archive load_archive(const std::string& path);

// Bundle <-> archive. Stores the architecture config under "cfg.*" keys so a
// reader can rebuild an identical bundle before restoring parameters.
void write_bundle(Archive& a, nn::ModelBundle<float>& b);
nn::BundleConfig config_from_archive(const Archive& a);
// Restores every parameter of b by name; missing array or shape mismatch is
// an error naming the parameter.
void restore_bundle(nn::ModelBundle<float>& b, const Archive& a);

} // namespace madan::ckpt
