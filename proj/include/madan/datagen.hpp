#pragma once

#include "madan/tensor.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace madan::data {

// Class ids, fixed across every domain (closed-set assumption).
inline constexpr int kRoad = 0;
inline constexpr int kSky = 1;
inline constexpr int kBuilding = 2;
inline constexpr int kCar = 3;
inline constexpr int kVegetation = 4;
inline constexpr int kClasses = 5;
inline const char* const kClassNames[kClasses] = {"road", "sky", "building", "car", "vegetation"};

// Style parameters of one domain. Two equal specs render byte-identical
// datasets; the layout (label) side never reads any of the style fields.
struct DomainSpec {
    std::string domain_id;
    std::vector<std::array<std::uint8_t, 3>> class_palette;  // L entries, RGB
    double noise_sigma = 0;        // additive Gaussian, [0,255] pixel units
    int blur_radius = 0;           // box blur radius, pixels
    double brightness_shift = 0;   // in [-0.3, 0.3], fraction of half-range
    double contrast_scale = 1;     // in [0.5, 1.5]
    double texture_freq = 3.0;     // per-class sinusoid, cycles per image
    std::uint64_t rng_seed = 0;    // seeds the per-domain style/noise streams
};

bool operator==(const DomainSpec& a, const DomainSpec& b);

// Canonical text serialization (also the spec.txt file format); the spec
// fingerprint is the FNV-1a hash of these bytes.
std::string spec_to_text(const DomainSpec& spec);
DomainSpec spec_from_text(const std::string& text, const std::string& context);
std::uint64_t spec_hash(const DomainSpec& spec);

// Scene grammar: sky band above the horizon, road band below; buildings are
// rectangles rising from the horizon, vegetation triangles straddle it, cars
// are circles on the road, lane markings are road-class dashes. Occlusion is
// the fixed painter's order sky < building < vegetation < car < markings.
struct Scene {
    std::uint64_t layout_seed = 0;
    int height = 0, width = 0;
    int horizon = 0;
    struct Rect {
        int x0, y0, x1, y1;  // half-open [x0,x1) x [y0,y1)
    };
    struct Circle {
        int cx, cy, r;
    };
    struct Tri {
        int cx, base_y, half_w, h;  // apex at base_y - h
    };
    std::vector<Rect> buildings;
    std::vector<Tri> vegetation;
    std::vector<Circle> cars;
    std::vector<Rect> markings;  // road-class overlay
};

Scene sample_scene(std::uint64_t layout_seed, int height, int width);
LabelMap rasterize(const Scene& scene);

// Deterministic renderer: label from the scene layout, image from the label
// through the style pipeline palette -> texture -> blur -> noise ->
// brightness/contrast -> clamp, quantized to 8 bits (so the in-memory image
// round-trips bit-exactly through the PPM files).
std::pair<TensorF, LabelMap> render_scene(const DomainSpec& spec, std::uint64_t layout_seed,
                                          int height, int width);

// Style fields deviate from the canonical defaults proportionally to
// shift_magnitude in [0, 1]; deterministic in (domain_id, seed, shift).
DomainSpec sample_domain_spec(const std::string& domain_id, std::uint64_t seed, double shift_magnitude);

struct DatasetManifest {
    std::string domain_id;
    int n = 0;
    int height = 0, width = 0;
    int classes = 0;
    std::string rng_name;  // generator family used end-to-end
    std::uint64_t spec_fingerprint = 0;
    std::uint64_t layout_seed0 = 0;  // sample k uses layout_seed0 + k
    bool labeled = false;
    std::vector<std::string> image_files;         // relative to the dataset dir
    std::vector<std::uint64_t> image_fnv;
    std::vector<std::string> label_files;         // empty when unlabeled
    std::vector<std::uint64_t> label_fnv;
};

std::string manifest_to_text(const DatasetManifest& m);
DatasetManifest manifest_from_text(const std::string& text, const std::string& context);

// Writes n image(/label) pairs, spec.txt, and manifest.txt (last). Renders
// are parallelized across samples; file writes are per-sample atomic.
// Re-running with the same inputs rewrites identical bytes.
DatasetManifest generate_dataset(const DomainSpec& spec, int n, const std::string& out_dir,
                                 bool labeled, std::uint64_t layout_seed0, int height = 64,
                                 int width = 64);

struct Sample {
    TensorF image;                  // 3 x H x W in [-1, 1]
    std::optional<LabelMap> label;  // absent for target-domain datasets
};

struct Dataset {
    DatasetManifest manifest;
    DomainSpec spec;
    std::vector<Sample> samples;  // manifest order
};

// Loads and verifies a dataset directory: every file hash must match the
// manifest and spec.txt must match the recorded fingerprint.
Dataset load_dataset(const std::string& dir);

} // namespace madan::data
