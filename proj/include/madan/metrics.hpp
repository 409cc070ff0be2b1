#pragma once

#include "madan/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace madan::metrics {

// L x L pixel-count matrix; entry (gt, pred) counts pixels with ground truth
// gt predicted as pred. Accumulation is commutative, so per-shard matrices
// may be filled independently and merged by addition.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int classes);

    int classes() const { return L_; }
    std::uint64_t at(int gt, int pred) const;
    std::uint64_t& at(int gt, int pred);
    std::uint64_t total() const;

    void accumulate(const LabelMap& pred, const LabelMap& gt);
    void merge(const ConfusionMatrix& other);

private:
    int L_;
    std::vector<std::uint64_t> counts_;
};

struct IouResult {
    std::vector<double> per_class;  // NaN where undefined
    std::vector<bool> defined;      // false when the class never appears
    double miou = 0;                // mean over defined classes
};

// IoU_c = cm[c][c] / (row_c + col_c - cm[c][c]); classes with a zero
// denominator are excluded from the mean. All-zero matrix is an error.
IouResult iou(const ConfusionMatrix& cm);

// Two-line CSV: "name0,...,nameL-1,miou" header then the %.3f value row
// (undefined classes print as nan).
std::string report(const ConfusionMatrix& cm, const std::vector<std::string>& class_names);

// Argmax over the class axis of one sample of a B x L x H x W logits tensor.
LabelMap argmax_labels(const TensorF& logits, int sample);

} // namespace madan::metrics
