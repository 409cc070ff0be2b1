#include "madan/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace madan::metrics {

ConfusionMatrix::ConfusionMatrix(int classes) : L_(classes) {
    if (classes < 1) throw std::invalid_argument("ConfusionMatrix: class count must be >= 1");
    counts_.assign(static_cast<std::size_t>(L_) * L_, 0);
}

std::uint64_t ConfusionMatrix::at(int gt, int pred) const {
    return counts_[static_cast<std::size_t>(gt) * L_ + pred];
}

std::uint64_t& ConfusionMatrix::at(int gt, int pred) {
    return counts_[static_cast<std::size_t>(gt) * L_ + pred];
}

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
}

void ConfusionMatrix::accumulate(const LabelMap& pred, const LabelMap& gt) {
    if (pred.height() != gt.height() || pred.width() != gt.width())
        throw std::invalid_argument("ConfusionMatrix::accumulate: prediction and ground truth shapes differ");
    for (std::size_t i = 0; i < gt.numel(); ++i) {
        const int g = gt.data()[i], p = pred.data()[i];
        if (g >= L_ || p >= L_)
            throw std::out_of_range("ConfusionMatrix::accumulate: class id " +
                                    std::to_string(g >= L_ ? g : p) + " out of range for L=" +
                                    std::to_string(L_));
        ++counts_[static_cast<std::size_t>(g) * L_ + p];
    }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.L_ != L_)
        throw std::invalid_argument("ConfusionMatrix::merge: class counts differ");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

IouResult iou(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw std::runtime_error("iou: confusion matrix is empty, nothing was evaluated");
    const int L = cm.classes();
    IouResult r;
    r.per_class.assign(static_cast<std::size_t>(L), std::numeric_limits<double>::quiet_NaN());
    r.defined.assign(static_cast<std::size_t>(L), false);
    double sum = 0;
    int n_defined = 0;
    for (int c = 0; c < L; ++c) {
        std::uint64_t row = 0, col = 0;
        for (int k = 0; k < L; ++k) {
            row += cm.at(c, k);
            col += cm.at(k, c);
        }
        const std::uint64_t denom = row + col - cm.at(c, c);
        if (denom == 0) continue;
        const double v = static_cast<double>(cm.at(c, c)) / static_cast<double>(denom);
        r.per_class[static_cast<std::size_t>(c)] = v;
        r.defined[static_cast<std::size_t>(c)] = true;
        sum += v;
        ++n_defined;
    }
    r.miou = sum / n_defined;
    return r;
}

std::string report(const ConfusionMatrix& cm, const std::vector<std::string>& class_names) {
    if (static_cast<int>(class_names.size()) != cm.classes())
        throw std::invalid_argument("report: expected " + std::to_string(cm.classes()) +
                                    " class names, got " + std::to_string(class_names.size()));
    const IouResult r = iou(cm);
    std::string out;
    for (const auto& name : class_names) out += name + ",";
    out += "miou\n";
    char buf[32];
    for (int c = 0; c < cm.classes(); ++c) {
        std::snprintf(buf, sizeof buf, "%.3f,", r.per_class[static_cast<std::size_t>(c)]);
        out += buf;
    }
    std::snprintf(buf, sizeof buf, "%.3f\n", r.miou);
    out += buf;
    return out;
}

LabelMap argmax_labels(const TensorF& logits, int sample) {
    if (logits.ndim() != 4) throw std::invalid_argument("argmax_labels: expected a B x L x H x W tensor");
    const int L = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    LabelMap m(H, W);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            int best = 0;
            float bv = logits.at4(sample, 0, y, x);
            for (int c = 1; c < L; ++c) {
                const float v = logits.at4(sample, c, y, x);
                if (v > bv) {
                    bv = v;
                    best = c;
                }
            }
            m.at(y, x) = static_cast<std::uint8_t>(best);
        }
    return m;
}

} // namespace madan::metrics
