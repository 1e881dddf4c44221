#include "oclapo/ocm/metrics.hpp"

#include <array>
#include <stdexcept>

namespace oclapo::ocm {

std::vector<uint8_t> downsample_labels(const uint8_t* labels, int H, int W, int factor) {
    if (factor < 1 || H % factor != 0 || W % factor != 0)
        throw std::invalid_argument("downsample_labels: bad factor");
    const int Ho = H / factor, Wo = W / factor;
    std::vector<uint8_t> out(static_cast<size_t>(Ho) * Wo);
    for (int y = 0; y < Ho; ++y)
        for (int x = 0; x < Wo; ++x) {
            std::array<int, 3> votes{0, 0, 0};
            for (int dy = 0; dy < factor; ++dy)
                for (int dx = 0; dx < factor; ++dx) {
                    uint8_t v = labels[(y * factor + dy) * W + (x * factor + dx)];
                    if (v > 2) throw std::invalid_argument("downsample_labels: label > 2");
                    ++votes[v];
                }
            int best = 0;
            for (int c = 1; c < 3; ++c)
                if (votes[c] >= votes[best]) best = c;
            out[static_cast<size_t>(y) * Wo + x] = static_cast<uint8_t>(best);
        }
    return out;
}

double slot_label_iou(const ad::Mat<float>& masks, const std::vector<uint8_t>& labels, int k,
                      uint8_t cls) {
    if (static_cast<Eigen::Index>(labels.size()) != masks.cols())
        throw std::invalid_argument("slot_label_iou: size mismatch");
    long inter = 0, uni = 0;
    for (Eigen::Index p = 0; p < masks.cols(); ++p) {
        Eigen::Index arg;
        masks.col(p).maxCoeff(&arg);
        const bool pred = arg == k;
        const bool truth = labels[static_cast<size_t>(p)] == cls;
        inter += pred && truth;
        uni += pred || truth;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

int best_slot_for_label(const ad::Mat<float>& masks, const std::vector<uint8_t>& labels,
                        uint8_t cls, double* iou_out) {
    int best = 0;
    double best_iou = -1.0;
    for (int k = 0; k < masks.rows(); ++k) {
        const double iou = slot_label_iou(masks, labels, k, cls);
        if (iou > best_iou) {
            best_iou = iou;
            best = k;
        }
    }
    if (iou_out) *iou_out = best_iou;
    return best;
}

SlotLabelStats slot_stats_for_label(const SlotArchive& a, const worldgen::Trajectory& traj,
                                    uint8_t cls) {
    if (a.masks.size() != traj.states.size())
        throw std::invalid_argument("slot_stats_for_label: frame count mismatch");
    const int factor = traj.H / a.R;
    SlotLabelStats st;
    std::vector<int> counts(static_cast<size_t>(a.K), 0);
    for (size_t t = 0; t < a.masks.size(); ++t) {
        auto lab = downsample_labels(traj.label_map(static_cast<int>(t)), traj.H, traj.W,
                                     factor);
        double iou = 0;
        int k = best_slot_for_label(a.masks[t], lab, cls, &iou);
        st.best_slot.push_back(k);
        st.best_iou.push_back(iou);
        ++counts[static_cast<size_t>(k)];
        st.mean_best_iou += iou;
    }
    st.mean_best_iou /= static_cast<double>(a.masks.size());
    st.modal_slot = 0;
    for (int k = 1; k < a.K; ++k)
        if (counts[static_cast<size_t>(k)] > counts[static_cast<size_t>(st.modal_slot)])
            st.modal_slot = k;
    st.modal_fraction = static_cast<double>(counts[static_cast<size_t>(st.modal_slot)]) /
                        static_cast<double>(a.masks.size());
    return st;
}

}  // namespace oclapo::ocm
