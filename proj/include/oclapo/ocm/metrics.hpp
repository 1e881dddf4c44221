#pragma once

#include "oclapo/ocm/train.hpp"

#include <cstdint>
#include <vector>

namespace oclapo::ocm {

/// Majority-vote label downsampling by an integer factor; ties go to the
/// higher label so thin foreground survives.
std::vector<uint8_t> downsample_labels(const uint8_t* labels, int H, int W, int factor);

/// IoU between {pixels whose argmax slot is k} and {pixels labeled cls}.
/// masks: (K, R*R) soft masks; labels: R*R entries.
double slot_label_iou(const ad::Mat<float>& masks, const std::vector<uint8_t>& labels, int k,
                      uint8_t cls);

/// Slot with the largest IoU against the label class; iou_out optional.
int best_slot_for_label(const ad::Mat<float>& masks, const std::vector<uint8_t>& labels,
                        uint8_t cls, double* iou_out = nullptr);

struct SlotLabelStats {
    std::vector<int> best_slot;    // per frame
    std::vector<double> best_iou;  // per frame
    int modal_slot = -1;
    double modal_fraction = 0.0;  // frames agreeing with the modal slot
    double mean_best_iou = 0.0;
};

/// Compares archive masks against the trajectory's label maps for one class
/// (1 = agent, 2 = object), downsampling labels to mask resolution.
SlotLabelStats slot_stats_for_label(const SlotArchive& a, const worldgen::Trajectory& traj,
                                    uint8_t cls);

}  // namespace oclapo::ocm
