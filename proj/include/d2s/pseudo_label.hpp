#pragma once

#include <string>
#include <vector>

#include "d2s/frame.hpp"
#include "d2s/net.hpp"

namespace d2s {

// Unit-norm retrieval embedding of a frame (mean-pooled local descriptors).
struct GlobalDescriptor {
    Eigen::VectorXf vector;
};

struct Match {
    int query_index;
    int train_index;
    float distance;  // L2 between the matched descriptors
};

// Mutual-nearest-neighbor matches; each query index appears at most once.
struct MatchSet {
    std::vector<Match> pairs;
};

// Pseudo labels for one unlabeled frame: copied coordinates where transfer
// succeeded, valid_mask elsewhere zero. s counts the valid entries.
struct PseudoFrame {
    DescriptorSet descriptor_set;
    MatrixRMf pseudo_coords;                // K x 3
    std::vector<std::uint8_t> valid_mask;   // K entries in {0, 1}
    int s = 0;
};

GlobalDescriptor global_descriptor(const DescriptorSet &frame);

// Indices of the k most cosine-similar training frames, best first; ties
// resolved toward the lower index. Returns everything when k > size.
std::vector<int> retrieve_top_k(const GlobalDescriptor &query,
                                const std::vector<GlobalDescriptor> &train_frames, int k = 10);

// Mutual nearest neighbors under L2, kept only when nearest/second-nearest
// distance ratio < `ratio`.
MatchSet match_descriptors(const DescriptorSet &query, const DescriptorSet &train,
                           float ratio = 0.9f);

// Matches the query against each retrieved labeled frame and copies the
// ground-truth coordinate of every matched train descriptor with z=1.
// Conflicting transfers keep the smallest descriptor distance. Admission
// (s >= threshold) is the caller's decision.
PseudoFrame transfer_labels(const DescriptorSet &query,
                            const std::vector<const Frame *> &retrieved, float ratio = 0.9f);

struct PseudoLabelReport {
    int processed = 0;
    int admitted = 0;
    int skipped = 0;
    double mean_s = 0.0;  // over admitted frames
    std::vector<std::string> skip_log;

    std::string to_text() const;
};

// Full pipeline over a dataset: retrieval shortlist of `top_k` per unlabeled
// frame, label transfer, admission gate s >= min_s. Admitted frames come back
// as labeled training frames (z=1 at transferred rows, no pose).
std::vector<Frame> pseudo_label_dataset(const std::vector<Frame> &train,
                                        const std::vector<Frame> &unlabeled, int top_k = 10,
                                        int min_s = 50, PseudoLabelReport *report = nullptr,
                                        float ratio = 0.9f);

}  // namespace d2s
