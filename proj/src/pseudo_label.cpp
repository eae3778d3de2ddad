#include "d2s/pseudo_label.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace d2s {

GlobalDescriptor global_descriptor(const DescriptorSet &frame) {
    if (frame.count() < 1) throw EmptyDataset("global_descriptor: no descriptors");
    GlobalDescriptor g;
    g.vector = frame.descriptors.colwise().mean().transpose();
    const float n = g.vector.norm();
    if (n > 0) g.vector /= n;
    return g;
}

std::vector<int> retrieve_top_k(const GlobalDescriptor &query,
                                const std::vector<GlobalDescriptor> &train_frames, int k) {
    if (train_frames.empty()) throw EmptyDataset("retrieve_top_k: empty training set");
    const int n = static_cast<int>(train_frames.size());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::vector<float> sim(n);
    for (int i = 0; i < n; ++i) sim[i] = query.vector.dot(train_frames[i].vector);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return sim[a] != sim[b] ? sim[a] > sim[b] : a < b; });
    if (k < n) order.resize(k);
    return order;
}

MatchSet match_descriptors(const DescriptorSet &query, const DescriptorSet &train, float ratio) {
    if (query.count() < 1 || train.count() < 1)
        throw EmptyDataset("match_descriptors: empty descriptor set");
    const int nq = query.count(), nt = train.count();
    const float inf = std::numeric_limits<float>::infinity();

    std::vector<int> q_best(nq, -1);
    std::vector<float> q_d1(nq, inf), q_d2(nq, inf);
    std::vector<int> t_best(nt, -1);
    std::vector<float> t_d1(nt, inf);

    // Differences computed directly (not via the dot-product identity, whose
    // float cancellation floors small distances at ~1e-3).
    for (int i = 0; i < nq; ++i) {
        for (int j = 0; j < nt; ++j) {
            const float d = (query.descriptors.row(i) - train.descriptors.row(j)).squaredNorm();
            if (d < q_d1[i]) {
                q_d2[i] = q_d1[i];
                q_d1[i] = d;
                q_best[i] = j;
            } else if (d < q_d2[i]) {
                q_d2[i] = d;
            }
            if (d < t_d1[j]) {
                t_d1[j] = d;
                t_best[j] = i;
            }
        }
    }

    MatchSet out;
    const float r2 = ratio * ratio;
    for (int i = 0; i < nq; ++i) {
        const int j = q_best[i];
        if (j < 0 || t_best[j] != i) continue;  // not mutual
        // Ratio test on true distances; a missing second neighbor passes.
        if (std::isfinite(q_d2[i]) && !(q_d1[i] < r2 * q_d2[i])) continue;
        out.pairs.push_back({i, j, std::sqrt(q_d1[i])});
    }
    return out;
}

PseudoFrame transfer_labels(const DescriptorSet &query,
                            const std::vector<const Frame *> &retrieved, float ratio) {
    const int k = query.count();
    PseudoFrame out;
    out.descriptor_set = query;
    out.pseudo_coords = MatrixRMf::Zero(k, 3);
    out.valid_mask.assign(k, 0);
    std::vector<float> best_dist(k, std::numeric_limits<float>::infinity());

    for (const Frame *f : retrieved) {
        if (!f || !f->has_labels) continue;
        MatchSet matches = match_descriptors(query, f->descriptor_set, ratio);
        for (const Match &m : matches.pairs) {
            if (f->gt_reliability[m.train_index] != 1) continue;  // copy z=1 labels only
            if (m.distance < best_dist[m.query_index]) {
                best_dist[m.query_index] = m.distance;
                out.pseudo_coords.row(m.query_index) = f->gt_coords.row(m.train_index);
                out.valid_mask[m.query_index] = 1;
            }
        }
    }
    out.s = static_cast<int>(std::count(out.valid_mask.begin(), out.valid_mask.end(), 1));
    return out;
}

std::string PseudoLabelReport::to_text() const {
    std::ostringstream os;
    os << "frames processed: " << processed << "\n";
    os << "frames admitted:  " << admitted << "\n";
    os << "frames skipped:   " << skipped << "\n";
    os << "mean transferred labels s: " << mean_s << "\n";
    for (const auto &line : skip_log) os << "skip: " << line << "\n";
    return os.str();
}

std::vector<Frame> pseudo_label_dataset(const std::vector<Frame> &train,
                                        const std::vector<Frame> &unlabeled, int top_k, int min_s,
                                        PseudoLabelReport *report, float ratio) {
    std::vector<const Frame *> labeled;
    for (const Frame &f : train)
        if (f.has_labels) labeled.push_back(&f);
    if (labeled.empty()) throw EmptyDataset("pseudo_label_dataset: no labeled training frames");

    std::vector<GlobalDescriptor> gds;
    gds.reserve(labeled.size());
    for (const Frame *f : labeled) gds.push_back(global_descriptor(f->descriptor_set));

    PseudoLabelReport local;
    std::vector<Frame> out;
    double s_total = 0.0;
    for (std::size_t u = 0; u < unlabeled.size(); ++u) {
        ++local.processed;
        GlobalDescriptor q = global_descriptor(unlabeled[u].descriptor_set);
        std::vector<int> top = retrieve_top_k(q, gds, top_k);
        std::vector<const Frame *> shortlist;
        for (int idx : top) shortlist.push_back(labeled[idx]);
        PseudoFrame pf = transfer_labels(unlabeled[u].descriptor_set, shortlist, ratio);
        if (pf.s >= min_s) {
            ++local.admitted;
            s_total += pf.s;
            Frame f;
            f.descriptor_set = pf.descriptor_set;
            f.has_labels = true;
            f.gt_coords = pf.pseudo_coords;
            f.gt_reliability = pf.valid_mask;
            out.push_back(std::move(f));
        } else {
            ++local.skipped;
            local.skip_log.push_back("frame " + std::to_string(u) + ": s=" + std::to_string(pf.s) +
                                     " < " + std::to_string(min_s));
        }
    }
    local.mean_s = local.admitted > 0 ? s_total / local.admitted : 0.0;
    if (report) *report = local;
    return out;
}

}  // namespace d2s
