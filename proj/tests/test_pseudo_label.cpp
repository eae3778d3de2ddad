#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <set>

#include "d2s/pseudo_label.hpp"
#include "d2s/rng.hpp"

using namespace d2s;

namespace {

MatrixRMf random_rows(Rng &rng, int k, int d, bool unit_norm = false) {
    MatrixRMf m(k, d);
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < d; ++j) m(i, j) = static_cast<float>(rng.normal());
        if (unit_norm) m.row(i).normalize();
    }
    return m;
}

DescriptorSet make_set(const MatrixRMf &desc) {
    DescriptorSet s;
    s.descriptors = desc;
    s.keypoints = MatrixRMf::Zero(desc.rows(), 2);
    return s;
}

MatrixRMf add_noise(const MatrixRMf &m, Rng &rng, double sigma) {
    MatrixRMf out = m;
    for (int i = 0; i < out.rows(); ++i)
        for (int j = 0; j < out.cols(); ++j)
            out(i, j) += static_cast<float>(rng.normal(0.0, sigma));
    return out;
}

}  // namespace

TEST_CASE("global descriptor of a singleton is the normalized descriptor") {
    Rng rng(201);
    MatrixRMf d = random_rows(rng, 1, 16);
    auto g = global_descriptor(make_set(d));
    Eigen::VectorXf expect = d.row(0).transpose().normalized();
    CHECK((g.vector - expect).norm() < 1e-6f);
    CHECK(std::abs(g.vector.norm() - 1.0f) < 1e-6f);
}

TEST_CASE("global descriptor is invariant to duplicating the frame rows") {
    Rng rng(202);
    MatrixRMf d = random_rows(rng, 7, 16);
    MatrixRMf doubled(14, 16);
    doubled << d, d;
    auto a = global_descriptor(make_set(d));
    auto b = global_descriptor(make_set(doubled));
    CHECK((a.vector - b.vector).norm() < 1e-6f);

    DescriptorSet empty;
    empty.descriptors.resize(0, 16);
    CHECK_THROWS_AS(global_descriptor(empty), EmptyDataset);
}

TEST_CASE("retrieval ranks an exact duplicate first and clamps k") {
    Rng rng(203);
    std::vector<GlobalDescriptor> gds;
    for (int i = 0; i < 20; ++i)
        gds.push_back(global_descriptor(make_set(random_rows(rng, 5, 16))));

    auto top = retrieve_top_k(gds[13], gds, 10);
    REQUIRE(top.size() == 10);
    CHECK(top[0] == 13);

    auto all = retrieve_top_k(gds[0], gds, 100);
    CHECK(all.size() == 20);

    CHECK_THROWS_AS(retrieve_top_k(gds[0], {}, 10), EmptyDataset);
}

TEST_CASE("retrieval tie-break prefers the lower frame index") {
    GlobalDescriptor q;
    q.vector = Eigen::VectorXf::Unit(4, 0);
    GlobalDescriptor orth;
    orth.vector = Eigen::VectorXf::Unit(4, 1);  // all similarities equal (0)
    std::vector<GlobalDescriptor> gds(6, orth);
    auto top = retrieve_top_k(q, gds, 4);
    CHECK(top == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("a noisy re-observation retrieves its source among 100 frames") {
    Rng rng(204);
    std::vector<DescriptorSet> frames;
    std::vector<GlobalDescriptor> gds;
    for (int i = 0; i < 100; ++i) {
        frames.push_back(make_set(random_rows(rng, 40, 64, true)));
        gds.push_back(global_descriptor(frames.back()));
    }
    for (int pick : {0, 17, 99}) {
        DescriptorSet noisy = make_set(add_noise(frames[pick].descriptors, rng, 0.05));
        auto top = retrieve_top_k(global_descriptor(noisy), gds, 10);
        CHECK(top[0] == pick);
    }
}

TEST_CASE("matching a set against itself yields the identity pairing") {
    Rng rng(205);
    auto set = make_set(random_rows(rng, 50, 32));
    MatchSet m = match_descriptors(set, set);
    REQUIRE(m.pairs.size() == 50);
    for (const auto &p : m.pairs) {
        CHECK(p.query_index == p.train_index);
        CHECK(p.distance == 0.0f);
    }
}

TEST_CASE("disjoint random sets produce almost no ratio-test survivors") {
    Rng rng(206);
    auto a = make_set(random_rows(rng, 200, 64, true));
    auto b = make_set(random_rows(rng, 200, 64, true));
    MatchSet m = match_descriptors(a, b);
    CHECK(m.pairs.size() <= 4);  // < 2% of K
}

TEST_CASE("noisy copies match back to their source points") {
    Rng rng(207);
    const int k = 100;
    MatrixRMf codes = random_rows(rng, k, 64, true);

    // Query = permuted noisy codes; the permutation is the ground truth.
    std::vector<int> perm(k);
    for (int i = 0; i < k; ++i) perm[i] = i;
    for (int i = k - 1; i > 0; --i)
        std::swap(perm[i], perm[rng.uniform_int(static_cast<std::uint64_t>(i + 1))]);
    MatrixRMf noisy(k, 64);
    for (int i = 0; i < k; ++i) noisy.row(i) = codes.row(perm[i]);
    noisy = add_noise(noisy, rng, 0.05);

    MatchSet m = match_descriptors(make_set(noisy), make_set(codes));
    int correct = 0;
    std::set<int> seen_queries;
    for (const auto &p : m.pairs) {
        CHECK(seen_queries.insert(p.query_index).second);  // at most once
        if (p.train_index == perm[p.query_index]) ++correct;
    }
    CHECK(correct >= 90);
}

TEST_CASE("identity transfer copies every reliable label") {
    Rng rng(208);
    Frame train;
    train.descriptor_set = make_set(random_rows(rng, 200, 32));
    train.has_labels = true;
    train.gt_coords = random_rows(rng, 200, 3);
    train.gt_reliability.assign(200, 1);

    PseudoFrame pf = transfer_labels(train.descriptor_set, {&train});
    CHECK(pf.s == 200);
    CHECK(std::memcmp(pf.pseudo_coords.data(), train.gt_coords.data(),
                      sizeof(float) * 200 * 3) == 0);
}

TEST_CASE("unreliable train rows never transfer") {
    Rng rng(209);
    Frame train;
    train.descriptor_set = make_set(random_rows(rng, 60, 32));
    train.has_labels = true;
    train.gt_coords = random_rows(rng, 60, 3);
    train.gt_reliability.assign(60, 1);
    for (int i = 0; i < 60; i += 2) train.gt_reliability[i] = 0;

    PseudoFrame pf = transfer_labels(train.descriptor_set, {&train});
    CHECK(pf.s == 30);
    for (int i = 0; i < 60; ++i) CHECK(pf.valid_mask[i] == (i % 2 == 0 ? 0 : 1));
}

TEST_CASE("conflicting transfers keep the closest descriptor's label") {
    Rng rng(210);
    MatrixRMf q = random_rows(rng, 1, 32);

    Frame near, far;
    near.descriptor_set = make_set(add_noise(q, rng, 0.01));
    near.has_labels = true;
    near.gt_coords = MatrixRMf(1, 3);
    near.gt_coords << 1, 1, 1;
    near.gt_reliability = {1};

    far.descriptor_set = make_set(add_noise(q, rng, 0.2));
    far.has_labels = true;
    far.gt_coords = MatrixRMf(1, 3);
    far.gt_coords << 2, 2, 2;
    far.gt_reliability = {1};

    PseudoFrame pf = transfer_labels(make_set(q), {&far, &near});
    REQUIRE(pf.s == 1);
    CHECK(pf.pseudo_coords(0, 0) == 1.0f);

    PseudoFrame pf2 = transfer_labels(make_set(q), {&near, &far});
    CHECK(pf2.pseudo_coords(0, 0) == 1.0f);  // order of retrieval irrelevant
}

TEST_CASE("transferred coordinates are always copies of training rows") {
    Rng rng(211);
    std::vector<Frame> train(5);
    std::set<std::array<float, 3>> coord_pool;
    for (auto &f : train) {
        f.descriptor_set = make_set(random_rows(rng, 80, 64, true));
        f.has_labels = true;
        f.gt_coords = random_rows(rng, 80, 3);
        f.gt_reliability.assign(80, 1);
        for (int i = 0; i < 80; ++i)
            coord_pool.insert({f.gt_coords(i, 0), f.gt_coords(i, 1), f.gt_coords(i, 2)});
    }
    // Unlabeled frame: noisy union of rows from two training frames.
    MatrixRMf mixed(100, 64);
    mixed.topRows(50) = train[1].descriptor_set.descriptors.topRows(50);
    mixed.bottomRows(50) = train[3].descriptor_set.descriptors.topRows(50);
    mixed = add_noise(mixed, rng, 0.02);

    std::vector<const Frame *> retrieved;
    for (const auto &f : train) retrieved.push_back(&f);
    PseudoFrame pf = transfer_labels(make_set(mixed), retrieved);
    CHECK(pf.s >= 90);
    for (int i = 0; i < 100; ++i) {
        if (!pf.valid_mask[i]) continue;
        std::array<float, 3> c{pf.pseudo_coords(i, 0), pf.pseudo_coords(i, 1),
                               pf.pseudo_coords(i, 2)};
        CHECK(coord_pool.count(c) == 1);  // bitwise member of the label pool
    }
}

TEST_CASE("admission gate: s at the threshold admits, below skips") {
    Rng rng(212);
    Frame train;
    const int k = 120;
    train.descriptor_set = make_set(random_rows(rng, k, 64, true));
    train.has_labels = true;
    train.gt_coords = random_rows(rng, k, 3);
    train.gt_reliability.assign(k, 0);
    for (int i = 0; i < 50; ++i) train.gt_reliability[i] = 1;  // exactly 50 transferable

    std::vector<Frame> unlabeled(1);
    unlabeled[0].descriptor_set = train.descriptor_set;

    PseudoLabelReport report;
    auto admitted = pseudo_label_dataset({train}, unlabeled, 10, 50, &report);
    REQUIRE(admitted.size() == 1);
    CHECK(report.admitted == 1);
    CHECK(report.mean_s == doctest::Approx(50.0));
    CHECK(admitted[0].has_labels);
    CHECK(!admitted[0].has_pose);

    train.gt_reliability[49] = 0;  // now only 49 transferable
    PseudoLabelReport r2;
    auto rejected = pseudo_label_dataset({train}, unlabeled, 10, 50, &r2);
    CHECK(rejected.empty());
    CHECK(r2.skipped == 1);
    REQUIRE(r2.skip_log.size() == 1);
    CHECK(r2.skip_log[0].find("s=49") != std::string::npos);
    CHECK(r2.to_text().find("skip: frame 0") != std::string::npos);
}

TEST_CASE("pseudo labeling never mutates the training frames") {
    Rng rng(213);
    std::vector<Frame> train(3);
    for (auto &f : train) {
        f.descriptor_set = make_set(random_rows(rng, 60, 32, true));
        f.has_labels = true;
        f.gt_coords = random_rows(rng, 60, 3);
        f.gt_reliability.assign(60, 1);
    }
    std::vector<MatrixRMf> before_desc, before_coords;
    for (auto &f : train) {
        before_desc.push_back(f.descriptor_set.descriptors);
        before_coords.push_back(f.gt_coords);
    }
    std::vector<Frame> unlabeled(2);
    unlabeled[0].descriptor_set = make_set(add_noise(train[0].descriptor_set.descriptors, rng, 0.02));
    unlabeled[1].descriptor_set = make_set(random_rows(rng, 60, 32, true));

    auto out1 = pseudo_label_dataset(train, unlabeled, 10, 50);
    for (std::size_t i = 0; i < train.size(); ++i) {
        CHECK(train[i].descriptor_set.descriptors == before_desc[i]);
        CHECK(train[i].gt_coords == before_coords[i]);
    }

    // Deterministic: identical inputs give bitwise-identical outputs.
    auto out2 = pseudo_label_dataset(train, unlabeled, 10, 50);
    REQUIRE(out1.size() == out2.size());
    for (std::size_t i = 0; i < out1.size(); ++i) {
        CHECK(out1[i].gt_coords == out2[i].gt_coords);
        CHECK(out1[i].gt_reliability == out2[i].gt_reliability);
    }
}
