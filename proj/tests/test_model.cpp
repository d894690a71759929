#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "subnetkit/model.hpp"
#include "subnetkit/taskgen.hpp"

using namespace subnetkit;
using Tf = Tensor<float>;
using Td = Tensor<double>;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.layers = 2;
    c.heads = 2;
    c.hidden = 8;
    c.mlp_hidden = 16;
    c.vocab_size = 30;
    c.max_positions = 12;
    c.n_labels = 2;
    return c;
}

TaskSpec tiny_task() {
    TaskSpec s;
    s.n_entities = 8;
    s.n_verbs = 3;
    s.n_fillers = 6;
    s.train_size = 64;
    s.val_size = 32;
    s.ood_size = 16;
    s.seed = 5;
    return s;
}

PairBatch tiny_batch() {
    TaskSpec spec = tiny_task();
    DatasetBundle b = generate_task(spec);
    return encode_batch(b.train, {0, 1, 2, 3}, 12);
}

template <class Scalar>
void zero_param(Tensor<Scalar>& t) {
    t.mutable_value().setZero();
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig c = tiny_config();
    c.hidden = 9;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_config();
    c.layers = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK(tiny_config().mlp_dim() == 16);
    ModelConfig d = tiny_config();
    d.mlp_hidden = 0;
    CHECK(d.mlp_dim() == 4 * d.hidden);
}

TEST_CASE("component indexing round-trips and parses") {
    ModelConfig c = tiny_config();
    CHECK(component_count(c) == 6);
    for (long i = 0; i < component_count(c); ++i) CHECK(component_index(c, component_at(c, i)) == i);
    CHECK(ComponentId::parse("L1.H0").name() == "L1.H0");
    CHECK(ComponentId::parse("L0.MLP").is_mlp());
    CHECK_THROWS_AS(ComponentId::parse("garbage"), ArgumentError);
    CHECK_THROWS_AS(component_index(c, ComponentId{5, 0}), ArgumentError);
}

TEST_CASE("init is deterministic per seed and parameter count matches the closed form") {
    ModelConfig c = tiny_config();
    auto m1 = init_model<float>(c, 3);
    auto m2 = init_model<float>(c, 3);
    auto p1 = m1.named_params();
    auto p2 = m2.named_params();
    REQUIRE(p1.size() == p2.size());
    for (size_t i = 0; i < p1.size(); ++i)
        for (long j = 0; j < p1[i].second.numel(); ++j) CHECK(p1[i].second[j] == p2[i].second[j]);

    auto m3 = init_model<float>(c, 4);
    bool differs = false;
    auto p3 = m3.named_params();
    for (size_t i = 0; i < p1.size() && !differs; ++i)
        for (long j = 0; j < p1[i].second.numel() && !differs; ++j) differs = p1[i].second[j] != p3[i].second[j];
    CHECK(differs);

    // independent count: embeddings + per-layer (2 LN pairs + heads + MLP) + classifier
    const long d = c.hidden, hd = c.head_dim(), dh = c.mlp_dim();
    long expect = c.vocab_size * d + c.max_positions * d + 2 * d;                       // embeddings
    long per_head = 3 * (d * hd + hd) + hd * d + d;                                     // qkv + output proj
    long per_layer = 4 * d + c.heads * per_head + (d * dh + dh + dh * d + d);           // LNs + heads + MLP
    expect += c.layers * per_layer + (d * c.n_labels + c.n_labels);                     // + classifier
    CHECK(m1.param_count() == expect);

    // component weights agree with the same arithmetic
    Eigen::ArrayXd w = component_weights(c);
    CHECK(w[component_index(c, ComponentId{0, 0})] == doctest::Approx(static_cast<double>(per_head)));
    CHECK(w[component_index(c, ComponentId{0, -1})] == doctest::Approx(static_cast<double>(d * dh + dh + dh * d + d)));
}

TEST_CASE("attention layer: all gates one with zero output projections is the identity") {
    ModelConfig c = tiny_config();
    auto m = init_model<float>(c, 1);
    for (auto& H : m.layers[0].heads) {
        zero_param(H.wo);
        zero_param(H.bo);
    }
    PairBatch pb = tiny_batch();
    Tf x = Tf::from_array({pb.batch, pb.seq, c.hidden},
                          Tf::Array::Random(pb.batch * pb.seq * c.hidden));
    Tf bias = attention_bias<float>(pb);
    Tf out = attention_layer(x, m.layers[0], 0, c, bias);
    for (long i = 0; i < x.numel(); ++i) CHECK(out[i] == x[i]);
}

TEST_CASE("attention layer: gate zero replaces every head with its mean") {
    ModelConfig c = tiny_config();
    auto m = init_model<float>(c, 1);
    PairBatch pb = tiny_batch();
    Tf x = Tf::from_array({pb.batch, pb.seq, c.hidden}, Tf::Array::Random(pb.batch * pb.seq * c.hidden));
    Tf bias = attention_bias<float>(pb);

    GateVector<float> gates(static_cast<size_t>(component_count(c)));
    Eigen::VectorXd m0 = Eigen::VectorXd::LinSpaced(c.hidden, 0.5, 1.2);
    Eigen::VectorXd m1 = Eigen::VectorXd::LinSpaced(c.hidden, -1.0, 0.3);
    gates[component_index(c, ComponentId{0, 0})] = {GateKind::Replace, {}, m0};
    gates[component_index(c, ComponentId{0, 1})] = {GateKind::Replace, {}, m1};
    Tf out = attention_layer(x, m.layers[0], 0, c, bias, &gates);
    for (long r = 0; r < pb.batch * pb.seq; ++r)
        for (long j = 0; j < c.hidden; ++j) {
            float expect = x[r * c.hidden + j] + static_cast<float>(m0[j] + m1[j]);
            CHECK(out[r * c.hidden + j] == doctest::Approx(expect).epsilon(1e-6));
        }
}

TEST_CASE("attention layer matches a hand computation on a tiny instance") {
    // one example, two tokens, one head, d = hd = 2
    ModelConfig c;
    c.layers = 1;
    c.heads = 1;
    c.hidden = 2;
    c.mlp_hidden = 4;
    c.vocab_size = 4;
    c.max_positions = 4;
    auto m = init_model<double>(c, 0);
    auto& H = m.layers[0].heads[0];
    H.wq = Td::from_values({2, 2}, {0.4, -0.3, 0.2, 0.5});
    H.bq = Td::from_values({2}, {0.1, -0.1});
    H.wk = Td::from_values({2, 2}, {0.3, 0.2, -0.4, 0.1});
    H.bk = Td::from_values({2}, {0.0, 0.2});
    H.wv = Td::from_values({2, 2}, {0.5, 0.1, 0.2, -0.2});
    H.bv = Td::from_values({2}, {-0.1, 0.0});
    H.wo = Td::from_values({2, 2}, {0.7, -0.5, 0.3, 0.6});
    H.bo = Td::from_values({2}, {0.05, -0.05});

    PairBatch pb;
    pb.batch = 1;
    pb.seq = 2;
    pb.token_ids = {1, 2};
    pb.segment_ids = {0, 0};
    pb.valid = {1, 1};
    pb.labels = {0};

    Td x = Td::from_values({1, 2, 2}, {0.8, -0.4, -0.2, 1.0});
    Td out = attention_layer(x, m.layers[0], 0, c, attention_bias<double>(pb));

    // straight-line double-precision hand computation
    auto ln_row = [&](double a, double b, double& oa, double& ob) {
        double mu = 0.5 * (a + b);
        double var = 0.5 * ((a - mu) * (a - mu) + (b - mu) * (b - mu));
        double inv = 1.0 / std::sqrt(var + 1e-5);
        oa = (a - mu) * inv;
        ob = (b - mu) * inv;
    };
    double h[2][2];
    ln_row(0.8, -0.4, h[0][0], h[0][1]);
    ln_row(-0.2, 1.0, h[1][0], h[1][1]);
    double wq[2][2] = {{0.4, -0.3}, {0.2, 0.5}}, wk[2][2] = {{0.3, 0.2}, {-0.4, 0.1}},
           wv[2][2] = {{0.5, 0.1}, {0.2, -0.2}}, wo[2][2] = {{0.7, -0.5}, {0.3, 0.6}};
    double bq[2] = {0.1, -0.1}, bk[2] = {0.0, 0.2}, bv[2] = {-0.1, 0.0}, bo[2] = {0.05, -0.05};
    double q[2][2], k[2][2], v[2][2];
    for (int t = 0; t < 2; ++t)
        for (int j = 0; j < 2; ++j) {
            q[t][j] = h[t][0] * wq[0][j] + h[t][1] * wq[1][j] + bq[j];
            k[t][j] = h[t][0] * wk[0][j] + h[t][1] * wk[1][j] + bk[j];
            v[t][j] = h[t][0] * wv[0][j] + h[t][1] * wv[1][j] + bv[j];
        }
    double scale = 1.0 / std::sqrt(2.0);
    for (int t = 0; t < 2; ++t) {
        double s0 = (q[t][0] * k[0][0] + q[t][1] * k[0][1]) * scale;
        double s1 = (q[t][0] * k[1][0] + q[t][1] * k[1][1]) * scale;
        double mx = std::max(s0, s1);
        double e0 = std::exp(s0 - mx), e1 = std::exp(s1 - mx);
        double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
        double ctx0 = a0 * v[0][0] + a1 * v[1][0];
        double ctx1 = a0 * v[0][1] + a1 * v[1][1];
        double c0 = ctx0 * wo[0][0] + ctx1 * wo[1][0] + bo[0];
        double c1 = ctx0 * wo[0][1] + ctx1 * wo[1][1] + bo[1];
        double expect0 = (t == 0 ? 0.8 : -0.2) + c0;
        double expect1 = (t == 0 ? -0.4 : 1.0) + c1;
        CHECK(out[t * 2 + 0] == doctest::Approx(expect0).epsilon(1e-6));
        CHECK(out[t * 2 + 1] == doctest::Approx(expect1).epsilon(1e-6));
    }
}

TEST_CASE("mlp layer identities and duplicate-implementation oracle") {
    ModelConfig c = tiny_config();
    auto m = init_model<double>(c, 2);
    PairBatch pb = tiny_batch();
    Td x = Td::from_array({pb.batch, pb.seq, c.hidden}, Td::Array::Random(pb.batch * pb.seq * c.hidden));

    // gate = 1, W_D = 0: identity
    auto m0 = init_model<double>(c, 2);
    zero_param(m0.layers[0].w_down);
    zero_param(m0.layers[0].b_down);
    Td out0 = mlp_layer(x, m0.layers[0], 0, c);
    for (long i = 0; i < x.numel(); ++i) CHECK(out0[i] == x[i]);

    // gate = 0 with mean: X + mean broadcast
    GateVector<double> gates(static_cast<size_t>(component_count(c)));
    Eigen::VectorXd mm = Eigen::VectorXd::LinSpaced(c.hidden, -0.5, 0.5);
    gates[component_index(c, ComponentId{0, -1})] = {GateKind::Replace, {}, mm};
    Td out_replaced = mlp_layer(x, m.layers[0], 0, c, &gates);
    for (long r = 0; r < pb.batch * pb.seq; ++r)
        for (long j = 0; j < c.hidden; ++j)
            CHECK(out_replaced[r * c.hidden + j] == doctest::Approx(x[r * c.hidden + j] + mm[j]).epsilon(1e-9));

    // independent straight-line reimplementation
    Td out = mlp_layer(x, m.layers[0], 0, c);
    const long dh = c.mlp_dim();
    const auto& L = m.layers[0];
    for (long r = 0; r < pb.batch * pb.seq; ++r) {
        // layer norm
        double mu = 0, var = 0;
        for (long j = 0; j < c.hidden; ++j) mu += x[r * c.hidden + j];
        mu /= c.hidden;
        for (long j = 0; j < c.hidden; ++j) {
            double dd = x[r * c.hidden + j] - mu;
            var += dd * dd;
        }
        var /= c.hidden;
        double inv = 1.0 / std::sqrt(var + 1e-5);
        std::vector<double> hrow(static_cast<size_t>(c.hidden));
        for (long j = 0; j < c.hidden; ++j)
            hrow[static_cast<size_t>(j)] = (x[r * c.hidden + j] - mu) * inv * L.ln2_g[j] + L.ln2_b[j];
        std::vector<double> inner(static_cast<size_t>(dh));
        for (long u = 0; u < dh; ++u) {
            double acc = L.b_up[u];
            for (long j = 0; j < c.hidden; ++j) acc += hrow[static_cast<size_t>(j)] * L.w_up[j * dh + u];
            double t = std::tanh(0.7978845608028654 * (acc + 0.044715 * acc * acc * acc));
            inner[static_cast<size_t>(u)] = 0.5 * acc * (1.0 + t);
        }
        for (long j = 0; j < c.hidden; ++j) {
            double acc = L.b_down[j];
            for (long u = 0; u < dh; ++u) acc += inner[static_cast<size_t>(u)] * L.w_down[u * c.hidden + j];
            CHECK(out[r * c.hidden + j] == doctest::Approx(x[r * c.hidden + j] + acc).epsilon(1e-9));
        }
    }
}

TEST_CASE("forward: all-ones mask equals no mask bit for bit; gate identity holds") {
    ModelConfig c = tiny_config();
    auto m = init_model<float>(c, 7);
    PairBatch pb = tiny_batch();
    auto plain = forward(m, pb);
    MaskAssignment ones = MaskAssignment::all_ones(c);
    auto gv = gates_from_assignment<float>(c, ones);
    auto masked = forward(m, pb, &gv);
    REQUIRE(plain.logits.numel() == masked.logits.numel());
    for (long i = 0; i < plain.logits.numel(); ++i) CHECK(plain.logits[i] == masked.logits[i]);
}

TEST_CASE("forward: permuting examples permutes logits") {
    ModelConfig c = tiny_config();
    auto m = init_model<float>(c, 7);
    TaskSpec spec = tiny_task();
    DatasetBundle b = generate_task(spec);
    PairBatch p1 = encode_batch(b.train, {0, 1, 2, 3}, 12);
    PairBatch p2 = encode_batch(b.train, {2, 0, 3, 1}, 12);
    auto o1 = forward(m, p1);
    auto o2 = forward(m, p2);
    std::vector<long> perm{2, 0, 3, 1};
    for (long e = 0; e < 4; ++e)
        for (long k = 0; k < c.n_labels; ++k)
            CHECK(o2.logits[e * c.n_labels + k] == o1.logits[perm[static_cast<size_t>(e)] * c.n_labels + k]);
}

TEST_CASE("forward: attention rows over valid positions sum to one; out-of-range id rejected") {
    ModelConfig c = tiny_config();
    auto m = init_model<float>(c, 7);
    PairBatch pb = tiny_batch();
    ForwardOptions opts;
    opts.capture_attention = true;
    auto out = forward(m, pb, nullptr, opts);
    for (long l = 0; l < c.layers; ++l)
        for (long h = 0; h < c.heads; ++h) {
            const auto& amap = out.attention[static_cast<size_t>(l)][static_cast<size_t>(h)];
            for (long b = 0; b < pb.batch; ++b)
                for (long q = 0; q < pb.seq; ++q) {
                    if (!pb.is_valid(b, q)) continue;
                    double valid_sum = 0, invalid_sum = 0;
                    for (long k = 0; k < pb.seq; ++k)
                        (pb.is_valid(b, k) ? valid_sum : invalid_sum) += amap(b * pb.seq + q, k);
                    CHECK(valid_sum == doctest::Approx(1.0).epsilon(1e-5));
                    CHECK(invalid_sum == doctest::Approx(0.0));
                }
        }

    PairBatch bad = tiny_batch();
    bad.token_ids[5] = c.vocab_size + 3;
    CHECK_THROWS_AS(forward(m, bad), ArgumentError);
}

TEST_CASE("padding invariance: extra padded positions leave logits unchanged") {
    ModelConfig c = tiny_config();
    auto m = init_model<float>(c, 7);
    TaskSpec spec = tiny_task();
    DatasetBundle b = generate_task(spec);
    // pick two examples short enough to leave padding headroom
    std::vector<size_t> idx;
    for (size_t i = 0; i < b.train.size() && idx.size() < 2; ++i)
        if (3 + b.train[i].premise.size() + b.train[i].hypothesis.size() <= 10) idx.push_back(i);
    REQUIRE(idx.size() == 2);
    PairBatch shorter = encode_batch(b.train, idx, 10);
    PairBatch longer = encode_batch(b.train, idx, 12);
    auto o1 = forward(m, shorter);
    auto o2 = forward(m, longer);
    for (long i = 0; i < o1.logits.numel(); ++i)
        CHECK(o1.logits[i] == doctest::Approx(o2.logits[i]).epsilon(1e-6));
}

TEST_CASE("gate linearity: a gated layer's output is affine in each component's gate") {
    ModelConfig c = tiny_config();
    auto m = init_model<double>(c, 9);
    PairBatch pb = tiny_batch();
    Td x = Td::from_array({pb.batch, pb.seq, c.hidden}, Td::Array::Random(pb.batch * pb.seq * c.hidden));
    Td bias = attention_bias<double>(pb);
    Eigen::VectorXd mean_vec = Eigen::VectorXd::LinSpaced(c.hidden, -0.2, 0.4);

    auto check_affine = [&](auto&& layer_out, long comp) {
        auto out_at = [&](double z) {
            MaskAssignment ma = MaskAssignment::all_ones(c);
            for (long i = 0; i < component_count(c); ++i) ma.mean[static_cast<size_t>(i)] = mean_vec;
            ma.gate[comp] = z;
            auto gv = gates_from_assignment<double>(c, ma);
            return layer_out(gv);
        };
        Td at0 = out_at(0.0);
        Td at1 = out_at(1.0);
        Td mid = out_at(0.3);
        for (long i = 0; i < mid.numel(); ++i) {
            double expect = 0.3 * at1[i] + 0.7 * at0[i];
            CHECK(mid[i] == doctest::Approx(expect).epsilon(1e-9));
        }
    };

    check_affine([&](const GateVector<double>& gv) { return attention_layer(x, m.layers[0], 0, c, bias, &gv); },
                 component_index(c, ComponentId{0, 1}));
    check_affine([&](const GateVector<double>& gv) { return mlp_layer(x, m.layers[1], 1, c, &gv); },
                 component_index(c, ComponentId{1, -1}));
}

TEST_CASE("mask assignment validation: gate below one needs a mean") {
    ModelConfig c = tiny_config();
    MaskAssignment ma = MaskAssignment::all_ones(c);
    ma.gate[2] = 0.5;
    CHECK_THROWS_AS(gates_from_assignment<float>(c, ma), ConfigError);
    ma.gate[2] = 2.0;
    CHECK_THROWS_AS(gates_from_assignment<float>(c, ma), ConfigError);
}
