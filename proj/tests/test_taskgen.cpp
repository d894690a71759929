#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "subnetkit/taskgen.hpp"

using namespace subnetkit;

namespace {

TaskSpec small_spec() {
    TaskSpec s;
    s.n_entities = 10;
    s.n_verbs = 4;
    s.n_fillers = 8;
    s.train_size = 400;
    s.val_size = 120;
    s.ood_size = 60;
    s.seed = 11;
    return s;
}

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() / ("subnetkit_test_" + std::to_string(::getpid()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("generation is deterministic") {
    TaskSpec spec = small_spec();
    DatasetBundle a = generate_task(spec);
    DatasetBundle b = generate_task(spec);
    REQUIRE(a.train.size() == b.train.size());
    for (size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].premise == b.train[i].premise);
        CHECK(a.train[i].hypothesis == b.train[i].hypothesis);
        CHECK(a.train[i].label == b.train[i].label);
    }
    TaskSpec other = spec;
    other.seed = 12;
    DatasetBundle c = generate_task(other);
    bool differs = false;
    for (size_t i = 0; i < a.train.size() && !differs; ++i)
        differs = a.train[i].premise != c.train[i].premise || a.train[i].hypothesis != c.train[i].hypothesis;
    CHECK(differs);
}

TEST_CASE("ood subcases have full overlap and non-entail labels") {
    DatasetBundle b = generate_task(small_spec());
    REQUIRE(b.ood.size() == 3);
    CHECK(b.ood[0].first == "swap");
    CHECK(b.ood[1].first == "embed-if");
    CHECK(b.ood[2].first == "prep-like");
    for (const auto& [name, split] : b.ood) {
        REQUIRE(!split.empty());
        for (const auto& ex : split) {
            CHECK(ex.label == 0);
            CHECK(overlap_fraction(ex.premise, ex.hypothesis) == doctest::Approx(1.0));
            CHECK(ex.subcase == name);
        }
    }
}

TEST_CASE("ground-truth labeler reproduces stored labels") {
    TaskSpec spec = small_spec();
    DatasetBundle b = generate_task(spec);
    auto check_split = [&](const Split& s) {
        for (const auto& ex : s) CHECK(ground_truth_label(ex.premise, ex.hypothesis, spec) == ex.label);
    };
    check_split(b.train);
    check_split(b.id_val);
    for (const auto& [name, split] : b.ood) check_split(split);
}

TEST_CASE("train labels roughly balanced; heuristic accuracies bracket the planted rule") {
    TaskSpec spec;
    spec.seed = 3;
    spec.train_size = 20000;
    DatasetBundle b = generate_task(spec);
    long pos = 0;
    for (const auto& ex : b.train) pos += ex.label;
    double frac = static_cast<double>(pos) / static_cast<double>(b.train.size());
    CHECK(frac >= 0.48);
    CHECK(frac <= 0.52);

    auto heuristic_acc = [&](const Split& s) {
        long correct = 0;
        for (const auto& ex : s) correct += heuristic_predict(ex.premise, ex.hypothesis) == ex.label ? 1 : 0;
        return static_cast<double>(correct) / static_cast<double>(s.size());
    };
    CHECK(heuristic_acc(b.train) >= spec.heuristic_purity - 0.02);
    for (const auto& [name, split] : b.ood) CHECK(heuristic_acc(split) <= 0.02);
}

TEST_CASE("spec validation rejects tiny vocabularies and bad purity") {
    TaskSpec s = small_spec();
    s.n_entities = 3;
    CHECK_THROWS_AS(generate_task(s), ArgumentError);
    TaskSpec s2 = small_spec();
    s2.heuristic_purity = 0.4;
    CHECK_THROWS_AS(generate_task(s2), ArgumentError);
    TaskSpec s3 = small_spec();
    s3.train_size = 0;
    CHECK_THROWS_AS(generate_task(s3), ArgumentError);
}

TEST_CASE("jsonl round trip is identity; errors carry line numbers") {
    TaskSpec spec = small_spec();
    DatasetBundle b = generate_task(spec);
    Vocab vocab = Vocab::from_spec(spec);
    TempDir tmp;
    auto path = (tmp.path / "train.jsonl").string();
    save_jsonl(path, b.train, vocab);
    Split loaded = load_jsonl(path, vocab);
    REQUIRE(loaded.size() == b.train.size());
    for (size_t i = 0; i < loaded.size(); ++i) {
        CHECK(loaded[i].premise == b.train[i].premise);
        CHECK(loaded[i].hypothesis == b.train[i].hypothesis);
        CHECK(loaded[i].label == b.train[i].label);
        CHECK(loaded[i].subcase == b.train[i].subcase);
    }

    auto bad = (tmp.path / "bad.jsonl").string();
    {
        std::ofstream f(bad);
        f << R"({"premise":["ent1"],"hypothesis":["ent1"],"label":2,"subcase":"id"})" << "\n";
    }
    CHECK_THROWS_WITH_AS(load_jsonl(bad, vocab), doctest::Contains("line 1"), DataError);

    auto unknown = (tmp.path / "unknown.jsonl").string();
    {
        std::ofstream f(unknown);
        f << R"({"premise":["entX"],"hypothesis":["ent1"],"label":0,"subcase":"id"})" << "\n";
    }
    CHECK_THROWS_WITH_AS(load_jsonl(unknown, vocab), doctest::Contains("entX"), DataError);

    auto missing = (tmp.path / "missing.jsonl").string();
    {
        std::ofstream f(missing);
        f << R"({"premise":["ent1"],"label":0,"subcase":"id"})" << "\n";
    }
    CHECK_THROWS_WITH_AS(load_jsonl(missing, vocab), doctest::Contains("hypothesis"), DataError);

    auto empty = (tmp.path / "empty.jsonl").string();
    { std::ofstream f(empty); }
    std::vector<std::string> warnings;
    Split es = load_jsonl(empty, vocab, &warnings);
    CHECK(es.empty());
    CHECK(warnings.size() == 1);
}

TEST_CASE("vocab file round trip") {
    TaskSpec spec = small_spec();
    Vocab vocab = Vocab::from_spec(spec);
    CHECK(vocab.size() == spec.vocab_size());
    CHECK(vocab.id_of("[PAD]") == 0);
    CHECK(vocab.id_of("[CLS]") == 1);
    TempDir tmp;
    auto path = (tmp.path / "vocab.txt").string();
    vocab.save(path);
    Vocab loaded = Vocab::load(path);
    CHECK(loaded.tokens == vocab.tokens);
    CHECK_THROWS_AS(vocab.id_of("nope"), DataError);
}

TEST_CASE("encode packs CLS/SEP structure with segments and padding") {
    TaskSpec spec = small_spec();
    DatasetBundle b = generate_task(spec);
    PairBatch pb = encode_batch(b.train, {0, 1, 2}, 16);
    CHECK(pb.batch == 3);
    CHECK(pb.seq == 16);
    for (long e = 0; e < pb.batch; ++e) {
        CHECK(pb.token(e, 0) == TaskSpec::CLS);
        CHECK(pb.segment(e, 0) == 0);
        // exactly two SEP tokens, hypothesis between them gets segment 1
        long seps = 0;
        for (long s = 0; s < pb.seq; ++s)
            if (pb.token(e, s) == TaskSpec::SEP) ++seps;
        CHECK(seps == 2);
        // padding is invalid and PAD-valued
        bool in_pad = false;
        for (long s = 0; s < pb.seq; ++s) {
            if (!pb.is_valid(e, s)) in_pad = true;
            if (in_pad) {
                CHECK(pb.token(e, s) == TaskSpec::PAD);
                CHECK_FALSE(pb.is_valid(e, s));
            }
        }
    }
    CHECK_THROWS_AS(encode_batch(b.train, {0}, 6), ArgumentError);
}
