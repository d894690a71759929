#pragma once

#include <algorithm>
#include <fstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "subnetkit/common.hpp"
#include "subnetkit/model.hpp"
#include "subnetkit/rng.hpp"

namespace subnetkit {

// Synthetic pair-classification task with a planted lexical-overlap heuristic.
//
// Premises follow the grammar  [IF?] f* E1 (F E2)? V E3 f*  over disjoint
// entity/verb/filler id ranges. An example entails iff the hypothesis triple
// matches the premise's (subject, verb, object) in role order and no IF
// marker governs the clause. In-domain non-entailments are mostly fresh-entity
// (low overlap) with a small role-swapped minority, so "predict entail on high
// overlap" is a strong in-domain heuristic that fails on every OOD subcase.

struct TaskSpec {
    long n_entities = 20;
    long n_verbs = 8;
    long n_fillers = 24;
    long train_size = 20000;
    long val_size = 2000;
    long ood_size = 1000;
    double heuristic_purity = 0.95;  // P(fresh-entity | non-entail) in train
    std::uint64_t seed = 7;

    static constexpr long PAD = 0, CLS = 1, SEP = 2, IF = 3;
    static constexpr long n_specials = 4;

    long vocab_size() const { return n_specials + n_entities + n_verbs + n_fillers; }
    long entity(long i) const { return n_specials + i; }
    long verb(long i) const { return n_specials + n_entities + i; }
    long filler(long i) const { return n_specials + n_entities + n_verbs + i; }
    bool is_entity(long t) const { return t >= n_specials && t < n_specials + n_entities; }
    bool is_verb(long t) const { return t >= n_specials + n_entities && t < n_specials + n_entities + n_verbs; }
    bool is_filler(long t) const { return t >= n_specials + n_entities + n_verbs && t < vocab_size(); }

    void validate() const {
        if (train_size <= 0 || val_size <= 0 || ood_size <= 0) throw ArgumentError("task: sizes must be positive");
        if (!(heuristic_purity > 0.5 && heuristic_purity <= 1.0))
            throw ArgumentError(cat("task: heuristic purity ", num_str(heuristic_purity), " outside (0.5, 1]"));
        if (n_entities < 4)
            throw ArgumentError(cat("task: vocabulary too small, need >= 4 entities, got ", n_entities));
        if (n_fillers < 5)
            throw ArgumentError(cat("task: vocabulary too small, need >= 5 fillers, got ", n_fillers));
        if (n_verbs < 1) throw ArgumentError("task: vocabulary too small, need >= 1 verb");
    }
};

struct Example {
    std::vector<long> premise;
    std::vector<long> hypothesis;
    int label = 0;
    std::string subcase;
};

using Split = std::vector<Example>;

struct DatasetBundle {
    Split train;
    Split id_val;
    std::vector<std::pair<std::string, Split>> ood;  // insertion order preserved

    const Split* find_ood(const std::string& name) const {
        for (const auto& [n, s] : ood)
            if (n == name) return &s;
        return nullptr;
    }
};

// ---------------------------------------------------------------------------
// Vocabulary

struct Vocab {
    std::vector<std::string> tokens;
    std::unordered_map<std::string, long> index;

    long size() const { return static_cast<long>(tokens.size()); }

    long id_of(const std::string& tok) const {
        auto it = index.find(tok);
        if (it == index.end()) throw DataError(cat("unknown token '", tok, "'"));
        return it->second;
    }

    static Vocab from_spec(const TaskSpec& spec) {
        Vocab v;
        v.tokens = {"[PAD]", "[CLS]", "[SEP]", "[IF]"};
        for (long i = 0; i < spec.n_entities; ++i) v.tokens.push_back(cat("ent", i));
        for (long i = 0; i < spec.n_verbs; ++i) v.tokens.push_back(cat("verb", i));
        for (long i = 0; i < spec.n_fillers; ++i) v.tokens.push_back(cat("fill", i));
        v.rebuild_index();
        return v;
    }

    void rebuild_index() {
        index.clear();
        for (size_t i = 0; i < tokens.size(); ++i) index[tokens[i]] = static_cast<long>(i);
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IoError(cat("cannot write vocab to ", path));
        for (const auto& t : tokens) f << t << "\n";
    }

    static Vocab load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError(cat("cannot read vocab from ", path));
        Vocab v;
        std::string line;
        while (std::getline(f, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            v.tokens.push_back(line);
        }
        v.rebuild_index();
        return v;
    }
};

// ---------------------------------------------------------------------------
// Ground truth

struct ParsedPremise {
    bool if_marked = false;
    long subject = -1;
    long verb = -1;
    long object = -1;
};

inline ParsedPremise parse_premise(const std::vector<long>& premise, const TaskSpec& spec) {
    ParsedPremise p;
    size_t i = 0;
    auto fail = [&](const char* why) { throw DataError(cat("unparseable premise (", why, ")")); };
    if (i < premise.size() && premise[i] == TaskSpec::IF) {
        p.if_marked = true;
        ++i;
    }
    while (i < premise.size() && spec.is_filler(premise[i])) ++i;
    if (i >= premise.size() || !spec.is_entity(premise[i])) fail("missing subject");
    p.subject = premise[i++];
    if (i < premise.size() && spec.is_filler(premise[i])) {
        ++i;  // preposition-like filler introduces a modifier entity
        if (i >= premise.size() || !spec.is_entity(premise[i])) fail("dangling modifier");
        ++i;
    }
    if (i >= premise.size() || !spec.is_verb(premise[i])) fail("missing verb");
    p.verb = premise[i++];
    if (i >= premise.size() || !spec.is_entity(premise[i])) fail("missing object");
    p.object = premise[i++];
    while (i < premise.size() && spec.is_filler(premise[i])) ++i;
    if (i != premise.size()) fail("trailing tokens");
    return p;
}

inline int ground_truth_label(const std::vector<long>& premise, const std::vector<long>& hypothesis,
                              const TaskSpec& spec) {
    ParsedPremise p = parse_premise(premise, spec);
    bool match = !p.if_marked && hypothesis.size() == 3 && hypothesis[0] == p.subject && hypothesis[1] == p.verb &&
                 hypothesis[2] == p.object;
    return match ? 1 : 0;
}

// Fraction of hypothesis token types present in the premise.
inline double overlap_fraction(const std::vector<long>& premise, const std::vector<long>& hypothesis) {
    std::unordered_set<long> pset(premise.begin(), premise.end());
    if (hypothesis.empty()) return 0.0;
    long hits = 0;
    for (long t : hypothesis) hits += pset.count(t) ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(hypothesis.size());
}

inline int heuristic_predict(const std::vector<long>& premise, const std::vector<long>& hypothesis,
                             double threshold = 0.8) {
    return overlap_fraction(premise, hypothesis) >= threshold ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Generation

namespace detail {

// Distinct draws from [0,n) excluding `used`, via rejection on a counter stream.
inline long draw_distinct(std::uint64_t seed, std::uint64_t stream, std::uint64_t example, std::uint64_t slot, long n,
                          std::unordered_set<long>& used) {
    for (std::uint64_t attempt = 0;; ++attempt) {
        long v = static_cast<long>(rng_index({seed, stream, example, slot, attempt}, static_cast<std::size_t>(n)));
        if (!used.count(v)) {
            used.insert(v);
            return v;
        }
    }
}

}  // namespace detail

inline DatasetBundle generate_task(const TaskSpec& spec) {
    spec.validate();
    DatasetBundle bundle;

    auto gen_core = [&](std::uint64_t stream, std::uint64_t i, bool with_if, bool with_modifier,
                        std::vector<long>& premise, long& e1, long& v, long& e2, long& e_mod) {
        std::unordered_set<long> used_f;
        std::unordered_set<long> used_e;
        long lead = static_cast<long>(rng_index({spec.seed, stream, i, stream_id("lead")}, 3));
        long trail = static_cast<long>(rng_index({spec.seed, stream, i, stream_id("trail")}, 3));
        e1 = detail::draw_distinct(spec.seed, stream, i, stream_id("e1"), spec.n_entities, used_e);
        e2 = detail::draw_distinct(spec.seed, stream, i, stream_id("e2"), spec.n_entities, used_e);
        v = static_cast<long>(rng_index({spec.seed, stream, i, stream_id("verb")}, static_cast<std::size_t>(spec.n_verbs)));
        e_mod = -1;
        premise.clear();
        if (with_if) premise.push_back(TaskSpec::IF);
        for (long f = 0; f < lead; ++f)
            premise.push_back(spec.filler(detail::draw_distinct(spec.seed, stream, i, stream_id("lf") + static_cast<std::uint64_t>(f),
                                                                spec.n_fillers, used_f)));
        premise.push_back(spec.entity(e1));
        if (with_modifier) {
            premise.push_back(spec.filler(
                detail::draw_distinct(spec.seed, stream, i, stream_id("modf"), spec.n_fillers, used_f)));
            e_mod = detail::draw_distinct(spec.seed, stream, i, stream_id("mode"), spec.n_entities, used_e);
            premise.push_back(spec.entity(e_mod));
        }
        premise.push_back(spec.verb(v));
        premise.push_back(spec.entity(e2));
        for (long f = 0; f < trail; ++f)
            premise.push_back(spec.filler(detail::draw_distinct(spec.seed, stream, i, stream_id("tf") + static_cast<std::uint64_t>(f),
                                                                spec.n_fillers, used_f)));
        return used_e;
    };

    auto gen_id_split = [&](const char* name, long size) {
        Split split;
        split.reserve(static_cast<size_t>(size));
        std::uint64_t stream = stream_id(name);
        for (long i = 0; i < size; ++i) {
            std::uint64_t ui = static_cast<std::uint64_t>(i);
            std::vector<long> premise;
            long e1, v, e2, e_mod;
            auto used_e = gen_core(stream, ui, false, false, premise, e1, v, e2, e_mod);
            Example ex;
            ex.premise = premise;
            ex.subcase = "id";
            bool entail = rng_unit({spec.seed, stream, ui, stream_id("label")}) < 0.5;
            if (entail) {
                ex.hypothesis = {spec.entity(e1), spec.verb(v), spec.entity(e2)};
                ex.label = 1;
            } else {
                ex.label = 0;
                bool fresh = rng_unit({spec.seed, stream, ui, stream_id("kind")}) < spec.heuristic_purity;
                if (fresh) {
                    long e3 = detail::draw_distinct(spec.seed, stream, ui, stream_id("e3"), spec.n_entities, used_e);
                    long e4 = detail::draw_distinct(spec.seed, stream, ui, stream_id("e4"), spec.n_entities, used_e);
                    ex.hypothesis = {spec.entity(e3), spec.verb(v), spec.entity(e4)};
                } else {
                    ex.hypothesis = {spec.entity(e2), spec.verb(v), spec.entity(e1)};
                }
            }
            split.push_back(std::move(ex));
        }
        return split;
    };

    bundle.train = gen_id_split("train", spec.train_size);
    bundle.id_val = gen_id_split("id_val", spec.val_size);

    // All OOD subcases: 100% hypothesis overlap, label non-entail.
    Split swap_split;
    {
        std::uint64_t stream = stream_id("ood_swap");
        for (long i = 0; i < spec.ood_size; ++i) {
            std::vector<long> premise;
            long e1, v, e2, e_mod;
            gen_core(stream, static_cast<std::uint64_t>(i), false, false, premise, e1, v, e2, e_mod);
            Example ex;
            ex.premise = std::move(premise);
            ex.hypothesis = {spec.entity(e2), spec.verb(v), spec.entity(e1)};
            ex.label = 0;
            ex.subcase = "swap";
            swap_split.push_back(std::move(ex));
        }
    }
    Split if_split;
    {
        std::uint64_t stream = stream_id("ood_if");
        for (long i = 0; i < spec.ood_size; ++i) {
            std::vector<long> premise;
            long e1, v, e2, e_mod;
            gen_core(stream, static_cast<std::uint64_t>(i), true, false, premise, e1, v, e2, e_mod);
            Example ex;
            ex.premise = std::move(premise);
            ex.hypothesis = {spec.entity(e1), spec.verb(v), spec.entity(e2)};
            ex.label = 0;
            ex.subcase = "embed-if";
            if_split.push_back(std::move(ex));
        }
    }
    Split prep_split;
    {
        std::uint64_t stream = stream_id("ood_prep");
        for (long i = 0; i < spec.ood_size; ++i) {
            std::vector<long> premise;
            long e1, v, e2, e_mod;
            gen_core(stream, static_cast<std::uint64_t>(i), false, true, premise, e1, v, e2, e_mod);
            Example ex;
            ex.premise = std::move(premise);
            // Claims the modifier entity as subject; full overlap, non-entail.
            ex.hypothesis = {spec.entity(e_mod), spec.verb(v), spec.entity(e2)};
            ex.label = 0;
            ex.subcase = "prep-like";
            prep_split.push_back(std::move(ex));
        }
    }
    bundle.ood.emplace_back("swap", std::move(swap_split));
    bundle.ood.emplace_back("embed-if", std::move(if_split));
    bundle.ood.emplace_back("prep-like", std::move(prep_split));
    return bundle;
}

// ---------------------------------------------------------------------------
// Line-delimited persistence

inline void save_jsonl(const std::string& path, const Split& split, const Vocab& vocab) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError(cat("cannot write ", path));
    for (const auto& ex : split) {
        nlohmann::ordered_json j;
        auto toks = [&](const std::vector<long>& ids) {
            std::vector<std::string> out;
            for (long id : ids) out.push_back(vocab.tokens.at(static_cast<size_t>(id)));
            return out;
        };
        j["premise"] = toks(ex.premise);
        j["hypothesis"] = toks(ex.hypothesis);
        j["label"] = ex.label;
        j["subcase"] = ex.subcase;
        f << j.dump() << "\n";
    }
}

inline Split load_jsonl(const std::string& path, const Vocab& vocab, std::vector<std::string>* warnings = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError(cat("cannot read ", path));
    Split split;
    std::string line;
    long lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(cat(path, " line ", lineno, ": malformed json: ", e.what()));
        }
        for (const char* field : {"premise", "hypothesis", "label", "subcase"})
            if (!j.contains(field)) throw DataError(cat(path, " line ", lineno, ": missing field '", field, "'"));
        Example ex;
        auto ids = [&](const char* field) {
            if (!j[field].is_array()) throw DataError(cat(path, " line ", lineno, ": field '", field, "' must be a token list"));
            std::vector<long> out;
            for (const auto& t : j[field]) {
                if (!t.is_string()) throw DataError(cat(path, " line ", lineno, ": field '", field, "' must hold strings"));
                try {
                    out.push_back(vocab.id_of(t.get<std::string>()));
                } catch (const DataError& e) {
                    throw DataError(cat(path, " line ", lineno, ": ", e.what()));
                }
            }
            return out;
        };
        ex.premise = ids("premise");
        ex.hypothesis = ids("hypothesis");
        if (!j["label"].is_number_integer() || (j["label"] != 0 && j["label"] != 1))
            throw DataError(cat(path, " line ", lineno, ": label must be 0 or 1"));
        ex.label = j["label"].get<int>();
        if (!j["subcase"].is_string()) throw DataError(cat(path, " line ", lineno, ": subcase must be a string"));
        ex.subcase = j["subcase"].get<std::string>();
        split.push_back(std::move(ex));
    }
    if (split.empty() && warnings) warnings->push_back(cat(path, ": empty split"));
    return split;
}

// ---------------------------------------------------------------------------
// Batch encoding: [CLS] premise [SEP] hypothesis [SEP], padded to max_seq.

inline PairBatch encode_batch(const Split& split, const std::vector<size_t>& indices, long max_seq) {
    PairBatch b;
    b.batch = static_cast<long>(indices.size());
    b.seq = max_seq;
    b.token_ids.assign(static_cast<size_t>(b.batch * b.seq), TaskSpec::PAD);
    b.segment_ids.assign(static_cast<size_t>(b.batch * b.seq), 0);
    b.valid.assign(static_cast<size_t>(b.batch * b.seq), 0);
    b.labels.resize(static_cast<size_t>(b.batch));
    for (long e = 0; e < b.batch; ++e) {
        const Example& ex = split[indices[static_cast<size_t>(e)]];
        long need = 3 + static_cast<long>(ex.premise.size() + ex.hypothesis.size());
        if (need > max_seq)
            throw ArgumentError(cat("encode: example ", indices[static_cast<size_t>(e)], " needs ", need,
                                    " positions, max_seq is ", max_seq));
        long pos = 0;
        auto put = [&](long tok, long seg) {
            b.token_ids[static_cast<size_t>(e * b.seq + pos)] = tok;
            b.segment_ids[static_cast<size_t>(e * b.seq + pos)] = seg;
            b.valid[static_cast<size_t>(e * b.seq + pos)] = 1;
            ++pos;
        };
        put(TaskSpec::CLS, 0);
        for (long t : ex.premise) put(t, 0);
        put(TaskSpec::SEP, 0);
        for (long t : ex.hypothesis) put(t, 1);
        put(TaskSpec::SEP, 1);
        b.labels[static_cast<size_t>(e)] = ex.label;
    }
    return b;
}

inline std::vector<size_t> all_indices(const Split& split) {
    std::vector<size_t> idx(split.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return idx;
}

}  // namespace subnetkit
