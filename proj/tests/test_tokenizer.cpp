#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "lmlab/rng.hpp"
#include "lmlab/tokenizer.hpp"

using namespace lmlab;

TEST_CASE("abcababc learns (a,b)->d then (d,c)->e and encodes to ede") {
    Vocabulary v = train_bpe({"abcababc"}, 10, {"a", "b", "c"});
    REQUIRE(v.merges.size() == 2);
    // a=1 b=2 c=3 d=4 e=5
    CHECK(v.merges[0].left == 1);
    CHECK(v.merges[0].right == 2);
    CHECK(v.merges[0].new_id == 4);
    CHECK(v.merges[1].left == 4);
    CHECK(v.merges[1].right == 3);
    CHECK(v.merges[1].new_id == 5);
    CHECK(v.size() == 8);  // 3 base + 2 merges + 3 specials

    TokenSeq enc = encode(v, "abcababc");
    CHECK(enc == TokenSeq{5, 4, 5});
    CHECK(decode(v, enc) == "abcababc");

    CHECK(encode(v, "ba") == TokenSeq{2, 1});
    CHECK(encode(v, "").empty());
    CHECK(decode(v, {}).empty());
}

TEST_CASE("all-unique pairs learn nothing") {
    Vocabulary v = train_bpe({"abc"}, 10, {"a", "b", "c"});
    CHECK(v.merges.empty());
}

TEST_CASE("aaaa merges once under the count>=2 stopping rule") {
    // After (a,a)->d the corpus reads "dd", where the pair (d,d) occurs a
    // single time, so compression stops regardless of the merge budget.
    Vocabulary v = train_bpe({"aaaa"}, 2, {"a"});
    REQUIRE(v.merges.size() == 1);
    CHECK(v.merges[0].left == 1);
    CHECK(v.merges[0].right == 1);
    CHECK(encode(v, "aaaa") == TokenSeq{2, 2});
}

TEST_CASE("max_merges zero keeps the base alphabet") {
    Vocabulary v = train_bpe({"abcababc"}, 0, {"a", "b", "c"});
    CHECK(v.merges.empty());
    CHECK(v.size() == 6);
}

TEST_CASE("empty corpus is rejected") {
    CHECK_THROWS_AS(train_bpe({}, 4), ContractViolation);
    CHECK_THROWS_AS(train_bpe({""}, 4), ContractViolation);
}

TEST_CASE("characters outside the declared alphabet are rejected with position") {
    Vocabulary v = train_bpe({"abcababc"}, 2, {"a", "b", "c"});
    try {
        encode(v, "abxc");
        CHECK(false);
    } catch (const ContractViolation& e) {
        const std::string msg = e.what();
        CHECK(msg.find("'x'") != std::string::npos);
        CHECK(msg.find("2") != std::string::npos);
    }
    CHECK_THROWS_AS(train_bpe({"abq"}, 2, {"a", "b"}), ContractViolation);
}

TEST_CASE("decode rejects out-of-range ids") {
    Vocabulary v = train_bpe({"abcababc"}, 2, {"a", "b", "c"});
    CHECK_THROWS_AS(decode(v, {99}), ContractViolation);
    CHECK(decode(v, {v.bos_id(), 1, v.eos_id(), v.pad_id()}) == "<bos>a<eos><pad>");
}

TEST_CASE("round trip on 1000 random corpora, compression monotone") {
    SeededRng rng(77);
    const std::vector<std::string> base = {"a", "b", "c", "d"};
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t len = 1 + (rng.next_u64() % 40);
        std::string text;
        for (std::size_t i = 0; i < len; ++i) text += base[rng.next_u64() % base.size()];
        Vocabulary v = train_bpe({text}, rng.next_u64() % 6, base);
        TokenSeq enc = encode(v, text);
        CHECK(decode(v, enc) == text);
        CHECK(enc.size() <= len);
    }
}

TEST_CASE("training is deterministic, ties broken by lowest pair") {
    Vocabulary v1 = train_bpe({"abcababc", "ccc"}, 3, {"a", "b", "c"});
    Vocabulary v2 = train_bpe({"abcababc", "ccc"}, 3, {"a", "b", "c"});
    REQUIRE(v1.merges.size() == v2.merges.size());
    for (std::size_t i = 0; i < v1.merges.size(); ++i) {
        CHECK(v1.merges[i].left == v2.merges[i].left);
        CHECK(v1.merges[i].right == v2.merges[i].right);
    }
    // "abab": pairs ab:2, ba:1 -> merge (a,b). "abba": ab:1 ba:1 bb:1 -> none.
    Vocabulary tie = train_bpe({"aabb"}, 1, {"a", "b"});
    // pairs: aa:1 ab:1 bb:1 -> no merge at threshold 2
    CHECK(tie.merges.empty());
    // "aa bb aa bb": aa:2, bb:2 -> tie broken toward (a,a)
    Vocabulary tie2 = train_bpe({"aa", "bb", "aa", "bb"}, 1, {"a", "b"});
    REQUIRE(tie2.merges.size() == 1);
    CHECK(tie2.merges[0].left == 1);
    CHECK(tie2.merges[0].right == 1);
}

TEST_CASE("vocabulary file round trip and hash stability") {
    Vocabulary v = train_bpe({"ab ab  ab"}, 3, {"a", "b", " "});
    const std::string text = save_vocabulary(v);
    CHECK(text.rfind("bpe-vocab v1", 0) == 0);
    Vocabulary w = load_vocabulary(text);
    CHECK(save_vocabulary(w) == text);
    CHECK(vocabulary_hash(w) == vocabulary_hash(v));
    CHECK(encode(w, "ab ab") == encode(v, "ab ab"));

    CHECK_THROWS_AS(load_vocabulary("nonsense"), ConfigError);
    CHECK_THROWS_AS(load_vocabulary(text.substr(0, text.size() / 2)), ConfigError);
}

TEST_CASE("sequence validation helpers") {
    TokenSpace sp{8, 6, 7, 8};
    CHECK(find_eos(sp, {1, 2, 7, 8}) == 2);
    CHECK(find_eos(sp, {1, 2}) == -1);
    CHECK(effective_length(sp, {1, 2, 7, 8}) == 3);
    CHECK(effective_length(sp, {1, 2, 3}) == 3);
    CHECK_NOTHROW(validate_sequence(sp, {6, 1, 2, 7, 8, 8}));
    CHECK_THROWS_AS(validate_sequence(sp, {1, 8, 2}), ContractViolation);   // PAD before EOS
    CHECK_THROWS_AS(validate_sequence(sp, {7, 1}), ContractViolation);      // token after EOS
    CHECK_THROWS_AS(validate_sequence(sp, {0}), ContractViolation);         // id out of range
    CHECK_THROWS_AS(validate_sequence(sp, {7, 7}), ContractViolation);      // two EOS
}
