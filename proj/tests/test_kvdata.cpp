#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <set>

#include "gradmem/common.hpp"
#include "gradmem/kvdata.hpp"
#include "gradmem/rng.hpp"

using namespace gradmem;

namespace {

// Independent parser: scans "!kk:vv!" groups directly off the decoded text.
struct ParsedPair {
    std::string key, value;
};

std::vector<ParsedPair> reparse_context(const std::string& text) {
    std::vector<ParsedPair> out;
    size_t i = 0;
    while (i < text.size()) {
        REQUIRE(text[i] == '!');
        REQUIRE(i + 6 < text.size());
        REQUIRE(text[i + 3] == ':');
        REQUIRE(text[i + 6] == '!');
        out.push_back({text.substr(i + 1, 2), text.substr(i + 4, 2)});
        i += 7;
    }
    return out;
}

}  // namespace

TEST_CASE("tokenizer: table lookups and round trip") {
    CHECK(tokenize("!a:") == std::vector<int32_t>{62, 0, 63});
    CHECK(tokenize("azAZ09") == std::vector<int32_t>{0, 25, 26, 51, 52, 61});
    CHECK_THROWS_AS((void)tokenize("\xe2\x82\xac"), ConfigError);  // euro sign

    Rng rng(4);
    const std::string alphabet = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789!:?";
    for (int trial = 0; trial < 50; ++trial) {
        std::string s;
        for (int j = 0; j < 40; ++j) s.push_back(alphabet[rng.uniform_below(alphabet.size())]);
        CHECK(detokenize(tokenize(s)) == s);
    }
}

TEST_CASE("sample format: lengths, query/target construction") {
    const Sample s = generate_sample(123, 0, 2);
    CHECK(s.context_ids.size() == 14);
    CHECK(s.query_ids.size() == 5);
    CHECK(s.target_ids.size() == 2);

    const std::string ctx = detokenize(s.context_ids);
    const auto pairs = reparse_context(ctx);
    REQUIRE(pairs.size() == 2);
    const auto& queried = pairs[static_cast<size_t>(s.queried_index)];
    CHECK(detokenize(s.query_ids) == "?!" + queried.key + ":");
    CHECK(detokenize(s.target_ids) == queried.value);
}

TEST_CASE("n_pairs=1 has a single possible query") {
    const Sample s = generate_sample(7, 3, 1);
    CHECK(s.context_ids.size() == 7);
    CHECK(s.queried_index == 0);
    const auto pairs = reparse_context(detokenize(s.context_ids));
    CHECK(pairs.size() == 1);
}

TEST_CASE("determinism and distinct keys over many samples") {
    for (uint64_t i = 0; i < 10000; ++i) {
        const int n_pairs = 1 + static_cast<int>(i % 24);
        const Sample s = generate_sample(99, i, n_pairs);
        CHECK(s.context_ids.size() == static_cast<size_t>(7 * n_pairs));

        const auto pairs = reparse_context(detokenize(s.context_ids));
        REQUIRE(static_cast<int>(pairs.size()) == n_pairs);
        std::set<std::string> keys;
        for (const auto& p : pairs) keys.insert(p.key);
        CHECK(static_cast<int>(keys.size()) == n_pairs);
    }
    // bit-for-bit determinism of (seed, index, n_pairs)
    const Sample a = generate_sample(5, 17, 8), b = generate_sample(5, 17, 8);
    CHECK(a.context_ids == b.context_ids);
    CHECK(a.query_ids == b.query_ids);
    CHECK(a.target_ids == b.target_ids);
    const Sample c = generate_sample(6, 17, 8);
    CHECK(a.context_ids != c.context_ids);
}

TEST_CASE("generator preconditions") {
    CHECK_THROWS_AS((void)generate_sample(1, 0, 0), ConfigError);
    CHECK_THROWS_AS((void)generate_sample(1, 0, 62 * 62 + 1), ConfigError);
}

TEST_CASE("token classes: pattern, counts, and agreement with a reparse") {
    const Sample one = generate_sample(11, 0, 1);
    const auto cls = token_class_mask(one);
    const std::vector<TokenClass> expect{TokenClass::Delim, TokenClass::Key,   TokenClass::Key,
                                         TokenClass::Delim, TokenClass::Value, TokenClass::Value,
                                         TokenClass::Delim};
    CHECK(cls == expect);

    const Sample s = generate_sample(11, 5, 16);
    const auto mask = token_class_mask(s);
    int key = 0, value = 0, delim = 0;
    for (TokenClass t : mask) {
        key += t == TokenClass::Key;
        value += t == TokenClass::Value;
        delim += t == TokenClass::Delim;
    }
    CHECK(key == 32);
    CHECK(value == 32);
    CHECK(delim == 48);
    CHECK(mask == s.token_class);

    // independent position check off the text
    const std::string ctx = detokenize(s.context_ids);
    for (size_t i = 0; i < ctx.size(); ++i) {
        const bool is_delim = ctx[i] == '!' || ctx[i] == ':';
        CHECK((mask[i] == TokenClass::Delim) == is_delim);
        if (!is_delim) {
            const size_t within = i % 7;
            CHECK(mask[i] == ((within == 1 || within == 2) ? TokenClass::Key : TokenClass::Value));
        }
    }
}

TEST_CASE("dataset materialization writes C\\tQ\\tY lines") {
    const std::string path = "kvdata_test_out.tsv";
    write_dataset_tsv(path, 42, 3, 4);
    std::ifstream f(path);
    REQUIRE(f.good());
    std::string line;
    int rows = 0;
    while (std::getline(f, line)) {
        const size_t t1 = line.find('\t');
        const size_t t2 = line.find('\t', t1 + 1);
        REQUIRE(t1 != std::string::npos);
        REQUIRE(t2 != std::string::npos);
        CHECK(t1 == 28);            // 7*4 context chars
        CHECK(t2 - t1 - 1 == 5);    // query
        CHECK(line.size() - t2 - 1 == 2);
        ++rows;
    }
    CHECK(rows == 3);
    std::remove(path.c_str());
}
