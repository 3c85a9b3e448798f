#include "gradmem/kvdata.hpp"

#include <fstream>
#include <unordered_set>

#include "gradmem/common.hpp"
#include "gradmem/rng.hpp"

namespace gradmem {

namespace vocab {

char id_to_char(int32_t id) {
    if (id >= 0 && id < 26) return static_cast<char>('a' + id);
    if (id >= 26 && id < 52) return static_cast<char>('A' + id - 26);
    if (id >= 52 && id < 62) return static_cast<char>('0' + id - 52);
    if (id == kBang) return '!';
    if (id == kColon) return ':';
    if (id == kQuestion) return '?';
    if (id == kPad) return '_';
    throw ConfigError("id_to_char: id out of vocabulary: " + std::to_string(id));
}

int32_t char_to_id(char c) {
    if (c >= 'a' && c <= 'z') return c - 'a';
    if (c >= 'A' && c <= 'Z') return 26 + (c - 'A');
    if (c >= '0' && c <= '9') return 52 + (c - '0');
    if (c == '!') return kBang;
    if (c == ':') return kColon;
    if (c == '?') return kQuestion;
    throw ConfigError(std::string("char_to_id: unknown character '") + c + "'");
}

}  // namespace vocab

std::vector<int32_t> tokenize(const std::string& text) {
    std::vector<int32_t> ids;
    ids.reserve(text.size());
    for (char c : text) ids.push_back(vocab::char_to_id(c));
    return ids;
}

std::string detokenize(const std::vector<int32_t>& ids) {
    std::string s;
    s.reserve(ids.size());
    for (int32_t id : ids) s.push_back(vocab::id_to_char(id));
    return s;
}

namespace {

// Two-symbol string index <-> its pair of alphanumeric ids.
void push_symbol_pair(std::vector<int32_t>& out, int32_t idx) {
    out.push_back(idx / vocab::kAlnum);
    out.push_back(idx % vocab::kAlnum);
}

}  // namespace

Sample generate_sample(uint64_t seed, uint64_t index, int n_pairs) {
    if (n_pairs < 1) throw ConfigError("generate_sample: n_pairs must be >= 1");
    if (n_pairs > kMaxPairs)
        throw ConfigError("generate_sample: n_pairs exceeds number of distinct keys (" +
                          std::to_string(kMaxPairs) + ")");

    Rng rng(mix64(seed, index, static_cast<uint64_t>(n_pairs)));

    std::vector<int32_t> keys;
    keys.reserve(static_cast<size_t>(n_pairs));
    std::unordered_set<int32_t> seen;
    while (static_cast<int>(keys.size()) < n_pairs) {
        const int32_t k = static_cast<int32_t>(rng.uniform_below(kMaxPairs));
        if (seen.insert(k).second) keys.push_back(k);
    }
    std::vector<int32_t> values(static_cast<size_t>(n_pairs));
    for (auto& v : values) v = static_cast<int32_t>(rng.uniform_below(kMaxPairs));
    const int j = static_cast<int>(rng.uniform_below(static_cast<uint64_t>(n_pairs)));

    Sample s;
    s.n_pairs = n_pairs;
    s.queried_index = j;
    s.context_ids.reserve(static_cast<size_t>(7 * n_pairs));
    s.token_class.reserve(static_cast<size_t>(7 * n_pairs));
    for (int i = 0; i < n_pairs; ++i) {
        s.context_ids.push_back(vocab::kBang);
        push_symbol_pair(s.context_ids, keys[static_cast<size_t>(i)]);
        s.context_ids.push_back(vocab::kColon);
        push_symbol_pair(s.context_ids, values[static_cast<size_t>(i)]);
        s.context_ids.push_back(vocab::kBang);
        const TokenClass pat[7] = {TokenClass::Delim, TokenClass::Key,   TokenClass::Key,  TokenClass::Delim,
                                   TokenClass::Value, TokenClass::Value, TokenClass::Delim};
        s.token_class.insert(s.token_class.end(), pat, pat + 7);
    }
    s.query_ids.push_back(vocab::kQuestion);
    s.query_ids.push_back(vocab::kBang);
    push_symbol_pair(s.query_ids, keys[static_cast<size_t>(j)]);
    s.query_ids.push_back(vocab::kColon);
    push_symbol_pair(s.target_ids, values[static_cast<size_t>(j)]);
    return s;
}

std::vector<TokenClass> token_class_mask(const Sample& s) {
    const auto& c = s.context_ids;
    if (c.size() != static_cast<size_t>(7 * s.n_pairs))
        throw ConfigError("token_class_mask: context length is not 7*n_pairs");
    std::vector<TokenClass> out(c.size());
    for (int i = 0; i < s.n_pairs; ++i) {
        const size_t base = static_cast<size_t>(7 * i);
        if (c[base] != vocab::kBang || c[base + 3] != vocab::kColon || c[base + 6] != vocab::kBang)
            throw ConfigError("token_class_mask: malformed context at pair " + std::to_string(i));
        out[base] = TokenClass::Delim;
        out[base + 1] = TokenClass::Key;
        out[base + 2] = TokenClass::Key;
        out[base + 3] = TokenClass::Delim;
        out[base + 4] = TokenClass::Value;
        out[base + 5] = TokenClass::Value;
        out[base + 6] = TokenClass::Delim;
    }
    return out;
}

void write_dataset_tsv(const std::string& path, uint64_t seed, uint64_t count, int n_pairs) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("write_dataset_tsv: cannot open " + path);
    for (uint64_t i = 0; i < count; ++i) {
        const Sample s = generate_sample(seed, i, n_pairs);
        f << detokenize(s.context_ids) << '\t' << detokenize(s.query_ids) << '\t' << detokenize(s.target_ids)
          << '\n';
    }
    if (!f) throw IoError("write_dataset_tsv: write failed for " + path);
}

}  // namespace gradmem
