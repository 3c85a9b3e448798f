#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace gradmem {

// Character-level vocabulary for the associative retrieval task:
// a-z, A-Z, 0-9 at ids 0..61, then '!':62, ':':63, '?':64, PAD:65.
namespace vocab {

inline constexpr int32_t kAlnum = 62;
inline constexpr int32_t kBang = 62;
inline constexpr int32_t kColon = 63;
inline constexpr int32_t kQuestion = 64;
inline constexpr int32_t kPad = 65;
inline constexpr int32_t kSize = 66;

char id_to_char(int32_t id);
int32_t char_to_id(char c);  // throws ConfigError on unknown characters

}  // namespace vocab

std::vector<int32_t> tokenize(const std::string& text);
std::string detokenize(const std::vector<int32_t>& ids);

enum class TokenClass : uint8_t { Key, Value, Delim };

// One retrieval task instance. The context lists n_pairs key:value pairs;
// the query asks for the value of one key present in the context.
struct Sample {
    std::vector<int32_t> context_ids;  // "!k1:v1!!k2:v2!..." -- 7*n_pairs tokens
    std::vector<int32_t> query_ids;    // "?!kj:" -- 5 tokens
    std::vector<int32_t> target_ids;   // "vj" -- 2 tokens
    int n_pairs = 0;
    int queried_index = 0;  // j, 0-based
    std::vector<TokenClass> token_class;  // per context position
};

inline constexpr int kMaxPairs = 62 * 62;  // distinct 2-symbol keys available

// Fully determined by (seed, index, n_pairs): keys sampled without
// replacement, values i.i.d. uniform (repeats allowed), queried pair uniform.
Sample generate_sample(uint64_t seed, uint64_t index, int n_pairs);

std::vector<TokenClass> token_class_mask(const Sample& s);  // recomputed from the context

// Materializes `count` samples as "C\tQ\tY" lines (UTF-8, LF).
void write_dataset_tsv(const std::string& path, uint64_t seed, uint64_t count, int n_pairs);

}  // namespace gradmem
