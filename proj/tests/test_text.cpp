#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "planrag/text.hpp"

using namespace planrag;

TEST(Text, TrimAndWords) {
  EXPECT_EQ(trim("  a b \n"), "a b");
  EXPECT_EQ(trim("   "), "");
  auto w = split_words(" one\ttwo\n three  ");
  ASSERT_EQ(w.size(), 3u);
  EXPECT_EQ(w[2], "three");
  EXPECT_EQ(word_count(""), 0u);
}

TEST(Text, WordCountMatchesOracleOnRandomStrings) {
  std::mt19937_64 rng(7);
  const std::string alphabet = "ab c\t\n.,";
  for (int i = 0; i < 500; ++i) {
    std::string s;
    for (int n = static_cast<int>(rng() % 40); n > 0; --n) s.push_back(alphabet[rng() % alphabet.size()]);
    EXPECT_EQ(word_count(s), oracle::count_words(s)) << s;
    EXPECT_EQ(split_words(s).size(), oracle::count_words(s));
  }
}

TEST(Text, IndexTermDropsPunctuationAndLowercases) {
  EXPECT_EQ(index_term("Hinton's"), "hintons");
  EXPECT_EQ(index_term("S."), "s");
  EXPECT_EQ(index_term("--"), "");
  EXPECT_EQ(index_term("Coming-of-Age"), "comingofage");
}

TEST(Text, NormalizeForMatch) {
  EXPECT_EQ(normalize_for_match("  Indira   Gandhi. "), "indira gandhi");
  EXPECT_EQ(normalize_for_match("\"1967\""), "1967");
  EXPECT_EQ(normalize_for_match("S. E. Hinton"), "s. e. hinton");
}

TEST(Text, ApproxTokensRoundsFourThirdsOfWords) {
  EXPECT_EQ(approx_tokens(""), 0u);
  EXPECT_EQ(approx_tokens("a"), 1u);      // 1.33
  EXPECT_EQ(approx_tokens("a b"), 3u);    // 2.67
  EXPECT_EQ(approx_tokens("a b c"), 4u);  // 4
  EXPECT_EQ(approx_tokens("a b c d e f"), 8u);
}

TEST(Text, Fnv1aKnownVectors) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(hex64(0xabcULL), "0000000000000abc");
}

TEST(Text, StartsWithIgnoringCase) {
  EXPECT_TRUE(starts_with_icase("Output: x", "output:"));
  EXPECT_FALSE(starts_with_icase("Out", "output"));
}
