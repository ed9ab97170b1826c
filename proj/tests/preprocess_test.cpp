#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <random>

#include "mtlid/preprocess.hpp"

using namespace mtlid;

TEST(CleanText, MentionAndDiacritics) {
  EXPECT_EQ(clean_text("@user123 مرحباً"), "USER مرحبا");
  EXPECT_EQ(clean_text("لا diacritics here"), "لا diacritics here");
  EXPECT_EQ(clean_text("@a @b نصٌّ"), "USER USER نص");
}

TEST(CleanText, MentionEdgeCases) {
  EXPECT_EQ(clean_text("@"), "@");
  EXPECT_EQ(clean_text("mail a@b.c"), "mail aUSER.c");
  EXPECT_EQ(clean_text("@@a"), "USER");
  EXPECT_EQ(clean_text("@a@b"), "USERUSER");
  EXPECT_EQ(clean_text("@محمد_1 hi"), "USER hi");
  EXPECT_EQ(clean_text("@ space"), "@ space");
  // A diacritic between '@' and the name is ignored while matching.
  EXPECT_EQ(clean_text("@ًab"), "USER");
  EXPECT_EQ(clean_text("ـٰٟ"), "");
}

TEST(CleanText, KeepsNeighbouringCodePoints) {
  // U+064A (last letter before the range) and U+0660 (first digit after) survive.
  EXPECT_EQ(clean_text("ي٠"), "ي٠");
  EXPECT_EQ(clean_text("ٯٱ"), "ٯٱ");
}

TEST(CleanText, IdempotentOnRandomStrings) {
  std::mt19937_64 rng(17);
  const std::vector<char32_t> alphabet{U'@', U'_', U'a', U'7', U' ', U'.', 0x0627, 0x0644, 0x064B, 0x0651,
                                       0x0670, 0x0640, 0x065F, 0x0660, 0x064A};
  for (int trial = 0; trial < 2000; ++trial) {
    std::u32string s;
    const std::size_t n = rng() % 16;
    for (std::size_t i = 0; i < n; ++i) s.push_back(alphabet[rng() % alphabet.size()]);
    const std::string once = clean_text(utf8::encode(s));
    EXPECT_EQ(clean_text(once), once);
  }
}

TEST(Utf8, RoundTripAndInvalidBytes) {
  const std::string s = "abc مر \U0001F600";
  EXPECT_EQ(utf8::encode(utf8::decode(s)), s);
  EXPECT_EQ(utf8::decode("\xff").front(), U'�');
}

TEST(BuildVocab, RankingThresholdAndTies) {
  auto v = build_vocab({"a a b"}, 1, 100);
  ASSERT_EQ(v.size(), 5u);
  EXPECT_EQ(v.id("[PAD]"), 0);
  EXPECT_EQ(v.id("[UNK]"), 1);
  EXPECT_EQ(v.id("[CLS]"), 2);
  EXPECT_EQ(v.id("a"), 3);
  EXPECT_EQ(v.id("b"), 4);

  auto v2 = build_vocab({"a a b"}, 2, 100);
  EXPECT_EQ(v2.size(), 4u);
  EXPECT_TRUE(v2.contains("a"));
  EXPECT_FALSE(v2.contains("b"));

  auto v3 = build_vocab({"y x", "x y"}, 1, 100);
  EXPECT_LT(v3.id("x"), v3.id("y"));

  auto capped = build_vocab({"a a a b b c"}, 1, 5);
  EXPECT_EQ(capped.size(), 5u);
  EXPECT_FALSE(capped.contains("c"));
}

TEST(BuildVocab, EmptyCorpusRejected) { EXPECT_THROW(build_vocab({}, 1, 10), Error); }

TEST(Encode, EmptyInputAndPadding) {
  auto v = build_vocab({"a a b"}, 1, 100);
  auto empty = encode("", v, 4);
  EXPECT_EQ(empty.ids, (std::vector<std::int32_t>{2, 0, 0, 0}));
  EXPECT_EQ(empty.true_length, 1u);

  auto ab = encode("a b", v, 4);
  EXPECT_EQ(ab.ids, (std::vector<std::int32_t>{2, 3, 4, 0}));
  EXPECT_EQ(ab.mask, (std::vector<std::uint8_t>{1, 1, 1, 0}));

  auto oov = encode("zzz", v, 4);
  EXPECT_EQ(oov.ids[1], Vocabulary::kUnk);
  EXPECT_THROW(encode("a", v, 1), Error);
}

TEST(Encode, TruncationKeepsFirstTokens) {
  std::string text;
  std::vector<std::string> corpus;
  for (int i = 0; i < 100; ++i) text += "t" + std::to_string(i) + " ";
  auto v = build_vocab({text}, 1, 1000);
  auto seq = encode(text, v, 8);
  EXPECT_EQ(seq.true_length, 8u);
  EXPECT_EQ(v.token(seq.ids[7]), "t6");
}

TEST(Encode, MaskIsAPrefixAndDecodeRoundTrips) {
  std::mt19937_64 rng(4);
  std::vector<std::string> words{"w0", "w1", "w2", "w3", "w4", "w5"};
  std::vector<std::string> corpus;
  for (int i = 0; i < 30; ++i) {
    std::string s;
    for (std::size_t j = 0, n = rng() % 12; j < n; ++j) s += words[rng() % words.size()] + " ";
    corpus.push_back(s);
  }
  auto v = build_vocab(corpus, 1, 100);
  for (const auto& s : corpus) {
    auto seq = encode(s, v, 16);
    EXPECT_EQ(seq.ids[0], Vocabulary::kCls);
    bool seen_pad = false;
    for (std::size_t i = 0; i < seq.mask.size(); ++i) {
      if (!seq.mask[i]) {
        seen_pad = true;
        EXPECT_EQ(seq.ids[i], Vocabulary::kPad);
      }
      EXPECT_FALSE(seen_pad && seq.mask[i]);
    }
    EXPECT_EQ(encode(decode(seq, v), v, 16).ids, seq.ids);
  }
}

TEST(VocabFile, RoundTrip) {
  auto v = build_vocab({"b a a c"}, 1, 100);
  const auto path = (std::filesystem::temp_directory_path() / "mtlid_vocab_test.txt").string();
  save_vocab(v, path);
  auto back = load_vocab(path);
  EXPECT_EQ(back.tokens(), v.tokens());
  std::remove(path.c_str());
}
