// Copyright 2026 The prosodic-kws Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "gradcheck.hpp"
#include "kws/g2p.hpp"

#include <gtest/gtest.h>

#include <sstream>

namespace kws::g2p {
namespace {

Lexicon shipped(const PhonemeInventory& inv) { return Lexicon::load(KWS_SOURCE_DIR "/data/lexicon.txt", inv); }

TEST(Inventory, DenseIdsWithSilenceAndUnknown) {
  PhonemeInventory inv;
  EXPECT_EQ(inv.size(), 24u);
  EXPECT_EQ(inv.of_class(PhonemeClass::kVowel).size(), 8u);
  EXPECT_EQ(inv.of_class(PhonemeClass::kVoicedConsonant).size() + inv.of_class(PhonemeClass::kUnvoicedConsonant).size(),
            14u);
  for (PhonemeId i = 0; i < inv.size(); ++i) EXPECT_EQ(inv.id(inv.symbol(i)), i);
  EXPECT_EQ(inv.symbol(inv.silence()), "sil");
  EXPECT_EQ(inv.symbol(inv.unknown()), "unk");
}

TEST(TextToPhonemes, LexiconWordVerbatim) {
  PhonemeInventory inv;
  auto lex = shipped(inv);
  auto seq = text_to_phonemes("friend", lex, inv);
  EXPECT_EQ(seq.ids, *lex.find("friend"));
}

TEST(TextToPhonemes, HardNegativeDiffersByOnePhoneme) {
  PhonemeInventory inv;
  auto lex = shipped(inv);
  auto anchor = text_to_phonemes("friend", lex, inv);
  auto hard = text_to_phonemes("frind", lex, inv);  // not in the lexicon: letter rules
  EXPECT_EQ(lex.find("frind"), nullptr);
  EXPECT_EQ(edit_distance(anchor.ids, hard.ids), 1u);
  EXPECT_GE(edit_distance(anchor.ids, text_to_phonemes("guard", lex, inv).ids), 3u);
}

TEST(TextToPhonemes, UnknownGlyph) {
  PhonemeInventory inv;
  Lexicon lex;
  auto seq = text_to_phonemes("#", lex, inv);
  ASSERT_EQ(seq.ids.size(), 1u);
  EXPECT_EQ(seq.ids[0], inv.unknown());
}

TEST(TextToPhonemes, EmptyTextRejected) {
  PhonemeInventory inv;
  Lexicon lex;
  EXPECT_THROW(text_to_phonemes("", lex, inv), EmptyInputError);
  EXPECT_THROW(text_to_phonemes("   ", lex, inv), EmptyInputError);
}

TEST(TextToPhonemes, TotalAndDeterministicOverAlphabet) {
  PhonemeInventory inv;
  auto lex = shipped(inv);
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    std::string text;
    const std::size_t n = 1 + rng.index(12);
    for (std::size_t i = 0; i < n; ++i) text += rng.uniform() < 0.15 ? ' ' : static_cast<char>('a' + rng.index(26));
    if (text.find_first_not_of(' ') == std::string::npos) text = "a";
    auto a = text_to_phonemes(text, lex, inv);
    auto b = text_to_phonemes(text, lex, inv);
    EXPECT_EQ(a.ids, b.ids);
    for (auto id : a.ids) EXPECT_LT(id, inv.size());
  }
}

TEST(Lexicon, ParseAndSerializeAgree) {
  PhonemeInventory inv;
  std::istringstream in("bamo\tb aa m ow\nsit\ts ih t\n");
  auto lex = Lexicon::parse(in, inv);
  std::istringstream again(lex.serialize(inv));
  auto lex2 = Lexicon::parse(again, inv);
  EXPECT_EQ(lex.entries(), lex2.entries());
  std::istringstream bad("word without tab\n");
  EXPECT_THROW(Lexicon::parse(bad, inv), std::runtime_error);
}

TEST(Embedding, OneHotTableGivesOneHotRows) {
  PhonemeInventory inv;
  const std::size_t n = inv.size();
  std::vector<double> eye(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
  Tensor<double> table({n, n}, eye);
  PhonemeSequence seq{{3, 7, 3}, "x"};
  auto e = embed_phonemes(seq, table);
  ASSERT_EQ(e.shape(), (Shape{3, n}));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < n; ++c) EXPECT_EQ(e[r * n + c], c == seq.ids[r] ? 1.0 : 0.0);
  // repeated phoneme -> identical rows
  for (std::size_t c = 0; c < n; ++c) EXPECT_EQ(e[c], e[2 * n + c]);
}

TEST(Embedding, GradientCountsOccurrences) {
  Rng rng(2);
  auto table = testing::random_tensor({24, 5}, rng);
  PhonemeSequence seq{{4, 9, 4, 4, 0}, "x"};
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(sum_all(embed_phonemes(seq, table)));
  }
  for (std::size_t r = 0; r < 24; ++r) {
    const double count = r == 4 ? 3 : (r == 9 || r == 0) ? 1 : 0;
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(table.grad()[r * 5 + c], count);
  }
  EXPECT_LT(testing::max_gradient_error({table}, [&] { return sum_all(embed_phonemes(seq, table)); }), 1e-8);
}

TEST(Embedding, OutOfRangeIdRejected) {
  Tensor<double> table({4, 2}, 0.0);
  PhonemeSequence seq{{5}, "x"};
  EXPECT_THROW(embed_phonemes(seq, table), InventoryError);
}

}  // namespace
}  // namespace kws::g2p
