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

// Lexicon-plus-rules grapheme-to-phoneme conversion over a small synthetic
// phoneme inventory, and the trainable phoneme embedding lookup.

#pragma once

#include "kws/tensor.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace kws::g2p {

class EmptyInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class InventoryError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

enum class PhonemeClass { kSilence, kUnknown, kVowel, kVoicedConsonant, kUnvoicedConsonant };

using PhonemeId = std::size_t;

class PhonemeInventory {
 public:
  PhonemeInventory() {
    add("sil", PhonemeClass::kSilence);
    add("unk", PhonemeClass::kUnknown);
    for (const char* v : {"aa", "ae", "eh", "ih", "iy", "ow", "uh", "uw"}) add(v, PhonemeClass::kVowel);
    for (const char* c : {"b", "d", "g", "m", "n", "l", "r", "v", "z"}) add(c, PhonemeClass::kVoicedConsonant);
    for (const char* c : {"p", "t", "k", "f", "s"}) add(c, PhonemeClass::kUnvoicedConsonant);
  }

  std::size_t size() const { return symbols_.size(); }
  const std::string& symbol(PhonemeId id) const { return symbols_.at(id); }
  PhonemeClass phoneme_class(PhonemeId id) const { return classes_.at(id); }

  PhonemeId id(std::string_view symbol) const {
    auto it = ids_.find(std::string(symbol));
    if (it == ids_.end()) throw InventoryError("unknown phoneme symbol '" + std::string(symbol) + "'");
    return it->second;
  }

  bool contains(std::string_view symbol) const { return ids_.count(std::string(symbol)) > 0; }

  PhonemeId silence() const { return 0; }
  PhonemeId unknown() const { return 1; }

  std::vector<PhonemeId> of_class(PhonemeClass c) const {
    std::vector<PhonemeId> out;
    for (PhonemeId i = 0; i < size(); ++i)
      if (classes_[i] == c) out.push_back(i);
    return out;
  }

 private:
  void add(const std::string& s, PhonemeClass c) {
    ids_[s] = symbols_.size();
    symbols_.push_back(s);
    classes_.push_back(c);
  }

  std::vector<std::string> symbols_;
  std::vector<PhonemeClass> classes_;
  std::map<std::string, PhonemeId> ids_;
};

struct PhonemeSequence {
  std::vector<PhonemeId> ids;
  std::string text;
};

// Whole-word pronunciations. File format: `word<TAB>ph1 ph2 ...` per line.
class Lexicon {
 public:
  void add(const std::string& word, std::vector<PhonemeId> ids) { entries_[word] = std::move(ids); }

  const std::vector<PhonemeId>* find(const std::string& word) const {
    auto it = entries_.find(word);
    return it == entries_.end() ? nullptr : &it->second;
  }

  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, std::vector<PhonemeId>>& entries() const { return entries_; }

  static Lexicon parse(std::istream& in, const PhonemeInventory& inv) {
    Lexicon lex;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) {
        throw std::runtime_error("lexicon line " + std::to_string(lineno) + ": expected word<TAB>phonemes");
      }
      std::istringstream ps(line.substr(tab + 1));
      std::vector<PhonemeId> ids;
      for (std::string sym; ps >> sym;) ids.push_back(inv.id(sym));
      if (ids.empty()) throw std::runtime_error("lexicon line " + std::to_string(lineno) + ": no phonemes");
      lex.add(line.substr(0, tab), std::move(ids));
    }
    return lex;
  }

  static Lexicon load(const std::string& path, const PhonemeInventory& inv) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open lexicon " + path);
    return parse(in, inv);
  }

  std::string serialize(const PhonemeInventory& inv) const {
    std::ostringstream os;
    for (const auto& [word, ids] : entries_) {
      os << word << '\t';
      for (std::size_t i = 0; i < ids.size(); ++i) os << (i ? " " : "") << inv.symbol(ids[i]);
      os << '\n';
    }
    return os.str();
  }

 private:
  std::map<std::string, std::vector<PhonemeId>> entries_;
};

// Letter-to-sound fallback. Digraphs are matched before single letters.
inline std::vector<PhonemeId> letters_to_phonemes(std::string_view word, const PhonemeInventory& inv) {
  static const std::array<std::pair<std::string_view, std::string_view>, 6> digraphs{{
      {"ee", "iy"}, {"oo", "uw"}, {"ae", "ae"}, {"ph", "f"}, {"ck", "k"}, {"sh", "s"}}};
  static const std::map<char, std::vector<std::string_view>> singles{
      {'a', {"aa"}}, {'e', {"eh"}}, {'i', {"ih"}}, {'o', {"ow"}}, {'u', {"uh"}}, {'y', {"iy"}},
      {'w', {"uw"}}, {'b', {"b"}},  {'d', {"d"}},  {'g', {"g"}},  {'m', {"m"}},  {'n', {"n"}},
      {'l', {"l"}},  {'r', {"r"}},  {'v', {"v"}},  {'z', {"z"}},  {'p', {"p"}},  {'t', {"t"}},
      {'k', {"k"}},  {'f', {"f"}},  {'s', {"s"}},  {'c', {"k"}},  {'q', {"k"}},  {'j', {"d"}},
      {'x', {"k", "s"}}};
  std::vector<PhonemeId> out;
  for (std::size_t i = 0; i < word.size();) {
    bool matched = false;
    if (i + 1 < word.size()) {
      for (const auto& [g, p] : digraphs) {
        if (word.substr(i, 2) == g) {
          out.push_back(inv.id(p));
          i += 2;
          matched = true;
          break;
        }
      }
    }
    if (matched) continue;
    auto it = singles.find(word[i]);
    if (it == singles.end()) {
      out.push_back(inv.unknown());
    } else {
      for (auto p : it->second) out.push_back(inv.id(p));
    }
    ++i;
  }
  return out;
}

// Whole-word lexicon lookup with per-letter fallback; characters without a
// rule become the unknown phoneme.
inline PhonemeSequence text_to_phonemes(const std::string& text, const Lexicon& lexicon,
                                        const PhonemeInventory& inv) {
  PhonemeSequence seq;
  seq.text = text;
  std::istringstream words(text);
  for (std::string w; words >> w;) {
    if (const auto* ids = lexicon.find(w)) {
      seq.ids.insert(seq.ids.end(), ids->begin(), ids->end());
    } else {
      auto ids2 = letters_to_phonemes(w, inv);
      seq.ids.insert(seq.ids.end(), ids2.begin(), ids2.end());
    }
  }
  if (seq.ids.empty()) throw EmptyInputError("text_to_phonemes: empty input");
  return seq;
}

// Levenshtein distance over phoneme ids.
inline std::size_t edit_distance(const std::vector<PhonemeId>& a, const std::vector<PhonemeId>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// Size of the multiset intersection.
inline std::size_t shared_phonemes(std::vector<PhonemeId> a, std::vector<PhonemeId> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<PhonemeId> common;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
  return common.size();
}

// Row lookup into a [|inventory|, D] table; rows receive gradients.
template <typename T>
Tensor<T> embed_phonemes(const PhonemeSequence& seq, const Tensor<T>& table) {
  try {
    return gather_rows(table, seq.ids);
  } catch (const std::out_of_range& e) {
    throw InventoryError(e.what());
  }
}

}  // namespace kws::g2p
