// Copyright 2026 The FedMem Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "fedmem/common.hpp"

namespace fedmem {

// Token <-> index bijection over [0, V). The three special tokens always
// occupy the first indices.
class Vocabulary {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kEos = 1;
  static constexpr TokenId kOov = 2;
  static constexpr TokenId kNumSpecial = 3;
  static constexpr const char* kBosText = "<s>";
  static constexpr const char* kEosText = "</s>";
  static constexpr const char* kOovText = "<unk>";

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  // `words` are the ordinary tokens in rank order; special tokens are
  // prepended. Listing a special token explicitly is allowed and ignored.
  explicit Vocabulary(const std::vector<std::string>& words) {
    Add(kBosText);
    Add(kEosText);
    Add(kOovText);
    for (const auto& w : words) {
      if (w == kBosText || w == kEosText || w == kOovText) continue;
      if (index_.count(w)) throw InputError("duplicate vocabulary token '" + w + "'");
      if (w.empty()) throw InputError("empty vocabulary token");
      Add(w);
    }
  }

  // Synthetic vocabulary "w3", "w4", ... of total size `size`.
  static Vocabulary Synthetic(int size) {
    if (size < kNumSpecial) throw InputError("vocabulary size below special token count");
    std::vector<std::string> words;
    for (int i = kNumSpecial; i < size; ++i) words.push_back("w" + std::to_string(i));
    return Vocabulary(words);
  }

  int size() const { return static_cast<int>(words_.size()); }
  int num_ordinary() const { return size() - kNumSpecial; }

  const std::string& Word(TokenId id) const {
    if (id < 0 || id >= size()) throw InputError("token index out of vocabulary range");
    return words_[static_cast<std::size_t>(id)];
  }

  TokenId Index(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kOov : it->second;
  }

  bool Contains(const std::string& word) const { return index_.count(word) > 0; }

  TokenSequence Encode(const std::string& sentence) const {
    std::istringstream in(sentence);
    TokenSequence out;
    std::string w;
    while (in >> w) out.push_back(Index(w));
    return out;
  }

  std::string Decode(const TokenSequence& tokens) const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i) out += ' ';
      out += Word(tokens[i]);
    }
    return out;
  }

  // One token per line, rank order, special tokens included.
  void Save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write vocabulary " + path);
    for (const auto& w : words_) out << w << '\n';
  }

  static Vocabulary Load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read vocabulary " + path);
    std::vector<std::string> words;
    std::string line;
    while (std::getline(in, line)) {
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
      if (!line.empty()) words.push_back(line);
    }
    return Vocabulary(words);
  }

  bool operator==(const Vocabulary& other) const { return words_ == other.words_; }

 private:
  void Add(const std::string& w) {
    index_.emplace(w, static_cast<TokenId>(words_.size()));
    words_.push_back(w);
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace fedmem
