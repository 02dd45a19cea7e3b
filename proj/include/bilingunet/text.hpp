// SPDX-License-Identifier: Apache-2.0
//
// Referring-expression tokenization and the LSTM encoder that maps an
// expression to its final hidden state.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "bilingunet/params.hpp"

namespace bilingunet {

using TokenIds = std::vector<std::int64_t>;

class Vocab {
 public:
  static constexpr std::int64_t kPad = 0;
  static constexpr std::int64_t kUnk = 1;

  Vocab();
  explicit Vocab(const std::vector<std::string>& tokens_after_reserved);

  std::int64_t id(const std::string& token) const;
  const std::string& token(std::int64_t id) const;
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  std::size_t size() const { return tokens_.size(); }
  // All tokens in id order, reserved ones included.
  const std::vector<std::string>& tokens() const { return tokens_; }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int64_t> index_;
};

// Lowercases and splits on whitespace and punctuation (punctuation is
// dropped). Never pads.
std::vector<std::string> split_words(const std::string& expression);

TokenIds tokenize(const std::string& expression, const Vocab& vocab, std::size_t max_len = 20);

// Tokens with count >= min_count, ordered by descending count then
// lexicographically.
Vocab build_vocab(const std::vector<std::string>& corpus, std::size_t min_count = 1);

struct LstmShape {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 32;
  std::size_t hidden = 96;
};

// Parameters live under "lstm/": embedding [V,E], input weights W [4H,E],
// recurrent weights U [4H,H], bias b [4H]. Gate blocks are stacked in the
// order (input, forget, cell, output).
template <typename T>
void init_lstm_params(ParamStore<T>& params, const LstmShape& shape, Rng& rng);

// Final hidden states for a batch of sequences of possibly different
// lengths: [N, H]. Finished sequences hold their last state.
template <typename T>
Tensor<T> lstm_encode_batch(const std::vector<TokenIds>& batch, const ParamStore<T>& params);

// Final hidden state r = h_n of one sequence: [H].
template <typename T>
Tensor<T> lstm_encode(const TokenIds& ids, const ParamStore<T>& params);

// Reads "token v1 ... vE" lines and overwrites matching embedding rows.
// Returns how many vocabulary tokens were found in the file.
template <typename T>
std::size_t load_embeddings(const std::filesystem::path& path, const Vocab& vocab,
                            ParamStore<T>& params);

}  // namespace bilingunet
