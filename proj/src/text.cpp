// SPDX-License-Identifier: Apache-2.0

#include "bilingunet/text.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace bilingunet {

Vocab::Vocab() : Vocab(std::vector<std::string>{}) {}

Vocab::Vocab(const std::vector<std::string>& tokens_after_reserved) {
  tokens_ = {"<pad>", "<unk>"};
  for (const auto& t : tokens_after_reserved) {
    if (t == "<pad>" || t == "<unk>") continue;
    tokens_.push_back(t);
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<std::int64_t>(i)).second) {
      throw VocabError("duplicate token in vocabulary: " + tokens_[i]);
    }
  }
}

std::int64_t Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(std::int64_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw VocabError("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::string> split_words(const std::string& expression) {
  std::vector<std::string> words;
  std::string current;
  for (unsigned char ch : expression) {
    if (std::isspace(ch) || std::ispunct(ch)) {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

TokenIds tokenize(const std::string& expression, const Vocab& vocab, std::size_t max_len) {
  if (max_len < 1) throw ParameterError("tokenize: max_len must be >= 1");
  const auto words = split_words(expression);
  if (words.empty()) throw ContractError("expression has no tokens: \"" + expression + "\"");
  TokenIds ids;
  for (const auto& w : words) {
    if (ids.size() == max_len) break;
    ids.push_back(vocab.id(w));
  }
  return ids;
}

Vocab build_vocab(const std::vector<std::string>& corpus, std::size_t min_count) {
  if (corpus.empty()) throw ContractError("build_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& expr : corpus)
    for (const auto& w : split_words(expr)) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [w, c] : counts)
    if (c >= min_count) kept.emplace_back(w, c);
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens;
  tokens.reserve(kept.size());
  for (auto& [w, c] : kept) tokens.push_back(w);
  return Vocab(tokens);
}

template <typename T>
void init_lstm_params(ParamStore<T>& params, const LstmShape& shape, Rng& rng) {
  if (shape.vocab_size < 2 || shape.embed_dim == 0 || shape.hidden == 0) {
    throw ConfigError("lstm shape must have vocab >= 2 and positive dimensions");
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(shape.hidden));
  std::uniform_real_distribution<double> dist(-bound, bound);
  auto uniform = [&](Shape s) {
    Tensor<T> t(std::move(s));
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    return t;
  };
  const std::size_t h = shape.hidden;
  params.add("lstm/embedding", uniform({shape.vocab_size, shape.embed_dim}));
  params.add("lstm/W", uniform({4 * h, shape.embed_dim}));
  params.add("lstm/U", uniform({4 * h, h}));
  Tensor<T> bias = uniform({4 * h});
  for (std::size_t j = h; j < 2 * h; ++j) bias[j] = T{1};
  params.add("lstm/b", std::move(bias));
}

template <typename T>
Tensor<T> lstm_encode_batch(const std::vector<TokenIds>& batch, const ParamStore<T>& params) {
  if (batch.empty()) throw ContractError("lstm_encode_batch: empty batch");
  const Tensor<T>& emb = params.get("lstm/embedding");
  const Tensor<T>& w = params.get("lstm/W");
  const Tensor<T>& u = params.get("lstm/U");
  const Tensor<T>& b = params.get("lstm/b");
  const std::size_t n = batch.size();
  const std::size_t h = u.dim(1);
  std::size_t max_len = 0;
  for (const auto& ids : batch) {
    if (ids.empty()) throw ContractError("lstm_encode: empty token sequence");
    max_len = std::max(max_len, ids.size());
  }

  Tensor<T> hidden(Shape{n, h});
  Tensor<T> cell(Shape{n, h});
  for (std::size_t t = 0; t < max_len; ++t) {
    std::vector<std::int64_t> step_ids(n, Vocab::kPad);
    bool all_active = true;
    for (std::size_t i = 0; i < n; ++i) {
      if (t < batch[i].size()) {
        step_ids[i] = batch[i][t];
      } else {
        all_active = false;
      }
    }
    Tensor<T> x = embedding(emb, step_ids);
    Tensor<T> z = affine(x, w, b);
    if (t > 0) z = add(z, affine(hidden, u, Tensor<T>{}));
    Tensor<T> in_gate = sigmoid(slice_cols(z, 0, h));
    Tensor<T> forget_gate = sigmoid(slice_cols(z, h, 2 * h));
    Tensor<T> cell_in = tanh(slice_cols(z, 2 * h, 3 * h));
    Tensor<T> out_gate = sigmoid(slice_cols(z, 3 * h, 4 * h));
    Tensor<T> next_cell = add(mul(forget_gate, cell), mul(in_gate, cell_in));
    Tensor<T> next_hidden = mul(out_gate, tanh(next_cell));
    if (all_active) {
      cell = next_cell;
      hidden = next_hidden;
      continue;
    }
    Tensor<T> keep_new(Shape{n, h});
    Tensor<T> keep_old(Shape{n, h});
    for (std::size_t i = 0; i < n; ++i) {
      const bool active = t < batch[i].size();
      std::fill_n(keep_new.ptr() + i * h, h, active ? T{1} : T{0});
      std::fill_n(keep_old.ptr() + i * h, h, active ? T{0} : T{1});
    }
    cell = add(mul(next_cell, keep_new), mul(cell, keep_old));
    hidden = add(mul(next_hidden, keep_new), mul(hidden, keep_old));
  }
  return hidden;
}

template <typename T>
Tensor<T> lstm_encode(const TokenIds& ids, const ParamStore<T>& params) {
  Tensor<T> batch = lstm_encode_batch<T>({ids}, params);
  return reshape(batch, Shape{batch.dim(1)});
}

template <typename T>
std::size_t load_embeddings(const std::filesystem::path& path, const Vocab& vocab,
                            ParamStore<T>& params) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embedding file " + path.string());
  Tensor<T>& emb = params.get("lstm/embedding");
  const std::size_t dim = emb.dim(1);
  std::size_t found = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string token;
    fields >> token;
    std::vector<T> values;
    double v;
    while (fields >> v) values.push_back(static_cast<T>(v));
    if (!fields.eof()) {
      throw LoadError(path.string() + ":" + std::to_string(line_no) + ": malformed number");
    }
    if (values.size() != dim) {
      throw LoadError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(dim) + " values, got " + std::to_string(values.size()));
    }
    if (!vocab.contains(token)) continue;
    std::copy(values.begin(), values.end(), emb.ptr() + vocab.id(token) * dim);
    ++found;
  }
  return found;
}

template void init_lstm_params(ParamStore<float>&, const LstmShape&, Rng&);
template void init_lstm_params(ParamStore<double>&, const LstmShape&, Rng&);
template Tensor<float> lstm_encode_batch(const std::vector<TokenIds>&, const ParamStore<float>&);
template Tensor<double> lstm_encode_batch(const std::vector<TokenIds>&, const ParamStore<double>&);
template Tensor<float> lstm_encode(const TokenIds&, const ParamStore<float>&);
template Tensor<double> lstm_encode(const TokenIds&, const ParamStore<double>&);
template std::size_t load_embeddings(const std::filesystem::path&, const Vocab&, ParamStore<float>&);
template std::size_t load_embeddings(const std::filesystem::path&, const Vocab&, ParamStore<double>&);

}  // namespace bilingunet
