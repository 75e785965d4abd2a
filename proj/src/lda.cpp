// SPDX-License-Identifier: Apache-2.0
// Collapsed Gibbs sampling for latent Dirichlet allocation.
#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "metapt/errors.hpp"
#include "metapt/taskgen.hpp"

namespace metapt {

namespace {

double joint_log_likelihood(const LdaModel& m) {
  const double V = static_cast<double>(m.vocab.size());
  const double K = static_cast<double>(m.k);
  double ll = K * (std::lgamma(V * m.beta) - V * std::lgamma(m.beta));
  for (int t = 0; t < m.k; ++t) {
    for (int c : m.topic_word[static_cast<std::size_t>(t)]) ll += std::lgamma(c + m.beta);
    ll -= std::lgamma(m.topic_total[static_cast<std::size_t>(t)] + V * m.beta);
  }
  const double D = static_cast<double>(m.docs.size());
  ll += D * (std::lgamma(K * m.alpha) - K * std::lgamma(m.alpha));
  for (std::size_t d = 0; d < m.docs.size(); ++d) {
    for (int c : m.doc_topic[d]) ll += std::lgamma(c + m.alpha);
    ll -= std::lgamma(static_cast<double>(m.docs[d].size()) + K * m.alpha);
  }
  return ll;
}

}  // namespace

std::vector<std::string> LdaModel::top_words(int topic, std::size_t n) const {
  const auto& row = topic_word.at(static_cast<std::size_t>(topic));
  std::vector<std::size_t> idx(row.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < std::min(n, idx.size()); ++i) out.push_back(vocab[idx[i]]);
  return out;
}

void LdaModel::check_consistency() const {
  std::vector<std::vector<int>> tw(static_cast<std::size_t>(k), std::vector<int>(vocab.size(), 0));
  std::vector<int> tt(static_cast<std::size_t>(k), 0);
  for (std::size_t d = 0; d < docs.size(); ++d) {
    std::vector<int> dt(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < docs[d].size(); ++i) {
      const auto z = static_cast<std::size_t>(topic_of[d][i]);
      ++tw[z][static_cast<std::size_t>(docs[d][i])];
      ++tt[z];
      ++dt[z];
    }
    if (dt != doc_topic[d]) throw ContractError("lda: document-topic counts out of sync");
  }
  if (tw != topic_word || tt != topic_total) throw ContractError("lda: topic-word counts out of sync");
}

LdaModel lda_fit(const Dataset& ds, const LdaOptions& o) {
  if (o.k < 2) throw ContractError("lda_fit: K must be >= 2");
  if (ds.size() < static_cast<std::size_t>(o.k)) {
    throw DataError("lda_fit: " + std::to_string(ds.size()) + " documents for K=" + std::to_string(o.k));
  }
  if (o.iterations < 1) throw ContractError("lda_fit: iterations must be >= 1");
  LdaModel m;
  m.k = o.k;
  m.alpha = o.alpha > 0 ? o.alpha : 50.0 / o.k;
  m.beta = o.beta;
  m.corpus_hash = dataset_hash(ds);

  std::vector<std::vector<std::string>> tokens(ds.size());
  std::map<std::string, long> freq;
  for (std::size_t d = 0; d < ds.size(); ++d) {
    tokens[d] = Tokenizer::split(ds.examples[d].text);
    for (const auto& w : tokens[d]) ++freq[w];
  }
  std::vector<std::pair<std::string, long>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  const auto n_stop = static_cast<std::size_t>(o.stopword_fraction * static_cast<double>(ranked.size()));
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (i < n_stop) {
      m.stopwords.push_back(ranked[i].first);
    } else {
      index.emplace(ranked[i].first, 0);
    }
  }
  for (auto& [w, id] : index) {
    id = static_cast<int>(m.vocab.size());
    m.vocab.push_back(w);
  }

  std::mt19937_64 rng(o.seed);
  std::uniform_int_distribution<int> any_topic(0, o.k - 1);
  const auto K = static_cast<std::size_t>(o.k);
  m.topic_word.assign(K, std::vector<int>(m.vocab.size(), 0));
  m.topic_total.assign(K, 0);
  m.doc_topic.assign(ds.size(), std::vector<int>(K, 0));
  m.docs.resize(ds.size());
  m.topic_of.resize(ds.size());
  for (std::size_t d = 0; d < ds.size(); ++d) {
    for (const auto& w : tokens[d]) {
      auto it = index.find(w);
      if (it == index.end()) continue;
      const int z = any_topic(rng);
      m.docs[d].push_back(it->second);
      m.topic_of[d].push_back(z);
      ++m.topic_word[static_cast<std::size_t>(z)][static_cast<std::size_t>(it->second)];
      ++m.topic_total[static_cast<std::size_t>(z)];
      ++m.doc_topic[d][static_cast<std::size_t>(z)];
    }
  }

  const double vbeta = static_cast<double>(m.vocab.size()) * m.beta;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> p(K);
  for (int sweep = 0; sweep < o.iterations; ++sweep) {
    for (std::size_t d = 0; d < m.docs.size(); ++d) {
      auto& dt = m.doc_topic[d];
      for (std::size_t i = 0; i < m.docs[d].size(); ++i) {
        const auto w = static_cast<std::size_t>(m.docs[d][i]);
        auto z = static_cast<std::size_t>(m.topic_of[d][i]);
        --m.topic_word[z][w];
        --m.topic_total[z];
        --dt[z];
        double total = 0;
        for (std::size_t t = 0; t < K; ++t) {
          total += (dt[t] + m.alpha) * (m.topic_word[t][w] + m.beta) / (m.topic_total[t] + vbeta);
          p[t] = total;
        }
        const double u = unit(rng) * total;
        z = static_cast<std::size_t>(std::upper_bound(p.begin(), p.end(), u) - p.begin());
        z = std::min(z, K - 1);
        m.topic_of[d][i] = static_cast<int>(z);
        ++m.topic_word[z][w];
        ++m.topic_total[z];
        ++dt[z];
      }
    }
    m.log_likelihood.push_back(joint_log_likelihood(m));
  }
  return m;
}

std::vector<int> assign_by_lda(const LdaModel& model, const Dataset& ds) {
  if (dataset_hash(ds) != model.corpus_hash || ds.size() != model.doc_topic.size()) {
    throw ContractError("assign_by_lda: dataset was not the one the model was fitted on");
  }
  std::vector<int> out(ds.size());
  for (std::size_t d = 0; d < ds.size(); ++d) {
    const auto& row = model.doc_topic[d];
    out[d] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

}  // namespace metapt
