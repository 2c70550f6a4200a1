// Copyright (c) 2026 The depthlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ============================================================================
// Writes a deterministic pseudo-English text corpus. The text has a small
// grammar, Zipf-distributed word choice and per-paragraph topics, so a byte
// model has structure to learn at every scale from spelling to syntax.
#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "depthlab/rng.hpp"

namespace {

using depthlab::Rng;

const std::vector<std::string> kOnsets{"b", "br", "c", "ch", "d", "f", "fl", "g", "gr", "h", "k", "l", "m", "n",
                                       "p", "pl", "r", "s", "sh", "st", "t", "th", "tr", "v", "w", "z"};
const std::vector<std::string> kVowels{"a", "e", "i", "o", "u", "ai", "ea", "ou", "io", "y"};
const std::vector<std::string> kCodas{"", "", "n", "r", "l", "s", "t", "m", "nd", "st", "ck", "ng"};

std::size_t pick(Rng& rng, std::size_t n) { return static_cast<std::size_t>(rng.next_u64() % n); }

std::string make_word(Rng& rng) {
  const std::size_t syllables = 1 + pick(rng, 3);
  std::string w;
  for (std::size_t s = 0; s < syllables; ++s) {
    w += kOnsets[pick(rng, kOnsets.size())];
    w += kVowels[pick(rng, kVowels.size())];
  }
  w += kCodas[pick(rng, kCodas.size())];
  return w;
}

std::vector<std::string> lexicon(Rng& rng, std::size_t n) {
  std::vector<std::string> out;
  while (out.size() < n) out.push_back(make_word(rng));
  return out;
}

// Zipf(1) rank sampler over n items via inverse CDF on the harmonic sums.
class Zipf {
 public:
  explicit Zipf(std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) cdf_.push_back(acc += 1.0 / static_cast<double>(i + 1));
  }
  std::size_t operator()(Rng& rng) const {
    const double u = rng.uniform() * cdf_.back();
    return static_cast<std::size_t>(std::lower_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin());
  }

 private:
  std::vector<double> cdf_;
};

struct Grammar {
  std::vector<std::string> nouns, verbs, adjs, advs;
  Zipf zn{1}, zv{1}, za{1}, zd{1};
};

std::string capitalize(std::string s) {
  if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

std::string noun_phrase(Rng& rng, const Grammar& g, const std::vector<std::size_t>& topic) {
  static const std::vector<std::string> dets{"the", "the", "the", "a", "this", "every", "some", "our"};
  std::string np = dets[pick(rng, dets.size())] + " ";
  if (rng.uniform() < 0.4) np += g.adjs[g.za(rng)] + " ";
  const std::size_t n = rng.uniform() < 0.6 ? topic[pick(rng, topic.size())] : g.zn(rng);
  np += g.nouns[n];
  if (rng.uniform() < 0.15) np += "s";
  return np;
}

std::string verb(Rng& rng, const Grammar& g) {
  static const std::vector<std::string> tense{"s", "ed", "s", "ed", "ing"};
  const std::string t = tense[pick(rng, tense.size())];
  std::string v = g.verbs[g.zv(rng)];
  if (t == "ing") return "was " + v + "ing";
  return v + t;
}

std::string sentence(Rng& rng, const Grammar& g, const std::vector<std::size_t>& topic) {
  static const std::vector<std::string> preps{"in", "with", "from", "over", "under", "near", "across", "into"};
  static const std::vector<std::string> conj{"when", "because", "while", "although", "after", "before"};
  std::string s;
  const double form = rng.uniform();
  if (form < 0.45) {
    s = noun_phrase(rng, g, topic) + " " + verb(rng, g) + " " + noun_phrase(rng, g, topic);
  } else if (form < 0.7) {
    s = noun_phrase(rng, g, topic) + " " + verb(rng, g) + " " + preps[pick(rng, preps.size())] + " " +
        noun_phrase(rng, g, topic);
  } else if (form < 0.9) {
    s = conj[pick(rng, conj.size())] + " " + noun_phrase(rng, g, topic) + " " + verb(rng, g) + ", " +
        noun_phrase(rng, g, topic) + " " + verb(rng, g) + " " + g.advs[g.zd(rng)];
  } else {
    s = noun_phrase(rng, g, topic) + " " + verb(rng, g) + " in " + std::to_string(1700 + pick(rng, 320));
  }
  if (rng.uniform() < 0.2) s += " and " + noun_phrase(rng, g, topic) + " " + verb(rng, g);
  return capitalize(s) + (rng.uniform() < 0.08 ? "?" : ".");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generate the deterministic synthetic training corpus"};
  std::string out = "data/corpus.txt";
  std::size_t bytes = 2'000'000;
  std::uint64_t seed = 20260101;
  app.add_option("-o,--out", out, "Output path");
  app.add_option("-n,--bytes", bytes, "Approximate corpus size in bytes");
  app.add_option("--seed", seed, "Generator seed");
  CLI11_PARSE(app, argc, argv);

  Rng rng(seed);
  Grammar g;
  g.nouns = lexicon(rng, 800);
  g.verbs = lexicon(rng, 300);
  g.adjs = lexicon(rng, 200);
  g.advs = lexicon(rng, 60);
  for (auto& a : g.advs) a += "ly";
  g.zn = Zipf(g.nouns.size());
  g.zv = Zipf(g.verbs.size());
  g.za = Zipf(g.adjs.size());
  g.zd = Zipf(g.advs.size());

  std::string text;
  while (text.size() < bytes) {
    std::vector<std::size_t> topic;
    for (int i = 0; i < 5; ++i) topic.push_back(g.zn(rng));
    const std::size_t n_sentences = 3 + pick(rng, 6);
    std::size_t col = 0;
    for (std::size_t i = 0; i < n_sentences; ++i) {
      std::string s = sentence(rng, g, topic);
      // Greedy wrap at 72 columns.
      std::size_t start = 0;
      while (start < s.size()) {
        std::size_t end = s.find(' ', start);
        if (end == std::string::npos) end = s.size();
        const std::string word = s.substr(start, end - start);
        if (col > 0 && col + 1 + word.size() > 72) {
          text += '\n';
          col = 0;
        } else if (col > 0) {
          text += ' ';
          ++col;
        }
        text += word;
        col += word.size();
        start = end + 1;
      }
    }
    text += "\n\n";
  }
  std::ofstream f(out, std::ios::binary);
  if (!f) {
    std::fprintf(stderr, "cannot write %s\n", out.c_str());
    return 1;
  }
  f << text;
  std::printf("wrote %zu bytes to %s\n", text.size(), out.c_str());
  return 0;
}
