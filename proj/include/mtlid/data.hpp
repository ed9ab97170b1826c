#pragma once

// Labeled corpora in a four-column TSV schema (id, text, country, province)
// and a synthetic hierarchical corpus generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "mtlid/preprocess.hpp"
#include "mtlid/tensor.hpp"

namespace mtlid {

class DataError : public Error {
 public:
  using Error::Error;
};

struct Example {
  std::string id;
  std::string text;
  std::int32_t country = 0;
  std::int32_t province = 0;

  bool operator==(const Example&) const = default;
};

struct Record {
  std::string id;
  std::string text;
  std::string country;
  std::string province;
};

struct Dataset {
  std::vector<Example> examples;
  std::vector<std::string> country_labels;
  std::vector<std::string> province_labels;
  /// Ids of examples whose text is empty after cleaning.
  std::vector<std::string> flagged;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }

  /// Label ids follow the lexicographic order of the label strings.
  static Dataset from_records(const std::vector<Record>& records) {
    std::set<std::string> countries, provinces;
    for (const auto& r : records) {
      countries.insert(r.country);
      provinces.insert(r.province);
    }
    return from_records(records, {countries.begin(), countries.end()},
                        {provinces.begin(), provinces.end()});
  }

  /// Resolves labels against fixed label lists; an unknown label is a
  /// label-space mismatch.
  static Dataset from_records(const std::vector<Record>& records, std::vector<std::string> country_labels,
                              std::vector<std::string> province_labels) {
    Dataset ds;
    ds.country_labels = std::move(country_labels);
    ds.province_labels = std::move(province_labels);
    const auto cidx = index_of(ds.country_labels, "country");
    const auto pidx = index_of(ds.province_labels, "province");
    std::set<std::string> seen;
    for (const auto& r : records) {
      if (!seen.insert(r.id).second) throw DataError("duplicate example id '" + r.id + "'");
      auto c = cidx.find(r.country);
      auto p = pidx.find(r.province);
      if (c == cidx.end()) throw LabelError("unknown country label '" + r.country + "' (example " + r.id + ")");
      if (p == pidx.end()) throw LabelError("unknown province label '" + r.province + "' (example " + r.id + ")");
      ds.examples.push_back({r.id, r.text, c->second, p->second});
      if (clean_text(r.text).find_first_not_of(" \t\r\n\f\v") == std::string::npos) {
        ds.flagged.push_back(r.id);
      }
    }
    return ds;
  }

  std::vector<Record> records() const {
    std::vector<Record> out;
    out.reserve(examples.size());
    for (const auto& e : examples) {
      out.push_back({e.id, e.text, country_labels.at(e.country), province_labels.at(e.province)});
    }
    return out;
  }

 private:
  static std::map<std::string, std::int32_t> index_of(const std::vector<std::string>& labels,
                                                      const char* what) {
    std::map<std::string, std::int32_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (!idx.emplace(labels[i], static_cast<std::int32_t>(i)).second) {
        throw DataError(std::string("duplicate ") + what + " label '" + labels[i] + "'");
      }
    }
    return idx;
  }
};

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find('\t', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

/// Lines with trailing CR removed; header (first cell "id") skipped.
/// Returns (line number, fields) pairs for non-empty lines.
inline std::vector<std::pair<std::size_t, std::vector<std::string>>> read_tsv_rows(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  std::vector<std::pair<std::size_t, std::vector<std::string>>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_tabs(line);
    if (rows.empty() && lineno == 1 && fields[0] == "id") continue;
    rows.emplace_back(lineno, std::move(fields));
  }
  return rows;
}

}  // namespace detail

inline std::vector<Record> load_records(const std::string& path) {
  auto rows = detail::read_tsv_rows(path);
  std::vector<Record> records;
  for (auto& [lineno, f] : rows) {
    if (f.size() != 4) {
      throw DataError(path + ":" + std::to_string(lineno) + ": expected 4 tab-separated columns " +
                      "(id, text, country, province), got " + std::to_string(f.size()));
    }
    records.push_back({std::move(f[0]), std::move(f[1]), std::move(f[2]), std::move(f[3])});
  }
  if (records.empty()) throw DataError(path + ": no examples");
  return records;
}

inline Dataset load_tsv(const std::string& path) { return Dataset::from_records(load_records(path)); }

inline Dataset load_tsv(const std::string& path, const std::vector<std::string>& country_labels,
                        const std::vector<std::string>& province_labels) {
  return Dataset::from_records(load_records(path), country_labels, province_labels);
}

struct TextItem {
  std::string id;
  std::string text;
};

/// Reads (id, text) pairs; any further columns are ignored. An empty file
/// yields no items.
inline std::vector<TextItem> load_texts(const std::string& path) {
  auto rows = detail::read_tsv_rows(path);
  std::vector<TextItem> out;
  std::set<std::string> seen;
  for (auto& [lineno, f] : rows) {
    if (f.size() < 2) {
      throw DataError(path + ":" + std::to_string(lineno) + ": expected at least id and text columns");
    }
    if (!seen.insert(f[0]).second) throw DataError("duplicate example id '" + f[0] + "'");
    out.push_back({std::move(f[0]), std::move(f[1])});
  }
  return out;
}

inline void write_tsv(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path);
  os << "id\ttext\tcountry\tprovince\n";
  for (const auto& r : ds.records()) {
    for (const std::string* field : {&r.id, &r.text, &r.country, &r.province}) {
      if (field->find_first_of("\t\r\n") != std::string::npos) {
        throw DataError("example " + r.id + ": field contains a tab or line break");
      }
    }
    os << r.id << '\t' << r.text << '\t' << r.country << '\t' << r.province << '\n';
  }
  if (!os) throw DataError("failed writing " + path);
}

struct LabelCount {
  std::string label;
  std::size_t count = 0;
};

struct LabelDistribution {
  std::vector<LabelCount> country;
  std::vector<LabelCount> province;
};

/// Counts for every label of both tasks, highest first (ties by label).
inline LabelDistribution label_distribution(const Dataset& ds) {
  auto tally = [&](const std::vector<std::string>& labels, auto member) {
    std::vector<LabelCount> counts(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) counts[i].label = labels[i];
    for (const auto& e : ds.examples) ++counts.at(static_cast<std::size_t>(e.*member)).count;
    std::stable_sort(counts.begin(), counts.end(),
                     [](const LabelCount& a, const LabelCount& b) { return a.count > b.count; });
    return counts;
  };
  return {tally(ds.country_labels, &Example::country), tally(ds.province_labels, &Example::province)};
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SynthConfig {
  std::size_t n_countries = 6;
  std::size_t provinces_per_country = 3;
  std::size_t examples_per_province = 200;
  std::size_t shared_vocab_size = 200;
  std::size_t country_signal_tokens = 64;
  std::size_t province_signal_tokens = 8;
  std::size_t tokens_per_example = 12;
  double signal_strength = 0.3;
  std::uint64_t seed = 7;

  void validate() const {
    if (!n_countries || !provinces_per_country || !examples_per_province || !shared_vocab_size ||
        !country_signal_tokens || !province_signal_tokens || !tokens_per_example) {
      throw Error("synthetic corpus counts must be positive");
    }
    if (!(signal_strength >= 0.0 && signal_strength <= 1.0)) {
      throw Error("signal_strength must lie in [0, 1]");
    }
  }
};

struct SynthSplits {
  Dataset train;
  Dataset dev;
  Dataset test;
};

namespace detail {

inline std::string fmt_index(const char* pattern, std::size_t a, std::size_t b = 0, std::size_t c = 0) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, a, b, c);
  return buf;
}

inline std::size_t pick(Rng& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

template <typename V>
void fisher_yates(V& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[pick(rng, i)]);
}

}  // namespace detail

inline std::string synth_country_label(std::size_t c) { return detail::fmt_index("C%02zu", c); }
inline std::string synth_province_label(std::size_t c, std::size_t p) {
  return detail::fmt_index("C%02zu-P%02zu", c, p);
}

/// Province determines country. Each token comes, with probability
/// signal_strength, from the province's pool (its own tokens plus its
/// country's tokens), otherwise from the shared pool. Every province is
/// split 70/15/15 into train/dev/test.
inline SynthSplits synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::vector<std::string> countries, provinces;
  for (std::size_t c = 0; c < cfg.n_countries; ++c) {
    countries.push_back(synth_country_label(c));
    for (std::size_t p = 0; p < cfg.provinces_per_country; ++p) provinces.push_back(synth_province_label(c, p));
  }
  std::vector<std::string> shared;
  for (std::size_t i = 0; i < cfg.shared_vocab_size; ++i) shared.push_back(detail::fmt_index("w%04zu", i));

  SynthSplits out;
  for (Dataset* ds : {&out.train, &out.dev, &out.test}) {
    ds->country_labels = countries;
    ds->province_labels = provinces;
  }
  std::size_t serial = 0;
  for (std::size_t c = 0; c < cfg.n_countries; ++c) {
    std::vector<std::string> country_pool;
    for (std::size_t t = 0; t < cfg.country_signal_tokens; ++t)
      country_pool.push_back(detail::fmt_index("c%02zu_%02zu", c, t));
    for (std::size_t p = 0; p < cfg.provinces_per_country; ++p) {
      std::vector<std::string> pool = country_pool;
      for (std::size_t t = 0; t < cfg.province_signal_tokens; ++t)
        pool.push_back(detail::fmt_index("p%02zu_%02zu_%02zu", c, p, t));
      std::vector<Example> examples;
      for (std::size_t e = 0; e < cfg.examples_per_province; ++e) {
        std::string text;
        for (std::size_t t = 0; t < cfg.tokens_per_example; ++t) {
          const bool signal = uniform01(rng) < cfg.signal_strength;
          const auto& tok = signal ? pool[detail::pick(rng, pool.size())]
                                   : shared[detail::pick(rng, shared.size())];
          if (t) text.push_back(' ');
          text += tok;
        }
        examples.push_back({detail::fmt_index("syn%06zu", serial++), std::move(text),
                            static_cast<std::int32_t>(c),
                            static_cast<std::int32_t>(c * cfg.provinces_per_country + p)});
      }
      detail::fisher_yates(examples, rng);
      const std::size_t n = examples.size();
      const auto n_train = static_cast<std::size_t>(std::llround(0.70 * static_cast<double>(n)));
      const auto n_dev = std::min(n - n_train, static_cast<std::size_t>(std::llround(0.15 * static_cast<double>(n))));
      for (std::size_t i = 0; i < n; ++i) {
        Dataset& target = i < n_train ? out.train : (i < n_train + n_dev ? out.dev : out.test);
        target.examples.push_back(std::move(examples[i]));
      }
    }
  }
  return out;
}

}  // namespace mtlid
