#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "apdt/common.hpp"

namespace apdt {

using TokenSeq = std::vector<std::string>;

struct AttributePair {
  TokenSeq key;
  TokenSeq value;
};

// One product instance. Tokens arrive pre-tokenized (whitespace-free strings);
// reviews may be empty (the long-tailed case), description may be absent for
// pure inference records.
struct ProductRecord {
  std::string id;
  TokenSeq title;
  std::vector<AttributePair> attributes;
  std::vector<TokenSeq> reviews;
  TokenSeq description;
};

// Reserved vocabulary ids.
enum : int { kPad = 0, kUnk = 1, kBos = 2, kEos = 3, kNumReserved = 4 };

class Vocabulary {
 public:
  Vocabulary() {
    id_to_token_ = {"<pad>", "<unk>", "<bos>", "<eos>"};
  }

  int add(const std::string& tok) {
    auto it = token_to_id_.find(tok);
    if (it != token_to_id_.end()) return it->second;
    int id = int(id_to_token_.size());
    id_to_token_.push_back(tok);
    token_to_id_[tok] = id;
    return id;
  }

  int id(const std::string& tok) const {
    auto it = token_to_id_.find(tok);
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& tok) const { return token_to_id_.count(tok) > 0; }
  const std::string& token(int id) const { return id_to_token_[id]; }
  int size() const { return int(id_to_token_.size()); }

  // Plain text format: one token per line, line k (1-based) holds id k+3.
  std::string to_text() const {
    std::string out;
    for (size_t i = kNumReserved; i < id_to_token_.size(); ++i) {
      out += id_to_token_[i];
      out += '\n';
    }
    return out;
  }

  static Vocabulary from_text(const std::string& text) {
    Vocabulary v;
    size_t pos = 0, line_no = 0;
    while (pos < text.size()) {
      size_t nl = text.find('\n', pos);
      if (nl == std::string::npos) nl = text.size();
      std::string tok = text.substr(pos, nl - pos);
      ++line_no;
      if (tok.empty())
        throw ValidationError("vocabulary line " + std::to_string(line_no) + ": empty token");
      if (v.contains(tok))
        throw ValidationError("vocabulary line " + std::to_string(line_no) +
                              ": duplicate token '" + tok + "'");
      v.add(tok);
      pos = nl + 1;
    }
    return v;
  }

  std::uint64_t digest() const { return fnv1a64(to_text()); }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

// Inverse-frequency weights over training-split token occurrences (all record
// fields). A token seen c times weighs 1/c; unseen tokens weigh 1.
class FrequencyIndex {
 public:
  double weight(const std::string& tok) const {
    auto it = w_.find(tok);
    return it == w_.end() ? 1.0 : it->second;
  }

  void set(const std::string& tok, double w) { w_[tok] = w; }
  size_t size() const { return w_.size(); }

  std::string to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [tok, w] : std::map<std::string, double>(w_.begin(), w_.end())) j[tok] = w;
    return j.dump();
  }

  static FrequencyIndex from_json(const std::string& text) {
    FrequencyIndex f;
    auto j = nlohmann::json::parse(text);
    for (auto it = j.begin(); it != j.end(); ++it) f.set(it.key(), it.value().get<double>());
    return f;
  }

 private:
  std::unordered_map<std::string, double> w_;
};

namespace detail {

inline bool valid_token(const std::string& t) {
  if (t.empty()) return false;
  for (char c : t)
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') return false;
  return true;
}

inline void check_tokens(const TokenSeq& seq, const std::string& what, size_t line) {
  for (const auto& t : seq)
    if (!valid_token(t))
      throw ValidationError("line " + std::to_string(line) + ": " + what +
                            " contains an empty or whitespace token");
}

}  // namespace detail

// Record-level invariants shared by the loader and the generator. `line` is
// only used to label errors.
inline void validate_record(const ProductRecord& rec, size_t line = 0) {
  auto fail = [line](const std::string& msg) {
    throw ValidationError("line " + std::to_string(line) + ": " + msg);
  };
  if (rec.id.empty()) fail("missing or empty 'id'");
  if (rec.title.empty()) fail("empty title");
  detail::check_tokens(rec.title, "title", line);
  if (rec.attributes.empty()) fail("record has no attributes");
  for (const auto& ap : rec.attributes) {
    if (ap.key.empty()) fail("attribute with empty key");
    if (ap.value.empty() || ap.value.size() > 4)
      fail("attribute value must have 1 to 4 tokens");
    detail::check_tokens(ap.key, "attribute key", line);
    detail::check_tokens(ap.value, "attribute value", line);
  }
  for (const auto& rv : rec.reviews) {
    if (rv.empty()) fail("empty review sentence");
    detail::check_tokens(rv, "review", line);
  }
  detail::check_tokens(rec.description, "description", line);
}

inline nlohmann::ordered_json record_to_json(const ProductRecord& rec) {
  nlohmann::ordered_json j;
  j["id"] = rec.id;
  j["title"] = rec.title;
  auto attrs = nlohmann::ordered_json::array();
  for (const auto& ap : rec.attributes) {
    nlohmann::ordered_json a;
    a["key"] = ap.key;
    a["value"] = ap.value;
    attrs.push_back(std::move(a));
  }
  j["attributes"] = std::move(attrs);
  j["reviews"] = rec.reviews;
  if (!rec.description.empty()) j["description"] = rec.description;
  return j;
}

inline ProductRecord record_from_json(const nlohmann::json& j, size_t line) {
  auto fail = [line](const std::string& msg) {
    throw ValidationError("line " + std::to_string(line) + ": " + msg);
  };
  if (!j.is_object()) fail("record is not a JSON object");
  ProductRecord rec;
  if (!j.contains("id") || !j["id"].is_string()) fail("missing 'id'");
  rec.id = j["id"].get<std::string>();
  if (!j.contains("title")) fail("missing 'title'");
  rec.title = j["title"].get<TokenSeq>();
  if (!j.contains("attributes")) fail("missing 'attributes'");
  for (const auto& a : j["attributes"]) {
    AttributePair ap;
    if (!a.contains("key") || !a.contains("value")) fail("attribute missing 'key' or 'value'");
    ap.key = a["key"].get<TokenSeq>();
    ap.value = a["value"].get<TokenSeq>();
    rec.attributes.push_back(std::move(ap));
  }
  if (j.contains("reviews")) rec.reviews = j["reviews"].get<std::vector<TokenSeq>>();
  if (j.contains("description")) rec.description = j["description"].get<TokenSeq>();
  validate_record(rec, line);
  return rec;
}

inline std::vector<ProductRecord> load_jsonl(const std::string& path) {
  std::string text = read_file(path);
  std::vector<ProductRecord> out;
  size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": malformed JSON (" +
                            e.what() + ")");
    }
    try {
      out.push_back(record_from_json(j, line_no));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": bad field type (" +
                            e.what() + ")");
    }
  }
  return out;
}

inline std::string records_to_jsonl(const std::vector<ProductRecord>& records) {
  std::string out;
  for (const auto& rec : records) {
    out += record_to_json(rec).dump();
    out += '\n';
  }
  return out;
}

inline void write_jsonl(const std::string& path, const std::vector<ProductRecord>& records) {
  write_file(path, records_to_jsonl(records));
}

// -- vocabulary / frequency construction --

inline void for_each_token(const ProductRecord& rec,
                           const std::function<void(const std::string&)>& fn) {
  for (const auto& t : rec.title) fn(t);
  for (const auto& ap : rec.attributes) {
    for (const auto& t : ap.key) fn(t);
    for (const auto& t : ap.value) fn(t);
  }
  for (const auto& rv : rec.reviews)
    for (const auto& t : rv) fn(t);
  for (const auto& t : rec.description) fn(t);
}

// Most frequent first, ties broken lexicographically; max_size bounds the
// number of non-reserved entries (0 = unlimited).
inline Vocabulary build_vocabulary(const std::vector<ProductRecord>& records, int min_count = 1,
                                   int max_size = 0) {
  if (records.empty()) throw ValidationError("build_vocabulary: empty record list");
  if (min_count < 1) throw ValidationError("build_vocabulary: min_count must be >= 1");
  std::unordered_map<std::string, std::int64_t> counts;
  for (const auto& rec : records)
    for_each_token(rec, [&](const std::string& t) { ++counts[t]; });
  std::vector<std::pair<std::string, std::int64_t>> sorted(counts.begin(), counts.end());
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v;
  for (const auto& [tok, c] : sorted) {
    if (c < min_count) break;
    if (max_size > 0 && v.size() - kNumReserved >= max_size) break;
    v.add(tok);
  }
  return v;
}

inline FrequencyIndex build_frequency_index(const std::vector<ProductRecord>& records,
                                            const Vocabulary& vocab) {
  (void)vocab;  // part of the contract: the index belongs to the vocab's training split
  std::unordered_map<std::string, std::int64_t> counts;
  for (const auto& rec : records)
    for_each_token(rec, [&](const std::string& t) { ++counts[t]; });
  FrequencyIndex f;
  for (const auto& [tok, c] : counts) f.set(tok, 1.0 / double(c));
  return f;
}

// -- indexed records --

struct EncodeLimits {
  int title_max = 64;
  int attr_total_max = 96;
  int review_total_max = 192;
  int desc_max = 96;
};

// Ids plus segment ids for one record. Segments number pairs/sentences from 1;
// segment 0 is reserved for padding (which only batch alignment would
// introduce; per-record passes carry all-ones masks).
struct IndexedRecord {
  std::string id;
  std::vector<int> title_ids;
  std::vector<int> attr_ids, attr_segs;
  std::vector<int> rev_ids, rev_segs;
  std::vector<int> desc_in, desc_tgt;  // BOS + y  /  y + EOS
  std::vector<std::uint8_t> title_mask, attr_mask, rev_mask;
  bool has_description = false;
  bool truncated = false;
};

namespace detail {

inline std::vector<int> to_ids(const TokenSeq& toks, const Vocabulary& v) {
  std::vector<int> out;
  out.reserve(toks.size());
  for (const auto& t : toks) out.push_back(v.id(t));
  return out;
}

}  // namespace detail

inline IndexedRecord encode_record(const ProductRecord& rec, const Vocabulary& vocab,
                                   const EncodeLimits& limits) {
  if (limits.title_max < 1 || limits.attr_total_max < 1 || limits.review_total_max < 1 ||
      limits.desc_max < 1)
    throw ValidationError("encode_record: limits must be positive");
  IndexedRecord ix;
  ix.id = rec.id;

  ix.title_ids = detail::to_ids(rec.title, vocab);
  if (int(ix.title_ids.size()) > limits.title_max) {
    ix.title_ids.resize(limits.title_max);
    ix.truncated = true;
  }

  // Whole trailing pairs/sentences are dropped first; only a unit that alone
  // exceeds the budget gets cut inside.
  int seg = 0;
  for (const auto& ap : rec.attributes) {
    ++seg;
    std::vector<int> unit = detail::to_ids(ap.key, vocab);
    auto vals = detail::to_ids(ap.value, vocab);
    unit.insert(unit.end(), vals.begin(), vals.end());
    int room = limits.attr_total_max - int(ix.attr_ids.size());
    if (int(unit.size()) > room) {
      if (ix.attr_ids.empty()) {
        unit.resize(room);
        ix.truncated = true;
      } else {
        ix.truncated = true;
        break;
      }
    }
    for (int id : unit) {
      ix.attr_ids.push_back(id);
      ix.attr_segs.push_back(seg);
    }
  }

  seg = 0;
  for (const auto& rv : rec.reviews) {
    ++seg;
    std::vector<int> unit = detail::to_ids(rv, vocab);
    int room = limits.review_total_max - int(ix.rev_ids.size());
    if (int(unit.size()) > room) {
      if (ix.rev_ids.empty() && room > 0) {
        unit.resize(room);
        ix.truncated = true;
      } else {
        ix.truncated = true;
        break;
      }
    }
    for (int id : unit) {
      ix.rev_ids.push_back(id);
      ix.rev_segs.push_back(seg);
    }
  }

  if (!rec.description.empty()) {
    ix.has_description = true;
    auto ids = detail::to_ids(rec.description, vocab);
    if (int(ids.size()) > limits.desc_max) {
      ids.resize(limits.desc_max);
      ix.truncated = true;
    }
    ix.desc_in.push_back(kBos);
    ix.desc_in.insert(ix.desc_in.end(), ids.begin(), ids.end());
    ix.desc_tgt = ids;
    ix.desc_tgt.push_back(kEos);
  }

  ix.title_mask.assign(ix.title_ids.size(), 1);
  ix.attr_mask.assign(ix.attr_ids.size(), 1);
  ix.rev_mask.assign(ix.rev_ids.size(), 1);
  return ix;
}

inline TokenSeq decode_ids(const std::vector<int>& ids, const Vocabulary& vocab) {
  TokenSeq out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(vocab.token(id));
  return out;
}

// -- synthetic corpus --

struct AspectRule {
  TokenSeq key;
  TokenSeq value;
  std::string aspect;
};

struct RuleTable {
  std::vector<AspectRule> rules;

  // Aspects triggered by a record's attribute pairs, in pair order.
  std::vector<std::string> aspects_for(const ProductRecord& rec) const {
    std::vector<std::string> out;
    for (const auto& ap : rec.attributes)
      for (const auto& r : rules)
        if (ap.key == r.key && ap.value == r.value) out.push_back(r.aspect);
    return out;
  }

  std::string to_json() const {
    nlohmann::ordered_json j;
    auto arr = nlohmann::ordered_json::array();
    for (const auto& r : rules) {
      nlohmann::ordered_json e;
      e["key"] = r.key;
      e["value"] = r.value;
      e["aspect"] = r.aspect;
      arr.push_back(std::move(e));
    }
    j["rules"] = std::move(arr);
    return j.dump(2);
  }

  static RuleTable from_json(const std::string& text) {
    RuleTable t;
    auto j = nlohmann::json::parse(text);
    for (const auto& e : j.at("rules")) {
      AspectRule r;
      r.key = e.at("key").get<TokenSeq>();
      r.value = e.at("value").get<TokenSeq>();
      r.aspect = e.at("aspect").get<std::string>();
      t.rules.push_back(std::move(r));
    }
    return t;
  }
};

struct GenConfig {
  int size = 1000;
  int n_categories = 6;
  int n_brands = 12;
  int ptypes_per_category = 3;
  int n_keys = 20;
  int keys_per_category = 14;
  int values_per_key = 6;
  int n_aspect_rules = 36;
  int n_value_words = 80;
  int n_fillers = 60;
  double title_mean = 13.8, title_sd = 2.0;
  double review_mean = 25.6, review_sd = 4.0;
  double desc_mean = 40.2, desc_sd = 5.0;
  double attrs_mean = 9.5, attrs_sd = 1.5;
  double p_zero_reviews = 0.15;
  int max_reviews = 5;
};

struct SynthCorpus {
  std::vector<ProductRecord> records;
  RuleTable rules;
};

namespace detail {

struct SynthLexicon {
  std::vector<std::string> categories, brands, fillers, value_words;
  std::vector<std::vector<std::string>> ptypes;          // per category
  std::vector<std::string> keys;                          // single-token keys
  std::vector<std::vector<TokenSeq>> values;              // per key
  std::vector<std::vector<int>> category_keys;            // key indices per category
  std::vector<std::string> glue{"the", "with", "and", "for", "of", "a", "in", "to",
                                "is", "this", "that", "its", "has", "on", "by"};
  std::vector<std::string> sentiment{"love",  "great",   "nice",  "good", "really",
                                     "very",  "super",   "fine",  "solid", "happy",
                                     "comfortable", "pretty", "durable", "handy"};
  std::vector<std::string> markers{"offers", "features", "provides", "delivers"};
  std::vector<std::string> misc{"quality", "design", "style", "series", "new",
                                "classic", "daily", "home", "travel", "work"};
};

inline SynthLexicon build_lexicon(const GenConfig& cfg, Rng& rng) {
  SynthLexicon lx;
  for (int i = 0; i < cfg.n_categories; ++i) lx.categories.push_back("cat" + std::to_string(i));
  for (int i = 0; i < cfg.n_brands; ++i) lx.brands.push_back("brand" + std::to_string(i));
  for (int i = 0; i < cfg.n_fillers; ++i) lx.fillers.push_back("w" + std::to_string(i));
  for (int i = 0; i < cfg.n_value_words; ++i) lx.value_words.push_back("v" + std::to_string(i));
  lx.ptypes.resize(cfg.n_categories);
  int pt = 0;
  for (int c = 0; c < cfg.n_categories; ++c)
    for (int k = 0; k < cfg.ptypes_per_category; ++k)
      lx.ptypes[c].push_back("ptype" + std::to_string(pt++));
  for (int i = 0; i < cfg.n_keys; ++i) lx.keys.push_back("key" + std::to_string(i));
  lx.values.resize(cfg.n_keys);
  for (int k = 0; k < cfg.n_keys; ++k)
    for (int i = 0; i < cfg.values_per_key; ++i) {
      int len = 1 + int(rng.range(4));
      TokenSeq val;
      for (int j = 0; j < len; ++j) val.push_back(rng.choice(lx.value_words));
      lx.values[k].push_back(std::move(val));
    }
  lx.category_keys.resize(cfg.n_categories);
  for (int c = 0; c < cfg.n_categories; ++c)
    for (int i = 0; i < cfg.keys_per_category; ++i)
      lx.category_keys[c].push_back((c * 3 + i) % cfg.n_keys);
  return lx;
}

}  // namespace detail

// Deterministic synthetic product corpus. A hidden rule table maps some
// (key, value) pairs to aspect tokens; aspects show up in reviews and
// descriptions but never in titles, keys, or values, so the item-only pathway
// can reach them only by learning the association.
inline SynthCorpus generate_synthetic_corpus(const GenConfig& cfg, std::uint64_t seed) {
  if (cfg.size < 1) throw ValidationError("generate_synthetic_corpus: size must be >= 1");
  if (cfg.keys_per_category > cfg.n_keys)
    throw ValidationError("generate_synthetic_corpus: keys_per_category exceeds key pool");
  const int n_combos = cfg.n_keys * cfg.values_per_key;
  if (cfg.n_aspect_rules > n_combos)
    throw ValidationError(
        "generate_synthetic_corpus: more aspect rules than attribute combinations (" +
        std::to_string(cfg.n_aspect_rules) + " > " + std::to_string(n_combos) + ")");

  Rng rng(seed);
  auto lx = detail::build_lexicon(cfg, rng);

  // Draw distinct (key, value) combos and attach one aspect token to each.
  std::vector<int> combo_ids(n_combos);
  for (int i = 0; i < n_combos; ++i) combo_ids[i] = i;
  rng.shuffle(combo_ids);
  SynthCorpus out;
  std::map<std::pair<int, int>, std::string> rule_map;
  for (int r = 0; r < cfg.n_aspect_rules; ++r) {
    int k = combo_ids[r] / cfg.values_per_key;
    int vi = combo_ids[r] % cfg.values_per_key;
    AspectRule rule;
    rule.key = {lx.keys[k]};
    rule.value = lx.values[k][vi];
    rule.aspect = "asp" + std::to_string(r);
    rule_map[{k, vi}] = rule.aspect;
    out.rules.rules.push_back(std::move(rule));
  }

  auto draw_len = [&rng](double mean, double sd, int lo, int hi) {
    int len = int(std::lround(rng.normal(mean, sd)));
    return std::max(lo, std::min(hi, len));
  };
  auto fill_token = [&](Rng& r) -> const std::string& {
    double u = r.real();
    if (u < 0.45) return r.choice(lx.fillers);
    if (u < 0.75) return r.choice(lx.glue);
    return r.choice(lx.misc);
  };

  for (int n = 0; n < cfg.size; ++n) {
    ProductRecord rec;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "syn-%06d", n);
    rec.id = idbuf;

    const int cat = int(rng.range(cfg.n_categories));
    const std::string& brand = rng.choice(lx.brands);
    const std::string& ptype = rng.choice(lx.ptypes[cat]);

    // Title: brand + type + filler, category-tagged at the end.
    int title_len = draw_len(cfg.title_mean, cfg.title_sd, 6, 22);
    rec.title = {brand, ptype};
    while (int(rec.title.size()) < title_len - 1) rec.title.push_back(fill_token(rng));
    rec.title.push_back(lx.categories[cat]);

    // Attributes: distinct keys from the category pool, one value each.
    int m = draw_len(cfg.attrs_mean, cfg.attrs_sd, 5, std::min(14, cfg.keys_per_category));
    std::vector<int> keys = lx.category_keys[cat];
    rng.shuffle(keys);
    keys.resize(m);
    std::vector<std::string> aspects;
    for (int k : keys) {
      int vi = int(rng.range(cfg.values_per_key));
      AttributePair ap;
      ap.key = {lx.keys[k]};
      ap.value = lx.values[k][vi];
      rec.attributes.push_back(std::move(ap));
      auto it = rule_map.find({k, vi});
      if (it != rule_map.end()) aspects.push_back(it->second);
    }

    // Reviews: long-tailed count; every aspect is mentioned in at least one
    // sentence, the rest is sentiment and noise.
    int n_rev = rng.bernoulli(cfg.p_zero_reviews) ? 0 : 1 + int(rng.range(cfg.max_reviews));
    for (int r = 0; r < n_rev; ++r) {
      int len = draw_len(cfg.review_mean, cfg.review_sd, 10, 40);
      TokenSeq sent;
      sent.push_back(rng.choice(lx.sentiment));
      sent.push_back("the");
      sent.push_back(ptype);
      while (int(sent.size()) < len) {
        double u = rng.real();
        if (u < 0.25)
          sent.push_back(rng.choice(lx.sentiment));
        else
          sent.push_back(fill_token(rng));
      }
      for (size_t a = 0; a < aspects.size(); ++a) {
        bool owner = int(a % std::max(1, n_rev)) == r;
        if (owner || rng.bernoulli(0.35)) {
          size_t at = 3 + rng.range(sent.size() - 3);
          sent.insert(sent.begin() + at, aspects[a]);
        }
      }
      rec.reviews.push_back(std::move(sent));
    }

    // Description: interleaves title content, attribute values, and exactly
    // the rule-dictated aspects.
    int dlen = draw_len(cfg.desc_mean, cfg.desc_sd, 24, 60);
    TokenSeq desc = {brand, ptype, rng.choice(lx.misc)};
    int n_val_runs = std::min<int>(3, m);
    for (int i = 0; i < n_val_runs; ++i) {
      desc.push_back(rng.choice(lx.glue));
      const auto& val = rec.attributes[i].value;
      desc.insert(desc.end(), val.begin(), val.end());
    }
    for (const auto& a : aspects) {
      desc.push_back(rng.choice(lx.markers));
      desc.push_back(a);
    }
    while (int(desc.size()) < dlen) {
      double u = rng.real();
      if (u < 0.2)
        desc.push_back(rng.choice(lx.sentiment));
      else
        desc.push_back(fill_token(rng));
    }
    rec.description = std::move(desc);

    validate_record(rec, n + 1);
    out.records.push_back(std::move(rec));
  }
  return out;
}

}  // namespace apdt
