#pragma once

// Pre-scored ranking data: types, JSONL / SVMLight ingestion, filtering and
// per-query random splits.
//
// JSONL: one query per line,
//   {"qid": "q1", "docs": [{"id": "a", "score": 1.5, "rel": 2}, ...]}
// SVMLight/LETOR: "<rel> qid:<id> <f>:<v> ... [# comment]" with a sidecar file
// holding one external score per feature line. Feature values are skipped.
// Paths ending in ".gz" are read through zlib.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <zlib.h>

#include "fairrank/error.hpp"
#include "fairrank/random.hpp"
#include "json.hpp"

namespace fairrank {

struct Document {
  std::string id;
  double score = 0.0;  // raw score from the external scorer
  int relevance = 0;

  friend bool operator==(const Document&, const Document&) = default;
};

struct ScoredQuery {
  std::string qid;
  std::vector<Document> docs;

  std::size_t size() const noexcept { return docs.size(); }
  friend bool operator==(const ScoredQuery&, const ScoredQuery&) = default;
};

struct QueryCollection {
  std::vector<ScoredQuery> queries;
  std::string provenance;

  std::size_t size() const noexcept { return queries.size(); }
  bool empty() const noexcept { return queries.empty(); }
};

// Accepted relevance grades. LETOR data uses 0-4; widen for other sources.
struct GradeRange {
  int min = 0;
  int max = 4;
};

struct SplitSpec {
  double calibration_fraction = 0.25;
  std::uint64_t seed = 0;
  std::uint64_t trial_index = 0;

  void validate() const {
    if (!(calibration_fraction > 0.0 && calibration_fraction < 1.0))
      throw ValidationError("calibration fraction must lie in (0, 1), got " +
                            std::to_string(calibration_fraction));
  }
};

struct FilterResult {
  QueryCollection kept;
  std::size_t removed = 0;
};

namespace detail {

inline bool has_suffix(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

inline std::string read_gzip(const std::string& path) {
  gzFile file = gzopen(path.c_str(), "rb");
  if (!file) throw IoError("cannot open " + path);
  std::string out;
  char buf[1 << 16];
  int got;
  while ((got = gzread(file, buf, sizeof buf)) > 0) out.append(buf, static_cast<std::size_t>(got));
  int errnum = 0;
  const char* msg = gzerror(file, &errnum);
  const std::string err = errnum != Z_OK && errnum != Z_STREAM_END ? msg : "";
  gzclose(file);
  if (got < 0 || !err.empty()) throw IoError("gzip read failed for " + path + ": " + err);
  return out;
}

inline std::string read_file(const std::string& path) {
  if (has_suffix(path, ".gz")) return read_gzip(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Splits into lines, dropping '\r' before '\n'. A trailing newline does not
// produce an extra empty line.
inline std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    start = end + 1;
  }
  return lines;
}

inline bool is_blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

inline bool parse_double(std::string_view s, double& out) {
  // std::from_chars for double is available in libstdc++ 11.
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

inline bool parse_int(std::string_view s, int& out) {
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace detail

// Throws ValidationError if the query breaks a document or query invariant.
inline void validate_query(const ScoredQuery& q, GradeRange grades = {}) {
  if (q.docs.empty()) throw ValidationError("query '" + q.qid + "' has no documents");
  std::unordered_set<std::string_view> seen;
  for (const auto& d : q.docs) {
    if (!std::isfinite(d.score))
      throw ValidationError("query '" + q.qid + "' doc '" + d.id + "': score is not finite");
    if (d.relevance < grades.min || d.relevance > grades.max)
      throw ValidationError("query '" + q.qid + "' doc '" + d.id + "': relevance " +
                            std::to_string(d.relevance) + " outside grade range [" +
                            std::to_string(grades.min) + ", " + std::to_string(grades.max) + "]");
    if (!seen.insert(d.id).second)
      throw ValidationError("query '" + q.qid + "': duplicate doc id '" + d.id + "'");
  }
}

inline void validate_collection(const QueryCollection& c, GradeRange grades = {}) {
  std::unordered_set<std::string_view> qids;
  for (const auto& q : c.queries) {
    validate_query(q, grades);
    if (!qids.insert(q.qid).second) throw ValidationError("duplicate qid '" + q.qid + "'");
  }
}

// Parses JSONL text; `source` names the input in error messages.
inline QueryCollection parse_jsonl_text(std::string_view text, const std::string& source,
                                        GradeRange grades = {}) {
  using nlohmann::json;
  QueryCollection out;
  out.provenance = "jsonl:" + source;
  std::unordered_set<std::string> qids;
  std::size_t lineno = 0;
  for (std::string_view line : detail::split_lines(text)) {
    ++lineno;
    if (detail::is_blank(line)) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(source, lineno, std::string("malformed JSON: ") + e.what());
    }
    ScoredQuery q;
    try {
      q.qid = j.at("qid").get<std::string>();
      for (const auto& jd : j.at("docs")) {
        Document d;
        d.id = jd.at("id").get<std::string>();
        d.score = jd.at("score").get<double>();
        const auto& rel = jd.at("rel");
        if (!rel.is_number_integer())
          throw ParseError(source, lineno, "\"rel\" must be an integer grade");
        d.relevance = rel.get<int>();
        q.docs.push_back(std::move(d));
      }
    } catch (const json::exception& e) {
      throw ParseError(source, lineno, std::string("bad query record: ") + e.what());
    }
    try {
      validate_query(q, grades);
    } catch (const ValidationError& e) {
      throw ValidationError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!qids.insert(q.qid).second)
      throw ValidationError(source + ":" + std::to_string(lineno) + ": duplicate qid '" + q.qid + "'");
    out.queries.push_back(std::move(q));
  }
  return out;
}

inline QueryCollection parse_jsonl(const std::string& path, GradeRange grades = {}) {
  return parse_jsonl_text(detail::read_file(path), path, grades);
}

inline std::string to_jsonl(const QueryCollection& c) {
  std::string out;
  for (const auto& q : c.queries) {
    nlohmann::json docs = nlohmann::json::array();
    for (const auto& d : q.docs) docs.push_back({{"id", d.id}, {"score", d.score}, {"rel", d.relevance}});
    out += nlohmann::json{{"qid", q.qid}, {"docs", std::move(docs)}}.dump();
    out += '\n';
  }
  return out;
}

inline void write_jsonl(const QueryCollection& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << to_jsonl(c);
  if (!out) throw IoError("write failed for " + path);
}

// Groups consecutive qid runs of a LETOR feature file and attaches the
// aligned external scores. Doc ids are "<qid>:<1-based ordinal in query>".
inline QueryCollection parse_svmlight_text(std::string_view features, std::string_view scores,
                                           const std::string& source, GradeRange grades = {}) {
  std::vector<std::pair<std::size_t, std::string_view>> feature_lines;
  std::size_t lineno = 0;
  for (std::string_view line : detail::split_lines(features)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    if (!detail::is_blank(line)) feature_lines.emplace_back(lineno, line);
  }
  std::vector<double> score_values;
  lineno = 0;
  for (std::string_view line : detail::split_lines(scores)) {
    ++lineno;
    if (detail::is_blank(line)) continue;
    auto tokens = detail::split_ws(line);
    double v;
    if (tokens.size() != 1 || !detail::parse_double(tokens[0], v))
      throw ParseError(source + " (scores)", lineno, "expected one real number per line");
    if (!std::isfinite(v)) throw ValidationError(source + " (scores):" + std::to_string(lineno) + ": score is not finite");
    score_values.push_back(v);
  }
  if (feature_lines.size() != score_values.size())
    throw ValidationError(source + ": feature file has " + std::to_string(feature_lines.size()) +
                          " records but score file has " + std::to_string(score_values.size()));

  QueryCollection out;
  out.provenance = "svmlight:" + source;
  std::unordered_set<std::string> finished;
  for (std::size_t i = 0; i < feature_lines.size(); ++i) {
    const auto [ln, line] = feature_lines[i];
    auto tokens = detail::split_ws(line);
    int rel;
    if (tokens.empty() || !detail::parse_int(tokens[0], rel))
      throw ParseError(source, ln, "expected an integer relevance label first");
    if (tokens.size() < 2 || tokens[1].substr(0, 4) != "qid:" || tokens[1].size() == 4)
      throw ParseError(source, ln, "missing qid:<id> token");
    std::string qid(tokens[1].substr(4));
    for (std::size_t t = 2; t < tokens.size(); ++t)
      if (tokens[t].find(':') == std::string_view::npos)
        throw ParseError(source, ln, "malformed feature token '" + std::string(tokens[t]) + "'");
    if (out.queries.empty() || out.queries.back().qid != qid) {
      if (!out.queries.empty()) finished.insert(out.queries.back().qid);
      if (finished.contains(qid))
        throw ValidationError(source + ":" + std::to_string(ln) + ": qid '" + qid +
                              "' reappears after its block ended (qid runs must be consecutive)");
      out.queries.push_back(ScoredQuery{qid, {}});
    }
    auto& q = out.queries.back();
    q.docs.push_back(Document{qid + ":" + std::to_string(q.docs.size() + 1), score_values[i], rel});
  }
  for (const auto& q : out.queries) {
    try {
      validate_query(q, grades);
    } catch (const ValidationError& e) {
      throw ValidationError(source + ": " + e.what());
    }
  }
  return out;
}

inline QueryCollection parse_svmlight(const std::string& features_path, const std::string& scores_path,
                                      GradeRange grades = {}) {
  return parse_svmlight_text(detail::read_file(features_path), detail::read_file(scores_path),
                             features_path, grades);
}

// Keeps the queries with at least one document graded >= min_grade.
inline FilterResult filter_no_relevant(const QueryCollection& c, int min_grade = 1) {
  if (min_grade < 1 || min_grade > 4)
    throw DomainError("min_grade must lie in [1, 4], got " + std::to_string(min_grade));
  FilterResult r;
  r.kept.provenance = c.provenance;
  for (const auto& q : c.queries) {
    const bool relevant = std::any_of(q.docs.begin(), q.docs.end(),
                                      [&](const Document& d) { return d.relevance >= min_grade; });
    if (relevant)
      r.kept.queries.push_back(q);
    else
      ++r.removed;
  }
  return r;
}

inline std::size_t calibration_size(std::size_t n, double fraction) {
  const auto raw = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  return std::clamp<std::size_t>(raw, 1, n - 1);
}

// Query-level random partition into (calibration, test); a pure function of
// (collection order, seed, trial_index). Both parts keep the input order.
inline std::pair<QueryCollection, QueryCollection> split(const QueryCollection& c, const SplitSpec& spec) {
  spec.validate();
  if (c.size() < 2) throw ValidationError("split needs at least 2 queries, got " + std::to_string(c.size()));
  std::vector<std::size_t> idx(c.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  SplitMix64 gen(derive_key(derive_key(spec.seed, 0x5b117ULL), spec.trial_index));
  shuffle(std::span<std::size_t>(idx), gen);

  const std::size_t n_cal = calibration_size(c.size(), spec.calibration_fraction);
  std::vector<char> in_cal(c.size(), 0);
  for (std::size_t i = 0; i < n_cal; ++i) in_cal[idx[i]] = 1;

  QueryCollection cal, test;
  const std::string tag = " [split seed=" + std::to_string(spec.seed) + " trial=" + std::to_string(spec.trial_index) + "]";
  cal.provenance = c.provenance + tag + " calibration";
  test.provenance = c.provenance + tag + " test";
  for (std::size_t i = 0; i < c.size(); ++i) (in_cal[i] ? cal : test).queries.push_back(c.queries[i]);
  return {std::move(cal), std::move(test)};
}

}  // namespace fairrank
