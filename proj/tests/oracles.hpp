#pragma once

// Independent reference implementations used only by the tests. None of
// these call into the library's model or bound code.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_bin_float.hpp>
#include <boost/multiprecision/cpp_int.hpp>

#include "fairrank/dataset.hpp"
#include "fairrank/random.hpp"

namespace oracle {

using hp = boost::multiprecision::cpp_bin_float_50;
using rational = boost::multiprecision::cpp_rational;

// Classical PL over raw normalized scores: P(y) = prod_k exp(s_yk / tau) / sum_{d not in y_<k} exp(s_d / tau).
// Enumerates full permutations and marginalizes onto length-`len` prefixes.
inline std::map<std::vector<std::size_t>, double> pl_distribution(const std::vector<double>& s, double tau,
                                                                  std::size_t len) {
  const std::size_t n = s.size();
  std::vector<long double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = std::exp(static_cast<long double>(s[i]) / tau);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::map<std::vector<std::size_t>, long double> acc;
  do {
    long double p = 1.0L, rest = 0.0L;
    for (auto i : perm) rest += w[i];
    for (auto i : perm) {
      p *= w[i] / rest;
      rest -= w[i];
    }
    acc[std::vector<std::size_t>(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(len))] += p;
  } while (std::next_permutation(perm.begin(), perm.end()));
  std::map<std::vector<std::size_t>, double> out;
  for (const auto& [k, v] : acc) out[k] = static_cast<double>(v);
  return out;
}

// Score-sorted ranking with doc-id tie-break, straight from the raw data.
inline std::vector<std::size_t> sorted_ranking(const fairrank::ScoredQuery& q, std::size_t len) {
  std::vector<std::size_t> idx(q.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (q.docs[a].score != q.docs[b].score) return q.docs[a].score > q.docs[b].score;
    return q.docs[a].id < q.docs[b].id;
  });
  idx.resize(std::min(len, idx.size()));
  return idx;
}

inline hp h1(hp a, hp b) {
  using boost::multiprecision::log;
  hp out = 0;
  if (a > 0) out += a * log(a / b);
  if (a < 1) out += (1 - a) * log((1 - a) / (1 - b));
  return out;
}

// P(Bin(n, p) <= j) by pmf recurrence in 50-digit floating point.
inline hp binomial_cdf(unsigned n, hp p, unsigned j) {
  using boost::multiprecision::pow;
  hp term = pow(1 - p, static_cast<int>(n));  // pmf(0)
  hp sum = term;
  const hp ratio = p / (1 - p);
  for (unsigned x = 1; x <= j; ++x) {
    term *= hp(n - x + 1) / hp(x) * ratio;
    sum += term;
  }
  return sum;
}

// Exact rational P(Bin(n, p) <= j) for rational p.
inline rational binomial_cdf_exact(unsigned n, rational p, unsigned j) {
  rational sum = 0;
  boost::multiprecision::cpp_int choose = 1;
  for (unsigned x = 0; x <= j; ++x) {
    if (x > 0) choose = choose * (n - x + 1) / x;
    rational pw = 1, qw = 1;
    for (unsigned i = 0; i < x; ++i) pw *= p;
    for (unsigned i = 0; i < n - x; ++i) qw *= (1 - p);
    sum += rational(choose) * pw * qw;
  }
  return sum;
}

// Hoeffding-Bentkus p-value with the Bentkus count ceil(n r - 1e-9).
inline hp hb_p_value(double r_hat, unsigned n, double alpha) {
  using boost::multiprecision::exp;
  const hp a = std::min(r_hat, alpha);
  const hp hoeffding = exp(-hp(n) * h1(a, hp(alpha)));
  const double count = std::ceil(static_cast<double>(n) * r_hat - 1e-9);
  const unsigned j = static_cast<unsigned>(std::clamp(count, 0.0, static_cast<double>(n)));
  const hp bentkus = boost::math::constants::e<hp>() * binomial_cdf(n, hp(alpha), j);
  return std::min(hoeffding, bentkus);
}

inline hp dkwm_ucb(double r, unsigned n, double delta, double c) {
  using boost::multiprecision::log;
  using boost::multiprecision::sqrt;
  return hp(r) + hp(c) * sqrt(log(hp(2) / hp(delta)) / (2 * hp(n)));
}

// Random small query with distinct doc ids, grades 0..4 and at least one relevant document.
inline fairrank::ScoredQuery random_query(fairrank::SplitMix64& gen, std::size_t n, double ties = 0.0) {
  fairrank::ScoredQuery q;
  q.qid = "q" + std::to_string(gen() % 100000);
  for (std::size_t i = 0; i < n; ++i) {
    fairrank::Document d;
    d.id = "d" + std::to_string(i);
    d.relevance = static_cast<int>(fairrank::uniform_below(gen, 5));
    d.score = (i > 0 && fairrank::uniform01(gen) < ties) ? q.docs.back().score : 2.0 * fairrank::standard_normal(gen);
    q.docs.push_back(d);
  }
  if (std::none_of(q.docs.begin(), q.docs.end(), [](const auto& d) { return d.relevance > 0; }))
    q.docs[fairrank::uniform_below(gen, n)].relevance = 1 + static_cast<int>(fairrank::uniform_below(gen, 4));
  return q;
}

}  // namespace oracle
