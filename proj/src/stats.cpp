#include "fairmedl/stats.hpp"

#include "fairmedl/errors.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include <cmath>
#include <set>

namespace fairmedl {

namespace {

struct Moments {
  double mean = 0.0;
  double var = 0.0;  // unbiased; zero when n < 2
  std::size_t n = 0;
};

Moments moments(const std::vector<double>& samples) {
  Moments m;
  m.n = samples.size();
  for (double s : samples) m.mean += s;
  m.mean /= static_cast<double>(m.n);
  if (m.n > 1) {
    for (double s : samples) m.var += (s - m.mean) * (s - m.mean);
    m.var /= static_cast<double>(m.n - 1);
  }
  return m;
}

// Value-level check, deliberately not variance == 0: summing identical values
// can round the mean away from them, leaving a spurious nonzero variance.
bool constant_sample(const std::vector<double>& samples) {
  for (std::size_t i = 1; i < samples.size(); ++i)
    if (samples[i] != samples[0]) return false;
  return true;
}

}  // namespace

MetricSummary summarize(const std::vector<double>& samples, double level) {
  if (samples.empty()) throw ContractError("summarize: no samples");
  if (!(level > 0.0 && level < 1.0))
    throw ConfigError("confidence level must lie strictly between 0 and 1");
  for (double s : samples)
    if (!std::isfinite(s)) throw ContractError("summarize: non-finite sample");

  if (constant_sample(samples)) {
    MetricSummary out;
    out.mean = samples[0];
    out.ci_lo = out.ci_hi = samples[0];
    out.n = samples.size();
    return out;
  }
  const Moments m = moments(samples);
  MetricSummary out;
  out.mean = m.mean;
  out.sd = std::sqrt(m.var);
  out.n = m.n;
  if (m.n < 2 || out.sd == 0.0) {
    out.ci_lo = out.ci_hi = m.mean;
    return out;
  }
  const boost::math::students_t dist(static_cast<double>(m.n - 1));
  const double t = boost::math::quantile(dist, 0.5 + level / 2.0);
  const double half = t * out.sd / std::sqrt(static_cast<double>(m.n));
  out.ci_lo = m.mean - half;
  out.ci_hi = m.mean + half;
  return out;
}

WelchResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2)
    throw ContractError("welch_t_test: both samples need at least two values");
  if (constant_sample(a) && constant_sample(b)) {
    // No sampling noise at all: the comparison is exact.
    WelchResult out;
    out.df = static_cast<double>(a.size() + b.size() - 2);
    if (a[0] == b[0]) {
      out.t = 0.0;
      out.p_value = 1.0;
    } else {
      out.t = a[0] > b[0] ? std::numeric_limits<double>::infinity()
                          : -std::numeric_limits<double>::infinity();
      out.p_value = 0.0;
    }
    return out;
  }
  const Moments ma = moments(a);
  const Moments mb = moments(b);

  WelchResult out;
  const double sa = ma.var / static_cast<double>(ma.n);
  const double sb = mb.var / static_cast<double>(mb.n);
  out.t = (ma.mean - mb.mean) / std::sqrt(sa + sb);
  out.df = (sa + sb) * (sa + sb) /
           (sa * sa / static_cast<double>(ma.n - 1) +
            sb * sb / static_cast<double>(mb.n - 1));
  const boost::math::students_t dist(out.df);
  out.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(out.t)));
  return out;
}

namespace {

std::map<std::string, std::vector<double>> collect(
    const std::vector<std::map<std::string, double>>& runs) {
  std::map<std::string, std::vector<double>> series;
  for (const auto& run : runs)
    for (const auto& [key, value] : run) series[key].push_back(value);
  return series;
}

}  // namespace

StatSummary summarize_runs(const std::vector<std::map<std::string, double>>& runs,
                           double level) {
  if (runs.empty()) throw ContractError("summarize_runs: no runs");
  StatSummary out;
  for (const auto& [key, values] : collect(runs)) out[key] = summarize(values, level);
  return out;
}

StatSummary summarize_runs(const std::vector<std::map<std::string, double>>& runs,
                           const std::vector<std::map<std::string, double>>& baseline,
                           double level) {
  StatSummary out = summarize_runs(runs, level);
  const auto own_series = collect(runs);
  const auto base_series = collect(baseline);
  for (auto& [key, summary] : out) {
    const auto it = base_series.find(key);
    if (it == base_series.end()) continue;
    const auto& own = own_series.find(key)->second;
    if (own.size() < 2 || it->second.size() < 2) continue;
    summary.p_value = welch_t_test(own, it->second).p_value;
  }
  return out;
}

std::string stat_summary_to_json(const StatSummary& summary) {
  nlohmann::json doc = nlohmann::json::object();
  for (const auto& [key, s] : summary) {
    nlohmann::json entry = {{"mean", s.mean}, {"sd", s.sd},     {"ci_lo", s.ci_lo},
                            {"ci_hi", s.ci_hi}, {"n", s.n}};
    if (!std::isnan(s.p_value)) entry["p_value"] = s.p_value;
    doc[key] = std::move(entry);
  }
  return doc.dump(2);
}

StatSummary stat_summary_from_json(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(std::string("stat summary is not valid JSON: ") + e.what());
  }
  StatSummary out;
  try {
    for (const auto& [key, entry] : doc.items()) {
      MetricSummary s;
      s.mean = entry.at("mean").get<double>();
      s.sd = entry.at("sd").get<double>();
      s.ci_lo = entry.at("ci_lo").get<double>();
      s.ci_hi = entry.at("ci_hi").get<double>();
      s.n = entry.at("n").get<std::size_t>();
      if (entry.contains("p_value")) s.p_value = entry["p_value"].get<double>();
      out[key] = s;
    }
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(std::string("stat summary document is malformed: ") + e.what());
  }
  return out;
}

}  // namespace fairmedl
