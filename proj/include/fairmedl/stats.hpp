#pragma once

#include <limits>
#include <map>
#include <string>
#include <vector>

namespace fairmedl {

// Location summary of one metric over repeated runs. p_value compares the
// samples against a baseline set with a two-sided Welch test and is NaN when
// no baseline was supplied.
struct MetricSummary {
  double mean = 0.0;
  double sd = 0.0;    // unbiased sample standard deviation
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  std::size_t n = 0;
  double p_value = std::numeric_limits<double>::quiet_NaN();
};

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p_value = 1.0;
};

// Mean with a Student-t confidence interval at the given level. A single
// sample gets a zero-width interval; identical samples likewise.
MetricSummary summarize(const std::vector<double>& samples, double level = 0.95);

// Two-sided Welch t-test. When both samples have zero variance the test is
// exact: equal means give p = 1, different means give p = 0.
WelchResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b);

using StatSummary = std::map<std::string, MetricSummary>;

// Per-metric summaries across repeats; a metric missing from some repeats is
// summarized over the repeats that carry it.
StatSummary summarize_runs(const std::vector<std::map<std::string, double>>& runs,
                           double level = 0.95);

// Same, with Welch p-values against a baseline set for every shared metric.
StatSummary summarize_runs(const std::vector<std::map<std::string, double>>& runs,
                           const std::vector<std::map<std::string, double>>& baseline,
                           double level = 0.95);

std::string stat_summary_to_json(const StatSummary& summary);
StatSummary stat_summary_from_json(const std::string& text);

}  // namespace fairmedl
