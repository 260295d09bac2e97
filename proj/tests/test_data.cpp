#include "fairmedl/dataset.hpp"
#include "fairmedl/errors.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

using namespace fairmedl;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("fairmedl_data_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
}

RawDataset make_raw(TaskKind task, const std::string& positive_label,
                    std::vector<ColumnSpec> specs,
                    const std::vector<std::vector<std::string>>& rows) {
  RawDataset d;
  d.schema.task = task;
  d.schema.positive_label = positive_label;
  d.schema.columns = std::move(specs);
  for (const auto& spec : d.schema.columns) {
    RawColumn col;
    col.spec = spec;
    d.columns.push_back(std::move(col));
  }
  for (const auto& row : rows) {
    REQUIRE(row.size() == d.columns.size());
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (d.columns[c].is_numeric()) {
        d.columns[c].numeric.push_back(std::stod(row[c]));
      } else {
        d.columns[c].text.push_back(row[c]);
      }
    }
  }
  return d;
}

DatasetSchema simple_schema() {
  DatasetSchema s;
  s.task = TaskKind::classification;
  s.positive_label = "yes";
  s.columns = {{"x", ColumnRole::numeric},
               {"color", ColumnRole::categorical},
               {"group", ColumnRole::sensitive},
               {"site", ColumnRole::cluster},
               {"label", ColumnRole::target}};
  return s;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double saa = 0, sbb = 0, sab = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
    sab += (a[i] - ma) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST_CASE("csv loading is independent of column order and handles quoting") {
  TempDir tmp;
  const std::string a = tmp.file("a.csv");
  const std::string b = tmp.file("b.csv");
  write_text(a,
             "x,color,group,site,label\n"
             "1.5,red,m,s1,yes\n"
             "2.5,\"blue, dark\",f,s2,no\n"
             "3.5,\"say \"\"hi\"\"\",m,s1,yes\n");
  // same rows, shuffled columns, CRLF endings, embedded newline in a field
  write_text(b,
             "label,site,x,group,color\r\n"
             "yes,s1,1.5,m,red\r\n"
             "no,s2,2.5,f,\"blue, dark\"\r\n"
             "yes,s1,3.5,m,\"say \"\"hi\"\"\"\r\n");
  const auto da = load_csv(a, simple_schema());
  const auto db = load_csv(b, simple_schema());
  CHECK(da.row_count() == 3);
  CHECK(da.column("color").text[1] == "blue, dark");
  CHECK(da.column("color").text[2] == "say \"hi\"");
  CHECK(dataset_fingerprint(da) == dataset_fingerprint(db));

  const std::string c = tmp.file("c.csv");
  write_text(c, "x,color,group,site,label\n1.0,\"line\nbreak\",m,s1,yes\n");
  const auto dc = load_csv(c, simple_schema());
  CHECK(dc.column("color").text[0] == "line\nbreak");
}

TEST_CASE("csv loading rejects bad headers and bad numerics") {
  TempDir tmp;
  const std::string p = tmp.file("bad.csv");
  write_text(p, "x,color,group,site\n1.0,red,m,s1\n");
  CHECK_THROWS_AS(load_csv(p, simple_schema()), IngestionError);

  write_text(p, "x,color,group,site,label\noops,red,m,s1,yes\n");
  try {
    load_csv(p, simple_schema());
    FAIL("expected ingestion error");
  } catch (const IngestionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("row 2") != std::string::npos);
    CHECK(msg.find("oops") != std::string::npos);
  }

  write_text(p, "x,color,group,site,label\n1.0,red,m,s1,yes\n2.0,red\n");
  CHECK_THROWS_AS(load_csv(p, simple_schema()), IngestionError);
}

TEST_CASE("rows with missing values in used columns are dropped and counted") {
  TempDir tmp;
  const std::string p = tmp.file("missing.csv");
  write_text(p,
             "x,color,group,site,label,ignored\n"
             "1.0,red,m,s1,yes,?\n"
             "2.0,?,m,s1,no,a\n"
             "3.0,red,,s2,yes,b\n"
             "4.0,blue,f,s2,no,c\n");
  const auto d = load_csv(p, simple_schema());
  CHECK(d.row_count() == 2);  // rows 2 and 4 survive; '?' in ignored column is fine
  CHECK(d.dropped_rows == 2);
  CHECK(d.column("x").numeric == std::vector<double>{1.0, 4.0});
}

TEST_CASE("csv save/load round trip preserves every column bitwise") {
  SynthConfig cfg;
  cfg.n = 200;
  cfg.seed = 7;
  const auto d = synth_clustered(cfg);
  TempDir tmp;
  save_csv(d, tmp.file("round.csv"));
  const auto back = load_csv(tmp.file("round.csv"), d.schema);
  CHECK(dataset_fingerprint(back) == dataset_fingerprint(d));
}

TEST_CASE("standardization uses fit-row statistics only") {
  auto d = make_raw(TaskKind::classification, "yes",
                    {{"x", ColumnRole::numeric},
                     {"group", ColumnRole::sensitive},
                     {"site", ColumnRole::cluster},
                     {"label", ColumnRole::target}},
                    {{"8", "m", "s1", "yes"},
                     {"12", "m", "s1", "no"},
                     {"100", "f", "s2", "yes"}});
  SUBCASE("fit on the first two rows: mean 10, population sd 2") {
    const auto enc = encode_and_standardize(d, {0, 1});
    const std::size_t xcol = 0;
    CHECK(enc.X[0 * enc.d + xcol] == doctest::Approx(-1.0));
    CHECK(enc.X[1 * enc.d + xcol] == doctest::Approx(1.0));
    CHECK(enc.X[2 * enc.d + xcol] == doctest::Approx(45.0));  // (100-10)/2
  }
  SUBCASE("metadata ignores rows outside the fit set") {
    const auto meta = fit_encoder(d, {0, 1});
    d.columns[0].numeric[2] = -999.0;
    const auto meta2 = fit_encoder(d, {0, 1});
    CHECK(encoder_meta_to_json(meta) == encoder_meta_to_json(meta2));
  }
}

TEST_CASE("one-hot encoding: fit categories, unseen blocks, target and cluster ids") {
  const auto d = make_raw(TaskKind::classification, "yes",
                          {{"color", ColumnRole::categorical},
                           {"group", ColumnRole::sensitive},
                           {"site", ColumnRole::cluster},
                           {"label", ColumnRole::target}},
                          {{"red", "m", "s1", "yes"},
                           {"blue", "f", "s2", "no"},
                           {"green", "x", "s3", "yes"}});
  const auto meta = fit_encoder(d, {0, 1});
  const auto enc = apply_encoder(meta, d);

  // categories are lexicographic over fit rows: color {blue, red}, group {f, m}
  CHECK(enc.d == 4);
  CHECK(enc.feature_names ==
        std::vector<std::string>{"color=blue", "color=red", "group=f", "group=m"});
  CHECK(enc.X[0 * 4 + 1] == 1.0);  // red
  CHECK(enc.X[1 * 4 + 0] == 1.0);  // blue
  // fit rows: each one-hot block sums to exactly 1
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(enc.X[i * 4 + 0] + enc.X[i * 4 + 1] == 1.0);
    CHECK(enc.X[i * 4 + 2] + enc.X[i * 4 + 3] == 1.0);
  }
  // row 2 has categories absent from fit rows: all-zero blocks, counted, warned
  for (std::size_t j = 0; j < 4; ++j) CHECK(enc.X[2 * 4 + j] == 0.0);
  CHECK(enc.unseen_category_cells == 2);
  REQUIRE(enc.warnings.size() == 2);
  CHECK(enc.warnings[0].find("color") != std::string::npos);

  CHECK(enc.y == std::vector<double>{1.0, 0.0, 1.0});
  CHECK(enc.z == std::vector<int>{0, 1, -1});  // s3 absent from fit rows
  CHECK(enc.cluster_names == std::vector<std::string>{"s1", "s2"});
  REQUIRE(enc.sensitive.size() == 1);
  CHECK(enc.sensitive[0].name == "group");
  CHECK(enc.sensitive[0].ids == std::vector<int>{1, 0, -1});
  CHECK(enc.sensitive[0].block_offset == 2);
  CHECK(enc.sensitive[0].block_width == 2);
}

TEST_CASE("zero-variance numeric columns are dropped with a warning") {
  const auto d = make_raw(TaskKind::classification, "yes",
                          {{"constant", ColumnRole::numeric},
                           {"x", ColumnRole::numeric},
                           {"group", ColumnRole::sensitive},
                           {"site", ColumnRole::cluster},
                           {"label", ColumnRole::target}},
                          {{"5", "1", "m", "s1", "yes"},
                           {"5", "2", "f", "s1", "no"},
                           {"5", "3", "m", "s2", "yes"}});
  const auto meta = fit_encoder(d, {0, 1, 2});
  REQUIRE(meta.warnings.size() == 1);
  CHECK(meta.warnings[0].find("constant") != std::string::npos);
  const auto enc = apply_encoder(meta, d);
  CHECK(enc.d == 3);  // x + group one-hot (2), constant dropped
  CHECK(enc.feature_names[0] == "x");
}

TEST_CASE("encoder metadata survives a json round trip bitwise") {
  SynthConfig cfg;
  cfg.n = 300;
  cfg.seed = 11;
  auto d = synth_clustered(cfg);
  ProbeSpec probes;
  probes.seed = 3;
  d = inject_probes(d, probes);

  std::vector<std::size_t> fit(200);
  std::iota(fit.begin(), fit.end(), 0);
  const auto meta = fit_encoder(d, fit);
  const auto meta2 = encoder_meta_from_json(encoder_meta_to_json(meta));
  CHECK(encoder_meta_to_json(meta) == encoder_meta_to_json(meta2));

  const auto enc = apply_encoder(meta, d);
  const auto enc2 = apply_encoder(meta2, d);
  CHECK(enc.X == enc2.X);  // exact, not approximate
  CHECK(enc.y == enc2.y);
  CHECK(enc.z == enc2.z);
  CHECK(enc.feature_names == enc2.feature_names);
  REQUIRE(enc.sensitive.size() == enc2.sensitive.size());
  CHECK(enc.sensitive[0].ids == enc2.sensitive[0].ids);

  // probe columns are flagged in the feature groups
  std::size_t probe_groups = 0;
  for (const auto& g : enc.groups) probe_groups += g.probe;
  CHECK(probe_groups == 3);
}

TEST_CASE("seen/unseen partition by cluster frequency") {
  const auto d = make_raw(
      TaskKind::classification, "yes",
      {{"x", ColumnRole::numeric},
       {"group", ColumnRole::sensitive},
       {"site", ColumnRole::cluster},
       {"label", ColumnRole::target}},
      {{"1", "m", "c", "yes"},
       {"2", "m", "c", "no"},
       {"3", "m", "c", "yes"},
       {"4", "f", "a", "no"},
       {"5", "f", "a", "yes"},
       {"6", "m", "b", "no"},
       {"7", "f", "b", "yes"},
       {"8", "m", "d", "no"}});
  SUBCASE("top-2 with a tie broken lexicographically") {
    // counts: c=3, a=2, b=2, d=1; the tie at the 2nd slot goes to 'a'
    const auto p = partition_seen_unseen(d, 2);
    CHECK(p.seen_clusters == std::vector<std::string>{"c", "a"});
    CHECK(p.seen_rows == std::vector<std::size_t>{0, 1, 2, 3, 4});
    CHECK(p.unseen_rows == std::vector<std::size_t>{5, 6, 7});
    CHECK(p.seen_fraction == doctest::Approx(5.0 / 8.0));
    CHECK(p.frequencies.front() == std::pair<std::string, std::size_t>{"c", 3});
  }
  SUBCASE("seen and unseen partition the rows") {
    for (std::size_t k = 1; k <= 4; ++k) {
      const auto p = partition_seen_unseen(d, k);
      std::set<std::size_t> all(p.seen_rows.begin(), p.seen_rows.end());
      for (auto r : p.unseen_rows) CHECK(all.insert(r).second);
      CHECK(all.size() == d.row_count());
    }
  }
  SUBCASE("k equal to the distinct cluster count leaves unseen empty") {
    const auto p = partition_seen_unseen(d, 4);
    CHECK(p.unseen_rows.empty());
    CHECK(p.seen_fraction == 1.0);
  }
  SUBCASE("k=0 and k beyond the distinct count are rejected") {
    CHECK_THROWS_AS(partition_seen_unseen(d, 0), ConfigError);
    CHECK_THROWS_AS(partition_seen_unseen(d, 5), ConfigError);
  }
}

TEST_CASE("k-fold splits are stratified, balanced, disjoint and deterministic") {
  // 100 rows, 40 positive / 60 negative
  std::vector<std::vector<std::string>> rows;
  for (int i = 0; i < 100; ++i) {
    rows.push_back({std::to_string(i), "m", "s" + std::to_string(i % 3),
                    i < 40 ? "yes" : "no"});
  }
  const auto d = make_raw(TaskKind::classification, "yes",
                          {{"x", ColumnRole::numeric},
                           {"group", ColumnRole::sensitive},
                           {"site", ColumnRole::cluster},
                           {"label", ColumnRole::target}},
                          rows);
  const auto kf = kfold_split(d, 10, 42);
  CHECK(kf.stratified);
  CHECK(kf.warning.empty());
  REQUIRE(kf.folds.size() == 10);

  std::set<std::size_t> test_union;
  for (const auto& f : kf.folds) {
    CHECK(f.test.size() == 10);
    CHECK(f.val.size() == 10);
    CHECK(f.train.size() == 80);
    // stratification: exactly 4 positives in every test fold
    int pos = 0;
    for (auto r : f.test) pos += r < 40;
    CHECK(pos == 4);
    // train/val/test partition all rows
    std::set<std::size_t> seen(f.train.begin(), f.train.end());
    for (auto r : f.val) CHECK(seen.insert(r).second);
    for (auto r : f.test) CHECK(seen.insert(r).second);
    CHECK(seen.size() == 100);
    for (auto r : f.test) CHECK(test_union.insert(r).second);
  }
  CHECK(test_union.size() == 100);  // every row is test exactly once

  // each fold serves as validation exactly once
  std::set<std::size_t> val_union;
  for (const auto& f : kf.folds)
    for (auto r : f.val) CHECK(val_union.insert(r).second);
  CHECK(val_union.size() == 100);

  const auto kf2 = kfold_split(d, 10, 42);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(kf.folds[i].test == kf2.folds[i].test);
    CHECK(kf.folds[i].train == kf2.folds[i].train);
  }
  const auto kf3 = kfold_split(d, 10, 43);
  bool any_difference = false;
  for (std::size_t i = 0; i < 10; ++i) {
    any_difference = any_difference || kf.folds[i].test != kf3.folds[i].test;
  }
  CHECK(any_difference);
}

TEST_CASE("k-fold falls back to unstratified when a class is too small") {
  std::vector<std::vector<std::string>> rows;
  for (int i = 0; i < 20; ++i) {
    rows.push_back({std::to_string(i), "m", "s1", i < 2 ? "yes" : "no"});
  }
  const auto d = make_raw(TaskKind::classification, "yes",
                          {{"x", ColumnRole::numeric},
                           {"group", ColumnRole::sensitive},
                           {"site", ColumnRole::cluster},
                           {"label", ColumnRole::target}},
                          rows);
  const auto kf = kfold_split(d, 5, 1);
  CHECK_FALSE(kf.stratified);
  CHECK(kf.warning.find("unstratified") != std::string::npos);
  std::set<std::size_t> test_union;
  for (const auto& f : kf.folds) {
    CHECK(f.test.size() == 4);
    for (auto r : f.test) CHECK(test_union.insert(r).second);
  }
  CHECK(test_union.size() == 20);

  CHECK_THROWS_AS(kfold_split(d, 2, 1), ConfigError);
  CHECK_THROWS_AS(kfold_split(d, 21, 1), ContractError);
}

TEST_CASE("probe columns correlate with the target as configured") {
  SynthConfig cfg;
  cfg.n = 2000;
  cfg.seed = 5;
  const auto base = synth_clustered(cfg);

  std::vector<double> ty(base.row_count());
  for (std::size_t i = 0; i < ty.size(); ++i) {
    ty[i] = base.target_column().text[i] == "pos" ? 1.0 : 0.0;
  }

  ProbeSpec spec;
  spec.seed = 99;
  SUBCASE("default coefficients give a clear label correlation") {
    const auto d = inject_probes(base, spec);
    REQUIRE(d.columns.size() == base.columns.size() + 3);
    for (int j = 0; j < 3; ++j) {
      const auto& col = d.columns[base.columns.size() + j];
      CHECK(col.probe);
      CHECK(col.spec.name == "probe_" + std::to_string(j));
      CHECK(std::abs(pearson(col.numeric, ty)) > 0.3);
    }
  }
  SUBCASE("pure-noise probes are uncorrelated") {
    spec.label_coeff = 0.0;
    spec.cluster_coeff = 0.0;
    const auto d = inject_probes(base, spec);
    for (int j = 0; j < 3; ++j) {
      CHECK(std::abs(pearson(d.columns[base.columns.size() + j].numeric, ty)) < 0.1);
    }
  }
  SUBCASE("cluster-only probes are nearly constant within a cluster") {
    spec.label_coeff = 0.0;
    spec.cluster_coeff = 1.0;
    spec.noise_sd = 0.05;
    const auto d = inject_probes(base, spec);
    const auto& probe = d.columns[base.columns.size()].numeric;
    const auto& site = d.cluster_column().text;
    std::map<std::string, std::vector<double>> by_site;
    for (std::size_t i = 0; i < probe.size(); ++i) by_site[site[i]].push_back(probe[i]);
    for (const auto& [name, vals] : by_site) {
      double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / vals.size();
      double var = 0;
      for (double v : vals) var += (v - mean) * (v - mean);
      CHECK(std::sqrt(var / vals.size()) < 0.1);
    }
  }
  SUBCASE("identical seeds reproduce probes bitwise, different seeds do not") {
    const auto d1 = inject_probes(base, spec);
    const auto d2 = inject_probes(base, spec);
    CHECK(d1.columns.back().numeric == d2.columns.back().numeric);
    spec.seed = 100;
    const auto d3 = inject_probes(base, spec);
    CHECK(d1.columns.back().numeric != d3.columns.back().numeric);
  }
  SUBCASE("count zero is a no-op, negative count is rejected") {
    spec.count = 0;
    CHECK(inject_probes(base, spec).columns.size() == base.columns.size());
    spec.count = -1;
    CHECK_THROWS_AS(inject_probes(base, spec), ConfigError);
  }
}

TEST_CASE("clustered synthetic data has the configured structure") {
  SynthConfig cfg;
  cfg.n = 6000;
  cfg.clusters = 5;
  cfg.seed = 21;

  SUBCASE("shape, determinism and overall rate") {
    const auto d = synth_clustered(cfg);
    CHECK(d.row_count() == 6000);
    const auto p = partition_seen_unseen(d, 5);
    CHECK(p.frequencies.size() == 5);
    double rate = 0;
    for (const auto& v : d.target_column().text) rate += v == "pos";
    rate /= 6000;
    CHECK(rate > 0.2);
    CHECK(rate < 0.8);
    CHECK(dataset_fingerprint(d) == dataset_fingerprint(synth_clustered(cfg)));
    SynthConfig other = cfg;
    other.seed = 22;
    CHECK(dataset_fingerprint(d) != dataset_fingerprint(synth_clustered(other)));
  }
  SUBCASE("zero cluster effect equalizes per-cluster rates") {
    cfg.cluster_sd = 0.0;
    const auto d = synth_clustered(cfg);
    std::map<std::string, std::pair<int, int>> stats;
    const auto& site = d.cluster_column().text;
    const auto& label = d.target_column().text;
    for (std::size_t i = 0; i < d.row_count(); ++i) {
      ++stats[site[i]].second;
      stats[site[i]].first += label[i] == "pos";
    }
    double lo = 1.0, hi = 0.0;
    for (const auto& [name, s] : stats) {
      const double r = double(s.first) / s.second;
      lo = std::min(lo, r);
      hi = std::max(hi, r);
    }
    CHECK(hi - lo < 0.1);  // binomial noise at ~1200 per cluster is ~0.014 sd
  }
  SUBCASE("sensitive bias shifts the group outcome rates apart") {
    cfg.bias = 2.0;
    const auto d = synth_clustered(cfg);
    const auto& group = d.column("group").text;
    const auto& label = d.target_column().text;
    double rate_a = 0, na = 0, rate_b = 0, nb = 0;
    for (std::size_t i = 0; i < d.row_count(); ++i) {
      if (group[i] == "a") {
        rate_a += label[i] == "pos";
        ++na;
      } else {
        rate_b += label[i] == "pos";
        ++nb;
      }
    }
    CHECK(rate_b / nb - rate_a / na > 0.15);
  }
  SUBCASE("regression mode emits parseable numeric outcomes") {
    cfg.task = TaskKind::regression;
    cfg.n = 500;
    const auto d = synth_clustered(cfg);
    std::vector<std::size_t> fit(500);
    std::iota(fit.begin(), fit.end(), 0);
    const auto enc = encode_and_standardize(d, fit);
    double mean = std::accumulate(enc.y.begin(), enc.y.end(), 0.0) / 500;
    CHECK(std::isfinite(mean));
    double var = 0;
    for (double v : enc.y) var += (v - mean) * (v - mean);
    CHECK(var > 0);
  }
  SUBCASE("degenerate sizes are rejected") {
    cfg.n = 0;
    CHECK_THROWS_AS(synth_clustered(cfg), ConfigError);
  }
}

TEST_CASE("census-shaped data reproduces the published marginals") {
  const auto d = synth_adult(1);
  REQUIRE(d.row_count() == 32538);

  auto count_of = [&](const std::string& col, const std::string& value) {
    std::size_t c = 0;
    for (const auto& v : d.column(col).text) c += v == value;
    return c;
  };

  // exact marginal counts
  CHECK(count_of("income", ">50k") == 7831);
  CHECK(count_of("sex", "Male") == 21781);
  CHECK(count_of("sex", "Female") == 10757);
  CHECK(count_of("race", "White") == 27794);
  CHECK(count_of("race", "Black") == 3123);
  CHECK(count_of("age_bracket", "<=30") == 10558);
  CHECK(count_of("age_bracket", "31-45") == 12355);
  CHECK(count_of("age_bracket", ">45") == 9625);
  CHECK(count_of("marital_status", "Married-civ-spouse") == 14976);
  CHECK(count_of("workclass", "Private") == 22681);
  CHECK(count_of("occupation", "Prof-specialty") == 4137);
  CHECK(count_of("occupation", "Armed-Forces") == 9);
  CHECK(count_of("relationship", "Husband") == 13184);

  const double rate = 7831.0 / 32538.0;
  CHECK(rate == doctest::Approx(0.2407).epsilon(0.021));  // 24.07% +- 0.5pp

  // numeric moments near the published mean/sd
  const auto& educ = d.column("education_years").numeric;
  double mean = std::accumulate(educ.begin(), educ.end(), 0.0) / educ.size();
  double var = 0;
  for (double v : educ) var += (v - mean) * (v - mean);
  var /= educ.size();
  CHECK(mean == doctest::Approx(10.08).epsilon(0.02));
  CHECK(std::sqrt(var) == doctest::Approx(2.57).epsilon(0.1));
  const auto& hours = d.column("hours_per_week").numeric;
  mean = std::accumulate(hours.begin(), hours.end(), 0.0) / hours.size();
  CHECK(mean == doctest::Approx(40.44).epsilon(0.02));

  // six most frequent occupations cover about 71% of rows
  const auto p = partition_seen_unseen(d, 6);
  CHECK(p.seen_rows.size() == 23002);
  CHECK(p.seen_fraction == doctest::Approx(0.7069).epsilon(0.001));
  CHECK(p.seen_clusters[0] == "Prof-specialty");

  // income should climb with education (sanity of the latent model)
  double lo_pos = 0, lo_n = 0, hi_pos = 0, hi_n = 0;
  const auto& income = d.column("income").text;
  for (std::size_t i = 0; i < educ.size(); ++i) {
    if (educ[i] <= 9) {
      lo_pos += income[i] == ">50k";
      ++lo_n;
    } else if (educ[i] >= 13) {
      hi_pos += income[i] == ">50k";
      ++hi_n;
    }
  }
  CHECK(hi_pos / hi_n > 2.0 * (lo_pos / lo_n));

  CHECK(dataset_fingerprint(synth_adult(1)) == dataset_fingerprint(d));
  CHECK(dataset_fingerprint(synth_adult(2)) != dataset_fingerprint(d));
}

TEST_CASE("bundle cache round trips datasets, partitions and provenance") {
  SynthConfig cfg;
  cfg.n = 400;
  cfg.seed = 13;
  auto d = synth_clustered(cfg);
  ProbeSpec probes;
  probes.seed = 4;
  d = inject_probes(d, probes);

  BundleCache cache;
  cache.data = d;
  cache.partition = partition_seen_unseen(d, 3);
  cache.provenance = "synth_clustered seed=13 probes=3";

  TempDir tmp;
  save_bundle_cache(tmp.file("bundle"), cache);
  const auto back = load_bundle_cache(tmp.file("bundle"));
  CHECK(dataset_fingerprint(back.data) == dataset_fingerprint(d));
  CHECK(back.partition.seen_rows == cache.partition.seen_rows);
  CHECK(back.partition.unseen_rows == cache.partition.unseen_rows);
  CHECK(back.partition.seen_clusters == cache.partition.seen_clusters);
  CHECK(back.partition.frequencies == cache.partition.frequencies);
  CHECK(back.partition.seen_fraction == cache.partition.seen_fraction);
  CHECK(back.provenance == cache.provenance);
  CHECK(back.data.columns.back().probe);
}

TEST_CASE("subset_rows picks rows in order and validates indices") {
  const auto d = make_raw(TaskKind::classification, "yes",
                          {{"x", ColumnRole::numeric},
                           {"group", ColumnRole::sensitive},
                           {"site", ColumnRole::cluster},
                           {"label", ColumnRole::target}},
                          {{"1", "m", "s1", "yes"},
                           {"2", "f", "s2", "no"},
                           {"3", "m", "s1", "yes"}});
  const auto sub = subset_rows(d, {2, 0});
  CHECK(sub.row_count() == 2);
  CHECK(sub.column("x").numeric == std::vector<double>{3.0, 1.0});
  CHECK(sub.column("group").text == std::vector<std::string>{"m", "m"});
  CHECK_THROWS_AS(subset_rows(d, {3}), ContractError);
}

TEST_CASE("schema validation catches structural mistakes") {
  DatasetSchema s = simple_schema();
  CHECK_NOTHROW(s.validate());

  DatasetSchema two_targets = s;
  two_targets.columns.push_back({"label2", ColumnRole::target});
  CHECK_THROWS_AS(two_targets.validate(), ConfigError);

  DatasetSchema no_sensitive = s;
  no_sensitive.columns[2].role = ColumnRole::categorical;
  CHECK_THROWS_AS(no_sensitive.validate(), ConfigError);

  DatasetSchema dup = s;
  dup.columns.push_back({"x", ColumnRole::numeric});
  CHECK_THROWS_AS(dup.validate(), ConfigError);

  DatasetSchema no_pos = s;
  no_pos.positive_label.clear();
  CHECK_THROWS_AS(no_pos.validate(), ConfigError);
}
