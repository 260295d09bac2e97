#include "fairmedl/dataset.hpp"

#include "fairmedl/errors.hpp"
#include "fairmedl/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace fairmedl {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- roles and schema -------------------------------------------------------

ColumnRole column_role_from_string(const std::string& name) {
  if (name == "numeric") return ColumnRole::numeric;
  if (name == "categorical") return ColumnRole::categorical;
  if (name == "target") return ColumnRole::target;
  if (name == "cluster") return ColumnRole::cluster;
  if (name == "sensitive") return ColumnRole::sensitive;
  throw ConfigError("unknown column kind: " + name);
}

std::string to_string(ColumnRole role) {
  switch (role) {
    case ColumnRole::numeric: return "numeric";
    case ColumnRole::categorical: return "categorical";
    case ColumnRole::target: return "target";
    case ColumnRole::cluster: return "cluster";
    case ColumnRole::sensitive: return "sensitive";
  }
  throw ConfigError("unknown column kind");
}

void DatasetSchema::validate() const {
  if (columns.empty()) throw ConfigError("schema has no columns");
  std::size_t targets = 0, clusters = 0, sensitives = 0;
  std::set<std::string> names;
  for (const auto& c : columns) {
    if (!names.insert(c.name).second) {
      throw ConfigError("schema lists column '" + c.name + "' twice");
    }
    if (c.role == ColumnRole::target) ++targets;
    if (c.role == ColumnRole::cluster) ++clusters;
    if (c.role == ColumnRole::sensitive) ++sensitives;
  }
  if (targets != 1) throw ConfigError("schema needs exactly one target column");
  if (clusters != 1) throw ConfigError("schema needs exactly one cluster column");
  if (sensitives == 0) throw ConfigError("schema needs at least one sensitive column");
  if (task == TaskKind::classification && positive_label.empty()) {
    throw ConfigError("classification schema needs positive_label");
  }
}

const ColumnSpec& DatasetSchema::target() const {
  for (const auto& c : columns)
    if (c.role == ColumnRole::target) return c;
  throw ConfigError("schema has no target column");
}

const ColumnSpec& DatasetSchema::cluster() const {
  for (const auto& c : columns)
    if (c.role == ColumnRole::cluster) return c;
  throw ConfigError("schema has no cluster column");
}

const RawColumn& RawDataset::column(const std::string& name) const {
  for (const auto& c : columns)
    if (c.spec.name == name) return c;
  throw ContractError("dataset has no column '" + name + "'");
}

// ---- CSV ---------------------------------------------------------------------

namespace {

std::vector<std::vector<std::string>> parse_csv(const std::string& content,
                                                const std::string& path) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t i = 0;
  const std::size_t n = content.size();
  auto end_field = [&] {
    record.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_record = [&] {
    end_field();
    records.push_back(std::move(record));
    record.clear();
  };
  while (i < n) {
    const char c = content[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < n && content[i + 1] == '"') {
          field += '"';
          i += 2;
        } else {
          in_quotes = false;
          ++i;
        }
      } else {
        field += c;
        ++i;
      }
    } else if (c == '"' && !field_started && field.empty()) {
      in_quotes = true;
      field_started = true;
      ++i;
    } else if (c == ',') {
      end_field();
      ++i;
    } else if (c == '\r') {
      if (i + 1 < n && content[i + 1] == '\n') ++i;
      end_record();
      ++i;
    } else if (c == '\n') {
      end_record();
      ++i;
    } else {
      field += c;
      field_started = true;
      ++i;
    }
  }
  if (in_quotes) throw IngestionError(path + ": unterminated quoted field");
  if (field_started || !field.empty() || !record.empty()) end_record();
  return records;
}

}  // namespace

std::string csv_escape(const std::string& v) {
  if (v.find_first_of(",\"\r\n") == std::string::npos) return v;
  std::string out = "\"";
  for (char c : v) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

namespace {

double parse_double(const std::string& s, const std::string& column, std::size_t row) {
  const char* begin = s.c_str();
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0' || errno == ERANGE || !std::isfinite(v)) {
    throw IngestionError("column '" + column + "' row " + std::to_string(row) +
                         ": cannot parse '" + s + "' as numeric");
  }
  return v;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write " + path);
  out << content;
  if (!out) throw IngestionError("short write to " + path);
}

}  // namespace

std::size_t CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw IngestionError("missing CSV column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

bool CsvTable::has_column(const std::string& name) const {
  return std::find(header.begin(), header.end(), name) != header.end();
}

CsvTable read_csv_table(const std::string& path) {
  auto records = parse_csv(read_file(path), path);
  if (records.empty()) throw IngestionError(path + ": empty file");
  CsvTable table;
  table.header = std::move(records[0]);
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].size() != table.header.size()) {
      throw IngestionError(path + ": row " + std::to_string(r) + " has " +
                           std::to_string(records[r].size()) + " fields, header has " +
                           std::to_string(table.header.size()));
    }
    table.rows.push_back(std::move(records[r]));
  }
  return table;
}

RawDataset load_csv(const std::string& path, const DatasetSchema& schema) {
  schema.validate();
  const auto records = parse_csv(read_file(path), path);
  if (records.empty()) throw IngestionError(path + ": empty file");
  const auto& header = records[0];

  std::vector<std::size_t> col_index;
  for (const auto& spec : schema.columns) {
    auto it = std::find(header.begin(), header.end(), spec.name);
    if (it == header.end()) {
      throw IngestionError(path + ": column '" + spec.name + "' not found in header");
    }
    col_index.push_back(static_cast<std::size_t>(it - header.begin()));
  }

  RawDataset out;
  out.schema = schema;
  for (const auto& spec : schema.columns) {
    RawColumn col;
    col.spec = spec;
    out.columns.push_back(std::move(col));
  }

  const auto& markers = schema.missing_markers;
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& rec = records[r];
    if (rec.size() != header.size()) {
      throw IngestionError(path + ": row " + std::to_string(r + 1) + " has " +
                           std::to_string(rec.size()) + " fields, header has " +
                           std::to_string(header.size()));
    }
    bool missing = false;
    for (std::size_t c = 0; c < schema.columns.size() && !missing; ++c) {
      const std::string& cell = rec[col_index[c]];
      missing = std::find(markers.begin(), markers.end(), cell) != markers.end();
    }
    if (missing) {
      ++out.dropped_rows;
      continue;
    }
    for (std::size_t c = 0; c < schema.columns.size(); ++c) {
      const std::string& cell = rec[col_index[c]];
      if (out.columns[c].is_numeric()) {
        out.columns[c].numeric.push_back(
            parse_double(cell, schema.columns[c].name, r + 1));
      } else {
        if (schema.columns[c].role == ColumnRole::target &&
            schema.task == TaskKind::regression) {
          parse_double(cell, schema.columns[c].name, r + 1);  // validate only
        }
        out.columns[c].text.push_back(cell);
      }
    }
  }
  return out;
}

void save_csv(const RawDataset& data, const std::string& path) {
  std::ostringstream ss;
  for (std::size_t c = 0; c < data.columns.size(); ++c) {
    if (c) ss << ',';
    ss << csv_escape(data.columns[c].spec.name);
  }
  ss << '\n';
  const std::size_t n = data.row_count();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < data.columns.size(); ++c) {
      if (c) ss << ',';
      const auto& col = data.columns[c];
      ss << (col.is_numeric() ? format_double(col.numeric[i]) : csv_escape(col.text[i]));
    }
    ss << '\n';
  }
  write_file(path, ss.str());
}

RawDataset subset_rows(const RawDataset& data, const std::vector<std::size_t>& rows) {
  RawDataset out;
  out.schema = data.schema;
  for (const auto& col : data.columns) {
    RawColumn c;
    c.spec = col.spec;
    c.probe = col.probe;
    for (std::size_t r : rows) {
      if (r >= data.row_count()) {
        throw ContractError("subset_rows: row " + std::to_string(r) + " out of range");
      }
      if (col.is_numeric()) {
        c.numeric.push_back(col.numeric[r]);
      } else {
        c.text.push_back(col.text[r]);
      }
    }
    out.columns.push_back(std::move(c));
  }
  return out;
}

// ---- partition -----------------------------------------------------------------

ClusterPartition partition_seen_unseen(const RawDataset& data, std::size_t top_k) {
  if (top_k == 0) throw ConfigError("partition: top_k must be >= 1");
  const auto& cluster = data.cluster_column();
  std::map<std::string, std::size_t> counts;
  for (const auto& v : cluster.text) ++counts[v];
  if (top_k > counts.size()) {
    throw ConfigError("partition: top_k " + std::to_string(top_k) + " exceeds " +
                      std::to_string(counts.size()) + " distinct clusters");
  }
  ClusterPartition out;
  out.frequencies.assign(counts.begin(), counts.end());
  std::sort(out.frequencies.begin(), out.frequencies.end(),
            [](const auto& a, const auto& b) {
              if (a.second != b.second) return a.second > b.second;
              return a.first < b.first;
            });
  std::set<std::string> seen_set;
  for (std::size_t i = 0; i < top_k; ++i) {
    out.seen_clusters.push_back(out.frequencies[i].first);
    seen_set.insert(out.frequencies[i].first);
  }
  for (std::size_t i = 0; i < cluster.text.size(); ++i) {
    (seen_set.count(cluster.text[i]) ? out.seen_rows : out.unseen_rows).push_back(i);
  }
  out.seen_fraction =
      static_cast<double>(out.seen_rows.size()) / static_cast<double>(data.row_count());
  return out;
}

// ---- k-fold --------------------------------------------------------------------

namespace {

double numeric_target(const std::string& cell, const std::string& column) {
  const char* begin = cell.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0' || !std::isfinite(v)) {
    throw ContractError("target column '" + column + "': cannot parse '" + cell +
                        "' as numeric");
  }
  return v;
}

double target_value(const RawDataset& data, std::size_t row) {
  const auto& col = data.target_column();
  if (data.schema.task == TaskKind::classification) {
    return col.text[row] == data.schema.positive_label ? 1.0 : 0.0;
  }
  return numeric_target(col.text[row], col.spec.name);
}

}  // namespace

KFoldResult kfold_split(const RawDataset& data, std::size_t k, std::uint64_t seed) {
  if (k < 3) throw ConfigError("kfold: k must be >= 3, got " + std::to_string(k));
  const std::size_t n = data.row_count();
  if (n < k) throw ContractError("kfold: " + std::to_string(n) + " rows < k");

  KFoldResult out;
  Rng rng(derive_seed(seed, "kfold"));

  std::vector<std::vector<std::size_t>> strata;
  if (data.schema.task == TaskKind::classification) {
    std::map<double, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < n; ++i) by_class[target_value(data, i)].push_back(i);
    for (auto& [cls, rows] : by_class) {
      if (rows.size() < k) {
        out.stratified = false;
        out.warning = "class with " + std::to_string(rows.size()) +
                      " members < k; falling back to unstratified folds";
        break;
      }
    }
    if (out.stratified) {
      for (auto& [cls, rows] : by_class) strata.push_back(std::move(rows));
    }
  } else {
    out.stratified = false;
  }
  if (!out.stratified && strata.empty()) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    strata.push_back(std::move(all));
  }

  std::vector<std::vector<std::size_t>> fold_rows(k);
  for (auto& rows : strata) {
    rng.shuffle(rows);
    for (std::size_t i = 0; i < rows.size(); ++i) fold_rows[i % k].push_back(rows[i]);
  }

  for (std::size_t i = 0; i < k; ++i) {
    FoldSplit split;
    split.test = fold_rows[i];
    split.val = fold_rows[(i + 1) % k];
    for (std::size_t f = 0; f < k; ++f) {
      if (f == i || f == (i + 1) % k) continue;
      split.train.insert(split.train.end(), fold_rows[f].begin(), fold_rows[f].end());
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    std::sort(split.test.begin(), split.test.end());
    out.folds.push_back(std::move(split));
  }
  return out;
}

// ---- probes --------------------------------------------------------------------

RawDataset inject_probes(const RawDataset& data, const ProbeSpec& spec) {
  if (spec.count < 0) throw ConfigError("probe count must be >= 0");
  RawDataset out = data;
  if (spec.count == 0) return out;
  const std::size_t n = data.row_count();
  if (n == 0) throw ContractError("inject_probes: empty dataset");

  // standardized target
  std::vector<double> ty(n);
  for (std::size_t i = 0; i < n; ++i) ty[i] = target_value(data, i);
  double mean = 0.0;
  for (double v : ty) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : ty) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  if (var == 0.0) throw DegenerateInputError("inject_probes: constant target");
  const double sd = std::sqrt(var);
  for (double& v : ty) v = (v - mean) / sd;

  // one effect per cluster, drawn in lexicographic cluster order
  const auto& cluster = data.cluster_column();
  std::map<std::string, double> effect;
  for (const auto& v : cluster.text) effect.emplace(v, 0.0);
  Rng effect_rng(derive_seed(spec.seed, "probe-effects"));
  for (auto& [name, e] : effect) e = effect_rng.normal();

  for (int j = 0; j < spec.count; ++j) {
    Rng noise(derive_seed(spec.seed, "probe-noise-" + std::to_string(j)));
    RawColumn col;
    col.spec.name = "probe_" + std::to_string(j);
    col.spec.role = ColumnRole::numeric;
    col.probe = true;
    col.numeric.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      col.numeric[i] = spec.label_coeff * ty[i] +
                       spec.cluster_coeff * effect[cluster.text[i]] +
                       noise.normal(0.0, spec.noise_sd);
    }
    out.schema.columns.push_back(col.spec);
    out.columns.push_back(std::move(col));
  }
  return out;
}

// ---- encoding --------------------------------------------------------------------

EncoderMeta fit_encoder(const RawDataset& data, const std::vector<std::size_t>& fit_rows) {
  if (fit_rows.empty()) throw ContractError("fit_encoder: empty fit row set");
  for (std::size_t r : fit_rows) {
    if (r >= data.row_count()) {
      throw ContractError("fit_encoder: fit row " + std::to_string(r) + " out of range");
    }
  }
  EncoderMeta meta;
  meta.task = data.schema.task;
  meta.positive_label = data.schema.positive_label;
  for (const auto& col : data.columns) {
    EncoderColumn ec;
    ec.name = col.spec.name;
    ec.role = col.spec.role;
    ec.probe = col.probe;
    if (col.is_numeric()) {
      double mean = 0.0;
      for (std::size_t r : fit_rows) mean += col.numeric[r];
      mean /= static_cast<double>(fit_rows.size());
      double var = 0.0;
      for (std::size_t r : fit_rows) {
        var += (col.numeric[r] - mean) * (col.numeric[r] - mean);
      }
      var /= static_cast<double>(fit_rows.size());
      ec.mean = mean;
      ec.sd = std::sqrt(var);
      if (ec.sd == 0.0 && col.spec.role != ColumnRole::target) {
        ec.dropped = true;
        meta.warnings.push_back("column '" + ec.name +
                                "' dropped: zero variance on fit rows");
      }
    } else {
      std::set<std::string> cats;
      for (std::size_t r : fit_rows) cats.insert(col.text[r]);
      ec.categories.assign(cats.begin(), cats.end());
    }
    meta.columns.push_back(std::move(ec));
  }
  return meta;
}

EncodedDataset apply_encoder(const EncoderMeta& meta, const RawDataset& data) {
  if (meta.columns.size() != data.columns.size()) {
    throw ContractError("apply_encoder: metadata covers " +
                        std::to_string(meta.columns.size()) + " columns, dataset has " +
                        std::to_string(data.columns.size()));
  }
  EncodedDataset out;
  out.task = meta.task;
  out.n = data.row_count();

  // feature layout
  std::vector<std::size_t> offsets(meta.columns.size(), 0);
  std::size_t d = 0;
  for (std::size_t c = 0; c < meta.columns.size(); ++c) {
    const auto& ec = meta.columns[c];
    if (ec.name != data.columns[c].spec.name || ec.role != data.columns[c].spec.role) {
      throw ContractError("apply_encoder: column '" + data.columns[c].spec.name +
                          "' does not match metadata column '" + ec.name + "'");
    }
    offsets[c] = d;
    if (ec.role == ColumnRole::target || ec.role == ColumnRole::cluster || ec.dropped)
      continue;
    if (ec.role == ColumnRole::numeric) {
      FeatureGroup g{ec.name, {d}, ec.probe};
      out.groups.push_back(std::move(g));
      out.feature_names.push_back(ec.name);
      d += 1;
    } else {
      FeatureGroup g{ec.name, {}, ec.probe};
      for (std::size_t j = 0; j < ec.categories.size(); ++j) {
        g.cols.push_back(d + j);
        out.feature_names.push_back(ec.name + "=" + ec.categories[j]);
      }
      out.groups.push_back(std::move(g));
      d += ec.categories.size();
    }
  }
  out.d = d;
  out.X.assign(out.n * d, 0.0);
  out.y.resize(out.n);
  out.z.assign(out.n, -1);

  for (std::size_t c = 0; c < meta.columns.size(); ++c) {
    const auto& ec = meta.columns[c];
    const auto& col = data.columns[c];
    if (ec.role == ColumnRole::target) {
      for (std::size_t i = 0; i < out.n; ++i) {
        out.y[i] = meta.task == TaskKind::classification
                       ? (col.text[i] == meta.positive_label ? 1.0 : 0.0)
                       : numeric_target(col.text[i], ec.name);
      }
      continue;
    }
    if (ec.role == ColumnRole::cluster) {
      out.cluster_names = ec.categories;
      for (std::size_t i = 0; i < out.n; ++i) {
        auto it = std::lower_bound(ec.categories.begin(), ec.categories.end(),
                                   col.text[i]);
        out.z[i] = (it != ec.categories.end() && *it == col.text[i])
                       ? static_cast<int>(it - ec.categories.begin())
                       : -1;
      }
      continue;
    }
    if (ec.dropped) continue;
    if (ec.role == ColumnRole::numeric) {
      for (std::size_t i = 0; i < out.n; ++i) {
        out.X[i * d + offsets[c]] = (col.numeric[i] - ec.mean) / ec.sd;
      }
      continue;
    }
    // categorical / sensitive one-hot
    SensitiveBlock block;
    if (ec.role == ColumnRole::sensitive) {
      block.name = ec.name;
      block.categories = ec.categories;
      block.block_offset = offsets[c];
      block.block_width = ec.categories.size();
      block.ids.assign(out.n, -1);
    }
    std::size_t unseen_here = 0;
    for (std::size_t i = 0; i < out.n; ++i) {
      auto it = std::lower_bound(ec.categories.begin(), ec.categories.end(), col.text[i]);
      if (it != ec.categories.end() && *it == col.text[i]) {
        const std::size_t idx = static_cast<std::size_t>(it - ec.categories.begin());
        out.X[i * d + offsets[c] + idx] = 1.0;
        if (ec.role == ColumnRole::sensitive) block.ids[i] = static_cast<int>(idx);
      } else {
        ++unseen_here;
      }
    }
    if (unseen_here > 0) {
      out.unseen_category_cells += unseen_here;
      out.warnings.push_back("column '" + ec.name + "': " + std::to_string(unseen_here) +
                             " values outside fit categories encoded as zeros");
    }
    if (ec.role == ColumnRole::sensitive) out.sensitive.push_back(std::move(block));
  }
  return out;
}

EncodedDataset encode_and_standardize(const RawDataset& data,
                                      const std::vector<std::size_t>& fit_rows) {
  return apply_encoder(fit_encoder(data, fit_rows), data);
}

// ---- encoder JSON ----------------------------------------------------------------

std::string encoder_meta_to_json(const EncoderMeta& meta) {
  json j;
  j["task"] = to_string(meta.task);
  j["positive_label"] = meta.positive_label;
  j["warnings"] = meta.warnings;
  j["columns"] = json::array();
  for (const auto& c : meta.columns) {
    json jc;
    jc["name"] = c.name;
    jc["role"] = to_string(c.role);
    jc["probe"] = c.probe;
    jc["mean"] = c.mean;
    jc["sd"] = c.sd;
    jc["dropped"] = c.dropped;
    jc["categories"] = c.categories;
    j["columns"].push_back(std::move(jc));
  }
  return j.dump(2);
}

EncoderMeta encoder_meta_from_json(const std::string& text) {
  json j = json::parse(text);
  EncoderMeta meta;
  meta.task = task_kind_from_string(j.at("task").get<std::string>());
  meta.positive_label = j.at("positive_label").get<std::string>();
  meta.warnings = j.at("warnings").get<std::vector<std::string>>();
  for (const auto& jc : j.at("columns")) {
    EncoderColumn c;
    c.name = jc.at("name").get<std::string>();
    c.role = column_role_from_string(jc.at("role").get<std::string>());
    c.probe = jc.at("probe").get<bool>();
    c.mean = jc.at("mean").get<double>();
    c.sd = jc.at("sd").get<double>();
    c.dropped = jc.at("dropped").get<bool>();
    c.categories = jc.at("categories").get<std::vector<std::string>>();
    meta.columns.push_back(std::move(c));
  }
  return meta;
}

// ---- synthetic clustered data ------------------------------------------------------

RawDataset synth_clustered(const SynthConfig& config) {
  if (config.n == 0 || config.d == 0 || config.clusters == 0) {
    throw ConfigError("synth_clustered: n, d and clusters must all be >= 1");
  }
  Rng rng(derive_seed(config.seed, "synth-clustered"));
  const std::size_t n = config.n, d = config.d, k = config.clusters;

  std::vector<double> intercept(k);
  std::vector<std::vector<double>> shift(k, std::vector<double>(d));
  for (std::size_t c = 0; c < k; ++c) {
    intercept[c] = rng.normal(0.0, config.cluster_sd);
    for (auto& v : shift[c]) v = rng.normal(0.0, config.cluster_sd);
  }
  std::vector<double> beta(d);
  for (auto& b : beta) b = rng.normal(0.0, std::sqrt(3.0 / static_cast<double>(d)));

  RawDataset out;
  out.schema.task = config.task;
  out.schema.positive_label = "pos";
  for (std::size_t j = 0; j < d; ++j) {
    out.schema.columns.push_back({"x" + std::to_string(j), ColumnRole::numeric});
  }
  out.schema.columns.push_back({"group", ColumnRole::sensitive});
  out.schema.columns.push_back({"site", ColumnRole::cluster});
  out.schema.columns.push_back({"outcome", ColumnRole::target});
  for (const auto& spec : out.schema.columns) {
    RawColumn col;
    col.spec = spec;
    out.columns.push_back(std::move(col));
  }

  char site_name[32];
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t z = rng.index(k);
    const bool biased_group = rng.uniform() < 0.5;
    double lin = intercept[z] + (biased_group ? config.bias : 0.0) - 0.5 * config.bias;
    for (std::size_t j = 0; j < d; ++j) {
      const double x = shift[z][j] + rng.normal();
      out.columns[j].numeric.push_back(x);
      lin += beta[j] * x;
    }
    out.columns[d].text.push_back(biased_group ? "b" : "a");
    std::snprintf(site_name, sizeof(site_name), "site_%03zu", z);
    out.columns[d + 1].text.push_back(site_name);
    if (config.task == TaskKind::classification) {
      const double p = 1.0 / (1.0 + std::exp(-lin));
      out.columns[d + 2].text.push_back(rng.uniform() < p ? "pos" : "neg");
    } else {
      out.columns[d + 2].text.push_back(format_double(lin + rng.normal()));
    }
  }
  if (config.task == TaskKind::regression) out.schema.positive_label.clear();
  return out;
}

// ---- census-shaped generator --------------------------------------------------------

namespace {

// Assigns categories by score rank: the lowest `counts[0]` scores get
// category 0, the next block category 1, and so on. Counts must sum to n.
std::vector<int> assign_by_rank(const std::vector<double>& score,
                                const std::vector<std::size_t>& counts) {
  const std::size_t n = score.size();
  std::size_t total = 0;
  for (auto c : counts) total += c;
  if (total != n) {
    throw ContractError("assign_by_rank: counts sum to " + std::to_string(total) +
                        ", need " + std::to_string(n));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (score[a] != score[b]) return score[a] < score[b];
    return a < b;
  });
  std::vector<int> out(n);
  std::size_t pos = 0;
  for (std::size_t cat = 0; cat < counts.size(); ++cat) {
    for (std::size_t j = 0; j < counts[cat]; ++j) out[order[pos++]] = static_cast<int>(cat);
  }
  return out;
}

}  // namespace

DatasetSchema adult_schema() {
  DatasetSchema s;
  s.task = TaskKind::classification;
  s.positive_label = ">50k";
  s.columns = {
      {"age_bracket", ColumnRole::sensitive},
      {"workclass", ColumnRole::categorical},
      {"education_years", ColumnRole::numeric},
      {"marital_status", ColumnRole::sensitive},
      {"occupation", ColumnRole::cluster},
      {"relationship", ColumnRole::categorical},
      {"race", ColumnRole::sensitive},
      {"sex", ColumnRole::sensitive},
      {"hours_per_week", ColumnRole::numeric},
      {"income", ColumnRole::target},
  };
  return s;
}

RawDataset synth_adult(std::uint64_t seed) {
  const std::size_t n = 32538;
  Rng rng(derive_seed(seed, "census-shape"));

  // latent socioeconomic factor driving cross-column dependence
  std::vector<double> t(n);
  for (auto& v : t) v = rng.normal();

  auto coupled_score = [&](double rho) {
    std::vector<double> s(n);
    const double w = std::sqrt(1.0 - rho * rho);
    for (std::size_t i = 0; i < n; ++i) s[i] = rho * t[i] + w * rng.normal();
    return s;
  };

  // categories listed from lowest to highest earning propensity; counts are
  // the published marginals
  const std::vector<std::string> age_cats{"<=30", "31-45", ">45"};
  const std::vector<std::size_t> age_counts{10558, 12355, 9625};
  std::vector<int> age = assign_by_rank(coupled_score(0.20), age_counts);

  const std::vector<std::string> sex_cats{"Female", "Male"};
  const std::vector<std::size_t> sex_counts{10757, 21781};
  std::vector<int> sex = assign_by_rank(coupled_score(0.25), sex_counts);

  const std::vector<std::string> race_cats{"Other", "Amer-Indian-Eskimo", "Black",
                                           "Asian-Pac-Islander", "White"};
  const std::vector<std::size_t> race_counts{271, 311, 3123, 1039, 27794};
  std::vector<int> race = assign_by_rank(coupled_score(0.12), race_counts);

  const std::vector<std::string> marital_cats{
      "Never-married", "Separated",          "Married-spouse-absent",
      "Divorced",      "Widowed",            "Married-civ-spouse"};
  const std::vector<std::size_t> marital_counts{10683, 1025, 418, 4443, 993, 14976};
  std::vector<double> marital_score(n);
  for (std::size_t i = 0; i < n; ++i) {
    marital_score[i] = 0.35 * t[i] + 0.75 * (age[i] - 1) + 0.56 * rng.normal();
  }
  std::vector<int> marital = assign_by_rank(marital_score, marital_counts);

  std::vector<double> education(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double z = 0.55 * t[i] + 0.835 * rng.normal();
    education[i] = std::clamp(std::round(10.08 + 2.57 * z), 1.0, 16.0);
  }

  const std::vector<std::string> workclass_cats{
      "Never-worked", "Without-pay",
      "Unknown",      "Private",
      "Local-gov",    "State-gov",
      "Unincorporated-self-employed", "Federal-gov",
      "Incorporated-self-employed"};
  const std::vector<std::size_t> workclass_counts{7,    14,   1834, 22681, 2093,
                                                  1297, 2539, 957,  1116};
  std::vector<int> workclass = assign_by_rank(coupled_score(0.15), workclass_counts);

  const std::vector<std::string> occupation_cats{
      "Priv-house-serv", "Other-service",  "Handlers-cleaners", "Armed-Forces",
      "Farming-fishing", "Machine-op-inspct", "Unknown",        "Adm-clerical",
      "Transport-moving", "Craft-repair",  "Tech-support",      "Sales",
      "Protective-serv", "Exec-managerial", "Prof-specialty"};
  const std::vector<std::size_t> occupation_counts{149,  3291, 1370, 9,    993,
                                                   2002, 1841, 3765, 1596, 4096,
                                                   928,  3648, 648,  4065, 4137};
  std::vector<int> occupation = assign_by_rank(coupled_score(0.45), occupation_counts);

  std::vector<double> hours(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double z = 0.32 * t[i] + 0.947 * rng.normal();
    hours[i] = std::clamp(std::round(40.44 + 12.34 * z), 1.0, 99.0);
  }

  const std::vector<std::string> relationship_cats{"Own-child", "Other-relative",
                                                   "Unmarried", "Not-in-family",
                                                   "Wife",      "Husband"};
  const std::vector<std::size_t> relationship_counts{5067, 980, 3446, 8305, 1556, 13184};
  const int married_civ = 5;  // index within marital_cats
  std::vector<double> rel_score(n);
  for (std::size_t i = 0; i < n; ++i) {
    rel_score[i] = 4.0 * (marital[i] == married_civ) + 2.0 * sex[i] +
                   0.6 * (age[i] - 1) + 0.3 * t[i] + 0.5 * rng.normal();
  }
  std::vector<int> relationship = assign_by_rank(rel_score, relationship_counts);

  // latent income utility; the top 7,831 utilities are labeled positive
  const std::vector<double> age_effect{-1.10, 0.25, 0.55};
  std::vector<double> occ_effect(occupation_cats.size());
  for (std::size_t c = 0; c < occ_effect.size(); ++c) {
    occ_effect[c] = 0.40 * (static_cast<double>(c) - 7.0) / 4.0;
  }
  std::vector<double> utility(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double educ_z = (education[i] - 10.08) / 2.57;
    const double hours_z = (hours[i] - 40.44) / 12.34;
    const double u = rng.uniform();
    const double logistic = std::log(u / (1.0 - u));
    utility[i] = 1.0 * educ_z + 0.7 * hours_z + age_effect[age[i]] + 0.45 * sex[i] +
                 1.0 * (marital[i] == married_civ) + occ_effect[occupation[i]] +
                 0.06 * race[i] + 1.1 * logistic;
  }
  std::vector<std::size_t> by_utility(n);
  std::iota(by_utility.begin(), by_utility.end(), 0);
  std::sort(by_utility.begin(), by_utility.end(), [&](std::size_t a, std::size_t b) {
    if (utility[a] != utility[b]) return utility[a] > utility[b];
    return a < b;
  });
  std::vector<int> income(n, 0);
  for (std::size_t i = 0; i < 7831; ++i) income[by_utility[i]] = 1;

  RawDataset out;
  out.schema = adult_schema();
  for (const auto& spec : out.schema.columns) {
    RawColumn col;
    col.spec = spec;
    out.columns.push_back(std::move(col));
  }
  auto& cols = out.columns;
  for (std::size_t i = 0; i < n; ++i) {
    cols[0].text.push_back(age_cats[age[i]]);
    cols[1].text.push_back(workclass_cats[workclass[i]]);
    cols[2].numeric.push_back(education[i]);
    cols[3].text.push_back(marital_cats[marital[i]]);
    cols[4].text.push_back(occupation_cats[occupation[i]]);
    cols[5].text.push_back(relationship_cats[relationship[i]]);
    cols[6].text.push_back(race_cats[race[i]]);
    cols[7].text.push_back(sex_cats[sex[i]]);
    cols[8].numeric.push_back(hours[i]);
    cols[9].text.push_back(income[i] ? ">50k" : "<=50k");
  }
  return out;
}

// ---- cache ---------------------------------------------------------------------------

namespace {

json schema_to_json(const DatasetSchema& s) {
  json j;
  j["task"] = to_string(s.task);
  j["positive_label"] = s.positive_label;
  j["missing_markers"] = s.missing_markers;
  j["columns"] = json::array();
  for (const auto& c : s.columns) {
    j["columns"].push_back({{"name", c.name}, {"role", to_string(c.role)}});
  }
  return j;
}

DatasetSchema schema_from_json(const json& j) {
  DatasetSchema s;
  s.task = task_kind_from_string(j.at("task").get<std::string>());
  s.positive_label = j.at("positive_label").get<std::string>();
  s.missing_markers = j.at("missing_markers").get<std::vector<std::string>>();
  for (const auto& jc : j.at("columns")) {
    s.columns.push_back({jc.at("name").get<std::string>(),
                         column_role_from_string(jc.at("role").get<std::string>())});
  }
  return s;
}

void write_binary(const fs::path& path, const void* data, std::size_t bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw IngestionError("short write to " + path.string());
}

std::vector<char> read_binary(const fs::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IngestionError("cannot open " + path.string());
  const auto size = in.tellg();
  in.seekg(0);
  std::vector<char> buf(static_cast<std::size_t>(size));
  in.read(buf.data(), size);
  if (!in) throw IngestionError("short read from " + path.string());
  return buf;
}

}  // namespace

void save_bundle_cache(const std::string& dir, const BundleCache& cache) {
  fs::create_directories(fs::path(dir) / "columns");
  json meta;
  meta["schema"] = schema_to_json(cache.data.schema);
  meta["dropped_rows"] = cache.data.dropped_rows;
  meta["rows"] = cache.data.row_count();
  meta["provenance"] = cache.provenance;
  meta["partition"] = {
      {"seen_clusters", cache.partition.seen_clusters},
      {"seen_fraction", cache.partition.seen_fraction},
  };
  json freqs = json::array();
  for (const auto& [name, count] : cache.partition.frequencies) {
    freqs.push_back({{"cluster", name}, {"count", count}});
  }
  meta["partition"]["frequencies"] = std::move(freqs);

  auto rows_to_u32 = [](const std::vector<std::size_t>& rows) {
    std::vector<std::uint32_t> v(rows.begin(), rows.end());
    return v;
  };
  const auto seen = rows_to_u32(cache.partition.seen_rows);
  const auto unseen = rows_to_u32(cache.partition.unseen_rows);
  write_binary(fs::path(dir) / "seen_rows.u32", seen.data(),
               seen.size() * sizeof(std::uint32_t));
  write_binary(fs::path(dir) / "unseen_rows.u32", unseen.data(),
               unseen.size() * sizeof(std::uint32_t));

  meta["columns"] = json::array();
  for (std::size_t c = 0; c < cache.data.columns.size(); ++c) {
    const auto& col = cache.data.columns[c];
    json jc;
    jc["name"] = col.spec.name;
    jc["role"] = to_string(col.spec.role);
    jc["probe"] = col.probe;
    const std::string base = std::to_string(c) + "_" + col.spec.name;
    if (col.is_numeric()) {
      jc["file"] = base + ".f64";
      write_binary(fs::path(dir) / "columns" / (base + ".f64"), col.numeric.data(),
                   col.numeric.size() * sizeof(double));
    } else {
      std::map<std::string, std::uint32_t> codebook;
      for (const auto& v : col.text) codebook.emplace(v, 0);
      std::uint32_t next = 0;
      std::vector<std::string> values;
      for (auto& [v, code] : codebook) {
        code = next++;
        values.push_back(v);
      }
      std::vector<std::uint32_t> codes(col.text.size());
      for (std::size_t i = 0; i < col.text.size(); ++i) codes[i] = codebook[col.text[i]];
      jc["file"] = base + ".u32";
      jc["values"] = values;
      write_binary(fs::path(dir) / "columns" / (base + ".u32"), codes.data(),
                   codes.size() * sizeof(std::uint32_t));
    }
    meta["columns"].push_back(std::move(jc));
  }
  write_file((fs::path(dir) / "meta.json").string(), meta.dump(2));
}

BundleCache load_bundle_cache(const std::string& dir) {
  const json meta = json::parse(read_file((fs::path(dir) / "meta.json").string()));
  BundleCache cache;
  cache.data.schema = schema_from_json(meta.at("schema"));
  cache.data.dropped_rows = meta.at("dropped_rows").get<std::size_t>();
  cache.provenance = meta.at("provenance").get<std::string>();
  const std::size_t n = meta.at("rows").get<std::size_t>();

  for (const auto& jc : meta.at("columns")) {
    RawColumn col;
    col.spec.name = jc.at("name").get<std::string>();
    col.spec.role = column_role_from_string(jc.at("role").get<std::string>());
    col.probe = jc.at("probe").get<bool>();
    const auto buf = read_binary(fs::path(dir) / "columns" /
                                 jc.at("file").get<std::string>());
    if (col.is_numeric()) {
      if (buf.size() != n * sizeof(double)) {
        throw IngestionError("cache column '" + col.spec.name + "' has wrong size");
      }
      col.numeric.resize(n);
      std::memcpy(col.numeric.data(), buf.data(), buf.size());
    } else {
      if (buf.size() != n * sizeof(std::uint32_t)) {
        throw IngestionError("cache column '" + col.spec.name + "' has wrong size");
      }
      const auto values = jc.at("values").get<std::vector<std::string>>();
      std::vector<std::uint32_t> codes(n);
      std::memcpy(codes.data(), buf.data(), buf.size());
      col.text.reserve(n);
      for (std::uint32_t code : codes) {
        if (code >= values.size()) {
          throw IngestionError("cache column '" + col.spec.name + "' has bad code");
        }
        col.text.push_back(values[code]);
      }
    }
    cache.data.columns.push_back(std::move(col));
  }

  const auto& part = meta.at("partition");
  cache.partition.seen_clusters =
      part.at("seen_clusters").get<std::vector<std::string>>();
  cache.partition.seen_fraction = part.at("seen_fraction").get<double>();
  for (const auto& jf : part.at("frequencies")) {
    cache.partition.frequencies.emplace_back(jf.at("cluster").get<std::string>(),
                                             jf.at("count").get<std::size_t>());
  }
  auto load_rows = [&](const char* file) {
    const auto buf = read_binary(fs::path(dir) / file);
    std::vector<std::uint32_t> v(buf.size() / sizeof(std::uint32_t));
    std::memcpy(v.data(), buf.data(), buf.size());
    return std::vector<std::size_t>(v.begin(), v.end());
  };
  cache.partition.seen_rows = load_rows("seen_rows.u32");
  cache.partition.unseen_rows = load_rows("unseen_rows.u32");
  return cache;
}

std::string dataset_fingerprint(const RawDataset& data) {
  std::string acc = schema_to_json(data.schema).dump();
  acc += "|dropped=" + std::to_string(data.dropped_rows);
  std::uint64_t h = fnv1a64(acc);
  for (const auto& col : data.columns) {
    h = splitmix64(h ^ fnv1a64(col.spec.name));
    h = splitmix64(h ^ static_cast<std::uint64_t>(col.spec.role));
    h = splitmix64(h ^ static_cast<std::uint64_t>(col.probe));
    if (col.is_numeric()) {
      for (double v : col.numeric) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        h = splitmix64(h ^ bits);
      }
    } else {
      for (const auto& v : col.text) h = splitmix64(h ^ fnv1a64(v));
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace fairmedl
