#pragma once

#include "fairmedl/losses.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace fairmedl {

enum class ColumnRole { numeric, categorical, target, cluster, sensitive };

ColumnRole column_role_from_string(const std::string& name);
std::string to_string(ColumnRole role);

struct ColumnSpec {
  std::string name;
  ColumnRole role = ColumnRole::categorical;
};

// Declarative description of which CSV columns are used and how. Sensitive
// columns are categorical features that additionally define fairness groups.
struct DatasetSchema {
  std::vector<ColumnSpec> columns;
  TaskKind task = TaskKind::classification;
  std::string positive_label;
  std::vector<std::string> missing_markers{"", "?"};

  void validate() const;  // exactly one target, one cluster, >=1 sensitive
  const ColumnSpec& target() const;
  const ColumnSpec& cluster() const;
};

struct RawColumn {
  ColumnSpec spec;
  bool probe = false;
  std::vector<double> numeric;     // filled when role == numeric
  std::vector<std::string> text;   // filled otherwise

  bool is_numeric() const { return spec.role == ColumnRole::numeric; }
  std::size_t size() const { return is_numeric() ? numeric.size() : text.size(); }
};

struct RawDataset {
  DatasetSchema schema;
  std::vector<RawColumn> columns;  // schema order
  std::size_t dropped_rows = 0;

  std::size_t row_count() const { return columns.empty() ? 0 : columns[0].size(); }
  const RawColumn& column(const std::string& name) const;
  const RawColumn& target_column() const { return column(schema.target().name); }
  const RawColumn& cluster_column() const { return column(schema.cluster().name); }
};

// Rows with a missing value in any used column are dropped and counted.
RawDataset load_csv(const std::string& path, const DatasetSchema& schema);
void save_csv(const RawDataset& data, const std::string& path);

// RFC-4180 field quoting and shortest round-trip double formatting, shared by
// every CSV emitter in the project.
std::string csv_escape(const std::string& v);
std::string format_double(double v);

// Schema-free CSV access for files whose column meaning the caller decides
// (prediction files, report tables).
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;  // every row sized like header

  // Index of a named column; throws IngestionError when absent.
  std::size_t column(const std::string& name) const;
  bool has_column(const std::string& name) const;
};

CsvTable read_csv_table(const std::string& path);
RawDataset subset_rows(const RawDataset& data, const std::vector<std::size_t>& rows);

// ---- seen/unseen cluster partition ------------------------------------------

struct ClusterPartition {
  std::vector<std::size_t> seen_rows;
  std::vector<std::size_t> unseen_rows;
  std::vector<std::string> seen_clusters;
  std::vector<std::pair<std::string, std::size_t>> frequencies;  // descending
  double seen_fraction = 0.0;
};

// Top-k most frequent clusters become seen data. Frequency ties are broken
// by lexicographic cluster name.
ClusterPartition partition_seen_unseen(const RawDataset& data, std::size_t top_k);

// ---- k-fold splitting --------------------------------------------------------

struct FoldSplit {
  std::vector<std::size_t> train, val, test;
};

struct KFoldResult {
  std::vector<FoldSplit> folds;
  bool stratified = true;
  std::string warning;
};

// Stratified by target class for classification. Fold i is test, fold
// (i+1) mod k is validation, the rest train.
KFoldResult kfold_split(const RawDataset& data, std::size_t k, std::uint64_t seed);

// ---- probe injection ---------------------------------------------------------

struct ProbeSpec {
  int count = 3;
  double label_coeff = 0.5;   // a
  double cluster_coeff = 0.5; // b
  double noise_sd = 0.5;
  std::uint64_t seed = 0;
};

// Appends numeric columns probe_j = a*standardized_target + b*c_z + noise,
// where c_z is one N(0,1) draw per cluster. Bitwise deterministic per seed.
RawDataset inject_probes(const RawDataset& data, const ProbeSpec& spec);

// ---- encoding ----------------------------------------------------------------

struct EncoderColumn {
  std::string name;
  ColumnRole role = ColumnRole::numeric;
  bool probe = false;
  double mean = 0.0;
  double sd = 1.0;
  bool dropped = false;                  // zero variance on fit rows
  std::vector<std::string> categories;   // lexicographic over fit rows
};

struct EncoderMeta {
  TaskKind task = TaskKind::classification;
  std::string positive_label;
  std::vector<EncoderColumn> columns;
  std::vector<std::string> warnings;
};

struct SensitiveBlock {
  std::string name;
  std::vector<int> ids;  // -1 when the category was absent from fit rows
  std::vector<std::string> categories;
  std::size_t block_offset = 0;
  std::size_t block_width = 0;
};

struct FeatureGroup {
  std::string name;
  std::vector<std::size_t> cols;
  bool probe = false;
};

struct EncodedDataset {
  TaskKind task = TaskKind::classification;
  std::size_t n = 0;
  std::size_t d = 0;
  std::vector<double> X;  // row-major n*d
  std::vector<double> y;
  std::vector<int> z;     // -1 when the cluster was absent from fit rows
  std::vector<std::string> cluster_names;
  std::vector<SensitiveBlock> sensitive;
  std::vector<std::string> feature_names;
  std::vector<FeatureGroup> groups;
  std::size_t unseen_category_cells = 0;
  std::vector<std::string> warnings;
};

// Statistics and category maps come from fit_rows only; the transform is
// then applied to every row of `data`. Categories absent from fit rows
// encode as an all-zero block.
EncoderMeta fit_encoder(const RawDataset& data, const std::vector<std::size_t>& fit_rows);
EncodedDataset apply_encoder(const EncoderMeta& meta, const RawDataset& data);
EncodedDataset encode_and_standardize(const RawDataset& data,
                                      const std::vector<std::size_t>& fit_rows);

std::string encoder_meta_to_json(const EncoderMeta& meta);
EncoderMeta encoder_meta_from_json(const std::string& text);

// ---- synthetic data ----------------------------------------------------------

struct SynthConfig {
  std::size_t n = 1000;
  std::size_t d = 6;
  std::size_t clusters = 5;
  double cluster_sd = 1.0;  // SD of cluster intercepts and feature shifts
  double bias = 0.0;        // direct effect of the sensitive group on the target
  TaskKind task = TaskKind::classification;
  std::uint64_t seed = 0;
};

// Clustered Gaussian features, logistic (or linear) target with
// cluster-specific intercepts and a controllable sensitive-group effect.
RawDataset synth_clustered(const SynthConfig& config);

// Census-income-shaped dataset matching published marginal counts exactly
// (32,538 rows, 7,831 positive labels, 15 occupations). Cross-column
// dependence comes from a one-factor copula plus a latent income model.
RawDataset synth_adult(std::uint64_t seed);
DatasetSchema adult_schema();

// ---- bundle cache ------------------------------------------------------------

struct BundleCache {
  RawDataset data;
  ClusterPartition partition;
  std::string provenance;
};

void save_bundle_cache(const std::string& dir, const BundleCache& cache);
BundleCache load_bundle_cache(const std::string& dir);

// FNV-1a over schema, column bytes and the probe/seed provenance line.
std::string dataset_fingerprint(const RawDataset& data);

}  // namespace fairmedl
