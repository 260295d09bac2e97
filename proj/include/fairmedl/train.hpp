#pragma once

#include "fairmedl/dataset.hpp"
#include "fairmedl/fairness.hpp"
#include "fairmedl/model.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace fairmedl {

// How adversary gradients reach the main network:
//   reversal     one optimizer; adversary branches sit behind a sign-flipping
//                layer so their cross-entropy trains them while pushing the
//                main network the other way.
//   alternating  per batch, adversaries first minimize their own
//                cross-entropy on detached inputs, then the main network
//                steps on the composed objective with adversaries frozen.
enum class Schedule { alternating, reversal };

Schedule schedule_from_string(const std::string& name);
std::string to_string(Schedule schedule);

struct TrainPlan {
  Variant variant = Variant::base;
  LossWeights weights;
  double step_size = 1e-3;
  std::size_t batch_size = 256;
  std::size_t max_epochs = 200;
  std::size_t patience = 10;
  Schedule schedule = Schedule::alternating;
  std::size_t adversary_steps = 1;  // adversary updates per main update
  std::uint64_t seed = 0;

  void validate() const;
};

// Row-index views into one encoded bundle. train/val/test hold seen-cluster
// rows; unseen rows flow through the membership-weighted path.
struct SplitRows {
  std::vector<std::size_t> train, val, test, unseen;
};

struct PredictionRow {
  std::size_t id = 0;          // row index within the bundle
  std::string split;           // train | val | test | unseen
  std::string head;            // fe | me
  double score = 0.0;
  int hard = -1;               // thresholded class, -1 for regression
  double label = 0.0;
  std::vector<int> sensitive;  // category id per sensitive variable, -1 unknown
};

struct RunResult {
  Variant variant = Variant::base;
  double threshold = 0.5;
  std::vector<PredictionRow> predictions;
  // flat metric map, keys like "test/fe/auroc" or "unseen/me/tpr_sd/sex"
  std::map<std::string, double> metrics;
  std::vector<std::pair<std::string, double>> importance;  // sorted descending
  std::vector<double> train_curve, val_curve;
  std::size_t epochs_run = 0;
  bool early_stopped = false;
  std::string checkpoint;  // model document, suffices to recompute everything
};

// Plain adaptive-moment mini-batch optimizer.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<NamedParam> params, double step);
  void step();       // consume .grad of every parameter, then zero it
  void zero_grad();  // drop pending gradients without stepping

 private:
  std::vector<NamedParam> params_;
  std::vector<std::vector<double>> m_, v_;
  double step_ = 1e-3;
  std::size_t t_ = 0;
};

// Youden optimal threshold for the rule "positive when score >= t".
// Candidates are the lowest unique score plus the midpoints of consecutive
// unique scores; ties resolve to the smallest threshold.
double youden_threshold(const std::vector<double>& labels,
                        const std::vector<double>& scores);

// Tie-corrected rank AUROC.
double auroc(const std::vector<double>& labels, const std::vector<double>& scores);

struct CounterfactualScores {
  std::vector<std::size_t> rows;                   // bundle rows that were scored
  std::vector<double> factual;
  std::vector<std::vector<double>> alternatives;   // [category_count-1][rows]
};

// Re-scores every row after swapping its one-hot block for the named
// sensitive variable to each alternative category; all other features stay
// untouched. `forward` maps a feature matrix to per-row scores.
CounterfactualScores counterfactual_rescore(
    const EncodedDataset& data, const std::vector<std::size_t>& rows,
    const std::string& sensitive_name,
    const std::function<std::vector<double>(const Tensor&)>& forward);

// FE-head convenience wrapper.
CounterfactualScores counterfactual_rescore(const ModelStack& stack,
                                            const EncodedDataset& data,
                                            const std::vector<std::size_t>& rows,
                                            const std::string& sensitive_name);

// Mean absolute gradient of the FE prediction with respect to each input,
// aggregated over one-hot groups, sorted descending.
std::vector<std::pair<std::string, double>> feature_importance(
    const ModelStack& stack, const EncodedDataset& data,
    const std::vector<std::size_t>& rows);

// Performance + fairness metrics for FE and ME heads on val/test/unseen
// splits; fills predictions, metrics and importance of the result.
RunResult evaluate(const ModelStack& stack, const EncodedDataset& data,
                   const SplitRows& rows, double threshold);

// Mini-batch training with early stopping on validation task loss; restores
// the best-validation weights. Returns the full evaluation of that model.
RunResult train(ModelStack& stack, const EncodedDataset& data, const SplitRows& rows,
                const TrainPlan& plan);

// Convenience: build the stack for `plan` from `arch` and train it.
RunResult train_run(const ArchConfig& arch, const TrainPlan& plan,
                    const EncodedDataset& data, const SplitRows& rows);

// Train/val assignment of repeat r: rows.train + rows.val reshuffled into
// new sets of the same sizes, test and unseen copied unchanged.
SplitRows repeat_split(const SplitRows& rows, std::uint64_t plan_seed, std::size_t r);

// One resampled training: the repeat's reshuffled split plus per-repeat
// architecture and plan seeds. repeat_run(.., r) is exactly what
// repeated_runs executes for its r-th sample.
RunResult repeat_run(const ArchConfig& arch, const TrainPlan& plan,
                     const EncodedDataset& data, const SplitRows& rows,
                     std::size_t r);

// Trains n_repeats times with train/val reshuffled per repeat (test rows
// fixed), collecting each repeat's flat metric map.
std::vector<std::map<std::string, double>> repeated_runs(const ArchConfig& arch,
                                                         const TrainPlan& plan,
                                                         const EncodedDataset& data,
                                                         const SplitRows& rows,
                                                         std::size_t n_repeats,
                                                         std::size_t jobs = 1);

std::string run_result_to_json(const RunResult& result);
RunResult run_result_from_json(const std::string& text);
std::string predictions_to_csv(const RunResult& result,
                               const std::vector<std::string>& sensitive_names);

}  // namespace fairmedl
