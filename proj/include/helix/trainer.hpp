#pragma once

#include <array>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "helix/config.hpp"
#include "helix/data.hpp"
#include "helix/helixformer.hpp"
#include "helix/model.hpp"
#include "helix/optim.hpp"

namespace helix {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  // Model.
  int image_size = 84;
  int width = 64;
  std::array<bool, 4> pool{true, true, true, true};
  HelixConfig helix;  // channels kept equal to width

  // Episodes.
  int n_way = 5, k_shot = 1, q_per = 15;

  // Stage 1: whole-classifier pretraining on base classes.
  double s1_lr = 0.1, s1_momentum = 0.9, s1_weight_decay = 5e-4;
  int s1_batch = 128;
  std::vector<int> s1_decay{85, 170};
  int s1_epochs = 200;

  // Stage 2: episodic finetuning.
  double s2_lr = 1e-3;
  std::vector<int> s2_decay{70, 110};
  int s2_epochs = 130;
  double s2_backbone_wd = 1e-3, s2_momentum = 0.9;
  int episodes_per_epoch = 100;
  int val_every = 5;
  int val_episodes = 100;

  int eval_episodes = 2000;
  std::uint64_t seed = 0;

  static TrainConfig from_config(const Config& c);
  Config to_config() const;
  void validate() const;
};

/// Piecewise-constant schedule: base * 0.1^(number of decay points <= epoch),
/// epochs 0-based.
double lr_at(double base, const std::vector<int>& decay, int epoch);

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

/// Backbone + cross-attention module + relation head bound to one ParamSet
/// (prefixes "backbone.", "helix.", "head."). Creates missing parameters when
/// an rng is supplied; binds to existing ones otherwise.
struct FewShotModel {
  FewShotModel() = default;
  FewShotModel(const TrainConfig& cfg, ParamSet& ps, Rng* rng);

  /// Normalized batched backbone features for dataset images.
  Tensor features(const std::vector<const Tensor*>& images, const std::array<double, 3>& mean,
                  const std::array<double, 3>& stdv, bool training) const;

  TrainConfig cfg;
  Conv4Backbone backbone;
  HelixFormer helix;
  RelationHead head;
};

struct EpisodeOutcome {
  Tensor loss;                   // mean cross-entropy over all query images
  Tensor logits;                 // (N*Q, N)
  std::vector<int> predictions;  // argmax per query
  double accuracy = 0;
};

/// Full episodic forward: prototypes, pairwise cross-attention, relation
/// scores, cross-entropy against episode-local labels.
EpisodeOutcome episode_forward(const FewShotModel& m, const std::vector<ClassSamples>& classes,
                               const Episode& ep, const std::array<double, 3>& mean,
                               const std::array<double, 3>& stdv, bool training);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
  std::uint32_t version = 1;
  Config config;  // TrainConfig snapshot
  std::array<double, 3> norm_mean{0, 0, 0}, norm_std{1, 1, 1};
  std::string stage;  // "pretrain" or "meta"
  int epoch = 0;      // completed epochs in this stage
  std::string rng_state;
  ParamSet params;
  bool has_optim = false;
  OptimizerState opt_backbone, opt_new;  // stage 2: SGD backbone, Adam helix+head
  double best_val_acc = -1.0;
  std::map<std::string, ArrX<double>> best_params;

  TrainConfig train_config() const { return TrainConfig::from_config(config); }
  /// Replaces live parameter values with the best-validation snapshot, if any.
  void restore_best();
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// FNV-1a over the raw bytes of all parameter values, in path order.
std::uint64_t param_checksum(const ParamSet& ps);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Stage 1: backbone + temporary fully-connected classifier over all base
/// classes; the classifier is dropped from the returned checkpoint.
Checkpoint pretrain_backbone(const TrainConfig& cfg, const DatasetSplit& ds,
                             std::ostream* log = nullptr);

/// Stage 2 from a stage-1 checkpoint. Runs to cfg.s2_epochs.
Checkpoint meta_train(const TrainConfig& cfg, const DatasetSplit& ds, const Checkpoint& pretrained,
                      std::ostream* log = nullptr);

/// Continues a stage-2 checkpoint in place until its configured epoch count;
/// resuming from a saved checkpoint matches the uninterrupted run bit-exactly.
void meta_train_run(Checkpoint& ckpt, const DatasetSplit& ds, std::ostream* log = nullptr);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
  int episodes = 0;
  std::vector<double> per_episode;
  double mean = 0;
  double ci95 = 0;  // 1.96 * sigma / sqrt(E)
};

/// Per-query N-way logits for one episode; injectable for oracle tests.
using EpisodeScorer =
    std::function<std::vector<std::vector<double>>(const std::vector<ClassSamples>&, const Episode&)>;

EvalReport evaluate_scorer(const std::vector<ClassSamples>& classes, int n_way, int k_shot,
                           int q_per, int episodes, Rng& rng, const EpisodeScorer& scorer);

EvalReport evaluate_model(const FewShotModel& m, const std::vector<ClassSamples>& classes,
                          const std::array<double, 3>& mean, const std::array<double, 3>& stdv,
                          int episodes, Rng& rng);

/// Eval-mode evaluation of a checkpoint's best (or latest) parameters.
EvalReport evaluate_checkpoint(Checkpoint& ckpt, const std::vector<ClassSamples>& classes,
                               int episodes, Rng& rng);

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

struct AblationCell {
  std::string variant = "sym";  // qs | sq | asym-sq | asym-qs | sym
  int heads = 2;
  std::string embed = "conv";  // conv | fc
  bool rep = true;
  int stack = 1;  // 0 is the plain relation-network baseline
};

struct AblationResult {
  AblationCell cell;
  std::uint64_t seed = 0;
  EvalReport report;
};

/// Trains and evaluates every (cell, seed) pair with identical data and seed
/// streams; stage-1 pretraining is shared across cells of the same seed.
std::vector<AblationResult> run_ablation(const TrainConfig& base, const DatasetSplit& ds,
                                         const std::vector<AblationCell>& cells,
                                         const std::vector<std::uint64_t>& seeds,
                                         std::ostream* log = nullptr);

/// Fixed column order: variant,heads,embed,rep,stack,mean,ci,episodes,seed.
std::string ablation_csv(const std::vector<AblationResult>& results);

}  // namespace helix
