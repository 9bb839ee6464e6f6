#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ust/checkpoint.hpp"
#include "ust/matrix.hpp"
#include "ust/rng.hpp"
#include "ust/tape.hpp"

namespace ust {

struct LmConfig {
  int layers = 4;
  int heads = 4;
  int model_dim = 256;
  int ffn_dim = 1024;
  int max_seq = 512;
  int vocab_size = 0;
  double dropout = 0.0;
};

struct GenerateOptions {
  int max_new = 256;
  int top_k = 1;                 // 1 = greedy argmax (ties -> lowest index)
  double temperature = 1.0;      // applied before the top-k softmax
  uint64_t seed = 0;             // sampling stream, used when top_k > 1
  std::vector<int> stop_tokens;  // generation ends when one is produced
  std::vector<int> allow_tokens; // non-empty: sample only from this set
  bool record_logits = false;
};

struct GenerateResult {
  std::vector<int> tokens;     // continuation, stop token excluded
  bool truncated = false;      // ran out of budget before a stop token
  std::vector<Mat> step_logits;  // one 1 x vocab row per step (incl. the stop step)
};

// Decoder-only causal transformer LM: learned token + position embeddings,
// pre-norm attention/GELU-MLP blocks, final layer norm, linear head.
// The tape forward is the training path; generate() runs the same
// arithmetic incrementally with per-layer key/value caches and produces
// logits bitwise equal to the full forward.
class TransformerLm {
 public:
  TransformerLm(const LmConfig& cfg, CounterRng& rng);

  const LmConfig& config() const { return cfg_; }

  std::vector<std::pair<std::string, Mat*>> named_params();
  std::vector<std::pair<std::string, const Mat*>> named_params() const;

  // Lays parameters onto the tape as leaves, in named_params order.
  std::vector<Var> bind(Tape& t) const;

  // Full-sequence causal forward; returns the T x vocab logits node.
  Var logits(Tape& t, const std::vector<Var>& pv, const std::vector<int>& tokens,
             CounterRng* dropout_rng = nullptr) const;

  // Next-token loss over tokens[predict_from..]: row i of the logits is
  // scored against tokens[i + 1] when i + 1 >= predict_from, and the
  // masked rows are averaged.
  Var masked_loss(Tape& t, const std::vector<Var>& pv, const std::vector<int>& tokens,
                  int predict_from, CounterRng* dropout_rng = nullptr) const;

  GenerateResult generate(const std::vector<int>& prompt, const GenerateOptions& opt) const;

  Checkpoint to_checkpoint() const;
  static TransformerLm from_checkpoint(const Checkpoint& ck);

 private:
  explicit TransformerLm(const LmConfig& cfg);  // uninitialised params

  LmConfig cfg_;
  std::vector<std::string> names_;
  std::vector<Mat> params_;
};

struct NarConfig {
  int layers = 4;
  int heads = 4;
  int model_dim = 256;
  int ffn_dim = 1024;
  int max_seq = 1024;
  int q_levels = 6;        // total residual levels in the token grid
  int codebook_size = 1024;
  int unit_vocab = 0;      // per-frame semantic conditioning ids
  double dropout = 0.0;
};

// Non-causal transformer that predicts residual acoustic levels 2..Q.
// The input at each frame is the sum of: the embeddings of that frame's
// tokens at every level below the one being predicted, a semantic unit
// embedding, a stage embedding for the predicted level, and a learned
// position embedding. Explicit position ids can be supplied; without
// them positions default to 0..T-1.
class NarModel {
 public:
  NarModel(const NarConfig& cfg, CounterRng& rng);

  const NarConfig& config() const { return cfg_; }

  std::vector<std::pair<std::string, Mat*>> named_params();
  std::vector<std::pair<std::string, const Mat*>> named_params() const;
  std::vector<Var> bind(Tape& t) const;

  // Logits (T x codebook) for `level` in 2..q_levels. `lower` is T x
  // (level - 1); column l holds the level-(l + 1) tokens.
  Var level_logits(Tape& t, const std::vector<Var>& pv, int level,
                   const std::vector<int>& unit_ids, const IntMat& lower,
                   const std::vector<int>* position_ids = nullptr,
                   CounterRng* dropout_rng = nullptr) const;

  // Mean cross entropy of level_logits against `targets` (all frames).
  Var level_loss(Tape& t, const std::vector<Var>& pv, int level,
                 const std::vector<int>& unit_ids, const IntMat& lower,
                 const std::vector<int>& targets,
                 const std::vector<int>* position_ids = nullptr,
                 CounterRng* dropout_rng = nullptr) const;

  // Inference path, bitwise equal to the tape forward.
  Mat level_logits_plain(int level, const std::vector<int>& unit_ids, const IntMat& lower,
                         const std::vector<int>* position_ids = nullptr) const;

  // Greedy fill: given level-1 tokens, predicts levels 2..Q one level at a
  // time, each conditioning on everything already filled. Returns T x Q.
  IntMat complete_grid(const std::vector<int>& unit_ids,
                       const std::vector<int>& level1) const;

  Checkpoint to_checkpoint() const;
  static NarModel from_checkpoint(const Checkpoint& ck);

 private:
  explicit NarModel(const NarConfig& cfg);

  NarConfig cfg_;
  std::vector<std::string> names_;
  std::vector<Mat> params_;
};

struct TrainConfig {
  int steps = 100;
  int batch_size = 8;
  double lr = 1e-3;
  int warmup_steps = 20;
  double grad_clip = 1.0;
  int jobs = 1;
  uint64_t seed = 1;
  // After warmup the rate decays linearly to lr * final_lr_frac at the last
  // step; 1.0 keeps it constant.
  double final_lr_frac = 1.0;
};

struct TrainStats {
  std::vector<double> loss_curve;  // batch-mean loss per optimizer step
  double final_loss = 0.0;
};

// Adam training over an arbitrary per-example loss. Each example gets its
// own tape; per-example gradients are reduced in example order, so the
// result is independent of cfg.jobs. Throws std::runtime_error naming the
// step if the loss stops being finite.
TrainStats train_model(
    const std::vector<std::pair<std::string, Mat*>>& params,
    const std::function<Var(Tape&, const std::vector<Var>&, int idx, CounterRng& rng)>&
        build_loss,
    int num_examples, const TrainConfig& cfg);

}  // namespace ust
