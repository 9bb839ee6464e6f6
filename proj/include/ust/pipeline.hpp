#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ust/bpe.hpp"
#include "ust/codec.hpp"
#include "ust/matrix.hpp"
#include "ust/metrics.hpp"
#include "ust/toy.hpp"
#include "ust/transformer.hpp"
#include "ust/units.hpp"
#include "ust/wav.hpp"

namespace ust {

// ---------------------------------------------------------------------------
// Token layouts for the two non-text language models. Both put the global
// semantic unit IDs first so unit tokens coincide across models.

// Duration LM vocabulary: units, duration values 1..d_max, BOS/SEP/EOS.
struct DurationLayout {
  int units = 0;
  int d_max = 32;

  int vocab_size() const { return units + d_max + 3; }
  int duration_token(int d) const;  // d clamped to [1, d_max]
  int duration_of(int token) const; // value, or 0 when not a duration token
  int bos() const { return units + d_max; }
  int sep() const { return bos() + 1; }
  int eos() const { return bos() + 2; }
};

// U-SLM AR vocabulary: units, level-1 codec tokens, BOS/SEP/EOS.
struct AcousticLayout {
  int units = 0;
  int codebook = 0;

  int vocab_size() const { return units + codebook + 3; }
  int acoustic_token(int a) const;
  int acoustic_of(int token) const;  // codec index, or -1
  int bos() const { return units + codebook; }
  int sep() const { return bos() + 1; }
  int eos() const { return bos() + 2; }
};

// Sequence builders shared by training and inference; the inference prompt
// is the training sequence cut right after the separator that precedes the
// predicted span. Layout:
//   [BOS] src units [SEP] src durations [SEP] tgt units [SEP] tgt durations [EOS]
std::vector<int> duration_prompt(const DurationLayout& lay, const std::vector<int>& src_units,
                                 const std::vector<int>& src_durs,
                                 const std::vector<int>& tgt_units);
std::vector<int> duration_example(const DurationLayout& lay, const std::vector<int>& src_units,
                                  const std::vector<int>& src_durs,
                                  const std::vector<int>& tgt_units,
                                  const std::vector<int>& tgt_durs, int* predict_from);

//   [BOS] src frame units [SEP] tgt frame units [SEP] src level-1 tokens
//   (first prompt_cap at most) [SEP] tgt level-1 tokens [EOS]
std::vector<int> acoustic_prompt(const AcousticLayout& lay, const std::vector<int>& src_expanded,
                                 const std::vector<int>& tgt_expanded,
                                 const std::vector<int>& src_level1, int prompt_cap);
std::vector<int> acoustic_example(const AcousticLayout& lay, const std::vector<int>& src_expanded,
                                  const std::vector<int>& tgt_expanded,
                                  const std::vector<int>& src_level1,
                                  const std::vector<int>& tgt_level1, int prompt_cap,
                                  int* predict_from);

// Codec frames covering `samples` (the analysis window hops once per
// `hop` samples and the tail frame is kept).
int codec_frames(std::int64_t samples, int hop);

// Per-codec-frame semantic conditioning: frame i maps to the expanded unit
// whose span contains sample i*hop.
std::vector<int> frame_units_for_codec(const std::vector<int>& expanded_units,
                                       int samples_per_unit_frame, int hop, int frames);

// Residual-level fill with an acoustic prompt: the prompt rows keep their
// true tokens at every level while the target rows are predicted greedily,
// level by level, attending to the whole sequence.
CodecTokenGrid fill_codec_levels(const NarModel& nar, const std::vector<int>& prompt_units,
                                 const IntMat& prompt_tokens,
                                 const std::vector<int>& tgt_units,
                                 const std::vector<int>& tgt_level1);

// Strict inverse of unit_markup over one generated completion: optional
// trailing quote, then space-separated `<u:N>` with N inside
// [base, base + count). Adjacent duplicates are merged and counted.
// Errors carry the raw string.
std::vector<int> parse_unit_markup(const std::string& raw, int base, int count,
                                   int* merged_duplicates);

// ---------------------------------------------------------------------------
// Semantic codebook artifact: k-means centroids plus the feature settings
// they were fit under.
struct SemanticCodebook {
  Mat centroids;          // unit_k x n_bands
  double frame_ms = 20.0;
  int n_bands = 0;
};

void save_codebook(const std::string& path, const SemanticCodebook& cb);
SemanticCodebook load_codebook(const std::string& path);

// Quantize a waveform against the codebook; global IDs are base + cluster.
UnitSequence quantize_units(const Waveform& w, const SemanticCodebook& cb, int base,
                            int total_units);

// ---------------------------------------------------------------------------
// Manifest: one human-readable key-value file naming every artifact of a
// trained run plus the settings inference needs. Relative paths resolve
// against the manifest's own directory.
struct PipelineManifest {
  std::string base_dir;

  std::string codebook, vocab, rvq;                    // artifact paths
  std::string uxlm, duration, uslm_ar, uslm_nar;
  std::string src_lang = "Toyish", tgt_lang = "Glopish";
  int unit_k = 50;
  int src_unit_base = 0, tgt_unit_base = 50;
  double frame_ms = 20.0;
  int n_bands = 159;
  int sample_rate = 24000;
  int duration_max = 32;
  int acoustic_prompt_cap = 240;  // frames of source codec prompt kept
  int uxlm_max_new = 160;
  int top_k = 1;                  // translation decode; 1 = greedy
  double temperature = 1.0;
  std::uint64_t seed = 1;

  Report extra;  // every other recorded hyperparameter, preserved verbatim

  int total_units() const { return std::max(src_unit_base, tgt_unit_base) + unit_k; }
  std::string resolve(const std::string& path) const;

  void save(const std::string& path) const;
  static PipelineManifest load(const std::string& path);
};

// All artifacts loaded and cross-checked: every referenced file must exist
// and the dimensions/vocabulary sizes must agree with each other.
struct Pipeline {
  PipelineManifest manifest;
  SemanticCodebook codebook;
  Vocabulary vocab;
  RvqCodebooks rvq;
  TransformerLm uxlm;
  TransformerLm duration_lm;
  TransformerLm uslm_ar;
  NarModel uslm_nar;

  DurationLayout duration_layout() const;
  AcousticLayout acoustic_layout() const;
};

Pipeline load_pipeline(const std::string& manifest_path);

// ---------------------------------------------------------------------------
// Per-stage record of one translation. Stages appear in pipeline order;
// a failing stage leaves everything after it unset and its name plus the
// error message here, so a partial trace is still returned.
struct StageTiming {
  std::string stage;
  double seconds = 0.0;
};

struct TranslationTrace {
  std::optional<UnitSequence> src_units;          // global IDs
  std::optional<CodecTokenGrid> src_grid;
  std::optional<std::string> prompt;              // rendered translation prompt
  std::optional<std::string> uxlm_output;         // raw decoded completion
  std::optional<std::vector<int>> tgt_units;      // merged, global IDs
  std::optional<std::vector<int>> tgt_durations;
  std::optional<std::vector<int>> tgt_expanded;
  std::optional<CodecTokenGrid> tgt_grid;
  std::optional<Waveform> output;

  std::vector<StageTiming> timings;
  std::string failed_stage;  // empty when the run completed
  std::string error;
  int duration_replacements = 0;  // non-duration tokens coerced to 1
  int merged_duplicates = 0;      // adjacent duplicates in the U-XLM output
  int expected_frames = -1;       // codec frames implied by the duration plan

  bool ok() const { return failed_stage.empty(); }
  void dump(const std::string& dir) const;  // one file per stage
};

TranslationTrace translate_speech(const Waveform& w, const Pipeline& p);

// Identity "translation": the source units are resynthesized directly,
// isolating the unit-to-speech half. Durations come from the measured
// source run lengths unless durations_one bypasses them; expected_frames
// always reflects the measured durations, so the bypass shows up as a
// frame-count mismatch against the produced grid.
struct ResynthOptions {
  bool durations_one = false;
};

TranslationTrace resynthesize_trace(const Waveform& w, const Pipeline& p,
                                    const ResynthOptions& opt = {});
Waveform resynthesize(const Waveform& w, const Pipeline& p, const ResynthOptions& opt = {});

// ---------------------------------------------------------------------------
// Whole-run training on the synthetic language pair. Every stage writes one
// artifact into out_dir and is skipped when that artifact already exists,
// so an interrupted run resumes where it stopped. Divergence aborts with
// the stage name and step. The returned manifest is also written to
// out_dir/manifest.txt.
struct ToyRunConfig {
  std::string out_dir;
  int train_pairs = 2000;
  int test_pairs = 200;
  std::uint64_t seed = 1;
  bool unwritten = false;  // strip all text; train the translator on the
                           // speech-to-speech prompt only
  int jobs = 1;

  ToySpec toy;
  double frame_ms = 20.0;
  int n_bands = 159;
  int sample_rate = 24000;

  int codebook_records = 500;  // records pooled for the semantic k-means
  int kmeans_iters = 25;
  int bpe_merges = 96;
  int vocab_records = 300;
  // Records that contribute every renderable prompt task to translator
  // training; the rest contribute only the speech-to-speech task, keeping the
  // mixture from drowning out the one the pipeline runs.
  int multitask_records = 300;
  int rvq_records = 400;
  int rvq_kmeans_iters = 12;
  Eigen::Index rvq_max_points = 20000;
  int duration_max = 32;
  int acoustic_prompt_cap = 240;
  int uxlm_max_new = 160;
  int top_k = 1;
  double temperature = 1.0;

  RvqConfig rvq;
  LmConfig uxlm, duration, uslm_ar;  // vocab_size filled in by train_all
  NarConfig uslm_nar;
  TrainConfig uxlm_train, duration_train, ar_train, nar_train;

  ToyRunConfig();  // desk-scale defaults sized for the toy corpus
};

PipelineManifest train_all(const ToyRunConfig& cfg, std::ostream* log = nullptr);

// ---------------------------------------------------------------------------
// Toy-corpus evaluation: translation quality on the frozen test split plus
// the resynthesis and duration-ablation measurements.
struct ToyEvalResult {
  Report report;
  double uxlm_unit_bleu = 0.0;     // 0-100, translator output units vs reference
  double audio_unit_bleu = 0.0;    // units re-extracted from the output audio
  double duration_accuracy = 0.0;  // fraction matching the fixed rule
  double resynth_uer = 0.0;
  double mae_durations = 0.0;      // |expanded length - reference length|, mean
  double mae_durations_one = 0.0;  // same with every duration forced to 1
  int failures = 0;
};

ToyEvalResult evaluate_toy(const Pipeline& p, const std::vector<ToyRecord>& test, int jobs = 1);

}  // namespace ust
