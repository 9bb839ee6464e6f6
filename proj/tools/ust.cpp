// ust: verb-style command line over the unit speech translation library.
// Every verb validates its flags up front, writes its outputs to the paths
// given, and exits 0 on success, 1 on a stage error (one line on stderr),
// 2 on bad usage.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ust/bpe.hpp"
#include "ust/checkpoint.hpp"
#include "ust/codec.hpp"
#include "ust/features.hpp"
#include "ust/kmeans.hpp"
#include "ust/metrics.hpp"
#include "ust/pipeline.hpp"
#include "ust/prompts.hpp"
#include "ust/rng.hpp"
#include "ust/toy.hpp"
#include "ust/transformer.hpp"
#include "ust/units.hpp"
#include "ust/wav.hpp"

namespace {

using namespace ust;

Mat vstack(const std::vector<Mat>& parts) {
  Eigen::Index rows = 0, cols = 0;
  for (const Mat& p : parts) {
    rows += p.rows();
    cols = std::max(cols, p.cols());
  }
  Mat out(rows, cols);
  Eigen::Index at = 0;
  for (const Mat& p : parts) {
    out.middleRows(at, p.rows()) = p;
    at += p.rows();
  }
  return out;
}

// Audio pool shared by the fit verbs: synthesized toy records (both sides)
// first, then any explicit wav files, in flag order.
struct AudioPool {
  std::string corpus;
  int records = 0;  // 0 = all
  std::vector<std::string> wavs;
  int sample_rate = 24000;

  void add_flags(CLI::App* cmd) {
    cmd->add_option("--corpus", corpus, "toy record file; both sides are synthesized");
    cmd->add_option("--records", records, "cap on corpus records pooled (0 = all)");
    cmd->add_option("--wav", wavs, "wav file to pool (repeatable)");
    cmd->add_option("--sample-rate", sample_rate, "rate for synthesized corpus audio");
  }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    bool any = false;
    if (!corpus.empty()) {
      const std::vector<ToyRecord> recs = read_toy_records(corpus);
      size_t n = recs.size();
      if (records > 0) n = std::min(n, static_cast<size_t>(records));
      for (size_t i = 0; i < n; ++i) {
        fn(synth_toy_audio(recs[i].src_units, recs[i].src_durs, sample_rate));
        fn(synth_toy_audio(recs[i].tgt_units, recs[i].tgt_durs, sample_rate));
        any = true;
      }
    }
    for (const std::string& path : wavs) {
      fn(read_wav(path));
      any = true;
    }
    if (!any) throw std::invalid_argument("no input audio; pass --corpus and/or --wav");
  }
};

std::string default_id(const std::string& path) {
  return std::filesystem::path(path).stem().string();
}

// Unit markup is stripped before BPE merge learning so the reserved `<u:`
// byte sequence never enters a merged token.
std::string strip_unit_markup(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  size_t i = 0;
  while (i < s.size()) {
    if (s.compare(i, 3, "<u:") == 0) {
      const size_t close = s.find('>', i);
      if (close != std::string::npos) {
        i = close + 1;
        continue;
      }
    }
    out.push_back(s[i++]);
  }
  return out;
}

// A configuration small enough to train in seconds; used by tests and for
// trying the toolchain out.
void apply_smoke_preset(ToyRunConfig& cfg) {
  cfg.train_pairs = 60;
  cfg.test_pairs = 6;
  cfg.toy.unit_vocab = 12;
  cfg.toy.map_mul = 5;
  cfg.toy.map_add = 3;
  cfg.codebook_records = 60;
  cfg.kmeans_iters = 15;
  cfg.bpe_merges = 48;
  cfg.vocab_records = 60;
  cfg.rvq_records = 60;
  cfg.rvq_kmeans_iters = 8;
  cfg.rvq.quantizers = 4;
  cfg.rvq.codebook_size = 32;
  cfg.rvq.dim = 64;
  cfg.uxlm = LmConfig{1, 2, 32, 128, 192, 0, 0.0};
  cfg.duration = LmConfig{1, 2, 32, 128, 128, 0, 0.0};
  cfg.uslm_ar = LmConfig{1, 2, 32, 128, 224, 0, 0.0};
  cfg.uslm_nar.layers = 1;
  cfg.uslm_nar.heads = 2;
  cfg.uslm_nar.model_dim = 32;
  cfg.uslm_nar.ffn_dim = 128;
  cfg.uslm_nar.max_seq = 128;
  cfg.uxlm_train = TrainConfig{50, 4, 1e-3, 10, 1.0, 1, 201};
  cfg.duration_train = TrainConfig{30, 4, 1e-3, 10, 1.0, 1, 202};
  cfg.ar_train = TrainConfig{40, 4, 1e-3, 10, 1.0, 1, 203};
  cfg.nar_train = TrainConfig{30, 4, 1e-3, 10, 1.0, 1, 204};
}

void run_translation(const std::string& in, const std::string& manifest,
                     const std::string& out, std::string trace_dir, uint64_t seed,
                     bool seed_set, bool resynth_mode, bool ones) {
  Pipeline p = load_pipeline(manifest);
  if (seed_set) p.manifest.seed = seed;
  const Waveform w = read_wav(in);
  if (trace_dir.empty()) trace_dir = out + ".trace";

  TranslationTrace tr;
  if (resynth_mode) {
    ResynthOptions opts;
    opts.durations_one = ones;
    tr = resynthesize_trace(w, p, opts);
  } else {
    tr = translate_speech(w, p);
  }
  tr.dump(trace_dir);
  if (!tr.ok()) throw std::runtime_error(tr.failed_stage + ": " + tr.error);

  const Waveform result =
      tr.output ? *tr.output : Waveform{p.manifest.sample_rate, {}};
  write_wav(out, result);
  std::cout << "wrote " << out << " (" << result.samples.size() << " samples) and trace "
            << trace_dir << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unit-based speech-to-speech translation toolkit"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_version_flag("--version", "ust 0.1.0");

  // units-fit ---------------------------------------------------------------
  {
    auto* cmd = app.add_subcommand("units-fit", "fit the semantic unit codebook (k-means)");
    auto pool = std::make_shared<AudioPool>();
    auto k = std::make_shared<int>(50);
    auto iters = std::make_shared<int>(25);
    auto frame_ms = std::make_shared<double>(20.0);
    auto bands = std::make_shared<int>(159);
    auto seed = std::make_shared<uint64_t>(1);
    auto out = std::make_shared<std::string>();
    pool->add_flags(cmd);
    cmd->add_option("--k", *k, "number of unit clusters");
    cmd->add_option("--iters", *iters, "k-means iteration cap");
    cmd->add_option("--frame-ms", *frame_ms, "feature frame length");
    cmd->add_option("--bands", *bands, "filterbank bands per frame");
    cmd->add_option("--seed", *seed, "k-means++ seeding stream");
    cmd->add_option("--out", *out, "codebook checkpoint path")->required();
    cmd->callback([=]() {
      std::vector<Mat> parts;
      pool->for_each([&](const Waveform& w) {
        const FeatureSequence f = extract_features(w, *frame_ms, *bands);
        if (f.frames.rows() > 0) parts.push_back(f.frames);
      });
      const Mat frames = vstack(parts);
      CounterRng rng(*seed, 11);
      const KmeansResult km = kmeans_fit(frames, *k, *iters, rng);
      SemanticCodebook cb;
      cb.centroids = km.centroids;
      cb.frame_ms = *frame_ms;
      cb.n_bands = *bands;
      save_codebook(*out, cb);
      std::cout << "fit " << *k << " units on " << frames.rows() << " frames; inertia "
                << km.inertia_curve.front() << " -> " << km.inertia_curve.back() << "\n";
    });
  }

  // units-encode ------------------------------------------------------------
  {
    auto* cmd = app.add_subcommand("units-encode", "quantize a wav into semantic units");
    auto in = std::make_shared<std::string>();
    auto codebook = std::make_shared<std::string>();
    auto base = std::make_shared<int>(0);
    auto vocab = std::make_shared<int>(0);
    auto id = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    cmd->add_option("--in", *in, "input wav")->required();
    cmd->add_option("--codebook", *codebook, "semantic codebook checkpoint")->required();
    cmd->add_option("--base", *base, "global ID of this codebook's first unit");
    cmd->add_option("--vocab-size", *vocab, "global unit vocabulary (0 = base + k)");
    cmd->add_option("--id", *id, "utterance id (default: input file stem)");
    cmd->add_option("--out", *out, "unit file path")->required();
    cmd->callback([=]() {
      const SemanticCodebook cb = load_codebook(*codebook);
      const int total =
          *vocab > 0 ? *vocab : *base + static_cast<int>(cb.centroids.rows());
      const UnitSequence u = quantize_units(read_wav(*in), cb, *base, total);
      const std::string name = id->empty() ? default_id(*in) : *id;
      write_unit_file(*out, {{name, u}});
      std::cout << "wrote " << *out << ": " << u.merged_units.size() << " units over "
                << u.frame_units.size() << " frames\n";
    });
  }

  // codec-fit ---------------------------------------------------------------
  {
    auto* cmd = app.add_subcommand("codec-fit", "fit the residual vector quantizer");
    auto pool = std::make_shared<AudioPool>();
    auto cfg = std::make_shared<RvqConfig>();
    auto iters = std::make_shared<int>(12);
    auto max_points = std::make_shared<int>(20000);
    auto seed = std::make_shared<uint64_t>(1);
    auto out = std::make_shared<std::string>();
    pool->add_flags(cmd);
    cmd->add_option("--levels", cfg->quantizers, "residual quantizer levels");
    cmd->add_option("--codebook-size", cfg->codebook_size, "entries per level");
    cmd->add_option("--frame-rate", cfg->frame_rate, "codec frames per second");
    cmd->add_option("--dim", cfg->dim, "analysis coefficients per frame");
    cmd->add_option("--iters", *iters, "k-means iterations per level");
    cmd->add_option("--max-points", *max_points, "fit subsample cap");
    cmd->add_option("--seed", *seed, "fit subsampling/seeding stream");
    cmd->add_option("--out", *out, "codec checkpoint path")->required();
    cmd->callback([=]() {
      cfg->sample_rate = pool->sample_rate;
      std::vector<Mat> parts;
      pool->for_each([&](const Waveform& w) {
        const Mat emb = analyze(w, *cfg);
        if (emb.rows() > 0) parts.push_back(emb);
      });
      const Mat frames = vstack(parts);
      CounterRng rng(*seed, 12);
      const RvqCodebooks cbs = rvq_fit(frames, *cfg, rng, *iters, *max_points);
      save_rvq(*out, cbs);
      std::cout << "fit " << cfg->quantizers << "x" << cfg->codebook_size << " codec on "
                << frames.rows() << " frames; residual energy "
                << cbs.residual_energy.front() << " -> " << cbs.residual_energy.back()
                << "\n";
    });
  }

  // codec-encode ------------------------------------------------------------
  {
    auto* cmd = app.add_subcommand("codec-encode", "encode a wav into codec tokens");
    auto in = std::make_shared<std::string>();
    auto rvq = std::make_shared<std::string>();
    auto id = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    cmd->add_option("--in", *in, "input wav")->required();
    cmd->add_option("--rvq", *rvq, "codec checkpoint")->required();
    cmd->add_option("--id", *id, "utterance id (default: input file stem)");
    cmd->add_option("--out", *out, "token grid file path")->required();
    cmd->callback([=]() {
      const RvqCodebooks cbs = load_rvq(*rvq);
      const Waveform w = read_wav(*in);
      if (w.sample_rate != cbs.cfg.sample_rate) {
        throw std::invalid_argument("wav rate " + std::to_string(w.sample_rate) +
                                    " != codec rate " +
                                    std::to_string(cbs.cfg.sample_rate));
      }
      const CodecTokenGrid grid = rvq_encode(analyze(w, cbs.cfg), cbs);
      const std::string name = id->empty() ? default_id(*in) : *id;
      write_grid_file(*out, {{name, grid}});
      std::cout << "wrote " << *out << ": " << grid.frames() << " frames x "
                << grid.q_levels << " levels\n";
    });
  }

  // codec-decode ------------------------------------------------------------
  {
    auto* cmd = app.add_subcommand("codec-decode", "decode codec tokens back to a wav");
    auto in = std::make_shared<std::string>();
    auto rvq = std::make_shared<std::string>();
    auto id = std::make_shared<std::string>();
    auto levels = std::make_shared<int>(0);
    auto out = std::make_shared<std::string>();
    cmd->add_option("--in", *in, "token grid file")->required();
    cmd->add_option("--rvq", *rvq, "codec checkpoint")->required();
    cmd->add_option("--id", *id, "record to decode (default: first in file)");
    cmd->add_option("--levels", *levels, "levels to decode (0 = all)");
    cmd->add_option("--out", *out, "output wav path")->required();
    cmd->callback([=]() {
      const RvqCodebooks cbs = load_rvq(*rvq);
      const auto records = read_grid_file(*in);
      if (records.empty()) throw std::invalid_argument(*in + ": no records");
      const CodecTokenGrid* grid = &records.front().second;
      if (!id->empty()) {
        grid = nullptr;
        for (const auto& [name, g] : records) {
          if (name == *id) grid = &g;
        }
        if (!grid) throw std::invalid_argument(*in + ": no record named " + *id);
      }
      const int q = *levels > 0 ? *levels : cbs.cfg.quantizers;
      const Waveform w = synthesize(rvq_decode(*grid, cbs, q), cbs.cfg);
      write_wav(*out, w);
      std::cout << "wrote " << *out << " (" << w.samples.size() << " samples, " << q
                << " levels)\n";
    });
  }

  // toy-gen -----------------------------------------------------------------
  {
    auto* cmd = app.add_subcommand("toy-gen", "generate a synthetic parallel corpus");
    auto spec = std::make_shared<ToySpec>();
    auto pairs = std::make_shared<int>(1000);
    auto seed = std::make_shared<uint64_t>(7);
    auto prefix = std::make_shared<std::string>("utt");
    auto unwritten = std::make_shared<bool>(false);
    auto out = std::make_shared<std::string>();
    auto wav_dir = std::make_shared<std::string>();
    auto sample_rate = std::make_shared<int>(24000);
    cmd->add_option("--pairs", *pairs, "number of records");
    cmd->add_option("--seed", *seed, "corpus stream");
    cmd->add_option("--prefix", *prefix, "utterance id prefix");
    cmd->add_option("--vocab", spec->unit_vocab, "toy unit vocabulary");
    cmd->add_option("--mul", spec->map_mul, "unit bijection multiplier");
    cmd->add_option("--add", spec->map_add, "unit bijection offset");
    cmd->add_option("--min-len", spec->min_len, "shortest utterance, in units");
    cmd->add_option("--max-len", spec->max_len, "longest utterance, in units");
    cmd->add_option("--src-lang", spec->src_lang, "source language name");
    cmd->add_option("--tgt-lang", spec->tgt_lang, "target language name");
    cmd->add_flag("--unwritten", *unwritten, "drop the text fields");
    cmd->add_option("--wav-dir", *wav_dir, "also synthesize <id>.src.wav / <id>.tgt.wav here");
    cmd->add_option("--sample-rate", *sample_rate, "rate for --wav-dir audio");
    cmd->add_option("--out", *out, "record file path")->required();
    cmd->callback([=]() {
      std::vector<ToyRecord> recs = gen_toy_pairs(*spec, *pairs, *seed, *prefix);
      if (*unwritten) {
        for (ToyRecord& r : recs) {
          r.src_text.clear();
          r.tgt_text.clear();
        }
      }
      write_toy_records(*out, recs);
      if (!wav_dir->empty()) {
        std::filesystem::create_directories(*wav_dir);
        for (const ToyRecord& r : recs) {
          const std::filesystem::path base = std::filesystem::path(*wav_dir) / r.id;
          write_wav(base.string() + ".src.wav",
                    synth_toy_audio(r.src_units, r.src_durs, *sample_rate));
          write_wav(base.string() + ".tgt.wav",
                    synth_toy_audio(r.tgt_units, r.tgt_durs, *sample_rate));
        }
      }
      std::cout << "wrote " << *out << " (" << recs.size() << " records)\n";
    });
  }

  // corpus-build ------------------------------------------------------------
  {
    auto* cmd = app.add_subcommand(
        "corpus-build", "render multi-task prompt text from toy records and a codebook");
    auto corpus = std::make_shared<std::string>();
    auto codebook = std::make_shared<std::string>();
    auto records = std::make_shared<int>(0);
    auto sample_rate = std::make_shared<int>(24000);
    auto src_base = std::make_shared<int>(0);
    auto tgt_base = std::make_shared<int>(-1);
    auto src_lang = std::make_shared<std::string>("Toyish");
    auto tgt_lang = std::make_shared<std::string>("Glopish");
    auto out = std::make_shared<std::string>();
    cmd->add_option("--corpus", *corpus, "toy record file")->required();
    cmd->add_option("--codebook", *codebook, "semantic codebook checkpoint")->required();
    cmd->add_option("--records", *records, "cap on records rendered (0 = all)");
    cmd->add_option("--sample-rate", *sample_rate, "rate for synthesized audio");
    cmd->add_option("--src-base", *src_base, "global ID of the first source unit");
    cmd->add_option("--tgt-base", *tgt_base, "global ID of the first target unit (-1 = k)");
    cmd->add_option("--src-lang", *src_lang, "source language name");
    cmd->add_option("--tgt-lang", *tgt_lang, "target language name");
    cmd->add_option("--out", *out, "text file, one rendered example per line")->required();
    cmd->callback([=]() {
      const SemanticCodebook cb = load_codebook(*codebook);
      const int k = static_cast<int>(cb.centroids.rows());
      const int tb = *tgt_base >= 0 ? *tgt_base : k;
      const int total = std::max(*src_base, tb) + k;
      std::vector<ToyRecord> recs = read_toy_records(*corpus);
      if (*records > 0 && static_cast<size_t>(*records) < recs.size()) {
        recs.resize(static_cast<size_t>(*records));
      }
      std::ofstream os(*out, std::ios::binary);
      if (!os) throw std::runtime_error("cannot write " + *out);
      size_t lines = 0;
      for (const ToyRecord& r : recs) {
        const Waveform sw = synth_toy_audio(r.src_units, r.src_durs, *sample_rate);
        const Waveform tw = synth_toy_audio(r.tgt_units, r.tgt_durs, *sample_rate);
        ParallelRecord pr;
        pr.src_unit = quantize_units(sw, cb, *src_base, total).merged_units;
        pr.tgt_unit = quantize_units(tw, cb, tb, total).merged_units;
        if (!r.src_text.empty()) pr.src_text = r.src_text;
        if (!r.tgt_text.empty()) pr.tgt_text = r.tgt_text;
        pr.src_lang = *src_lang;
        pr.tgt_lang = *tgt_lang;
        for (PromptTask t : {PromptTask::AsrUnitToText, PromptTask::AsrTextToUnit,
                             PromptTask::Mt, PromptTask::S2st1, PromptTask::S2st2,
                             PromptTask::S2st3, PromptTask::S2st4, PromptTask::S2st5}) {
          try {
            os << render_prompt(t, pr) << "\n";
            ++lines;
          } catch (const std::invalid_argument&) {
            // task needs a field this record lacks
          }
        }
      }
      std::cout << "wrote " << *out << " (" << lines << " rendered examples)\n";
    });
  }

  // vocab-build -------------------------------------------------------------
  {
    auto* cmd = app.add_subcommand("vocab-build", "learn a byte-level BPE vocabulary");
    auto text = std::make_shared<std::string>();
    auto merges = std::make_shared<int>(96);
    auto units = std::make_shared<std::vector<int>>(std::vector<int>{50, 50});
    auto out = std::make_shared<std::string>();
    cmd->add_option("--text", *text, "training text, one example per line")->required();
    cmd->add_option("--merges", *merges, "byte-pair merges to learn");
    cmd->add_option("--units", *units, "unit block sizes appended after the merges");
    cmd->add_option("--out", *out, "vocabulary file path")->required();
    cmd->callback([=]() {
      std::ifstream is(*text, std::ios::binary);
      if (!is) throw std::runtime_error("cannot read " + *text);
      std::vector<std::string> lines;
      std::string line;
      while (std::getline(is, line)) lines.push_back(strip_unit_markup(line));
      const Vocabulary v = Vocabulary::build(lines, *units, *merges);
      v.save(*out);
      std::cout << "wrote " << *out << ": " << v.size() << " tokens (" << v.merge_count()
                << " merges, " << v.unit_count() << " units)\n";
    });
  }

  // lm-train ----------------------------------------------------------------
  {
    auto* cmd = app.add_subcommand(
        "lm-train", "train the full toy pipeline into a run directory (stages with "
                    "existing artifacts are skipped)");
    auto cfg = std::make_shared<ToyRunConfig>();
    auto preset = std::make_shared<std::string>("full");
    auto vocab = std::make_shared<int>(cfg->toy.unit_vocab);
    auto mul = std::make_shared<int>(cfg->toy.map_mul);
    auto add = std::make_shared<int>(cfg->toy.map_add);
    auto pairs = std::make_shared<int>(cfg->train_pairs);
    auto test_pairs = std::make_shared<int>(cfg->test_pairs);
    auto steps = std::make_shared<std::vector<int>>(std::vector<int>(4, 0));
    cmd->add_option("--dir", cfg->out_dir, "run directory for corpora and checkpoints")
        ->required();
    cmd->add_option("--preset", *preset, "base configuration")
        ->check(CLI::IsMember({"full", "smoke"}));
    auto* o_pairs = cmd->add_option("--pairs", *pairs, "training records");
    auto* o_test = cmd->add_option("--test-pairs", *test_pairs, "held-out records");
    cmd->add_option("--seed", cfg->seed, "run stream; corpora and inits derive from it");
    cmd->add_option("--jobs", cfg->jobs, "worker thread cap");
    cmd->add_flag("--unwritten", cfg->unwritten,
                  "drop all text; train the translator on the speech prompt only");
    auto* o_vocab = cmd->add_option("--vocab", *vocab, "toy unit vocabulary");
    auto* o_mul = cmd->add_option("--mul", *mul, "unit bijection multiplier");
    auto* o_add = cmd->add_option("--add", *add, "unit bijection offset");
    auto* o_ux = cmd->add_option("--uxlm-steps", (*steps)[0], "translator train steps");
    auto* o_du = cmd->add_option("--duration-steps", (*steps)[1], "duration train steps");
    auto* o_ar = cmd->add_option("--ar-steps", (*steps)[2], "acoustic AR train steps");
    auto* o_na = cmd->add_option("--nar-steps", (*steps)[3], "acoustic NAR train steps");
    cmd->callback([=]() {
      if (*preset == "smoke") apply_smoke_preset(*cfg);
      if (o_pairs->count()) cfg->train_pairs = *pairs;
      if (o_test->count()) cfg->test_pairs = *test_pairs;
      if (o_vocab->count()) cfg->toy.unit_vocab = *vocab;
      if (o_mul->count()) cfg->toy.map_mul = *mul;
      if (o_add->count()) cfg->toy.map_add = *add;
      if (o_ux->count()) cfg->uxlm_train.steps = (*steps)[0];
      if (o_du->count()) cfg->duration_train.steps = (*steps)[1];
      if (o_ar->count()) cfg->ar_train.steps = (*steps)[2];
      if (o_na->count()) cfg->nar_train.steps = (*steps)[3];
      cfg->uxlm_train.jobs = cfg->duration_train.jobs = cfg->jobs;
      cfg->ar_train.jobs = cfg->nar_train.jobs = cfg->jobs;
      train_all(*cfg, &std::cout);
      std::cout << "manifest at " << cfg->out_dir << "/manifest.txt\n";
    });
  }

  // lm-generate -------------------------------------------------------------
  {
    auto* cmd = app.add_subcommand("lm-generate", "complete a text prompt with a trained "
                                                  "translator checkpoint");
    auto ckpt = std::make_shared<std::string>();
    auto vocab = std::make_shared<std::string>();
    auto prompt = std::make_shared<std::string>();
    auto opt = std::make_shared<GenerateOptions>();
    opt->max_new = 160;
    cmd->add_option("--ckpt", *ckpt, "model checkpoint")->required();
    cmd->add_option("--vocab", *vocab, "vocabulary file")->required();
    cmd->add_option("--prompt", *prompt, "prompt text")->required();
    cmd->add_option("--max-new", opt->max_new, "token budget");
    cmd->add_option("--top-k", opt->top_k, "1 = greedy; k > 1 samples the top k");
    cmd->add_option("--temperature", opt->temperature, "pre-softmax logit scale");
    cmd->add_option("--seed", opt->seed, "sampling stream");
    cmd->callback([=]() {
      const Vocabulary v = Vocabulary::load(*vocab);
      const TransformerLm lm = TransformerLm::from_checkpoint(Checkpoint::load(*ckpt));
      if (lm.config().vocab_size != v.size()) {
        throw std::runtime_error("checkpoint vocabulary " +
                                 std::to_string(lm.config().vocab_size) +
                                 " != vocab file " + std::to_string(v.size()));
      }
      std::vector<int> tokens{v.bos()};
      const std::vector<int> body = v.encode(*prompt);
      tokens.insert(tokens.end(), body.begin(), body.end());
      GenerateOptions o = *opt;
      o.stop_tokens = {v.eos()};
      const GenerateResult res = lm.generate(tokens, o);
      std::cout << v.decode(res.tokens) << "\n";
      if (res.truncated) std::cerr << "note: generation hit the token budget\n";
    });
  }

  // s2st / resynth ----------------------------------------------------------
  for (const bool resynth_mode : {false, true}) {
    auto* cmd = resynth_mode
                    ? app.add_subcommand("resynth", "re-speak a wav through units, "
                                                    "durations, and the codec")
                    : app.add_subcommand("s2st", "translate speech to speech");
    auto in = std::make_shared<std::string>();
    auto manifest = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto trace = std::make_shared<std::string>();
    auto seed = std::make_shared<uint64_t>(0);
    auto ones = std::make_shared<bool>(false);
    cmd->add_option("--in", *in, "input wav")->required();
    cmd->add_option("--manifest", *manifest, "trained run manifest")->required();
    cmd->add_option("--out", *out, "output wav")->required();
    cmd->add_option("--trace", *trace, "trace directory (default: <out>.trace)");
    auto* o_seed = cmd->add_option("--seed", *seed, "override the manifest's seed");
    if (resynth_mode) {
      cmd->add_flag("--ones", *ones, "force every predicted duration to 1");
    }
    cmd->callback([=]() {
      run_translation(*in, *manifest, *out, *trace, *seed, o_seed->count() > 0,
                      resynth_mode, *ones);
    });
  }

  // eval --------------------------------------------------------------------
  {
    auto* cmd = app.add_subcommand("eval", "score hypothesis units against references");
    auto hyp = std::make_shared<std::string>();
    auto ref = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>("eval_report.txt");
    cmd->add_option("--hyp", *hyp, "hypothesis unit file")->required();
    cmd->add_option("--ref", *ref, "reference unit file")->required();
    cmd->add_option("--out", *out, "report file path");
    cmd->callback([=]() {
      const auto hyps = read_unit_file(*hyp);
      const auto refs = read_unit_file(*ref);
      if (hyps.size() != refs.size()) {
        throw std::invalid_argument(std::to_string(hyps.size()) + " hypotheses vs " +
                                    std::to_string(refs.size()) + " references");
      }
      if (hyps.empty()) throw std::invalid_argument("no records in " + *hyp);
      std::vector<std::vector<int>> h, r;
      double uer = 0.0;
      for (size_t i = 0; i < hyps.size(); ++i) {
        h.push_back(hyps[i].second.merged_units);
        r.push_back(refs[i].second.merged_units);
        uer += unit_error_rate(h.back(), r.back());
      }
      uer /= static_cast<double>(hyps.size());
      const BleuResult bleu = corpus_bleu(h, r);
      Report rep;
      rep.notes["hyp"] = *hyp;
      rep.notes["ref"] = *ref;
      rep.values["utterances"] = static_cast<double>(hyps.size());
      rep.values["unit_bleu"] = bleu.bleu;
      rep.values["brevity_penalty"] = bleu.brevity_penalty;
      rep.values["uer"] = uer;
      rep.save_kv(*out);
      std::cout << "unit BLEU " << bleu.bleu << ", UER " << uer << " over " << hyps.size()
                << " utterances; report " << *out << "\n";
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.get_name() << ": " << e.what() << "\n\n"
              << app.help() << std::flush;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
