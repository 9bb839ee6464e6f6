#include "ust/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <utility>

#include "ust/checkpoint.hpp"
#include "ust/features.hpp"
#include "ust/kmeans.hpp"
#include "ust/prompts.hpp"

namespace fs = std::filesystem;

namespace ust {

// ---------------------------------------------------------------------------
// Token layouts and sequence builders

int DurationLayout::duration_token(int d) const {
  d = std::clamp(d, 1, d_max);
  return units + d - 1;
}

int DurationLayout::duration_of(int token) const {
  if (token < units || token >= units + d_max) return 0;
  return token - units + 1;
}

int AcousticLayout::acoustic_token(int a) const {
  if (a < 0 || a >= codebook) {
    throw std::out_of_range("acoustic_token: index " + std::to_string(a) + " outside 0.." +
                            std::to_string(codebook - 1));
  }
  return units + a;
}

int AcousticLayout::acoustic_of(int token) const {
  if (token < units || token >= units + codebook) return -1;
  return token - units;
}

namespace {

void append_units(std::vector<int>& seq, const std::vector<int>& units, int unit_vocab,
                  const char* what) {
  for (int u : units) {
    if (u < 0 || u >= unit_vocab) {
      throw std::invalid_argument(std::string(what) + ": unit " + std::to_string(u) +
                                  " outside 0.." + std::to_string(unit_vocab - 1));
    }
    seq.push_back(u);
  }
}

}  // namespace

std::vector<int> duration_prompt(const DurationLayout& lay, const std::vector<int>& src_units,
                                 const std::vector<int>& src_durs,
                                 const std::vector<int>& tgt_units) {
  if (src_units.size() != src_durs.size()) {
    throw std::invalid_argument("duration_prompt: " + std::to_string(src_units.size()) +
                                " source units vs " + std::to_string(src_durs.size()) +
                                " durations");
  }
  if (tgt_units.empty()) throw std::invalid_argument("duration_prompt: no target units");
  std::vector<int> seq = {lay.bos()};
  append_units(seq, src_units, lay.units, "duration_prompt");
  seq.push_back(lay.sep());
  for (int d : src_durs) seq.push_back(lay.duration_token(d));
  seq.push_back(lay.sep());
  append_units(seq, tgt_units, lay.units, "duration_prompt");
  seq.push_back(lay.sep());
  return seq;
}

std::vector<int> duration_example(const DurationLayout& lay, const std::vector<int>& src_units,
                                  const std::vector<int>& src_durs,
                                  const std::vector<int>& tgt_units,
                                  const std::vector<int>& tgt_durs, int* predict_from) {
  if (tgt_units.size() != tgt_durs.size()) {
    throw std::invalid_argument("duration_example: " + std::to_string(tgt_units.size()) +
                                " target units vs " + std::to_string(tgt_durs.size()) +
                                " durations");
  }
  std::vector<int> seq = duration_prompt(lay, src_units, src_durs, tgt_units);
  if (predict_from) *predict_from = static_cast<int>(seq.size());
  for (int d : tgt_durs) seq.push_back(lay.duration_token(d));
  seq.push_back(lay.eos());
  return seq;
}

std::vector<int> acoustic_prompt(const AcousticLayout& lay, const std::vector<int>& src_expanded,
                                 const std::vector<int>& tgt_expanded,
                                 const std::vector<int>& src_level1, int prompt_cap) {
  if (prompt_cap < 1) throw std::invalid_argument("acoustic_prompt: prompt cap must be >= 1");
  std::vector<int> seq = {lay.bos()};
  append_units(seq, src_expanded, lay.units, "acoustic_prompt");
  seq.push_back(lay.sep());
  append_units(seq, tgt_expanded, lay.units, "acoustic_prompt");
  seq.push_back(lay.sep());
  const size_t keep = std::min(src_level1.size(), static_cast<size_t>(prompt_cap));
  for (size_t i = 0; i < keep; ++i) seq.push_back(lay.acoustic_token(src_level1[i]));
  seq.push_back(lay.sep());
  return seq;
}

std::vector<int> acoustic_example(const AcousticLayout& lay, const std::vector<int>& src_expanded,
                                  const std::vector<int>& tgt_expanded,
                                  const std::vector<int>& src_level1,
                                  const std::vector<int>& tgt_level1, int prompt_cap,
                                  int* predict_from) {
  std::vector<int> seq = acoustic_prompt(lay, src_expanded, tgt_expanded, src_level1, prompt_cap);
  if (predict_from) *predict_from = static_cast<int>(seq.size());
  for (int a : tgt_level1) seq.push_back(lay.acoustic_token(a));
  seq.push_back(lay.eos());
  return seq;
}

int codec_frames(std::int64_t samples, int hop) {
  if (hop < 1) throw std::invalid_argument("codec_frames: hop must be >= 1");
  if (samples < 0) throw std::invalid_argument("codec_frames: negative sample count");
  return static_cast<int>((samples + hop - 1) / hop);
}

std::vector<int> frame_units_for_codec(const std::vector<int>& expanded_units,
                                       int samples_per_unit_frame, int hop, int frames) {
  if (samples_per_unit_frame < 1) {
    throw std::invalid_argument("frame_units_for_codec: bad unit frame size");
  }
  if (frames > 0 && expanded_units.empty()) {
    throw std::invalid_argument("frame_units_for_codec: no units for " + std::to_string(frames) +
                                " frames");
  }
  std::vector<int> out(static_cast<size_t>(std::max(frames, 0)));
  for (int i = 0; i < frames; ++i) {
    const auto idx =
        static_cast<size_t>(static_cast<std::int64_t>(i) * hop / samples_per_unit_frame);
    out[static_cast<size_t>(i)] = expanded_units[std::min(idx, expanded_units.size() - 1)];
  }
  return out;
}

CodecTokenGrid fill_codec_levels(const NarModel& nar, const std::vector<int>& prompt_units,
                                 const IntMat& prompt_tokens, const std::vector<int>& tgt_units,
                                 const std::vector<int>& tgt_level1) {
  const int q = nar.config().q_levels;
  if (prompt_tokens.rows() != static_cast<Eigen::Index>(prompt_units.size())) {
    throw std::invalid_argument("fill_codec_levels: " + std::to_string(prompt_units.size()) +
                                " prompt units vs " + std::to_string(prompt_tokens.rows()) +
                                " prompt frames");
  }
  if (prompt_tokens.rows() > 0 && prompt_tokens.cols() != q) {
    throw std::invalid_argument("fill_codec_levels: prompt grid has " +
                                std::to_string(prompt_tokens.cols()) + " levels, model expects " +
                                std::to_string(q));
  }
  if (tgt_units.size() != tgt_level1.size()) {
    throw std::invalid_argument("fill_codec_levels: " + std::to_string(tgt_units.size()) +
                                " target units vs " + std::to_string(tgt_level1.size()) +
                                " level-1 tokens");
  }
  const Eigen::Index tp = prompt_tokens.rows();
  const Eigen::Index tt = static_cast<Eigen::Index>(tgt_level1.size());
  std::vector<int> units = prompt_units;
  units.insert(units.end(), tgt_units.begin(), tgt_units.end());

  IntMat full = IntMat::Zero(tp + tt, q);
  if (tp > 0) full.topRows(tp) = prompt_tokens;
  for (Eigen::Index i = 0; i < tt; ++i) full(tp + i, 0) = tgt_level1[static_cast<size_t>(i)];

  for (int level = 2; level <= q; ++level) {
    const IntMat lower = full.leftCols(level - 1);
    const Mat logits = nar.level_logits_plain(level, units, lower);
    // The prompt rows keep their true tokens; only the target block is filled.
    for (Eigen::Index i = 0; i < tt; ++i) {
      const Eigen::Index row = tp + i;
      int best = 0;
      for (Eigen::Index j = 1; j < logits.cols(); ++j) {
        if (logits(row, j) > logits(row, best)) best = static_cast<int>(j);
      }
      full(row, level - 1) = best;
    }
  }

  CodecTokenGrid grid;
  grid.q_levels = q;
  grid.tokens = full.bottomRows(tt);
  return grid;
}

std::vector<int> parse_unit_markup(const std::string& raw, int base, int count,
                                   int* merged_duplicates) {
  auto fail = [&raw](const std::string& why) {
    throw std::invalid_argument(why + "; raw output \"" + raw + "\"");
  };
  std::string body = raw;
  while (!body.empty() && (body.back() == ' ' || body.back() == '\n')) body.pop_back();
  if (!body.empty() && body.back() == '"') body.pop_back();

  std::vector<int> units;
  std::istringstream ss(body);
  std::string piece;
  while (ss >> piece) {
    if (piece.size() < 5 || piece.compare(0, 3, "<u:") != 0 || piece.back() != '>') {
      fail("not unit markup: '" + piece + "'");
    }
    const std::string digits = piece.substr(3, piece.size() - 4);
    if (digits.empty() || digits.size() > 9 ||
        digits.find_first_not_of("0123456789") != std::string::npos) {
      fail("not unit markup: '" + piece + "'");
    }
    const int id = std::stoi(digits);
    if (id < base || id >= base + count) {
      fail("unit " + digits + " outside the target block " + std::to_string(base) + ".." +
           std::to_string(base + count - 1));
    }
    if (!units.empty() && units.back() == id) {
      if (merged_duplicates) ++*merged_duplicates;
      continue;
    }
    units.push_back(id);
  }
  if (units.empty()) fail("no units");
  return units;
}

// ---------------------------------------------------------------------------
// Semantic codebook artifact

void save_codebook(const std::string& path, const SemanticCodebook& cb) {
  Checkpoint ck;
  ck.put("centroids", cb.centroids);
  ck.put_scalar("frame_ms", cb.frame_ms);
  ck.put_scalar("n_bands", cb.n_bands);
  ck.save(path);
}

SemanticCodebook load_codebook(const std::string& path) {
  const Checkpoint ck = Checkpoint::load(path);
  SemanticCodebook cb;
  cb.centroids = ck.get("centroids");
  cb.frame_ms = ck.get_scalar("frame_ms");
  cb.n_bands = static_cast<int>(ck.get_scalar("n_bands"));
  if (cb.centroids.cols() != cb.n_bands) {
    throw std::runtime_error("codebook " + path + ": " + std::to_string(cb.centroids.cols()) +
                             " columns vs n_bands " + std::to_string(cb.n_bands));
  }
  return cb;
}

UnitSequence quantize_units(const Waveform& w, const SemanticCodebook& cb, int base,
                            int total_units) {
  UnitSequence u;
  u.vocab_size = total_units;
  if (w.empty()) return u;
  const FeatureSequence f = extract_features(w, cb.frame_ms, cb.n_bands);
  const std::vector<int> clusters = nearest_centroid(f.frames, cb.centroids);
  u.frame_units.reserve(clusters.size());
  for (int c : clusters) u.frame_units.push_back(base + c);
  return merge_units(u);
}

// ---------------------------------------------------------------------------
// Manifest

std::string PipelineManifest::resolve(const std::string& path) const {
  if (path.empty() || fs::path(path).is_absolute() || base_dir.empty()) return path;
  return (fs::path(base_dir) / path).string();
}

void PipelineManifest::save(const std::string& path) const {
  Report r = extra;
  r.notes["codebook"] = codebook;
  r.notes["vocab"] = vocab;
  r.notes["rvq"] = rvq;
  r.notes["uxlm"] = uxlm;
  r.notes["duration"] = duration;
  r.notes["uslm_ar"] = uslm_ar;
  r.notes["uslm_nar"] = uslm_nar;
  r.notes["src_lang"] = src_lang;
  r.notes["tgt_lang"] = tgt_lang;
  r.values["unit_k"] = unit_k;
  r.values["src_unit_base"] = src_unit_base;
  r.values["tgt_unit_base"] = tgt_unit_base;
  r.values["frame_ms"] = frame_ms;
  r.values["n_bands"] = n_bands;
  r.values["sample_rate"] = sample_rate;
  r.values["duration_max"] = duration_max;
  r.values["acoustic_prompt_cap"] = acoustic_prompt_cap;
  r.values["uxlm_max_new"] = uxlm_max_new;
  r.values["top_k"] = top_k;
  r.values["temperature"] = temperature;
  r.values["seed"] = static_cast<double>(seed);
  r.save_kv(path);
}

PipelineManifest PipelineManifest::load(const std::string& path) {
  Report r = Report::load_kv(path);
  PipelineManifest m;
  m.base_dir = fs::path(path).parent_path().string();

  auto note = [&r](const char* key, std::string& into) {
    auto it = r.notes.find(key);
    if (it == r.notes.end()) return;
    into = it->second;
    r.notes.erase(it);
  };
  note("codebook", m.codebook);
  note("vocab", m.vocab);
  note("rvq", m.rvq);
  note("uxlm", m.uxlm);
  note("duration", m.duration);
  note("uslm_ar", m.uslm_ar);
  note("uslm_nar", m.uslm_nar);
  note("src_lang", m.src_lang);
  note("tgt_lang", m.tgt_lang);

  auto value = [&r](const char* key, auto& into) {
    auto it = r.values.find(key);
    if (it == r.values.end()) return;
    into = static_cast<std::decay_t<decltype(into)>>(it->second);
    r.values.erase(it);
  };
  value("unit_k", m.unit_k);
  value("src_unit_base", m.src_unit_base);
  value("tgt_unit_base", m.tgt_unit_base);
  value("frame_ms", m.frame_ms);
  value("n_bands", m.n_bands);
  value("sample_rate", m.sample_rate);
  value("duration_max", m.duration_max);
  value("acoustic_prompt_cap", m.acoustic_prompt_cap);
  value("uxlm_max_new", m.uxlm_max_new);
  value("top_k", m.top_k);
  value("temperature", m.temperature);
  value("seed", m.seed);
  m.extra = std::move(r);
  return m;
}

DurationLayout Pipeline::duration_layout() const {
  return DurationLayout{manifest.total_units(), manifest.duration_max};
}

AcousticLayout Pipeline::acoustic_layout() const {
  return AcousticLayout{manifest.total_units(), rvq.cfg.codebook_size};
}

namespace {

void manifest_check(bool ok, const std::string& what) {
  if (!ok) throw std::runtime_error("manifest: " + what);
}

int unit_frame_samples(int sample_rate, double frame_ms) {
  const double exact = sample_rate * frame_ms / 1000.0;
  const int spf = static_cast<int>(exact + 0.5);
  manifest_check(spf > 0 && std::abs(spf - exact) < 1e-9,
                 "frame_ms must cover a whole number of samples at " +
                     std::to_string(sample_rate) + " Hz");
  return spf;
}

}  // namespace

Pipeline load_pipeline(const std::string& manifest_path) {
  PipelineManifest m = PipelineManifest::load(manifest_path);

  const std::pair<const char*, const std::string*> artifacts[] = {
      {"codebook", &m.codebook}, {"vocab", &m.vocab},       {"rvq", &m.rvq},
      {"uxlm", &m.uxlm},         {"duration", &m.duration}, {"uslm_ar", &m.uslm_ar},
      {"uslm_nar", &m.uslm_nar}};
  for (const auto& [key, path] : artifacts) {
    manifest_check(!path->empty(), std::string(key) + " not set in " + manifest_path);
    manifest_check(fs::exists(m.resolve(*path)),
                   std::string(key) + " artifact missing: " + m.resolve(*path));
  }
  manifest_check(m.unit_k > 0, "unit_k must be positive");
  manifest_check(std::min(m.src_unit_base, m.tgt_unit_base) == 0 &&
                     std::abs(m.src_unit_base - m.tgt_unit_base) >= m.unit_k,
                 "unit blocks must start at 0 and not overlap");
  unit_frame_samples(m.sample_rate, m.frame_ms);

  SemanticCodebook cb = load_codebook(m.resolve(m.codebook));
  manifest_check(cb.centroids.rows() == m.unit_k,
                 "codebook has " + std::to_string(cb.centroids.rows()) + " centroids, expected " +
                     std::to_string(m.unit_k));
  manifest_check(cb.n_bands == m.n_bands && cb.frame_ms == m.frame_ms,
                 "codebook feature settings disagree with the manifest");

  Vocabulary vocab = Vocabulary::load(m.resolve(m.vocab));
  manifest_check(vocab.unit_count() == m.total_units(),
                 "vocabulary covers " + std::to_string(vocab.unit_count()) + " units, expected " +
                     std::to_string(m.total_units()));

  RvqCodebooks rvq = load_rvq(m.resolve(m.rvq));
  manifest_check(rvq.cfg.sample_rate == m.sample_rate,
                 "codec sample rate " + std::to_string(rvq.cfg.sample_rate) + ", manifest says " +
                     std::to_string(m.sample_rate));

  TransformerLm uxlm = TransformerLm::from_checkpoint(Checkpoint::load(m.resolve(m.uxlm)));
  manifest_check(uxlm.config().vocab_size == vocab.size(),
                 "translator vocabulary " + std::to_string(uxlm.config().vocab_size) +
                     ", tokenizer has " + std::to_string(vocab.size()));

  TransformerLm dur = TransformerLm::from_checkpoint(Checkpoint::load(m.resolve(m.duration)));
  const DurationLayout dl{m.total_units(), m.duration_max};
  manifest_check(dur.config().vocab_size == dl.vocab_size(),
                 "duration model vocabulary " + std::to_string(dur.config().vocab_size) +
                     ", layout needs " + std::to_string(dl.vocab_size()));

  TransformerLm ar = TransformerLm::from_checkpoint(Checkpoint::load(m.resolve(m.uslm_ar)));
  const AcousticLayout al{m.total_units(), rvq.cfg.codebook_size};
  manifest_check(ar.config().vocab_size == al.vocab_size(),
                 "acoustic model vocabulary " + std::to_string(ar.config().vocab_size) +
                     ", layout needs " + std::to_string(al.vocab_size()));

  NarModel nar = NarModel::from_checkpoint(Checkpoint::load(m.resolve(m.uslm_nar)));
  manifest_check(nar.config().unit_vocab == m.total_units(),
                 "residual model conditions on " + std::to_string(nar.config().unit_vocab) +
                     " units, expected " + std::to_string(m.total_units()));
  manifest_check(nar.config().q_levels == rvq.cfg.quantizers &&
                     nar.config().codebook_size == rvq.cfg.codebook_size,
                 "residual model grid does not match the codec");

  return Pipeline{std::move(m),    std::move(cb),  std::move(vocab), std::move(rvq),
                  std::move(uxlm), std::move(dur), std::move(ar),    std::move(nar)};
}

// ---------------------------------------------------------------------------
// Translation

namespace {

// Runs stages in order until one throws; the failing stage's name and
// message land in the trace and later stages are skipped.
class StageRunner {
 public:
  explicit StageRunner(TranslationTrace& tr) : tr_(tr) {}

  void operator()(const char* name, const std::function<void()>& body) {
    if (!tr_.failed_stage.empty()) return;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      body();
    } catch (const std::exception& e) {
      tr_.failed_stage = name;
      tr_.error = e.what();
    }
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    tr_.timings.push_back({name, dt.count()});
  }

 private:
  TranslationTrace& tr_;
};

std::vector<int> grid_level1(const CodecTokenGrid& g) {
  std::vector<int> out(static_cast<size_t>(g.frames()));
  for (Eigen::Index r = 0; r < g.frames(); ++r) out[static_cast<size_t>(r)] = g.tokens(r, 0);
  return out;
}

struct RunState {
  int spf = 0;  // samples per semantic unit frame
  int hop = 0;  // samples per codec frame
  FeatureSequence feats;
  std::vector<int> tgt_level1;
  Mat emb;
};

void front_stages(StageRunner& run, const Waveform& w, const Pipeline& p, TranslationTrace& tr,
                  RunState& st) {
  const PipelineManifest& m = p.manifest;
  run("features", [&] {
    if (w.sample_rate != m.sample_rate) {
      throw std::invalid_argument("input sample rate " + std::to_string(w.sample_rate) +
                                  ", pipeline expects " + std::to_string(m.sample_rate));
    }
    st.spf = unit_frame_samples(m.sample_rate, m.frame_ms);
    st.hop = p.rvq.cfg.hop();
    st.feats = extract_features(w, m.frame_ms, m.n_bands);
  });
  run("quantize", [&] {
    UnitSequence u;
    u.vocab_size = m.total_units();
    const std::vector<int> clusters = nearest_centroid(st.feats.frames, p.codebook.centroids);
    u.frame_units.reserve(clusters.size());
    for (int c : clusters) u.frame_units.push_back(m.src_unit_base + c);
    tr.src_units = std::move(u);
  });
  run("merge", [&] {
    if (tr.src_units->frame_units.empty()) throw std::runtime_error("no unit frames");
    tr.src_units = merge_units(*tr.src_units);
  });
  run("codec_encode", [&] { tr.src_grid = rvq_encode(analyze(w, p.rvq.cfg), p.rvq); });
}

void back_stages(StageRunner& run, const Pipeline& p, TranslationTrace& tr, RunState& st) {
  const PipelineManifest& m = p.manifest;
  run("expand", [&] {
    UnitSequence t;
    t.vocab_size = m.total_units();
    t.merged_units = *tr.tgt_units;
    t.durations = *tr.tgt_durations;
    tr.tgt_expanded = expand_units(t);
  });
  run("uslm_ar", [&] {
    const AcousticLayout al = p.acoustic_layout();
    const std::vector<int> src_l1 = grid_level1(*tr.src_grid);
    const std::vector<int> prompt = acoustic_prompt(al, tr.src_units->frame_units,
                                                    *tr.tgt_expanded, src_l1,
                                                    m.acoustic_prompt_cap);
    const int tt =
        codec_frames(static_cast<std::int64_t>(tr.tgt_expanded->size()) * st.spf, st.hop);
    if (static_cast<int>(prompt.size()) + tt > p.uslm_ar.config().max_seq) {
      throw std::runtime_error("prompt of " + std::to_string(prompt.size()) + " plus " +
                               std::to_string(tt) + " frames exceeds the acoustic context " +
                               std::to_string(p.uslm_ar.config().max_seq));
    }
    GenerateOptions o;
    o.max_new = tt;
    o.top_k = 1;
    o.seed = m.seed;
    o.allow_tokens.resize(static_cast<size_t>(al.codebook));
    for (int a = 0; a < al.codebook; ++a) {
      o.allow_tokens[static_cast<size_t>(a)] = al.acoustic_token(a);
    }
    const GenerateResult res = p.uslm_ar.generate(prompt, o);
    st.tgt_level1.resize(res.tokens.size());
    for (size_t i = 0; i < res.tokens.size(); ++i) {
      st.tgt_level1[i] = al.acoustic_of(res.tokens[i]);
    }
  });
  run("uslm_nar", [&] {
    const Eigen::Index pf = std::min<Eigen::Index>(tr.src_grid->frames(), m.acoustic_prompt_cap);
    const IntMat prompt_tokens = tr.src_grid->tokens.topRows(pf);
    const std::vector<int> prompt_units =
        frame_units_for_codec(tr.src_units->frame_units, st.spf, st.hop, static_cast<int>(pf));
    const std::vector<int> tgt_units_f = frame_units_for_codec(
        *tr.tgt_expanded, st.spf, st.hop, static_cast<int>(st.tgt_level1.size()));
    const Eigen::Index total = pf + static_cast<Eigen::Index>(st.tgt_level1.size());
    if (total > p.uslm_nar.config().max_seq) {
      throw std::runtime_error(std::to_string(total) + " frames exceed the residual context " +
                               std::to_string(p.uslm_nar.config().max_seq));
    }
    tr.tgt_grid =
        fill_codec_levels(p.uslm_nar, prompt_units, prompt_tokens, tgt_units_f, st.tgt_level1);
  });
  run("rvq_decode", [&] { st.emb = rvq_decode(*tr.tgt_grid, p.rvq, p.rvq.cfg.quantizers); });
  run("synthesize", [&] { tr.output = synthesize(st.emb, p.rvq.cfg); });
}

}  // namespace

namespace {

// All-zero input carries nothing to translate; short-circuit to an equally
// silent output instead of quantizing the log floor to an arbitrary unit.
bool silence_gate(const Waveform& w, TranslationTrace& tr) {
  if (rms(w) >= 1e-10) return false;
  tr.output = Waveform{w.sample_rate, std::vector<double>(w.samples.size(), 0.0)};
  return true;
}

}  // namespace

TranslationTrace translate_speech(const Waveform& w, const Pipeline& p) {
  TranslationTrace tr;
  if (w.empty()) return tr;
  if (silence_gate(w, tr)) return tr;

  const PipelineManifest& m = p.manifest;
  RunState st;
  StageRunner run(tr);
  front_stages(run, w, p, tr, st);

  run("prompt", [&] {
    ParallelRecord r;
    r.src_unit = tr.src_units->merged_units;
    r.src_lang = m.src_lang;
    r.tgt_lang = m.tgt_lang;
    tr.prompt = render_prompt_prefix(PromptTask::S2st1, r);
  });
  run("uxlm", [&] {
    std::vector<int> tokens = {p.vocab.bos()};
    const std::vector<int> body = p.vocab.encode(*tr.prompt);
    tokens.insert(tokens.end(), body.begin(), body.end());
    GenerateOptions o;
    o.max_new = m.uxlm_max_new;
    o.top_k = m.top_k;
    o.temperature = m.temperature;
    o.seed = m.seed;
    o.stop_tokens = {p.vocab.eos()};
    const GenerateResult res = p.uxlm.generate(tokens, o);
    tr.uxlm_output = p.vocab.decode(res.tokens);
  });
  run("parse", [&] {
    tr.tgt_units =
        parse_unit_markup(*tr.uxlm_output, m.tgt_unit_base, m.unit_k, &tr.merged_duplicates);
  });
  run("durations", [&] {
    const DurationLayout dl = p.duration_layout();
    const std::vector<int> prompt =
        duration_prompt(dl, tr.src_units->merged_units, tr.src_units->durations, *tr.tgt_units);
    GenerateOptions o;
    o.max_new = static_cast<int>(tr.tgt_units->size());
    o.top_k = 1;
    const GenerateResult res = p.duration_lm.generate(prompt, o);
    std::vector<int> durs(tr.tgt_units->size());
    std::int64_t total = 0;
    for (size_t i = 0; i < durs.size(); ++i) {
      const int tok = i < res.tokens.size() ? res.tokens[i] : -1;
      int d = dl.duration_of(tok);
      if (d == 0) {
        d = 1;
        ++tr.duration_replacements;
      }
      durs[i] = d;
      total += d;
    }
    tr.tgt_durations = std::move(durs);
    tr.expected_frames = codec_frames(total * st.spf, st.hop);
  });

  back_stages(run, p, tr, st);
  return tr;
}

TranslationTrace resynthesize_trace(const Waveform& w, const Pipeline& p,
                                    const ResynthOptions& opt) {
  TranslationTrace tr;
  if (w.empty()) return tr;
  if (silence_gate(w, tr)) return tr;

  RunState st;
  StageRunner run(tr);
  front_stages(run, w, p, tr, st);

  run("durations", [&] {
    tr.tgt_units = tr.src_units->merged_units;
    std::vector<int> durs = tr.src_units->durations;
    const std::int64_t total = std::accumulate(durs.begin(), durs.end(), std::int64_t{0});
    // Always the measured plan, so a durations_one run visibly mismatches
    // the frame count it actually produces.
    tr.expected_frames = codec_frames(total * st.spf, st.hop);
    if (opt.durations_one) std::fill(durs.begin(), durs.end(), 1);
    tr.tgt_durations = std::move(durs);
  });

  back_stages(run, p, tr, st);
  return tr;
}

Waveform resynthesize(const Waveform& w, const Pipeline& p, const ResynthOptions& opt) {
  TranslationTrace tr = resynthesize_trace(w, p, opt);
  if (!tr.ok()) throw std::runtime_error("resynthesize: " + tr.failed_stage + ": " + tr.error);
  if (!tr.output) return Waveform{p.manifest.sample_rate, {}};
  return std::move(*tr.output);
}

// ---------------------------------------------------------------------------
// Trace dump

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
}

}  // namespace

void TranslationTrace::dump(const std::string& dir) const {
  fs::create_directories(dir);
  auto at = [&dir](const char* name) { return (fs::path(dir) / name).string(); };

  if (src_units) write_unit_file(at("src_units.txt"), {{"input", *src_units}});
  if (src_grid) write_grid_file(at("src_grid.txt"), {{"input", *src_grid}});
  if (prompt) write_text(at("prompt.txt"), *prompt + "\n");
  if (uxlm_output) write_text(at("uxlm_output.txt"), *uxlm_output + "\n");
  if (tgt_units) {
    UnitSequence t;
    t.vocab_size = src_units ? src_units->vocab_size : 0;
    t.merged_units = *tgt_units;
    t.durations = tgt_durations ? *tgt_durations : std::vector<int>(tgt_units->size(), 1);
    if (tgt_expanded) t.frame_units = *tgt_expanded;
    write_unit_file(at("tgt_units.txt"), {{"output", t}});
  }
  if (tgt_grid) write_grid_file(at("tgt_grid.txt"), {{"output", *tgt_grid}});
  if (output) write_wav(at("output.wav"), *output);

  // No wall-clock values here: a repeated run must dump identical bytes.
  Report diag;
  diag.values["completed"] = ok() ? 1 : 0;
  diag.values["duration_replacements"] = duration_replacements;
  diag.values["merged_duplicates"] = merged_duplicates;
  diag.values["expected_frames"] = expected_frames;
  diag.values["produced_frames"] = tgt_grid ? static_cast<double>(tgt_grid->frames()) : -1;
  if (!failed_stage.empty()) {
    diag.notes["failed_stage"] = failed_stage;
    diag.notes["error"] = error;
  }
  std::string stages;
  for (const StageTiming& s : timings) {
    if (!stages.empty()) stages += ' ';
    stages += s.stage;
  }
  if (!stages.empty()) diag.notes["stages"] = stages;
  diag.save_kv(at("diagnostics.txt"));
}

// ---------------------------------------------------------------------------
// Whole-run training

ToyRunConfig::ToyRunConfig() {
  rvq.quantizers = 6;
  rvq.codebook_size = 64;
  rvq.frame_rate = 80;
  rvq.sample_rate = 24000;
  rvq.dim = 96;

  uxlm.layers = 2;
  uxlm.heads = 4;
  uxlm.model_dim = 96;
  uxlm.ffn_dim = 384;
  uxlm.max_seq = 192;

  duration.layers = 2;
  duration.heads = 2;
  duration.model_dim = 64;
  duration.ffn_dim = 256;
  duration.max_seq = 128;

  uslm_ar.layers = 2;
  uslm_ar.heads = 4;
  uslm_ar.model_dim = 96;
  uslm_ar.ffn_dim = 384;
  uslm_ar.max_seq = 224;

  uslm_nar.layers = 2;
  uslm_nar.heads = 4;
  uslm_nar.model_dim = 96;
  uslm_nar.ffn_dim = 384;
  uslm_nar.max_seq = 128;

  uxlm_train = TrainConfig{4500, 8, 1e-3, 100, 1.0, 1, 101, 0.05};
  duration_train = TrainConfig{400, 8, 1e-3, 20, 1.0, 1, 102, 0.1};
  ar_train = TrainConfig{1000, 8, 1e-3, 30, 1.0, 1, 103, 0.1};
  nar_train = TrainConfig{800, 8, 1e-3, 30, 1.0, 1, 104, 0.1};
}

namespace {

struct TokenExample {
  std::vector<int> tokens;
  int predict_from = 0;
};

TrainStats fit_lm(TransformerLm& model, const std::vector<TokenExample>& ex, TrainConfig tc) {
  auto build = [&model, &ex](Tape& t, const std::vector<Var>& pv, int idx, CounterRng& rng) {
    const TokenExample& e = ex[static_cast<size_t>(idx)];
    return model.masked_loss(t, pv, e.tokens, e.predict_from, &rng);
  };
  return train_model(model.named_params(), build, static_cast<int>(ex.size()), tc);
}

void write_curve(const std::string& path, const std::vector<double>& curve) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.precision(17);
  for (double v : curve) f << v << "\n";
}

void check_example_len(const char* what, const std::string& id, size_t len, int max_seq) {
  if (static_cast<int>(len) > max_seq) {
    throw std::runtime_error("example " + id + ": " + std::to_string(len) + " " + what +
                             " exceed the context " + std::to_string(max_seq));
  }
}

// Per-record measurements the language models train on: everything is
// re-derived from the audio, not copied from the generator.
struct PrepItem {
  UnitSequence src_u, tgt_u;
  CodecTokenGrid src_g, tgt_g;
};

void run_strided(int n, int jobs, const std::function<void(int)>& body) {
  jobs = std::clamp(jobs, 1, std::max(n, 1));
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::string> errors(static_cast<size_t>(jobs));
  for (int k = 0; k < jobs; ++k) {
    pool.emplace_back([&, k] {
      try {
        for (int i = k; i < n; i += jobs) body(i);
      } catch (const std::exception& e) {
        errors[static_cast<size_t>(k)] = e.what();
      }
    });
  }
  for (std::thread& t : pool) t.join();
  for (const std::string& e : errors) {
    if (!e.empty()) throw std::runtime_error(e);
  }
}

constexpr PromptTask kAllTasks[] = {PromptTask::AsrUnitToText, PromptTask::AsrTextToUnit,
                                    PromptTask::Mt,            PromptTask::S2st1,
                                    PromptTask::S2st2,         PromptTask::S2st3,
                                    PromptTask::S2st4,         PromptTask::S2st5};

}  // namespace

PipelineManifest train_all(const ToyRunConfig& cfg, std::ostream* log) {
  if (cfg.out_dir.empty()) throw std::invalid_argument("train_all: out_dir not set");
  if (cfg.train_pairs < 1 || cfg.test_pairs < 1) {
    throw std::invalid_argument("train_all: need at least one train and one test pair");
  }
  fs::create_directories(cfg.out_dir);

  auto at = [&cfg](const char* name) { return (fs::path(cfg.out_dir) / name).string(); };
  auto done = [&at](const char* name) { return fs::exists(at(name)); };
  auto say = [log](const std::string& line) {
    if (log) *log << line << "\n" << std::flush;
  };
  auto stage = [](const char* name, const std::function<void()>& body) {
    try {
      body();
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string("train_all: ") + name + ": " + e.what());
    }
  };

  const int total_units = 2 * cfg.toy.unit_vocab;
  const int src_base = 0;
  const int tgt_base = cfg.toy.unit_vocab;
  const int spf = unit_frame_samples(cfg.sample_rate, cfg.frame_ms);
  const int hop = cfg.rvq.hop();

  // --- corpus -----------------------------------------------------------
  stage("corpus", [&] {
    if (done("toy_train.txt") && done("toy_test.txt")) {
      say("corpus: already present, skipping");
      return;
    }
    std::vector<ToyRecord> train = gen_toy_pairs(cfg.toy, cfg.train_pairs, cfg.seed, "trn");
    std::vector<ToyRecord> test = gen_toy_pairs(cfg.toy, cfg.test_pairs, cfg.seed + 1, "tst");
    if (cfg.unwritten) {
      for (ToyRecord& r : train) {
        r.src_text.clear();
        r.tgt_text.clear();
      }
      for (ToyRecord& r : test) {
        r.src_text.clear();
        r.tgt_text.clear();
      }
    }
    write_toy_records(at("toy_train.txt"), train);
    write_toy_records(at("toy_test.txt"), test);
    say("corpus: " + std::to_string(train.size()) + " train / " + std::to_string(test.size()) +
        " test records");
  });
  const std::vector<ToyRecord> train = read_toy_records(at("toy_train.txt"));

  auto synth_side = [&cfg](const ToyRecord& r, bool src) {
    return src ? synth_toy_audio(r.src_units, r.src_durs, cfg.sample_rate)
               : synth_toy_audio(r.tgt_units, r.tgt_durs, cfg.sample_rate);
  };

  // --- semantic codebook --------------------------------------------------
  stage("codebook", [&] {
    if (done("codebook.ckpt")) {
      say("codebook: already present, skipping");
      return;
    }
    const int nrec = std::min<int>(cfg.codebook_records, static_cast<int>(train.size()));
    std::vector<Mat> chunks;
    Eigen::Index rows = 0;
    for (int i = 0; i < nrec; ++i) {
      for (bool src : {true, false}) {
        Mat f =
            extract_features(synth_side(train[static_cast<size_t>(i)], src), cfg.frame_ms,
                             cfg.n_bands)
                .frames;
        rows += f.rows();
        chunks.push_back(std::move(f));
      }
    }
    Mat pool(rows, cfg.n_bands);
    Eigen::Index row = 0;
    for (const Mat& c : chunks) {
      pool.middleRows(row, c.rows()) = c;
      row += c.rows();
    }
    CounterRng rng(cfg.seed, 11);
    const KmeansResult km = kmeans_fit(pool, cfg.toy.unit_vocab, cfg.kmeans_iters, rng);
    SemanticCodebook cb;
    cb.centroids = km.centroids;
    cb.frame_ms = cfg.frame_ms;
    cb.n_bands = cfg.n_bands;
    save_codebook(at("codebook.ckpt"), cb);
    say("codebook: " + std::to_string(pool.rows()) + " frames, inertia " +
        std::to_string(km.inertia_curve.front()) + " -> " +
        std::to_string(km.inertia_curve.back()));
  });
  const SemanticCodebook cb = load_codebook(at("codebook.ckpt"));

  // --- text/unit vocabulary -----------------------------------------------
  stage("vocab", [&] {
    if (done("vocab.txt")) {
      say("vocab: already present, skipping");
      return;
    }
    // Merges are learned over template and text bytes only: units enter as
    // a placeholder and are stripped, so no merge can straddle the
    // reserved `<u:` prefix and break markup tokenization later.
    const int nrec = std::min<int>(cfg.vocab_records, static_cast<int>(train.size()));
    std::vector<std::string> texts;
    const std::vector<int> placeholder = {0};
    for (int i = 0; i < nrec; ++i) {
      const ToyRecord& rec = train[static_cast<size_t>(i)];
      ParallelRecord r;
      r.src_unit = placeholder;
      r.tgt_unit = placeholder;
      if (!rec.src_text.empty()) r.src_text = rec.src_text;
      if (!rec.tgt_text.empty()) r.tgt_text = rec.tgt_text;
      r.src_lang = cfg.toy.src_lang;
      r.tgt_lang = cfg.toy.tgt_lang;
      for (PromptTask t : kAllTasks) {
        std::string s;
        try {
          s = render_prompt(t, r);
        } catch (const std::invalid_argument&) {
          continue;  // text-less record; task not renderable
        }
        for (size_t pos; (pos = s.find("<u:0>")) != std::string::npos;) s.erase(pos, 5);
        texts.push_back(std::move(s));
      }
    }
    const Vocabulary v =
        Vocabulary::build(texts, {cfg.toy.unit_vocab, cfg.toy.unit_vocab}, cfg.bpe_merges);
    v.save(at("vocab.txt"));
    say("vocab: " + std::to_string(texts.size()) + " texts, " + std::to_string(v.merge_count()) +
        " merges, size " + std::to_string(v.size()));
  });
  const Vocabulary vocab = Vocabulary::load(at("vocab.txt"));

  // --- acoustic codec -------------------------------------------------------
  stage("rvq", [&] {
    if (done("rvq.ckpt")) {
      say("rvq: already present, skipping");
      return;
    }
    const int nrec = std::min<int>(cfg.rvq_records, static_cast<int>(train.size()));
    std::vector<Mat> chunks;
    Eigen::Index rows = 0;
    for (int i = 0; i < nrec; ++i) {
      for (bool src : {true, false}) {
        Mat f = analyze(synth_side(train[static_cast<size_t>(i)], src), cfg.rvq);
        rows += f.rows();
        chunks.push_back(std::move(f));
      }
    }
    Mat pool(rows, cfg.rvq.dim);
    Eigen::Index row = 0;
    for (const Mat& c : chunks) {
      pool.middleRows(row, c.rows()) = c;
      row += c.rows();
    }
    CounterRng rng(cfg.seed, 12);
    const RvqCodebooks r = rvq_fit(pool, cfg.rvq, rng, cfg.rvq_kmeans_iters, cfg.rvq_max_points);
    save_rvq(at("rvq.ckpt"), r);
    std::ostringstream os;
    os << "rvq: " << pool.rows() << " frames, residual energy";
    for (double e : r.residual_energy) os << " " << e;
    say(os.str());
  });
  const RvqCodebooks rvq = load_rvq(at("rvq.ckpt"));

  // --- shared measurement pass for the language models ----------------------
  const bool need_lms = !done("uxlm.ckpt") || !done("duration.ckpt") || !done("uslm_ar.ckpt") ||
                        !done("uslm_nar.ckpt");
  std::vector<PrepItem> prep;
  if (need_lms) {
    stage("prep", [&] {
      prep.resize(train.size());
      run_strided(static_cast<int>(train.size()), cfg.jobs, [&](int i) {
        const ToyRecord& rec = train[static_cast<size_t>(i)];
        const Waveform sw = synth_side(rec, true);
        const Waveform tw = synth_side(rec, false);
        PrepItem& it = prep[static_cast<size_t>(i)];
        it.src_u = quantize_units(sw, cb, src_base, total_units);
        it.tgt_u = quantize_units(tw, cb, tgt_base, total_units);
        it.src_g = rvq_encode(analyze(sw, rvq.cfg), rvq);
        it.tgt_g = rvq_encode(analyze(tw, rvq.cfg), rvq);
      });
      say("prep: measured " + std::to_string(prep.size()) + " training pairs");
    });
  }

  // --- translator -----------------------------------------------------------
  stage("uxlm", [&] {
    if (done("uxlm.ckpt")) {
      say("uxlm: already present, skipping");
      return;
    }
    std::vector<TokenExample> ex;
    for (size_t i = 0; i < train.size(); ++i) {
      const ToyRecord& rec = train[i];
      ParallelRecord r;
      r.src_unit = prep[i].src_u.merged_units;
      r.tgt_unit = prep[i].tgt_u.merged_units;
      if (!rec.src_text.empty()) r.src_text = rec.src_text;
      if (!rec.tgt_text.empty()) r.tgt_text = rec.tgt_text;
      r.src_lang = cfg.toy.src_lang;
      r.tgt_lang = cfg.toy.tgt_lang;
      const bool all_tasks = static_cast<int>(i) < cfg.multitask_records;
      for (PromptTask t : kAllTasks) {
        if (!all_tasks && t != PromptTask::S2st1) continue;
        std::string prefix, full;
        try {
          prefix = render_prompt_prefix(t, r);
          full = render_prompt(t, r);
        } catch (const std::invalid_argument&) {
          continue;
        }
        TokenExample e;
        e.tokens.push_back(vocab.bos());
        const std::vector<int> head = vocab.encode(prefix);
        e.tokens.insert(e.tokens.end(), head.begin(), head.end());
        e.predict_from = static_cast<int>(e.tokens.size());
        const std::vector<int> tail = vocab.encode(full.substr(prefix.size()));
        e.tokens.insert(e.tokens.end(), tail.begin(), tail.end());
        e.tokens.push_back(vocab.eos());
        check_example_len("tokens", rec.id + " task " + task_name(t), e.tokens.size(),
                          cfg.uxlm.max_seq);
        ex.push_back(std::move(e));
      }
    }
    if (ex.empty()) throw std::runtime_error("no renderable prompt examples");
    LmConfig c = cfg.uxlm;
    c.vocab_size = vocab.size();
    CounterRng rng(cfg.seed, 21);
    TransformerLm model(c, rng);
    TrainConfig tc = cfg.uxlm_train;
    tc.jobs = cfg.jobs;
    const TrainStats stats = fit_lm(model, ex, tc);
    write_curve(at("loss_uxlm.txt"), stats.loss_curve);
    model.to_checkpoint().save(at("uxlm.ckpt"));
    say("uxlm: " + std::to_string(ex.size()) + " examples, final loss " +
        std::to_string(stats.final_loss));
  });

  // --- duration model ---------------------------------------------------------
  stage("duration", [&] {
    if (done("duration.ckpt")) {
      say("duration: already present, skipping");
      return;
    }
    const DurationLayout dl{total_units, cfg.duration_max};
    std::vector<TokenExample> ex(train.size());
    for (size_t i = 0; i < train.size(); ++i) {
      ex[i].tokens =
          duration_example(dl, prep[i].src_u.merged_units, prep[i].src_u.durations,
                           prep[i].tgt_u.merged_units, prep[i].tgt_u.durations,
                           &ex[i].predict_from);
      check_example_len("tokens", train[i].id, ex[i].tokens.size(), cfg.duration.max_seq);
    }
    LmConfig c = cfg.duration;
    c.vocab_size = dl.vocab_size();
    CounterRng rng(cfg.seed, 22);
    TransformerLm model(c, rng);
    TrainConfig tc = cfg.duration_train;
    tc.jobs = cfg.jobs;
    const TrainStats stats = fit_lm(model, ex, tc);
    write_curve(at("loss_duration.txt"), stats.loss_curve);
    model.to_checkpoint().save(at("duration.ckpt"));
    say("duration: " + std::to_string(ex.size()) + " examples, final loss " +
        std::to_string(stats.final_loss));
  });

  // --- acoustic model (level 1) ------------------------------------------------
  stage("uslm_ar", [&] {
    if (done("uslm_ar.ckpt")) {
      say("uslm_ar: already present, skipping");
      return;
    }
    const AcousticLayout al{total_units, cfg.rvq.codebook_size};
    std::vector<TokenExample> ex;
    ex.reserve(train.size() * 2);
    for (size_t i = 0; i < train.size(); ++i) {
      // Both directions, so resynthesis (either unit block in the target
      // slot) stays in distribution.
      const auto add = [&](const UnitSequence& pu, const CodecTokenGrid& pg,
                           const UnitSequence& tu, const CodecTokenGrid& tg) {
        TokenExample e;
        e.tokens = acoustic_example(al, pu.frame_units, tu.frame_units, grid_level1(pg),
                                    grid_level1(tg), cfg.acoustic_prompt_cap, &e.predict_from);
        check_example_len("tokens", train[i].id, e.tokens.size(), cfg.uslm_ar.max_seq);
        ex.push_back(std::move(e));
      };
      add(prep[i].src_u, prep[i].src_g, prep[i].tgt_u, prep[i].tgt_g);
      add(prep[i].tgt_u, prep[i].tgt_g, prep[i].src_u, prep[i].src_g);
    }
    LmConfig c = cfg.uslm_ar;
    c.vocab_size = al.vocab_size();
    CounterRng rng(cfg.seed, 23);
    TransformerLm model(c, rng);
    TrainConfig tc = cfg.ar_train;
    tc.jobs = cfg.jobs;
    const TrainStats stats = fit_lm(model, ex, tc);
    write_curve(at("loss_uslm_ar.txt"), stats.loss_curve);
    model.to_checkpoint().save(at("uslm_ar.ckpt"));
    say("uslm_ar: " + std::to_string(ex.size()) + " examples, final loss " +
        std::to_string(stats.final_loss));
  });

  // --- residual model (levels 2..Q) ----------------------------------------------
  stage("uslm_nar", [&] {
    if (done("uslm_nar.ckpt")) {
      say("uslm_nar: already present, skipping");
      return;
    }
    struct NarExample {
      std::vector<int> units;
      IntMat grid;
    };
    std::vector<NarExample> ex(train.size());
    for (size_t i = 0; i < train.size(); ++i) {
      const CodecTokenGrid& sg = prep[i].src_g;
      const CodecTokenGrid& tg = prep[i].tgt_g;
      ex[i].units = frame_units_for_codec(prep[i].src_u.frame_units, spf, hop,
                                          static_cast<int>(sg.frames()));
      const std::vector<int> tpart = frame_units_for_codec(prep[i].tgt_u.frame_units, spf, hop,
                                                           static_cast<int>(tg.frames()));
      ex[i].units.insert(ex[i].units.end(), tpart.begin(), tpart.end());
      ex[i].grid = IntMat(sg.frames() + tg.frames(), cfg.rvq.quantizers);
      ex[i].grid.topRows(sg.frames()) = sg.tokens;
      ex[i].grid.bottomRows(tg.frames()) = tg.tokens;
      check_example_len("frames", train[i].id, static_cast<size_t>(ex[i].grid.rows()),
                        cfg.uslm_nar.max_seq);
    }
    NarConfig nc = cfg.uslm_nar;
    nc.unit_vocab = total_units;
    nc.q_levels = cfg.rvq.quantizers;
    nc.codebook_size = cfg.rvq.codebook_size;
    CounterRng rng(cfg.seed, 24);
    NarModel model(nc, rng);
    TrainConfig tc = cfg.nar_train;
    tc.jobs = cfg.jobs;
    auto build = [&model, &ex, q = nc.q_levels](Tape& t, const std::vector<Var>& pv, int idx,
                                                CounterRng& item_rng) {
      const int level = 2 + static_cast<int>(item_rng.next_below(static_cast<uint64_t>(q - 1)));
      const NarExample& e = ex[static_cast<size_t>(idx)];
      const IntMat lower = e.grid.leftCols(level - 1);
      std::vector<int> targets(static_cast<size_t>(e.grid.rows()));
      for (Eigen::Index r = 0; r < e.grid.rows(); ++r) {
        targets[static_cast<size_t>(r)] = e.grid(r, level - 1);
      }
      return model.level_loss(t, pv, level, e.units, lower, targets, nullptr, &item_rng);
    };
    const TrainStats stats =
        train_model(model.named_params(), build, static_cast<int>(ex.size()), tc);
    write_curve(at("loss_uslm_nar.txt"), stats.loss_curve);
    model.to_checkpoint().save(at("uslm_nar.ckpt"));
    say("uslm_nar: " + std::to_string(ex.size()) + " examples, final loss " +
        std::to_string(stats.final_loss));
  });

  // --- manifest ---------------------------------------------------------------
  stage("manifest", [&] {
    if (done("manifest.txt")) {
      say("manifest: already present, skipping");
      return;
    }
    PipelineManifest m;
    m.codebook = "codebook.ckpt";
    m.vocab = "vocab.txt";
    m.rvq = "rvq.ckpt";
    m.uxlm = "uxlm.ckpt";
    m.duration = "duration.ckpt";
    m.uslm_ar = "uslm_ar.ckpt";
    m.uslm_nar = "uslm_nar.ckpt";
    m.src_lang = cfg.toy.src_lang;
    m.tgt_lang = cfg.toy.tgt_lang;
    m.unit_k = cfg.toy.unit_vocab;
    m.src_unit_base = src_base;
    m.tgt_unit_base = tgt_base;
    m.frame_ms = cfg.frame_ms;
    m.n_bands = cfg.n_bands;
    m.sample_rate = cfg.sample_rate;
    m.duration_max = cfg.duration_max;
    m.acoustic_prompt_cap = cfg.acoustic_prompt_cap;
    m.uxlm_max_new = cfg.uxlm_max_new;
    m.top_k = cfg.top_k;
    m.temperature = cfg.temperature;
    m.seed = cfg.seed;

    Report& x = m.extra;
    x.values["train_pairs"] = cfg.train_pairs;
    x.values["test_pairs"] = cfg.test_pairs;
    x.values["unwritten"] = cfg.unwritten ? 1 : 0;
    x.values["toy_map_mul"] = cfg.toy.map_mul;
    x.values["toy_map_add"] = cfg.toy.map_add;
    x.values["toy_min_len"] = cfg.toy.min_len;
    x.values["toy_max_len"] = cfg.toy.max_len;
    x.values["toy_unit_duration"] = cfg.toy.unit_duration;
    x.values["codebook_records"] = cfg.codebook_records;
    x.values["kmeans_iters"] = cfg.kmeans_iters;
    x.values["bpe_merges"] = cfg.bpe_merges;
    x.values["vocab_records"] = cfg.vocab_records;
    x.values["rvq_records"] = cfg.rvq_records;
    x.values["rvq_kmeans_iters"] = cfg.rvq_kmeans_iters;
    x.values["rvq_max_points"] = static_cast<double>(cfg.rvq_max_points);
    x.values["rvq_quantizers"] = cfg.rvq.quantizers;
    x.values["rvq_codebook_size"] = cfg.rvq.codebook_size;
    x.values["rvq_frame_rate"] = cfg.rvq.frame_rate;
    x.values["rvq_dim"] = cfg.rvq.dim;
    const auto put_lm = [&x](const std::string& p, const LmConfig& c) {
      x.values[p + "_layers"] = c.layers;
      x.values[p + "_heads"] = c.heads;
      x.values[p + "_model_dim"] = c.model_dim;
      x.values[p + "_ffn_dim"] = c.ffn_dim;
      x.values[p + "_max_seq"] = c.max_seq;
    };
    const auto put_train = [&x](const std::string& p, const TrainConfig& t) {
      x.values[p + "_steps"] = t.steps;
      x.values[p + "_batch"] = t.batch_size;
      x.values[p + "_lr"] = t.lr;
      x.values[p + "_warmup"] = t.warmup_steps;
      x.values[p + "_final_lr_frac"] = t.final_lr_frac;
      x.values[p + "_train_seed"] = static_cast<double>(t.seed);
    };
    x.values["multitask_records"] = cfg.multitask_records;
    put_lm("uxlm", cfg.uxlm);
    put_train("uxlm", cfg.uxlm_train);
    put_lm("duration", cfg.duration);
    put_train("duration", cfg.duration_train);
    put_lm("uslm_ar", cfg.uslm_ar);
    put_train("uslm_ar", cfg.ar_train);
    x.values["uslm_nar_layers"] = cfg.uslm_nar.layers;
    x.values["uslm_nar_heads"] = cfg.uslm_nar.heads;
    x.values["uslm_nar_model_dim"] = cfg.uslm_nar.model_dim;
    x.values["uslm_nar_ffn_dim"] = cfg.uslm_nar.ffn_dim;
    x.values["uslm_nar_max_seq"] = cfg.uslm_nar.max_seq;
    put_train("uslm_nar", cfg.nar_train);

    m.save(at("manifest.txt"));
    say("manifest: written");
  });

  return PipelineManifest::load(at("manifest.txt"));
}

// ---------------------------------------------------------------------------
// Evaluation

ToyEvalResult evaluate_toy(const Pipeline& p, const std::vector<ToyRecord>& test, int jobs) {
  if (test.empty()) throw std::invalid_argument("evaluate_toy: empty test set");
  const PipelineManifest& m = p.manifest;
  const int n = static_cast<int>(test.size());
  // The corpus generator applies one fixed per-unit duration; read it off
  // the first record so the accuracy check has no second source of truth.
  const int rule = test.front().tgt_durs.front();

  struct Slot {
    bool ok = false;
    std::string error;
    std::vector<int> hyp, ref, out;
    int hyp_len_ones = 0;  // expanded length with every duration forced to 1
    int expanded_len = 0;
    int ref_len = 0;
    int dur_correct = 0, dur_total = 0;
    int replacements = 0;
    bool resynth_ok = false;
    double uer = 0.0;
  };
  std::vector<Slot> slots(static_cast<size_t>(n));

  run_strided(n, jobs, [&](int i) {
    Slot& s = slots[static_cast<size_t>(i)];
    try {
      const ToyRecord& rec = test[static_cast<size_t>(i)];
      const Waveform src_w = synth_toy_audio(rec.src_units, rec.src_durs, m.sample_rate);
      const Waveform tgt_w = synth_toy_audio(rec.tgt_units, rec.tgt_durs, m.sample_rate);
      const UnitSequence ref_u =
          quantize_units(tgt_w, p.codebook, m.tgt_unit_base, m.total_units());
      s.ref = ref_u.merged_units;
      s.ref_len = static_cast<int>(ref_u.frame_units.size());

      const TranslationTrace tr = translate_speech(src_w, p);
      if (tr.ok()) {
        s.ok = true;
        s.hyp = *tr.tgt_units;
        s.hyp_len_ones = static_cast<int>(tr.tgt_units->size());
        s.expanded_len = static_cast<int>(tr.tgt_expanded->size());
        s.replacements = tr.duration_replacements;
        for (int d : *tr.tgt_durations) {
          ++s.dur_total;
          if (d == rule) ++s.dur_correct;
        }
        s.out = quantize_units(*tr.output, p.codebook, m.tgt_unit_base, m.total_units())
                    .merged_units;
      } else {
        s.error = tr.failed_stage + ": " + tr.error;
      }

      const TranslationTrace rt = resynthesize_trace(src_w, p);
      if (rt.ok()) {
        const std::vector<int> re =
            quantize_units(*rt.output, p.codebook, m.src_unit_base, m.total_units())
                .merged_units;
        s.uer = unit_error_rate(re, rt.src_units->merged_units);
        s.resynth_ok = true;
      }
    } catch (const std::exception& e) {
      s.ok = false;
      s.error = e.what();
    }
  });

  ToyEvalResult res;
  std::vector<std::vector<int>> hyps, refs, outs;
  hyps.reserve(slots.size());
  refs.reserve(slots.size());
  outs.reserve(slots.size());
  double mae_dur = 0.0, mae_ones = 0.0, uer_sum = 0.0;
  int ok_count = 0, uer_count = 0, dur_correct = 0, dur_total = 0, replacements = 0;
  for (const Slot& s : slots) {
    refs.push_back(s.ref);
    hyps.push_back(s.ok ? s.hyp : std::vector<int>{});
    outs.push_back(s.ok ? s.out : std::vector<int>{});
    if (s.ok) {
      ++ok_count;
      mae_dur += std::abs(s.expanded_len - s.ref_len);
      mae_ones += std::abs(s.hyp_len_ones - s.ref_len);
      dur_correct += s.dur_correct;
      dur_total += s.dur_total;
      replacements += s.replacements;
    } else {
      ++res.failures;
    }
    if (s.resynth_ok) {
      uer_sum += s.uer;
      ++uer_count;
    }
  }

  res.uxlm_unit_bleu = corpus_bleu(hyps, refs).bleu;
  res.audio_unit_bleu = corpus_bleu(outs, refs).bleu;
  res.duration_accuracy = dur_total > 0 ? static_cast<double>(dur_correct) / dur_total : 0.0;
  res.mae_durations = ok_count > 0 ? mae_dur / ok_count : 0.0;
  res.mae_durations_one = ok_count > 0 ? mae_ones / ok_count : 0.0;
  res.resynth_uer = uer_count > 0 ? uer_sum / uer_count : 1.0;

  Report& r = res.report;
  r.values["utterances"] = n;
  r.values["failures"] = res.failures;
  r.values["resynth_failures"] = n - uer_count;
  r.values["unit_bleu_uxlm"] = res.uxlm_unit_bleu;
  r.values["unit_bleu_audio"] = res.audio_unit_bleu;
  r.values["duration_accuracy"] = res.duration_accuracy;
  r.values["duration_replacements"] = replacements;
  r.values["resynth_uer"] = res.resynth_uer;
  r.values["mae_durations"] = res.mae_durations;
  r.values["mae_durations_one"] = res.mae_durations_one;
  r.notes["unit_bleu_uxlm"] = "translator output units vs reference units, corpus BLEU-4";
  r.notes["unit_bleu_audio"] = "units re-extracted from the synthesized audio vs reference";
  r.notes["duration_accuracy"] = "predicted durations matching the corpus rule";
  r.notes["resynth_uer"] = "unit error rate of resynthesized vs measured source units";
  r.notes["mae_durations"] = "mean abs frame-length error of the duration plan";
  r.notes["mae_durations_one"] = "same with every duration forced to one frame";
  return res;
}

}  // namespace ust
