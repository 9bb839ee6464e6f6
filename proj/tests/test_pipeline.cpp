#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ust/features.hpp"
#include "ust/kmeans.hpp"
#include "ust/pipeline.hpp"
#include "ust/prompts.hpp"
#include "ust/rng.hpp"

using namespace ust;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "missing ", path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::set<std::string> dir_listing(const std::string& dir) {
  std::set<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) names.insert(e.path().filename().string());
  return names;
}

void check_dirs_equal(const std::string& a, const std::string& b) {
  const auto la = dir_listing(a), lb = dir_listing(b);
  CHECK(la == lb);
  for (const std::string& name : la) {
    CHECK_MESSAGE(slurp(a + "/" + name) == slurp(b + "/" + name), "file ", name, " differs");
  }
}

// Scaled-down corpus and models: enough to exercise every stage of the
// run, small enough to train in seconds.
ToyRunConfig smoke_config(const std::string& dir, bool unwritten) {
  ToyRunConfig cfg;
  cfg.out_dir = dir;
  cfg.train_pairs = 60;
  cfg.test_pairs = 6;
  cfg.seed = 5;
  cfg.unwritten = unwritten;
  cfg.jobs = 2;

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
  return cfg;
}

}  // namespace

TEST_CASE("duration layout blocks are contiguous and invertible") {
  const DurationLayout lay{100, 32};
  CHECK(lay.vocab_size() == 135);
  CHECK(lay.duration_token(1) == 100);
  CHECK(lay.duration_token(32) == 131);
  CHECK(lay.duration_token(0) == 100);    // clamped up
  CHECK(lay.duration_token(999) == 131);  // clamped down
  CHECK(lay.bos() == 132);
  CHECK(lay.sep() == 133);
  CHECK(lay.eos() == 134);
  for (int d = 1; d <= 32; ++d) CHECK(lay.duration_of(lay.duration_token(d)) == d);
  CHECK(lay.duration_of(99) == 0);         // unit token
  CHECK(lay.duration_of(lay.bos()) == 0);  // special
  CHECK(lay.duration_of(-1) == 0);
}

TEST_CASE("acoustic layout blocks are contiguous and invertible") {
  const AcousticLayout lay{100, 64};
  CHECK(lay.vocab_size() == 167);
  CHECK(lay.acoustic_token(0) == 100);
  CHECK(lay.acoustic_token(63) == 163);
  CHECK(lay.bos() == 164);
  CHECK(lay.sep() == 165);
  CHECK(lay.eos() == 166);
  for (int a = 0; a < 64; ++a) CHECK(lay.acoustic_of(lay.acoustic_token(a)) == a);
  CHECK(lay.acoustic_of(42) == -1);
  CHECK(lay.acoustic_of(lay.sep()) == -1);
  CHECK_THROWS_AS(lay.acoustic_token(64), std::out_of_range);
  CHECK_THROWS_AS(lay.acoustic_token(-1), std::out_of_range);
}

TEST_CASE("duration sequences follow the documented layout") {
  const DurationLayout lay{6, 4};  // bos 10, sep 11, eos 12
  const std::vector<int> prompt = duration_prompt(lay, {1, 3}, {2, 1}, {5, 2});
  CHECK(prompt == std::vector<int>{10, 1, 3, 11, 7, 6, 11, 5, 2, 11});

  int pf = -1;
  const std::vector<int> ex = duration_example(lay, {1, 3}, {2, 1}, {5, 2}, {4, 1}, &pf);
  CHECK(pf == static_cast<int>(prompt.size()));
  std::vector<int> want = prompt;
  want.push_back(lay.duration_token(4));
  want.push_back(lay.duration_token(1));
  want.push_back(lay.eos());
  CHECK(ex == want);

  CHECK_THROWS_AS(duration_prompt(lay, {1, 3}, {2}, {5}), std::invalid_argument);
  CHECK_THROWS_AS(duration_prompt(lay, {1}, {2}, {}), std::invalid_argument);
  CHECK_THROWS_AS(duration_prompt(lay, {6}, {2}, {5}), std::invalid_argument);  // unit too big
  CHECK_THROWS_AS(duration_example(lay, {1}, {2}, {5, 2}, {4}, nullptr), std::invalid_argument);
}

TEST_CASE("acoustic sequences cap the source acoustic prompt") {
  const AcousticLayout lay{6, 4};  // acoustic 6..9, bos 10, sep 11, eos 12
  const std::vector<int> prompt = acoustic_prompt(lay, {0, 0, 1}, {2, 2}, {0, 1, 2, 3, 0}, 3);
  CHECK(prompt == std::vector<int>{10, 0, 0, 1, 11, 2, 2, 11, 6, 7, 8, 11});

  int pf = -1;
  const std::vector<int> ex = acoustic_example(lay, {0, 0, 1}, {2, 2}, {0, 1, 2, 3, 0}, {3, 1},
                                               3, &pf);
  CHECK(pf == static_cast<int>(prompt.size()));
  std::vector<int> want = prompt;
  want.push_back(9);
  want.push_back(7);
  want.push_back(lay.eos());
  CHECK(ex == want);

  // A generous cap keeps every level-1 token.
  CHECK(acoustic_prompt(lay, {0}, {1}, {2, 3}, 100).size() == 1 + 1 + 1 + 1 + 1 + 2 + 1);
  CHECK_THROWS_AS(acoustic_prompt(lay, {0}, {1}, {}, 0), std::invalid_argument);
  CHECK_THROWS_AS(acoustic_prompt(lay, {0}, {1}, {4}, 8), std::out_of_range);  // codec idx
}

TEST_CASE("codec frame counts cover the tail") {
  CHECK(codec_frames(0, 300) == 0);
  CHECK(codec_frames(1, 300) == 1);
  CHECK(codec_frames(300, 300) == 1);
  CHECK(codec_frames(301, 300) == 2);
  CHECK(codec_frames(960, 300) == 4);  // one toy unit: 3.2 hops
  CHECK_THROWS_AS(codec_frames(10, 0), std::invalid_argument);
  CHECK_THROWS_AS(codec_frames(-1, 300), std::invalid_argument);
}

TEST_CASE("per-codec-frame units track the sample position") {
  // Frame i starts at sample 300*i; unit frames are 480 samples.
  const std::vector<int> got = frame_units_for_codec({7, 7, 8}, 480, 300, 5);
  CHECK(got == std::vector<int>{7, 7, 7, 7, 8});
  // Indices past the last unit clamp to it (tail frame of the codec).
  const std::vector<int> tail = frame_units_for_codec({4}, 480, 300, 3);
  CHECK(tail == std::vector<int>{4, 4, 4});
  CHECK(frame_units_for_codec({}, 480, 300, 0).empty());
  CHECK_THROWS_AS(frame_units_for_codec({}, 480, 300, 2), std::invalid_argument);
}

TEST_CASE("unit markup parsing is strict and keeps the raw output") {
  int dup = 0;
  CHECK(parse_unit_markup("<u:52> <u:53> \"", 50, 10, &dup) == std::vector<int>{52, 53});
  CHECK(dup == 0);
  CHECK(parse_unit_markup("<u:52> <u:52> <u:53> <u:53> <u:52> \"\n", 50, 10, &dup) ==
        std::vector<int>{52, 53, 52});
  CHECK(dup == 2);
  // No trailing quote is fine too (truncated generations).
  CHECK(parse_unit_markup("<u:59>", 50, 10, nullptr) == std::vector<int>{59});

  auto raw_kept = [](const std::string& raw, const char* needle) {
    try {
      parse_unit_markup(raw, 50, 10, nullptr);
      return false;
    } catch (const std::invalid_argument& e) {
      const std::string msg = e.what();
      return msg.find(raw.substr(0, 8)) != std::string::npos &&
             msg.find(needle) != std::string::npos;
    }
  };
  CHECK(raw_kept("hello there", "not unit markup"));
  CHECK(raw_kept("<u:49> <u:52>", "outside the target block"));
  CHECK(raw_kept("<u:60> bad", "outside the target block"));
  CHECK(raw_kept("<u:> <u:52>", "not unit markup"));
  CHECK_THROWS_AS(parse_unit_markup("  \"", 50, 10, nullptr), std::invalid_argument);
}

TEST_CASE("semantic codebook round-trips and quantizes toy audio") {
  const Waveform w = synth_toy_audio({0, 1, 0}, {2, 2, 2}, 24000);
  const FeatureSequence f = extract_features(w, 20.0, 159);
  REQUIRE(f.frames.rows() == 6);

  CounterRng rng(3);
  const KmeansResult km = kmeans_fit(f.frames, 2, 10, rng);
  SemanticCodebook cb;
  cb.centroids = km.centroids;
  cb.frame_ms = 20.0;
  cb.n_bands = 159;

  const std::string path = "codebook_roundtrip.ckpt";
  save_codebook(path, cb);
  const SemanticCodebook back = load_codebook(path);
  CHECK(back.frame_ms == 20.0);
  CHECK(back.n_bands == 159);
  REQUIRE(back.centroids.rows() == 2);
  CHECK(back.centroids == cb.centroids);
  std::remove(path.c_str());

  const UnitSequence u = quantize_units(w, cb, 7, 20);
  CHECK(u.vocab_size == 20);
  REQUIRE(u.frame_units.size() == 6);
  REQUIRE(u.merged_units.size() == 3);
  CHECK(u.durations == std::vector<int>{2, 2, 2});
  CHECK(u.merged_units[0] == u.merged_units[2]);     // same tone
  CHECK(u.merged_units[0] != u.merged_units[1]);
  for (int g : u.merged_units) CHECK((g == 7 || g == 8));

  CHECK(quantize_units(Waveform{24000, {}}, cb, 7, 20).frame_units.empty());
}

TEST_CASE("manifest round-trips every setting and preserves unknown keys") {
  PipelineManifest m;
  m.codebook = "cb.ckpt";
  m.vocab = "v.txt";
  m.rvq = "r.ckpt";
  m.uxlm = "a.ckpt";
  m.duration = "b.ckpt";
  m.uslm_ar = "c.ckpt";
  m.uslm_nar = "d.ckpt";
  m.src_lang = "Umami";
  m.tgt_lang = "Savory";
  m.unit_k = 12;
  m.src_unit_base = 12;
  m.tgt_unit_base = 0;
  m.frame_ms = 10.0;
  m.n_bands = 40;
  m.sample_rate = 16000;
  m.duration_max = 8;
  m.acoustic_prompt_cap = 30;
  m.uxlm_max_new = 64;
  m.top_k = 4;
  m.temperature = 0.7;
  m.seed = 99;
  m.extra.values["custom_number"] = 2.5;
  m.extra.notes["custom_note"] = "kept verbatim";

  fs::create_directories("manifest_case");
  m.save("manifest_case/manifest.txt");
  const PipelineManifest back = PipelineManifest::load("manifest_case/manifest.txt");

  CHECK(back.base_dir == "manifest_case");
  CHECK(back.codebook == "cb.ckpt");
  CHECK(back.vocab == "v.txt");
  CHECK(back.rvq == "r.ckpt");
  CHECK(back.uxlm == "a.ckpt");
  CHECK(back.duration == "b.ckpt");
  CHECK(back.uslm_ar == "c.ckpt");
  CHECK(back.uslm_nar == "d.ckpt");
  CHECK(back.src_lang == "Umami");
  CHECK(back.tgt_lang == "Savory");
  CHECK(back.unit_k == 12);
  CHECK(back.src_unit_base == 12);
  CHECK(back.tgt_unit_base == 0);
  CHECK(back.total_units() == 24);
  CHECK(back.frame_ms == 10.0);
  CHECK(back.n_bands == 40);
  CHECK(back.sample_rate == 16000);
  CHECK(back.duration_max == 8);
  CHECK(back.acoustic_prompt_cap == 30);
  CHECK(back.uxlm_max_new == 64);
  CHECK(back.top_k == 4);
  CHECK(back.temperature == 0.7);
  CHECK(back.seed == 99);
  CHECK(back.extra.values.at("custom_number") == 2.5);
  CHECK(back.extra.notes.at("custom_note") == "kept verbatim");

  CHECK(back.resolve("x.ckpt") == "manifest_case/x.ckpt");
  CHECK(back.resolve("/abs/x.ckpt") == "/abs/x.ckpt");

  CHECK_THROWS_WITH_AS(load_pipeline("manifest_case/manifest.txt"),
                       doctest::Contains("artifact missing"), std::runtime_error);
  fs::remove_all("manifest_case");
}

TEST_CASE("level fill keeps the prompt fixed and reacts to it") {
  NarConfig nc;
  nc.layers = 1;
  nc.heads = 2;
  nc.model_dim = 16;
  nc.ffn_dim = 32;
  nc.max_seq = 32;
  nc.q_levels = 3;
  nc.codebook_size = 5;
  nc.unit_vocab = 8;
  CounterRng rng(17);
  const NarModel nar(nc, rng);

  const std::vector<int> prompt_units = {1, 1, 2, 2};
  IntMat prompt_tokens(4, 3);
  prompt_tokens << 0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0, 1;
  const std::vector<int> tgt_units = {5, 5, 6};
  const std::vector<int> tgt_level1 = {2, 0, 4};

  const CodecTokenGrid g = fill_codec_levels(nar, prompt_units, prompt_tokens, tgt_units,
                                             tgt_level1);
  CHECK(g.q_levels == 3);
  REQUIRE(g.frames() == 3);
  for (Eigen::Index i = 0; i < 3; ++i) {
    CHECK(g.tokens(i, 0) == tgt_level1[static_cast<size_t>(i)]);
    for (int q = 1; q < 3; ++q) {
      CHECK(g.tokens(i, q) >= 0);
      CHECK(g.tokens(i, q) < 5);
    }
  }

  // Deterministic.
  const CodecTokenGrid again = fill_codec_levels(nar, prompt_units, prompt_tokens, tgt_units,
                                                 tgt_level1);
  CHECK(g.tokens == again.tokens);

  // The prompt conditions the fill: perturbing one prompt token moves the
  // level-2 logits of the target rows.
  IntMat other = prompt_tokens;
  other(1, 0) = (other(1, 0) + 1) % 5;
  std::vector<int> units = prompt_units;
  units.insert(units.end(), tgt_units.begin(), tgt_units.end());
  IntMat lower_a(7, 1), lower_b(7, 1);
  lower_a.topRows(4) = prompt_tokens.leftCols(1);
  lower_b.topRows(4) = other.leftCols(1);
  for (Eigen::Index i = 0; i < 3; ++i) {
    lower_a(4 + i, 0) = tgt_level1[static_cast<size_t>(i)];
    lower_b(4 + i, 0) = tgt_level1[static_cast<size_t>(i)];
  }
  const Mat la = nar.level_logits_plain(2, units, lower_a);
  const Mat lb = nar.level_logits_plain(2, units, lower_b);
  CHECK((la.bottomRows(3) - lb.bottomRows(3)).cwiseAbs().maxCoeff() > 0.0);

  CHECK_THROWS_AS(fill_codec_levels(nar, {1}, prompt_tokens, tgt_units, tgt_level1),
                  std::invalid_argument);
  CHECK_THROWS_AS(fill_codec_levels(nar, prompt_units, prompt_tokens, {5}, tgt_level1),
                  std::invalid_argument);
}

TEST_CASE("trace dump is deterministic and reports diagnostics") {
  TranslationTrace tr;
  UnitSequence u;
  u.vocab_size = 24;
  u.frame_units = {3, 3, 4};
  u.merged_units = {3, 4};
  u.durations = {2, 1};
  tr.src_units = u;
  tr.prompt = "Translate Toyish unit \" <u:3> <u:4> \" to Glopish unit: \" ";
  tr.uxlm_output = "<u:15> oops";
  tr.failed_stage = "parse";
  tr.error = "not unit markup: 'oops'";
  tr.timings = {{"features", 0.125}, {"quantize", 0.5}, {"parse", 0.25}};
  tr.merged_duplicates = 1;

  tr.dump("trace_case_a");
  tr.timings = {{"features", 9.0}, {"quantize", 9.0}, {"parse", 9.0}};  // timings change,
  tr.dump("trace_case_b");                                              // bytes must not
  check_dirs_equal("trace_case_a", "trace_case_b");

  const auto names = dir_listing("trace_case_a");
  CHECK(names == std::set<std::string>{"src_units.txt", "prompt.txt", "uxlm_output.txt",
                                       "diagnostics.txt"});
  const Report diag = Report::load_kv("trace_case_a/diagnostics.txt");
  CHECK(diag.values.at("completed") == 0);
  CHECK(diag.values.at("merged_duplicates") == 1);
  CHECK(diag.values.at("expected_frames") == -1);
  CHECK(diag.notes.at("failed_stage") == "parse");
  CHECK(diag.notes.at("stages") == "features quantize parse");
  fs::remove_all("trace_case_a");
  fs::remove_all("trace_case_b");
}

TEST_CASE("tiny end-to-end run trains, resumes, and stays deterministic") {
  const std::string dir = "pipeline_smoke";
  fs::remove_all(dir);

  const ToyRunConfig cfg = smoke_config(dir, false);
  std::ostringstream log1;
  const PipelineManifest manifest = train_all(cfg, &log1);

  for (const char* f : {"toy_train.txt", "toy_test.txt", "codebook.ckpt", "vocab.txt",
                        "rvq.ckpt", "uxlm.ckpt", "duration.ckpt", "uslm_ar.ckpt",
                        "uslm_nar.ckpt", "loss_uxlm.txt", "loss_duration.txt",
                        "loss_uslm_ar.txt", "loss_uslm_nar.txt", "manifest.txt"}) {
    CHECK_MESSAGE(fs::exists(dir + "/" + f), "missing ", f);
  }
  CHECK(manifest.unit_k == 12);
  CHECK(manifest.total_units() == 24);

  // A second run must skip every stage and leave the manifest untouched.
  const std::string manifest_bytes = slurp(dir + "/manifest.txt");
  std::ostringstream log2;
  train_all(cfg, &log2);
  const std::string replay = log2.str();
  for (const char* s : {"corpus", "codebook", "vocab", "rvq", "uxlm", "duration", "uslm_ar",
                        "uslm_nar", "manifest"}) {
    CHECK_MESSAGE(replay.find(std::string(s) + ": already present, skipping") !=
                      std::string::npos,
                  "stage not skipped: ", s);
  }
  CHECK(slurp(dir + "/manifest.txt") == manifest_bytes);

  const Pipeline p = load_pipeline(dir + "/manifest.txt");
  const std::vector<ToyRecord> test = read_toy_records(dir + "/toy_test.txt");
  REQUIRE(!test.empty());
  const Waveform w = synth_toy_audio(test[0].src_units, test[0].src_durs, 24000);

  // Empty and silent inputs short-circuit without touching the models.
  const TranslationTrace empty = translate_speech(Waveform{24000, {}}, p);
  CHECK(empty.ok());
  CHECK(empty.timings.empty());
  CHECK(!empty.output.has_value());
  const Waveform silent{24000, std::vector<double>(4800, 0.0)};
  const TranslationTrace hush = resynthesize_trace(silent, p);
  CHECK(hush.ok());
  REQUIRE(hush.output.has_value());
  CHECK(rms(*hush.output) < 0.01);

  // Same input, same pipeline: the dumped traces must be byte-identical,
  // whether or not the undertrained translator parses cleanly.
  const TranslationTrace t1 = translate_speech(w, p);
  const TranslationTrace t2 = translate_speech(w, p);
  t1.dump("trace_run_a");
  t2.dump("trace_run_b");
  check_dirs_equal("trace_run_a", "trace_run_b");
  REQUIRE(t1.src_units.has_value());
  CHECK(t1.src_units->vocab_size == 24);
  for (int g : t1.src_units->merged_units) CHECK(g < 12);
  fs::remove_all("trace_run_a");
  fs::remove_all("trace_run_b");

  // Resynthesis runs the whole unit-to-speech half and honours durations.
  const TranslationTrace rt = resynthesize_trace(w, p);
  REQUIRE_MESSAGE(rt.ok(), rt.failed_stage, ": ", rt.error);
  REQUIRE(rt.output.has_value());
  CHECK(!rt.output->empty());
  CHECK(rt.tgt_units == rt.src_units->merged_units);
  CHECK(rt.tgt_grid->frames() == rt.expected_frames);

  // Bypassing the durations shows up as a frame-count mismatch.
  ResynthOptions ones;
  ones.durations_one = true;
  const TranslationTrace rt1 = resynthesize_trace(w, p, ones);
  REQUIRE_MESSAGE(rt1.ok(), rt1.failed_stage, ": ", rt1.error);
  CHECK(rt1.expected_frames == rt.expected_frames);
  CHECK(rt1.tgt_grid->frames() < rt1.expected_frames);
  CHECK(resynthesize(w, p, ones).samples.size() < rt.output->samples.size());

  // Evaluation mechanics: counts line up and metrics stay in range.
  const ToyEvalResult ev = evaluate_toy(p, test, 2);
  CHECK(ev.report.values.at("utterances") == static_cast<double>(test.size()));
  CHECK(ev.failures <= static_cast<int>(test.size()));
  CHECK(ev.uxlm_unit_bleu >= 0.0);
  CHECK(ev.uxlm_unit_bleu <= 100.0);
  CHECK(ev.duration_accuracy >= 0.0);
  CHECK(ev.duration_accuracy <= 1.0);
  CHECK(ev.resynth_uer >= 0.0);

  // A manifest whose duration model points at the wrong checkpoint is
  // rejected with a vocabulary complaint.
  PipelineManifest bad = manifest;
  bad.duration = "uxlm.ckpt";
  bad.save(dir + "/manifest_bad.txt");
  CHECK_THROWS_WITH_AS(load_pipeline(dir + "/manifest_bad.txt"),
                       doctest::Contains("duration model vocabulary"), std::runtime_error);

  fs::remove_all(dir);
}

TEST_CASE("unwritten corpus trains on the speech prompt alone") {
  const std::string dir = "pipeline_smoke_unwritten";
  fs::remove_all(dir);

  ToyRunConfig cfg = smoke_config(dir, true);
  cfg.uxlm_train.steps = 30;  // one task instead of eight
  std::ostringstream log;
  train_all(cfg, &log);

  const std::vector<ToyRecord> train = read_toy_records(dir + "/toy_train.txt");
  REQUIRE(!train.empty());
  for (const ToyRecord& r : train) {
    CHECK(r.src_text.empty());
    CHECK(r.tgt_text.empty());
  }

  const Pipeline p = load_pipeline(dir + "/manifest.txt");
  const std::vector<ToyRecord> test = read_toy_records(dir + "/toy_test.txt");
  const Waveform w = synth_toy_audio(test[0].src_units, test[0].src_durs, 24000);

  const TranslationTrace rt = resynthesize_trace(w, p);
  REQUIRE_MESSAGE(rt.ok(), rt.failed_stage, ": ", rt.error);
  CHECK(!rt.output->empty());

  // Translation always produces a trace; parse quality is a training
  // matter, not a mechanical one.
  const TranslationTrace tr = translate_speech(w, p);
  CHECK(!tr.timings.empty());
  REQUIRE(tr.prompt.has_value());
  CHECK(tr.prompt->find("Translate Toyish unit") == 0);

  fs::remove_all(dir);
}
