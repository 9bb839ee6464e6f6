#include "ust/transformer.hpp"

#include "ust/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace ust {

namespace {

// Field order of one pre-norm block; layouts below rely on it.
enum BlockField {
  kLn1G, kLn1B, kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo,
  kLn2G, kLn2B, kW1, kB1, kW2, kB2,
  kBlockFields
};

enum ParamKind { kWeight, kZero, kOne };

struct ParamSpec {
  std::string name;
  Eigen::Index rows, cols;
  ParamKind kind;
};

void push_block_specs(std::vector<ParamSpec>& out, const std::string& prefix, int d, int ffn) {
  out.push_back({prefix + "ln1_g", 1, d, kOne});
  out.push_back({prefix + "ln1_b", 1, d, kZero});
  out.push_back({prefix + "wq", d, d, kWeight});
  out.push_back({prefix + "bq", 1, d, kZero});
  out.push_back({prefix + "wk", d, d, kWeight});
  out.push_back({prefix + "bk", 1, d, kZero});
  out.push_back({prefix + "wv", d, d, kWeight});
  out.push_back({prefix + "bv", 1, d, kZero});
  out.push_back({prefix + "wo", d, d, kWeight});
  out.push_back({prefix + "bo", 1, d, kZero});
  out.push_back({prefix + "ln2_g", 1, d, kOne});
  out.push_back({prefix + "ln2_b", 1, d, kZero});
  out.push_back({prefix + "w1", d, ffn, kWeight});
  out.push_back({prefix + "b1", 1, ffn, kZero});
  out.push_back({prefix + "w2", ffn, d, kWeight});
  out.push_back({prefix + "b2", 1, d, kZero});
}

void materialize(const std::vector<ParamSpec>& specs, std::vector<std::string>& names,
                 std::vector<Mat>& params) {
  names.reserve(specs.size());
  params.reserve(specs.size());
  for (const auto& s : specs) {
    names.push_back(s.name);
    params.emplace_back(Mat::Zero(s.rows, s.cols));
  }
}

void init_params(const std::vector<ParamSpec>& specs, std::vector<Mat>& params,
                 CounterRng& rng) {
  for (size_t i = 0; i < specs.size(); ++i) {
    switch (specs[i].kind) {
      case kWeight: fill_truncated_normal(params[i], 0.02, rng); break;
      case kZero: params[i].setZero(); break;
      case kOne: params[i].setOnes(); break;
    }
  }
}

void check_block_geometry(const char* what, int layers, int heads, int model_dim, int ffn_dim,
                          int max_seq) {
  if (layers < 1 || heads < 1 || model_dim < 1 || ffn_dim < 1 || max_seq < 1) {
    throw std::invalid_argument(std::string(what) + ": non-positive dimension");
  }
  if (model_dim % heads != 0) {
    throw std::invalid_argument(std::string(what) + ": model_dim " + std::to_string(model_dim) +
                                " not divisible by heads " + std::to_string(heads));
  }
}

std::vector<ParamSpec> lm_layout(const LmConfig& c) {
  check_block_geometry("LmConfig", c.layers, c.heads, c.model_dim, c.ffn_dim, c.max_seq);
  if (c.vocab_size < 2) throw std::invalid_argument("LmConfig: vocab_size must be >= 2");
  std::vector<ParamSpec> out;
  out.push_back({"tok_emb", c.vocab_size, c.model_dim, kWeight});
  out.push_back({"pos_emb", c.max_seq, c.model_dim, kWeight});
  for (int l = 0; l < c.layers; ++l) {
    push_block_specs(out, "layer" + std::to_string(l) + ".", c.model_dim, c.ffn_dim);
  }
  out.push_back({"final.ln_g", 1, c.model_dim, kOne});
  out.push_back({"final.ln_b", 1, c.model_dim, kZero});
  out.push_back({"head", c.model_dim, c.vocab_size, kWeight});
  return out;
}

std::vector<ParamSpec> nar_layout(const NarConfig& c) {
  check_block_geometry("NarConfig", c.layers, c.heads, c.model_dim, c.ffn_dim, c.max_seq);
  if (c.q_levels < 2) throw std::invalid_argument("NarConfig: q_levels must be >= 2");
  if (c.codebook_size < 2) throw std::invalid_argument("NarConfig: codebook_size must be >= 2");
  if (c.unit_vocab < 1) throw std::invalid_argument("NarConfig: unit_vocab must be >= 1");
  std::vector<ParamSpec> out;
  out.push_back({"sem_emb", c.unit_vocab, c.model_dim, kWeight});
  out.push_back({"stage_emb", c.q_levels - 1, c.model_dim, kWeight});
  out.push_back({"pos_emb", c.max_seq, c.model_dim, kWeight});
  for (int l = 0; l + 1 < c.q_levels; ++l) {
    out.push_back({"acoustic_emb" + std::to_string(l), c.codebook_size, c.model_dim, kWeight});
  }
  for (int l = 0; l < c.layers; ++l) {
    push_block_specs(out, "layer" + std::to_string(l) + ".", c.model_dim, c.ffn_dim);
  }
  out.push_back({"final.ln_g", 1, c.model_dim, kOne});
  out.push_back({"final.ln_b", 1, c.model_dim, kZero});
  for (int l = 0; l + 1 < c.q_levels; ++l) {
    out.push_back({"head" + std::to_string(l), c.model_dim, c.codebook_size, kWeight});
  }
  return out;
}

// Tape forward of one block; `base` indexes the block's first parameter.
Var block_forward(Tape& t, const std::vector<Var>& pv, int base, Var x, int heads, bool causal,
                  double dropout, CounterRng* drop_rng) {
  Var h = tp_layer_norm(t, x, pv[base + kLn1G], pv[base + kLn1B]);
  Var q = tp_add_rowvec(t, tp_matmul(t, h, pv[base + kWq]), pv[base + kBq]);
  Var k = tp_add_rowvec(t, tp_matmul(t, h, pv[base + kWk]), pv[base + kBk]);
  Var v = tp_add_rowvec(t, tp_matmul(t, h, pv[base + kWv]), pv[base + kBv]);
  Var att = tp_attention(t, q, k, v, heads, causal);
  Var proj = tp_add_rowvec(t, tp_matmul(t, att, pv[base + kWo]), pv[base + kBo]);
  if (drop_rng) proj = tp_dropout(t, proj, dropout, *drop_rng);
  x = tp_add(t, x, proj);
  Var h2 = tp_layer_norm(t, x, pv[base + kLn2G], pv[base + kLn2B]);
  Var f = tp_add_rowvec(t, tp_matmul(t, h2, pv[base + kW1]), pv[base + kB1]);
  f = tp_gelu(t, f);
  f = tp_add_rowvec(t, tp_matmul(t, f, pv[base + kW2]), pv[base + kB2]);
  if (drop_rng) f = tp_dropout(t, f, dropout, *drop_rng);
  return tp_add(t, x, f);
}

// Plain-math twins of the tape ops. They repeat the same loops in the same
// order so inference output is bitwise equal to the training forward.
Mat ln_rows(const Mat& x, const Mat& g, const Mat& b, double eps = 1e-5) {
  const Eigen::Index rows = x.rows(), d = x.cols();
  Mat out(rows, d);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const double* xi = x.data() + i * d;
    double mean = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) mean += xi[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      double c = xi[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    for (Eigen::Index j = 0; j < d; ++j) {
      out(i, j) = (xi[j] - mean) * is * g(0, j) + b(0, j);
    }
  }
  return out;
}

Mat gelu_mat(const Mat& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  Mat out(x.rows(), x.cols());
  const double* xp = x.data();
  double* op = out.data();
  for (Eigen::Index i = 0, n = x.size(); i < n; ++i) {
    op[i] = 0.5 * xp[i] * (1.0 + std::erf(xp[i] * kInvSqrt2));
  }
  return out;
}

Mat linear(const Mat& x, const Mat& w, const Mat& b) {
  Mat out = matmul(x, w);
  return out.rowwise() + b.row(0);
}

Mat attention_plain(const Mat& q, const Mat& k, const Mat& v, int heads, bool causal) {
  const Eigen::Index T = q.rows(), d = q.cols();
  const Eigen::Index hd = d / heads;
  const double alpha = 1.0 / std::sqrt(static_cast<double>(hd));
  Mat ctx(T, d);
  for (int h = 0; h < heads; ++h) {
    Mat qh = q.block(0, h * hd, T, hd);
    Mat kh = k.block(0, h * hd, T, hd);
    Mat vh = v.block(0, h * hd, T, hd);
    Mat s = matmul_nt(qh, kh) * alpha;
    if (causal) {
      for (Eigen::Index i = 0; i < T; ++i) {
        for (Eigen::Index j = i + 1; j < T; ++j) s(i, j) = -std::numeric_limits<double>::infinity();
      }
    }
    softmax_rows_inplace(s);
    ctx.block(0, h * hd, T, hd) = matmul(s, vh);
  }
  return ctx;
}

struct LayerCache {
  Mat k, v;  // filled rows [0, len)
};

// One incremental decoder step. x is the 1 x d embedded input at position
// `len`; caches grow by one row per layer.
Mat block_step(const std::vector<Mat>& params, int base, Mat x, LayerCache& cache,
               Eigen::Index len, int heads) {
  const Eigen::Index d = x.cols();
  const Eigen::Index hd = d / heads;
  const double alpha = 1.0 / std::sqrt(static_cast<double>(hd));
  Mat h = ln_rows(x, params[base + kLn1G], params[base + kLn1B]);
  Mat q = linear(h, params[base + kWq], params[base + kBq]);
  cache.k.row(len) = linear(h, params[base + kWk], params[base + kBk]).row(0);
  cache.v.row(len) = linear(h, params[base + kWv], params[base + kBv]).row(0);
  Mat ctx(1, d);
  for (int hh = 0; hh < heads; ++hh) {
    Mat qh = q.block(0, hh * hd, 1, hd);
    Mat kh = cache.k.block(0, hh * hd, len + 1, hd);
    Mat s = matmul_nt(qh, kh) * alpha;
    softmax_rows_inplace(s);
    Mat vh = cache.v.block(0, hh * hd, len + 1, hd);
    ctx.block(0, hh * hd, 1, hd) = matmul(s, vh);
  }
  Mat proj = linear(ctx, params[base + kWo], params[base + kBo]);
  x = x + proj;
  Mat h2 = ln_rows(x, params[base + kLn2G], params[base + kLn2B]);
  Mat f = linear(gelu_mat(linear(h2, params[base + kW1], params[base + kB1])),
                 params[base + kW2], params[base + kB2]);
  return x + f;
}

int argmax_row(const Mat& row) {
  int best = 0;
  for (Eigen::Index j = 1; j < row.cols(); ++j) {
    if (row(0, j) > row(0, best)) best = static_cast<int>(j);
  }
  return best;
}

int sample_top_k(const Mat& row, int k, double temperature, CounterRng& rng) {
  const int vocab = static_cast<int>(row.cols());
  k = std::min(k, vocab);
  std::vector<int> idx(vocab);
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
    if (row(0, a) != row(0, b)) return row(0, a) > row(0, b);
    return a < b;
  });
  // Softmax over the k kept logits; the first is the max.
  std::vector<double> e(k);
  double sum = 0.0;
  const double top = row(0, idx[0]) / temperature;
  for (int i = 0; i < k; ++i) {
    e[i] = std::exp(row(0, idx[i]) / temperature - top);
    sum += e[i];
  }
  const double r = rng.next_double() * sum;
  double cum = 0.0;
  for (int i = 0; i < k; ++i) {
    cum += e[i];
    if (r < cum) return idx[i];
  }
  return idx[k - 1];
}

std::vector<int> iota_ids(size_t n) {
  std::vector<int> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

void fisher_yates(std::vector<int>& order, CounterRng rng) {
  for (size_t i = order.size(); i > 1; --i) {
    size_t j = static_cast<size_t>(rng.next_below(i));
    std::swap(order[i - 1], order[j]);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// TransformerLm

TransformerLm::TransformerLm(const LmConfig& cfg) : cfg_(cfg) {
  materialize(lm_layout(cfg_), names_, params_);
}

TransformerLm::TransformerLm(const LmConfig& cfg, CounterRng& rng) : TransformerLm(cfg) {
  init_params(lm_layout(cfg_), params_, rng);
}

std::vector<std::pair<std::string, Mat*>> TransformerLm::named_params() {
  std::vector<std::pair<std::string, Mat*>> out;
  out.reserve(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) out.emplace_back(names_[i], &params_[i]);
  return out;
}

std::vector<std::pair<std::string, const Mat*>> TransformerLm::named_params() const {
  std::vector<std::pair<std::string, const Mat*>> out;
  out.reserve(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) out.emplace_back(names_[i], &params_[i]);
  return out;
}

std::vector<Var> TransformerLm::bind(Tape& t) const {
  std::vector<Var> pv;
  pv.reserve(params_.size());
  for (const Mat& m : params_) pv.push_back(t.leaf(m));
  return pv;
}

Var TransformerLm::logits(Tape& t, const std::vector<Var>& pv, const std::vector<int>& tokens,
                          CounterRng* dropout_rng) const {
  if (tokens.empty()) throw std::invalid_argument("TransformerLm: empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg_.max_seq) {
    throw std::invalid_argument("TransformerLm: sequence length " +
                                std::to_string(tokens.size()) + " exceeds max positions " +
                                std::to_string(cfg_.max_seq));
  }
  if (pv.size() != params_.size()) throw std::invalid_argument("TransformerLm: bad binding");
  CounterRng* drop = (dropout_rng && cfg_.dropout > 0.0) ? dropout_rng : nullptr;
  Var x = tp_embed_sum(t, {{pv[0], tokens}, {pv[1], iota_ids(tokens.size())}});
  if (drop) x = tp_dropout(t, x, cfg_.dropout, *drop);
  for (int l = 0; l < cfg_.layers; ++l) {
    x = block_forward(t, pv, 2 + kBlockFields * l, x, cfg_.heads, true, cfg_.dropout, drop);
  }
  const int fin = 2 + kBlockFields * cfg_.layers;
  x = tp_layer_norm(t, x, pv[fin], pv[fin + 1]);
  return tp_matmul(t, x, pv[fin + 2]);
}

Var TransformerLm::masked_loss(Tape& t, const std::vector<Var>& pv,
                               const std::vector<int>& tokens, int predict_from,
                               CounterRng* dropout_rng) const {
  if (tokens.size() < 2) throw std::invalid_argument("masked_loss: need at least two tokens");
  if (predict_from < 1) predict_from = 1;
  const int T = static_cast<int>(tokens.size());
  if (predict_from > T - 1) {
    throw std::invalid_argument("masked_loss: predict_from " + std::to_string(predict_from) +
                                " leaves nothing to score in " + std::to_string(T) + " tokens");
  }
  std::vector<int> inputs(tokens.begin(), tokens.end() - 1);
  std::vector<int> targets(tokens.begin() + 1, tokens.end());
  std::vector<uint8_t> mask(inputs.size());
  int scored = 0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    mask[i] = (static_cast<int>(i) + 1 >= predict_from) ? 1 : 0;
    scored += mask[i];
  }
  Var lg = logits(t, pv, inputs, dropout_rng);
  return tp_masked_cross_entropy(t, lg, targets, mask, static_cast<double>(scored));
}

GenerateResult TransformerLm::generate(const std::vector<int>& prompt,
                                       const GenerateOptions& opt) const {
  if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
  if (opt.max_new < 1) throw std::invalid_argument("generate: max_new must be >= 1");
  if (opt.top_k < 1) throw std::invalid_argument("generate: top_k must be >= 1");
  if (opt.top_k > 1 && opt.temperature <= 0.0) {
    throw std::invalid_argument("generate: temperature must be > 0");
  }
  for (int tok : prompt) {
    if (tok < 0 || tok >= cfg_.vocab_size) {
      throw std::out_of_range("generate: prompt token " + std::to_string(tok) + " out of range");
    }
  }
  if (static_cast<int>(prompt.size()) > cfg_.max_seq) {
    throw std::invalid_argument("generate: prompt length " + std::to_string(prompt.size()) +
                                " exceeds max positions " + std::to_string(cfg_.max_seq));
  }

  GenerateResult res;
  const int budget =
      std::min<int>(opt.max_new, cfg_.max_seq - static_cast<int>(prompt.size()));
  if (budget == 0) {
    res.truncated = true;
    return res;
  }

  const Eigen::Index cap = static_cast<Eigen::Index>(prompt.size()) + budget;
  const Eigen::Index d = cfg_.model_dim;
  std::vector<LayerCache> caches(cfg_.layers);
  for (auto& c : caches) {
    c.k = Mat::Zero(cap, d);
    c.v = Mat::Zero(cap, d);
  }
  const Mat& tok_emb = params_[0];
  const Mat& pos_emb = params_[1];
  const int fin = 2 + kBlockFields * cfg_.layers;
  CounterRng sample_rng(opt.seed, 0xd5a71ull);

  std::vector<int> allowed = opt.allow_tokens;
  std::sort(allowed.begin(), allowed.end());
  allowed.erase(std::unique(allowed.begin(), allowed.end()), allowed.end());
  for (int tok : allowed) {
    if (tok < 0 || tok >= cfg_.vocab_size) {
      throw std::out_of_range("generate: allowed token " + std::to_string(tok) + " out of range");
    }
  }

  Eigen::Index pos = 0;
  Mat lg;
  auto step = [&](int token) {
    Mat x = Mat::Zero(1, d);
    x.row(0) += tok_emb.row(token);
    x.row(0) += pos_emb.row(pos);
    for (int l = 0; l < cfg_.layers; ++l) {
      x = block_step(params_, 2 + kBlockFields * l, std::move(x), caches[l], pos, cfg_.heads);
    }
    ++pos;
    Mat h = ln_rows(x, params_[fin], params_[fin + 1]);
    lg = matmul(h, params_[fin + 2]);
    require_finite(lg, "generate: logits at position " + std::to_string(pos - 1));
  };

  auto pick = [&](const Mat& row) {
    if (allowed.empty()) {
      return (opt.top_k == 1) ? argmax_row(row)
                              : sample_top_k(row, opt.top_k, opt.temperature, sample_rng);
    }
    Mat sub(1, static_cast<Eigen::Index>(allowed.size()));
    for (size_t i = 0; i < allowed.size(); ++i) sub(0, static_cast<Eigen::Index>(i)) = row(0, allowed[i]);
    const int local = (opt.top_k == 1)
                          ? argmax_row(sub)
                          : sample_top_k(sub, opt.top_k, opt.temperature, sample_rng);
    return allowed[static_cast<size_t>(local)];
  };

  for (int tok : prompt) step(tok);
  for (int s = 0; s < budget; ++s) {
    if (opt.record_logits) res.step_logits.push_back(lg);
    const int next = pick(lg);
    if (std::find(opt.stop_tokens.begin(), opt.stop_tokens.end(), next) !=
        opt.stop_tokens.end()) {
      return res;
    }
    res.tokens.push_back(next);
    if (s + 1 == budget) {
      res.truncated = true;
      break;
    }
    step(next);
  }
  return res;
}

Checkpoint TransformerLm::to_checkpoint() const {
  Checkpoint ck;
  ck.put_scalar("config/arch", 1.0);
  ck.put_scalar("config/layers", cfg_.layers);
  ck.put_scalar("config/heads", cfg_.heads);
  ck.put_scalar("config/model_dim", cfg_.model_dim);
  ck.put_scalar("config/ffn_dim", cfg_.ffn_dim);
  ck.put_scalar("config/max_seq", cfg_.max_seq);
  ck.put_scalar("config/vocab_size", cfg_.vocab_size);
  ck.put_scalar("config/dropout", cfg_.dropout);
  for (size_t i = 0; i < params_.size(); ++i) ck.put("param/" + names_[i], params_[i]);
  return ck;
}

TransformerLm TransformerLm::from_checkpoint(const Checkpoint& ck) {
  if (ck.get_scalar("config/arch") != 1.0) {
    throw std::runtime_error("checkpoint does not hold a causal LM");
  }
  LmConfig cfg;
  cfg.layers = static_cast<int>(ck.get_scalar("config/layers"));
  cfg.heads = static_cast<int>(ck.get_scalar("config/heads"));
  cfg.model_dim = static_cast<int>(ck.get_scalar("config/model_dim"));
  cfg.ffn_dim = static_cast<int>(ck.get_scalar("config/ffn_dim"));
  cfg.max_seq = static_cast<int>(ck.get_scalar("config/max_seq"));
  cfg.vocab_size = static_cast<int>(ck.get_scalar("config/vocab_size"));
  cfg.dropout = ck.get_scalar("config/dropout");
  TransformerLm lm(cfg);
  for (size_t i = 0; i < lm.params_.size(); ++i) {
    const Mat& stored = ck.get("param/" + lm.names_[i]);
    if (stored.rows() != lm.params_[i].rows() || stored.cols() != lm.params_[i].cols()) {
      throw std::runtime_error("checkpoint tensor " + lm.names_[i] + " has wrong shape");
    }
    lm.params_[i] = stored;
  }
  return lm;
}

// ---------------------------------------------------------------------------
// NarModel

NarModel::NarModel(const NarConfig& cfg) : cfg_(cfg) {
  materialize(nar_layout(cfg_), names_, params_);
}

NarModel::NarModel(const NarConfig& cfg, CounterRng& rng) : NarModel(cfg) {
  init_params(nar_layout(cfg_), params_, rng);
}

std::vector<std::pair<std::string, Mat*>> NarModel::named_params() {
  std::vector<std::pair<std::string, Mat*>> out;
  out.reserve(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) out.emplace_back(names_[i], &params_[i]);
  return out;
}

std::vector<std::pair<std::string, const Mat*>> NarModel::named_params() const {
  std::vector<std::pair<std::string, const Mat*>> out;
  out.reserve(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) out.emplace_back(names_[i], &params_[i]);
  return out;
}

std::vector<Var> NarModel::bind(Tape& t) const {
  std::vector<Var> pv;
  pv.reserve(params_.size());
  for (const Mat& m : params_) pv.push_back(t.leaf(m));
  return pv;
}

namespace {

void check_nar_inputs(const NarConfig& cfg, int level, const std::vector<int>& unit_ids,
                      const IntMat& lower, const std::vector<int>* position_ids) {
  if (level < 2 || level > cfg.q_levels) {
    throw std::invalid_argument("NarModel: level " + std::to_string(level) +
                                " outside 2.." + std::to_string(cfg.q_levels));
  }
  const Eigen::Index T = lower.rows();
  if (static_cast<Eigen::Index>(unit_ids.size()) != T) {
    throw std::invalid_argument("NarModel: unit ids length " + std::to_string(unit_ids.size()) +
                                " vs " + std::to_string(T) + " frames");
  }
  if (lower.cols() != level - 1) {
    throw std::invalid_argument("NarModel: expected " + std::to_string(level - 1) +
                                " lower levels, got " + std::to_string(lower.cols()));
  }
  if (T < 1) throw std::invalid_argument("NarModel: empty frame sequence");
  if (T > cfg.max_seq) {
    throw std::invalid_argument("NarModel: sequence length " + std::to_string(T) +
                                " exceeds max positions " + std::to_string(cfg.max_seq));
  }
  if (position_ids && static_cast<Eigen::Index>(position_ids->size()) != T) {
    throw std::invalid_argument("NarModel: position ids length mismatch");
  }
}

}  // namespace

Var NarModel::level_logits(Tape& t, const std::vector<Var>& pv, int level,
                           const std::vector<int>& unit_ids, const IntMat& lower,
                           const std::vector<int>* position_ids,
                           CounterRng* dropout_rng) const {
  check_nar_inputs(cfg_, level, unit_ids, lower, position_ids);
  if (pv.size() != params_.size()) throw std::invalid_argument("NarModel: bad binding");
  const size_t T = unit_ids.size();
  const int emb0 = 3;  // first acoustic embedding table

  std::vector<GatherSpec> gathers;
  for (int l = 0; l < level - 1; ++l) {
    std::vector<int> ids(T);
    for (size_t i = 0; i < T; ++i) ids[i] = lower(static_cast<Eigen::Index>(i), l);
    gathers.push_back({pv[emb0 + l], std::move(ids)});
  }
  gathers.push_back({pv[0], unit_ids});
  gathers.push_back({pv[1], std::vector<int>(T, level - 2)});
  gathers.push_back({pv[2], position_ids ? *position_ids : iota_ids(T)});

  CounterRng* drop = (dropout_rng && cfg_.dropout > 0.0) ? dropout_rng : nullptr;
  Var x = tp_embed_sum(t, gathers);
  if (drop) x = tp_dropout(t, x, cfg_.dropout, *drop);
  const int blk0 = emb0 + (cfg_.q_levels - 1);
  for (int l = 0; l < cfg_.layers; ++l) {
    x = block_forward(t, pv, blk0 + kBlockFields * l, x, cfg_.heads, false, cfg_.dropout, drop);
  }
  const int fin = blk0 + kBlockFields * cfg_.layers;
  x = tp_layer_norm(t, x, pv[fin], pv[fin + 1]);
  return tp_matmul(t, x, pv[fin + 2 + (level - 2)]);
}

Var NarModel::level_loss(Tape& t, const std::vector<Var>& pv, int level,
                         const std::vector<int>& unit_ids, const IntMat& lower,
                         const std::vector<int>& targets, const std::vector<int>* position_ids,
                         CounterRng* dropout_rng) const {
  if (targets.size() != unit_ids.size()) {
    throw std::invalid_argument("NarModel: targets length mismatch");
  }
  Var lg = level_logits(t, pv, level, unit_ids, lower, position_ids, dropout_rng);
  std::vector<uint8_t> mask(targets.size(), 1);
  return tp_masked_cross_entropy(t, lg, targets, mask, static_cast<double>(targets.size()));
}

Mat NarModel::level_logits_plain(int level, const std::vector<int>& unit_ids, const IntMat& lower,
                                 const std::vector<int>* position_ids) const {
  check_nar_inputs(cfg_, level, unit_ids, lower, position_ids);
  const Eigen::Index T = static_cast<Eigen::Index>(unit_ids.size());
  const Eigen::Index d = cfg_.model_dim;
  const int emb0 = 3;

  // Same gather order as the tape path: lower levels, units, stage, positions.
  Mat x = Mat::Zero(T, d);
  for (int l = 0; l < level - 1; ++l) {
    const Mat& tab = params_[emb0 + l];
    for (Eigen::Index i = 0; i < T; ++i) {
      const int id = lower(i, l);
      if (id < 0 || id >= cfg_.codebook_size) {
        throw std::out_of_range("NarModel: token " + std::to_string(id) + " at frame " +
                                std::to_string(i) + " level " + std::to_string(l + 1));
      }
      x.row(i) += tab.row(id);
    }
  }
  for (Eigen::Index i = 0; i < T; ++i) {
    if (unit_ids[i] < 0 || unit_ids[i] >= cfg_.unit_vocab) {
      throw std::out_of_range("NarModel: unit id " + std::to_string(unit_ids[i]) + " at frame " +
                              std::to_string(i));
    }
    x.row(i) += params_[0].row(unit_ids[i]);
  }
  for (Eigen::Index i = 0; i < T; ++i) x.row(i) += params_[1].row(level - 2);
  for (Eigen::Index i = 0; i < T; ++i) {
    const int p = position_ids ? (*position_ids)[static_cast<size_t>(i)] : static_cast<int>(i);
    if (p < 0 || p >= cfg_.max_seq) {
      throw std::out_of_range("NarModel: position id " + std::to_string(p) + " at frame " +
                              std::to_string(i));
    }
    x.row(i) += params_[2].row(p);
  }

  const int blk0 = emb0 + (cfg_.q_levels - 1);
  for (int l = 0; l < cfg_.layers; ++l) {
    const int base = blk0 + kBlockFields * l;
    Mat h = ln_rows(x, params_[base + kLn1G], params_[base + kLn1B]);
    Mat q = linear(h, params_[base + kWq], params_[base + kBq]);
    Mat k = linear(h, params_[base + kWk], params_[base + kBk]);
    Mat v = linear(h, params_[base + kWv], params_[base + kBv]);
    Mat att = attention_plain(q, k, v, cfg_.heads, false);
    Mat proj = linear(att, params_[base + kWo], params_[base + kBo]);
    x = x + proj;
    Mat h2 = ln_rows(x, params_[base + kLn2G], params_[base + kLn2B]);
    Mat f = linear(gelu_mat(linear(h2, params_[base + kW1], params_[base + kB1])),
                   params_[base + kW2], params_[base + kB2]);
    x = x + f;
  }
  const int fin = blk0 + kBlockFields * cfg_.layers;
  Mat h = ln_rows(x, params_[fin], params_[fin + 1]);
  return matmul(h, params_[fin + 2 + (level - 2)]);
}

IntMat NarModel::complete_grid(const std::vector<int>& unit_ids,
                               const std::vector<int>& level1) const {
  if (level1.size() != unit_ids.size()) {
    throw std::invalid_argument("NarModel: level-1 tokens length mismatch");
  }
  const Eigen::Index T = static_cast<Eigen::Index>(unit_ids.size());
  IntMat grid(T, cfg_.q_levels);
  for (Eigen::Index i = 0; i < T; ++i) grid(i, 0) = level1[static_cast<size_t>(i)];
  for (int level = 2; level <= cfg_.q_levels; ++level) {
    IntMat lower = grid.block(0, 0, T, level - 1);
    Mat lg = level_logits_plain(level, unit_ids, lower);
    for (Eigen::Index i = 0; i < T; ++i) {
      Mat row = lg.row(i);
      grid(i, level - 1) = argmax_row(row);
    }
  }
  return grid;
}

Checkpoint NarModel::to_checkpoint() const {
  Checkpoint ck;
  ck.put_scalar("config/arch", 2.0);
  ck.put_scalar("config/layers", cfg_.layers);
  ck.put_scalar("config/heads", cfg_.heads);
  ck.put_scalar("config/model_dim", cfg_.model_dim);
  ck.put_scalar("config/ffn_dim", cfg_.ffn_dim);
  ck.put_scalar("config/max_seq", cfg_.max_seq);
  ck.put_scalar("config/q_levels", cfg_.q_levels);
  ck.put_scalar("config/codebook_size", cfg_.codebook_size);
  ck.put_scalar("config/unit_vocab", cfg_.unit_vocab);
  ck.put_scalar("config/dropout", cfg_.dropout);
  for (size_t i = 0; i < params_.size(); ++i) ck.put("param/" + names_[i], params_[i]);
  return ck;
}

NarModel NarModel::from_checkpoint(const Checkpoint& ck) {
  if (ck.get_scalar("config/arch") != 2.0) {
    throw std::runtime_error("checkpoint does not hold a residual-level model");
  }
  NarConfig cfg;
  cfg.layers = static_cast<int>(ck.get_scalar("config/layers"));
  cfg.heads = static_cast<int>(ck.get_scalar("config/heads"));
  cfg.model_dim = static_cast<int>(ck.get_scalar("config/model_dim"));
  cfg.ffn_dim = static_cast<int>(ck.get_scalar("config/ffn_dim"));
  cfg.max_seq = static_cast<int>(ck.get_scalar("config/max_seq"));
  cfg.q_levels = static_cast<int>(ck.get_scalar("config/q_levels"));
  cfg.codebook_size = static_cast<int>(ck.get_scalar("config/codebook_size"));
  cfg.unit_vocab = static_cast<int>(ck.get_scalar("config/unit_vocab"));
  cfg.dropout = ck.get_scalar("config/dropout");
  NarModel nm(cfg);
  for (size_t i = 0; i < nm.params_.size(); ++i) {
    const Mat& stored = ck.get("param/" + nm.names_[i]);
    if (stored.rows() != nm.params_[i].rows() || stored.cols() != nm.params_[i].cols()) {
      throw std::runtime_error("checkpoint tensor " + nm.names_[i] + " has wrong shape");
    }
    nm.params_[i] = stored;
  }
  return nm;
}

// ---------------------------------------------------------------------------
// Training

TrainStats train_model(
    const std::vector<std::pair<std::string, Mat*>>& params,
    const std::function<Var(Tape&, const std::vector<Var>&, int idx, CounterRng& rng)>&
        build_loss,
    int num_examples, const TrainConfig& cfg) {
  if (num_examples < 1) throw std::invalid_argument("train_model: no examples");
  if (cfg.steps < 1) throw std::invalid_argument("train_model: steps must be >= 1");
  if (cfg.batch_size < 1) throw std::invalid_argument("train_model: batch_size must be >= 1");
  if (cfg.lr <= 0.0) throw std::invalid_argument("train_model: lr must be > 0");
  if (cfg.jobs < 1) throw std::invalid_argument("train_model: jobs must be >= 1");
  if (cfg.grad_clip <= 0.0) throw std::invalid_argument("train_model: grad_clip must be > 0");

  const size_t P = params.size();
  std::vector<Mat*> pptrs(P);
  for (size_t i = 0; i < P; ++i) pptrs[i] = params[i].second;

  CounterRng order_rng(cfg.seed, 0x6f72646572ull);
  std::vector<int> order(num_examples);
  std::iota(order.begin(), order.end(), 0);
  int cursor = num_examples;
  uint64_t epoch = 0;

  AdamState state;
  TrainStats stats;
  std::vector<Mat> gradbuf(P);

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<int> batch;
    batch.reserve(cfg.batch_size);
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == num_examples) {
        fisher_yates(order, order_rng.split(epoch++));
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    const int B = static_cast<int>(batch.size());

    std::vector<std::vector<Mat>> item_grads(B);
    std::vector<double> item_loss(B, 0.0);
    std::vector<std::string> item_err(B);
    auto run_item = [&](int bi) {
      try {
        Tape t;
        std::vector<Var> pv;
        pv.reserve(P);
        for (size_t j = 0; j < P; ++j) pv.push_back(t.leaf(*params[j].second));
        CounterRng item_rng =
            CounterRng(cfg.seed, 0x64726f70ull).split(static_cast<uint64_t>(step) * 1000003ull +
                                                      static_cast<uint64_t>(bi));
        Var loss = build_loss(t, pv, batch[bi], item_rng);
        item_loss[bi] = t.val(loss)(0, 0);
        t.backward(loss);
        item_grads[bi].resize(P);
        for (size_t j = 0; j < P; ++j) item_grads[bi][j] = t.grad(pv[j]);
      } catch (const std::exception& e) {
        item_err[bi] = e.what();
      }
    };

    const int workers = std::min(cfg.jobs, B);
    if (workers <= 1) {
      for (int bi = 0; bi < B; ++bi) run_item(bi);
    } else {
      std::vector<std::thread> pool;
      pool.reserve(workers);
      for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          for (int bi = w; bi < B; bi += workers) run_item(bi);
        });
      }
      for (auto& th : pool) th.join();
    }
    for (int bi = 0; bi < B; ++bi) {
      if (!item_err[bi].empty()) {
        throw std::runtime_error("train_model: step " + std::to_string(step) + ": " +
                                 item_err[bi]);
      }
    }

    // Ordered reduction keeps the result identical across cfg.jobs.
    double loss_sum = 0.0;
    for (int bi = 0; bi < B; ++bi) loss_sum += item_loss[bi];
    const double mean_loss = loss_sum / static_cast<double>(B);
    if (!std::isfinite(mean_loss)) {
      throw std::runtime_error("train_model: loss diverged at step " + std::to_string(step));
    }
    for (size_t j = 0; j < P; ++j) {
      gradbuf[j] = item_grads[0][j];
      for (int bi = 1; bi < B; ++bi) gradbuf[j] += item_grads[bi][j];
      gradbuf[j] *= 1.0 / static_cast<double>(B);
    }

    std::vector<Mat*> gptrs(P);
    for (size_t j = 0; j < P; ++j) gptrs[j] = &gradbuf[j];
    clip_grad_norm(gptrs, cfg.grad_clip);
    double lr =
        cfg.warmup_steps > 0
            ? cfg.lr * std::min(1.0, static_cast<double>(step + 1) /
                                         static_cast<double>(cfg.warmup_steps))
            : cfg.lr;
    const int decay_span = cfg.steps - cfg.warmup_steps;
    if (step + 1 > cfg.warmup_steps && decay_span > 0) {
      const double progress = static_cast<double>(step + 1 - cfg.warmup_steps) /
                              static_cast<double>(decay_span);
      lr = cfg.lr * (1.0 - (1.0 - cfg.final_lr_frac) * progress);
    }
    std::vector<const Mat*> cgrads(P);
    for (size_t j = 0; j < P; ++j) cgrads[j] = &gradbuf[j];
    adam_step(pptrs, cgrads, state, lr);
    stats.loss_curve.push_back(mean_loss);
  }
  stats.final_loss = stats.loss_curve.back();
  return stats;
}

}  // namespace ust
