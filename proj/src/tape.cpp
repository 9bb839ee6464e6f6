#include "ust/tape.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace ust {

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

void Tape::backward(Var out, double seed) {
  if (nodes_[out].val.size() != 1) {
    throw std::invalid_argument("Tape::backward: output node is not scalar");
  }
  grad(out)(0, 0) = seed;
  for (int32_t i = static_cast<int32_t>(nodes_.size()) - 1; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.back && n.grad.size() != 0) n.back(*this);
  }
}

namespace {

void check_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  }
}

}  // namespace

Var tp_add(Tape& t, Var a, Var b) {
  check_same_shape(t.val(a), t.val(b), "tp_add");
  Mat out = t.val(a) + t.val(b);
  Var self = static_cast<Var>(t.size());
  return t.emit(std::move(out), [a, b, self](Tape& tp) {
    tp.grad(a) += tp.grad(self);
    tp.grad(b) += tp.grad(self);
  });
}

Var tp_add_rowvec(Tape& t, Var a, Var bias) {
  const Mat& av = t.val(a);
  const Mat& bv = t.val(bias);
  if (bv.rows() != 1 || bv.cols() != av.cols()) {
    throw std::invalid_argument("tp_add_rowvec: bias must be 1 x cols");
  }
  Mat out = av.rowwise() + bv.row(0);
  Var self = static_cast<Var>(t.size());
  return t.emit(std::move(out), [a, bias, self](Tape& tp) {
    const Mat& g = tp.grad(self);
    tp.grad(a) += g;
    Mat& bg = tp.grad(bias);
    for (Eigen::Index i = 0; i < g.rows(); ++i) bg.row(0) += g.row(i);
  });
}

Var tp_scale(Tape& t, Var a, double s) {
  Mat out = t.val(a) * s;
  Var self = static_cast<Var>(t.size());
  return t.emit(std::move(out), [a, s, self](Tape& tp) { tp.grad(a) += tp.grad(self) * s; });
}

Var tp_matmul(Tape& t, Var a, Var b) {
  Mat out = matmul(t.val(a), t.val(b));
  Var self = static_cast<Var>(t.size());
  return t.emit(std::move(out), [a, b, self](Tape& tp) {
    const Mat& g = tp.grad(self);
    tp.grad(a) += matmul_nt(g, tp.val(b));
    tp.grad(b) += matmul_tn(tp.val(a), g);
  });
}

Var tp_gelu(Tape& t, Var a) {
  const Mat& x = t.val(a);
  Mat out(x.rows(), x.cols());
  const double* xp = x.data();
  double* op = out.data();
  for (Eigen::Index i = 0, n = x.size(); i < n; ++i) {
    op[i] = 0.5 * xp[i] * (1.0 + std::erf(xp[i] * kInvSqrt2));
  }
  Var self = static_cast<Var>(t.size());
  return t.emit(std::move(out), [a, self](Tape& tp) {
    const Mat& x2 = tp.val(a);
    const Mat& g = tp.grad(self);
    Mat& ga = tp.grad(a);
    const double* xp2 = x2.data();
    const double* gp = g.data();
    double* gap = ga.data();
    for (Eigen::Index i = 0, n = x2.size(); i < n; ++i) {
      double cdf = 0.5 * (1.0 + std::erf(xp2[i] * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * xp2[i] * xp2[i]);
      gap[i] += gp[i] * (cdf + xp2[i] * pdf);
    }
  });
}

Var tp_layer_norm(Tape& t, Var x, Var gain, Var bias, double eps) {
  const Mat& xv = t.val(x);
  const Mat& gv = t.val(gain);
  const Mat& bv = t.val(bias);
  const Eigen::Index rows = xv.rows(), d = xv.cols();
  if (gv.rows() != 1 || gv.cols() != d || bv.rows() != 1 || bv.cols() != d) {
    throw std::invalid_argument("tp_layer_norm: gain/bias must be 1 x dim");
  }
  // xhat and 1/sigma are needed by the backward pass; keep them in the closure.
  auto xhat = std::make_shared<Mat>(rows, d);
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Mat out(rows, d);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const double* xi = xv.data() + i * d;
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
    (*inv_std)[i] = is;
    for (Eigen::Index j = 0; j < d; ++j) {
      double xh = (xi[j] - mean) * is;
      (*xhat)(i, j) = xh;
      out(i, j) = xh * gv(0, j) + bv(0, j);
    }
  }
  Var self = static_cast<Var>(t.size());
  return t.emit(std::move(out), [x, gain, bias, self, xhat, inv_std](Tape& tp) {
    const Mat& g = tp.grad(self);
    const Mat& gv2 = tp.val(gain);
    const Eigen::Index rows = g.rows(), d = g.cols();
    Mat& gx = tp.grad(x);
    Mat& gg = tp.grad(gain);
    Mat& gb = tp.grad(bias);
    for (Eigen::Index i = 0; i < rows; ++i) {
      double mean_u = 0.0, mean_ux = 0.0;
      for (Eigen::Index j = 0; j < d; ++j) {
        double u = g(i, j) * gv2(0, j);
        mean_u += u;
        mean_ux += u * (*xhat)(i, j);
      }
      mean_u /= static_cast<double>(d);
      mean_ux /= static_cast<double>(d);
      const double is = (*inv_std)[i];
      for (Eigen::Index j = 0; j < d; ++j) {
        double u = g(i, j) * gv2(0, j);
        gx(i, j) += (u - mean_u - (*xhat)(i, j) * mean_ux) * is;
        gg(0, j) += g(i, j) * (*xhat)(i, j);
        gb(0, j) += g(i, j);
      }
    }
  });
}

Var tp_dropout(Tape& t, Var a, double rate, CounterRng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw std::invalid_argument("tp_dropout: rate must be < 1");
  const Mat& x = t.val(a);
  auto mask = std::make_shared<Mat>(x.rows(), x.cols());
  const double keep = 1.0 - rate;
  const double scale = 1.0 / keep;
  double* mp = mask->data();
  for (Eigen::Index i = 0, n = x.size(); i < n; ++i) {
    mp[i] = rng.next_double() < keep ? scale : 0.0;
  }
  Mat out = x.cwiseProduct(*mask);
  Var self = static_cast<Var>(t.size());
  return t.emit(std::move(out), [a, self, mask](Tape& tp) {
    tp.grad(a) += tp.grad(self).cwiseProduct(*mask);
  });
}

Var tp_embed_sum(Tape& t, const std::vector<GatherSpec>& gathers) {
  if (gathers.empty()) throw std::invalid_argument("tp_embed_sum: no gathers");
  const size_t rows = gathers[0].ids.size();
  const Eigen::Index d = t.val(gathers[0].table).cols();
  for (const auto& g : gathers) {
    if (g.ids.size() != rows) throw std::invalid_argument("tp_embed_sum: id length mismatch");
    if (t.val(g.table).cols() != d) throw std::invalid_argument("tp_embed_sum: dim mismatch");
    for (size_t i = 0; i < g.ids.size(); ++i) {
      if (g.ids[i] < 0 || g.ids[i] >= t.val(g.table).rows()) {
        throw std::out_of_range("tp_embed_sum: id " + std::to_string(g.ids[i]) +
                                " out of range at position " + std::to_string(i));
      }
    }
  }
  Mat out = Mat::Zero(static_cast<Eigen::Index>(rows), d);
  for (const auto& g : gathers) {
    const Mat& tab = t.val(g.table);
    for (size_t i = 0; i < rows; ++i) out.row(static_cast<Eigen::Index>(i)) += tab.row(g.ids[i]);
  }
  auto specs = std::make_shared<std::vector<GatherSpec>>(gathers);
  Var self = static_cast<Var>(t.size());
  return t.emit(std::move(out), [specs, self](Tape& tp) {
    const Mat& g = tp.grad(self);
    for (const auto& spec : *specs) {
      Mat& tg = tp.grad(spec.table);
      for (size_t i = 0; i < spec.ids.size(); ++i) {
        tg.row(spec.ids[i]) += g.row(static_cast<Eigen::Index>(i));
      }
    }
  });
}

Var tp_attention(Tape& t, Var q, Var k, Var v, int heads, bool causal) {
  const Mat& qv = t.val(q);
  const Mat& kv = t.val(k);
  const Mat& vv = t.val(v);
  check_same_shape(qv, kv, "tp_attention");
  check_same_shape(qv, vv, "tp_attention");
  const Eigen::Index T = qv.rows(), d = qv.cols();
  if (heads <= 0 || d % heads != 0) {
    throw std::invalid_argument("tp_attention: dim " + std::to_string(d) +
                                " not divisible by heads " + std::to_string(heads));
  }
  const Eigen::Index hd = d / heads;
  const double alpha = 1.0 / std::sqrt(static_cast<double>(hd));

  auto probs = std::make_shared<std::vector<Mat>>();
  probs->reserve(heads);
  Mat ctx(T, d);
  for (int h = 0; h < heads; ++h) {
    Mat qh = qv.block(0, h * hd, T, hd);
    Mat kh = kv.block(0, h * hd, T, hd);
    Mat vh = vv.block(0, h * hd, T, hd);
    Mat s = matmul_nt(qh, kh) * alpha;
    if (causal) {
      for (Eigen::Index i = 0; i < T; ++i) {
        for (Eigen::Index j = i + 1; j < T; ++j) s(i, j) = -std::numeric_limits<double>::infinity();
      }
    }
    softmax_rows_inplace(s);
    ctx.block(0, h * hd, T, hd) = matmul(s, vh);
    probs->push_back(std::move(s));
  }

  Var self = static_cast<Var>(t.size());
  return t.emit(std::move(ctx), [q, k, v, heads, hd, alpha, probs, self](Tape& tp) {
    const Mat& g = tp.grad(self);
    const Eigen::Index T = g.rows();
    for (int h = 0; h < heads; ++h) {
      Mat gh = g.block(0, h * hd, T, hd);
      Mat qh = tp.val(q).block(0, h * hd, T, hd);
      Mat kh = tp.val(k).block(0, h * hd, T, hd);
      Mat vh = tp.val(v).block(0, h * hd, T, hd);
      const Mat& a = (*probs)[h];
      Mat da = matmul_nt(gh, vh);
      Mat dv = matmul_tn(a, gh);
      // softmax backward: ds = a .* (da - rowsum(a .* da))
      Mat ds(T, T);
      for (Eigen::Index i = 0; i < T; ++i) {
        double r = 0.0;
        for (Eigen::Index j = 0; j < T; ++j) r += a(i, j) * da(i, j);
        for (Eigen::Index j = 0; j < T; ++j) ds(i, j) = a(i, j) * (da(i, j) - r);
      }
      Mat dq = matmul(ds, kh) * alpha;
      Mat dk = matmul_tn(ds, qh) * alpha;
      tp.grad(q).block(0, h * hd, T, hd) += dq;
      tp.grad(k).block(0, h * hd, T, hd) += dk;
      tp.grad(v).block(0, h * hd, T, hd) += dv;
    }
  });
}

Var tp_masked_cross_entropy(Tape& t, Var logits, const std::vector<int>& targets,
                            const std::vector<uint8_t>& mask, double denom) {
  const Mat& lg = t.val(logits);
  const Eigen::Index rows = lg.rows(), cols = lg.cols();
  if (static_cast<Eigen::Index>(targets.size()) != rows ||
      static_cast<Eigen::Index>(mask.size()) != rows) {
    throw std::invalid_argument("tp_masked_cross_entropy: targets/mask length mismatch");
  }
  if (denom <= 0.0) throw std::invalid_argument("tp_masked_cross_entropy: denom must be > 0");
  auto probs = std::make_shared<Mat>(lg);
  softmax_rows_inplace(*probs);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || targets[i] >= cols) {
      throw std::out_of_range("tp_masked_cross_entropy: target " + std::to_string(targets[i]) +
                              " out of range at row " + std::to_string(i));
    }
    loss += -std::log((*probs)(i, targets[i]));
  }
  Mat out(1, 1);
  out(0, 0) = loss / denom;
  auto tgt = std::make_shared<std::vector<int>>(targets);
  auto msk = std::make_shared<std::vector<uint8_t>>(mask);
  Var self = static_cast<Var>(t.size());
  return t.emit(std::move(out), [logits, probs, tgt, msk, denom, self](Tape& tp) {
    const double up = tp.grad(self)(0, 0) / denom;
    Mat& gl = tp.grad(logits);
    for (Eigen::Index i = 0; i < gl.rows(); ++i) {
      if (!(*msk)[i]) continue;
      for (Eigen::Index j = 0; j < gl.cols(); ++j) gl(i, j) += up * (*probs)(i, j);
      gl(i, (*tgt)[i]) -= up;
    }
  });
}

}  // namespace ust
