#include "plate/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

#include "plate/errors.hpp"
#include "plate/kernels.hpp"

namespace plate {

const Tensor& Var::value() const { return tape_->value(id_); }

const Tensor& Var::grad() const { return tape_->grad(id_); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) { return push(Node{std::move(value), {}, false, {}, nullptr}); }

Var Tape::variable(Tensor value) { return push(Node{std::move(value), {}, true, {}, nullptr}); }

Var Tape::parameter(Parameter& p) { return push(Node{p.value, {}, true, {}, &p}); }

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, Backward backward) {
  bool needs = false;
  for (const auto& in : inputs) {
    if (in.tape() != this) throw std::invalid_argument("op inputs recorded on a different tape");
    needs = needs || nodes_[in.id()].requires_grad;
  }
  Node node{std::move(value), {}, needs, {}, nullptr};
  if (needs) node.backward = std::move(backward);
  return push(std::move(node));
}

Tensor& Tape::grad(std::size_t id) {
  auto& node = nodes_[id];
  if (node.grad.empty()) node.grad = Tensor::zeros_like(node.value);
  return node.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw std::invalid_argument("loss was not recorded on this tape");
  if (nodes_[loss.id()].value.size() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                shape_string(nodes_[loss.id()].value.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  grad(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (node.grad.empty() || !node.requires_grad) continue;
    if (node.backward) node.backward(*this, i);
    if (node.param != nullptr) {
      auto& pg = node.param->grad;
      if (pg.empty()) pg = Tensor::zeros_like(node.param->value);
      pg += nodes_[i].grad;
    }
  }
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  }
}

void require_matrix(const Var& a, const char* op) {
  if (a.value().rank() != 2) throw std::invalid_argument(std::string(op) + ": expected a matrix");
}

}  // namespace

Var matmul(Var a, Var b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const auto n = a.value().rows(), k = a.value().cols(), m = b.value().cols();
  if (b.value().rows() != k) throw std::invalid_argument("matmul: inner dimensions differ");
  Tensor out({n, m});
  kernels::matmul(a.value().data(), b.value().data(), out.data(), n, k, m);
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib, n, k, m](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) kernels::matmul_a_bt(g.data(), t.value(ib).data(), t.grad(ia).data(), n, m, k);
    if (t.requires_grad(ib)) kernels::matmul_at_b(t.value(ia).data(), g.data(), t.grad(ib).data(), n, k, m);
  });
}

Var linear(Var x, Var w, Var b) {
  require_matrix(x, "linear");
  require_matrix(w, "linear");
  const auto n = x.value().rows(), in = x.value().cols(), out_w = w.value().cols();
  if (w.value().rows() != in || b.value().size() != out_w) {
    throw std::invalid_argument("linear: weight/bias shapes do not match input");
  }
  Tensor out({n, out_w});
  kernels::linear(x.value().data(), w.value().data(), b.value().data(), out.data(), n, in, out_w);
  const auto ix = x.id(), iw = w.id(), ib = b.id();
  return x.tape()->record(std::move(out), {x, w, b}, [ix, iw, ib, n, in, out_w](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ix)) kernels::matmul_a_bt(g.data(), t.value(iw).data(), t.grad(ix).data(), n, out_w, in);
    if (t.requires_grad(iw)) kernels::matmul_at_b(t.value(ix).data(), g.data(), t.grad(iw).data(), n, in, out_w);
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < out_w; ++c) gb[c] += g[r * out_w + c];
    }
  });
}

Var transpose(Var x) {
  require_matrix(x, "transpose");
  const auto n = x.value().rows(), m = x.value().cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = x.value()[i * m + j];
  const auto ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix, n, m](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(ix);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) gx[i * m + j] += g[j * n + i];
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  out += b.value();
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ib)) t.grad(ib) += g;
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad(ia);
      const Tensor& vb = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      const Tensor& va = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= s;
  const auto ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, s](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var gelu(Var x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = kernels::gelu(v);
  const auto ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    Tensor& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * kernels::gelu_grad(xv[i]);
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const auto n = x.value().rows(), w = x.value().cols();
  if (gain.value().size() != w || bias.value().size() != w) {
    throw std::invalid_argument("layer_norm: gain/bias width mismatch");
  }
  Tensor out(x.shape());
  auto stats = std::make_shared<std::vector<double>>(2 * n);
  kernels::layer_norm(x.value().data(), gain.value().data(), bias.value().data(), out.data(), n, w, eps,
                      stats->data(), stats->data() + n);
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape()->record(std::move(out), {x, gain, bias}, [ix, ig, ib, n, w, stats](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    const Tensor& gv = t.value(ig);
    const double* mean = stats->data();
    const double* rstd = stats->data() + n;
    const bool gx_needed = t.requires_grad(ix);
    Tensor* gx = gx_needed ? &t.grad(ix) : nullptr;
    Tensor* gg = t.requires_grad(ig) ? &t.grad(ig) : nullptr;
    Tensor* gb = t.requires_grad(ib) ? &t.grad(ib) : nullptr;
    std::vector<double> xhat(w), dxhat(w);
    for (std::size_t r = 0; r < n; ++r) {
      double sum_d = 0.0, sum_dx = 0.0;
      for (std::size_t c = 0; c < w; ++c) {
        const double go = g[r * w + c];
        xhat[c] = (xv[r * w + c] - mean[r]) * rstd[r];
        dxhat[c] = go * gv[c];
        if (gg) (*gg)[c] += go * xhat[c];
        if (gb) (*gb)[c] += go;
        sum_d += dxhat[c];
        sum_dx += dxhat[c] * xhat[c];
      }
      if (gx) {
        const double inv_w = 1.0 / static_cast<double>(w);
        for (std::size_t c = 0; c < w; ++c) {
          (*gx)[r * w + c] += rstd[r] * (dxhat[c] - inv_w * sum_d - xhat[c] * inv_w * sum_dx);
        }
      }
    }
  });
}

Var embedding(Var table, std::span<const std::int32_t> ids) {
  require_matrix(table, "embedding");
  const auto vocab = table.value().rows(), w = table.value().cols();
  Tensor out({ids.size(), w});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw std::invalid_argument("embedding: id " + std::to_string(ids[r]) + " out of range");
    }
    std::copy_n(table.value().data() + static_cast<std::size_t>(ids[r]) * w, w, out.data() + r * w);
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  const auto it = table.id();
  return table.tape()->record(std::move(out), {table},
                              [it, w, saved = std::move(saved)](Tape& t, std::size_t self) {
                                const Tensor& g = t.grad(self);
                                Tensor& gt = t.grad(it);
                                for (std::size_t r = 0; r < saved.size(); ++r) {
                                  double* dst = gt.data() + static_cast<std::size_t>(saved[r]) * w;
                                  const double* src = g.data() + r * w;
                                  for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
                                }
                              });
}

Var dropout(Var x, double rate, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in [0, 1)");
  if (rate == 0.0) return x;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.value().size());
  for (auto& m : mask) m = unif(rng) < rate ? 0.0 : keep_scale;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  const auto ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix, mask = std::move(mask)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const auto w = parts.front().value().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.value().cols() != w) throw std::invalid_argument("concat_rows: width mismatch");
    rows += p.value().rows();
  }
  Tensor out({rows, w});
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().storage().begin(), p.value().storage().end(), out.data() + off * w);
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.value().rows();
  }
  return parts.front().tape()->record(
      std::move(out), parts, [ids = std::move(ids), offsets = std::move(offsets), w](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          if (!t.requires_grad(ids[i])) continue;
          Tensor& gi = t.grad(ids[i]);
          const double* src = g.data() + offsets[i] * w;
          for (std::size_t k = 0; k < gi.size(); ++k) gi[k] += src[k];
        }
      });
}

Var masked_fill(Var x, std::span<const std::uint8_t> mask, double fill) {
  if (mask.size() != x.value().size()) throw std::invalid_argument("masked_fill: mask size mismatch");
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = fill;
  std::vector<std::uint8_t> saved(mask.begin(), mask.end());
  const auto ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix, saved = std::move(saved)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!saved[i]) gx[i] += g[i];
  });
}

Var softmax_rows(Var x, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("softmax temperature must be positive");
  const auto n = x.value().rows(), m = x.value().cols();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < n; ++r) {
    auto row = x.value().row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw InvalidState("softmax row " + std::to_string(r) + " is entirely masked");
    }
    double s = 0.0;
    for (std::size_t c = 0; c < m; ++c) {
      out[r * m + c] = std::exp((row[c] - mx) / tau);
      s += out[r * m + c];
    }
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] /= s;
  }
  const auto ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix, n, m, tau](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& p = t.value(self);
    Tensor& gx = t.grad(ix);
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < m; ++c) dot += g[r * m + c] * p[r * m + c];
      for (std::size_t c = 0; c < m; ++c) gx[r * m + c] += p[r * m + c] * (g[r * m + c] - dot) / tau;
    }
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  const auto ix = x.id();
  return x.tape()->record(Tensor::scalar(s), {x}, [ix](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (auto& v : t.grad(ix).values()) v += g;
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var label_smoothed_nll(Var logits, std::span<const std::int32_t> targets, double epsilon,
                       std::span<const double> row_weights) {
  require_matrix(logits, "label_smoothed_nll");
  const auto steps = logits.value().rows(), vocab = logits.value().cols();
  if (targets.size() != steps) throw std::invalid_argument("label_smoothed_nll: one target per row required");
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw std::invalid_argument("label smoothing epsilon must be in [0, 1)");
  if (!row_weights.empty() && row_weights.size() != steps) {
    throw std::invalid_argument("label_smoothed_nll: one weight per row required");
  }
  std::vector<double> weights(steps, 1.0 / static_cast<double>(steps));
  if (!row_weights.empty()) weights.assign(row_weights.begin(), row_weights.end());

  auto probs = std::make_shared<Tensor>(Shape{steps, vocab});
  double loss = 0.0;
  for (std::size_t r = 0; r < steps; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw std::invalid_argument("label_smoothed_nll: target " + std::to_string(targets[r]) +
                                  " out of range for vocabulary of " + std::to_string(vocab));
    }
    const auto logp = log_softmax_with_temperature(logits.value().row(r), 1.0);
    double mean_nll = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      mean_nll -= logp[c];
      (*probs)[r * vocab + c] = std::exp(logp[c]);
    }
    mean_nll /= static_cast<double>(vocab);
    loss += weights[r] * ((1.0 - epsilon) * -logp[static_cast<std::size_t>(targets[r])] + epsilon * mean_nll);
  }
  std::vector<std::int32_t> saved(targets.begin(), targets.end());
  const auto il = logits.id();
  return logits.tape()->record(
      Tensor::scalar(loss), {logits},
      [il, steps, vocab, epsilon, probs, saved = std::move(saved), weights = std::move(weights)](Tape& t,
                                                                                              std::size_t self) {
        const double g = t.grad(self)[0];
        Tensor& gl = t.grad(il);
        const double uniform = epsilon / static_cast<double>(vocab);
        for (std::size_t r = 0; r < steps; ++r) {
          const double scale_r = g * weights[r];
          for (std::size_t c = 0; c < vocab; ++c) {
            double d = (*probs)[r * vocab + c] - uniform;
            if (static_cast<std::int32_t>(c) == saved[r]) d -= 1.0 - epsilon;
            gl[r * vocab + c] += scale_r * d;
          }
        }
      });
}

Var multi_head_attention(Var q, Var k, Var v, std::span<const AttentionSegment> segments, std::size_t heads,
                         double lambda, std::vector<Tensor>* capture) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_matrix(v, "attention");
  const auto width = q.value().cols();
  if (k.value().cols() != width || v.value().cols() != width || v.value().rows() != k.value().rows()) {
    throw std::invalid_argument("attention: Q/K/V widths differ");
  }
  if (heads == 0 || width % heads != 0) throw std::invalid_argument("attention: width not divisible by heads");
  const auto dh = width / heads;
  const double sc = attention_scale(lambda, dh);
  for (const auto& s : segments) {
    if (s.q_begin + s.q_len > q.value().rows() || s.k_begin + s.k_len > k.value().rows() || s.q_len == 0 ||
        s.k_len == 0) {
      throw std::invalid_argument("attention: segment out of range");
    }
  }

  Tensor out(q.shape());
  auto weights = std::make_shared<std::vector<std::vector<double>>>(segments.size() * heads);
  for (std::size_t si = 0; si < segments.size(); ++si) {
    const auto& s = segments[si];
    kernels::AttentionMask mask;
    mask.causal = s.causal;
    for (std::size_t h = 0; h < heads; ++h) {
      auto& w = (*weights)[si * heads + h];
      w.resize(s.q_len * s.k_len);
      kernels::HeadView view{q.value().data() + s.q_begin * width + h * dh,
                             k.value().data() + s.k_begin * width + h * dh,
                             v.value().data() + s.k_begin * width + h * dh,
                             width, width, width, s.q_len, s.k_len, dh};
      kernels::attention_head(view, sc, mask, w.data(), out.data() + s.q_begin * width + h * dh, width);
      if (capture) capture->push_back(Tensor({s.q_len, s.k_len}, w));
    }
  }

  std::vector<AttentionSegment> segs(segments.begin(), segments.end());
  const auto iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape()->record(
      std::move(out), {q, k, v},
      [iq, ik, iv, segs = std::move(segs), weights, heads, width, dh, sc](Tape& t, std::size_t self) {
        using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        using CStr = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;
        using Str = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
        const Tensor& g = t.grad(self);
        const bool need_q = t.requires_grad(iq), need_k = t.requires_grad(ik), need_v = t.requires_grad(iv);
        double* gq = need_q ? t.grad(iq).data() : nullptr;
        double* gk = need_k ? t.grad(ik).data() : nullptr;
        double* gv = need_v ? t.grad(iv).data() : nullptr;
        const double* qv = t.value(iq).data();
        const double* kv = t.value(ik).data();
        const double* vv = t.value(iv).data();
        const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(width));
        RowMatrix dw, ds;
        for (std::size_t si = 0; si < segs.size(); ++si) {
          const auto& s = segs[si];
          const auto n = static_cast<Eigen::Index>(s.q_len), m = static_cast<Eigen::Index>(s.k_len);
          for (std::size_t h = 0; h < heads; ++h) {
            const auto col = h * dh;
            Eigen::Map<const RowMatrix> W((*weights)[si * heads + h].data(), n, m);
            CStr G(g.data() + s.q_begin * width + col, n, dh, stride);
            CStr Q(qv + s.q_begin * width + col, n, dh, stride);
            CStr K(kv + s.k_begin * width + col, m, dh, stride);
            CStr V(vv + s.k_begin * width + col, m, dh, stride);
            if (gv) {
              Str GV(gv + s.k_begin * width + col, m, dh, stride);
              GV.noalias() += W.transpose() * G;
            }
            if (!gq && !gk) continue;
            dw.noalias() = G * V.transpose();
            // Masked entries have W == 0, so they drop out of ds automatically.
            ds = W.cwiseProduct(dw.colwise() - (dw.cwiseProduct(W)).rowwise().sum()) * sc;
            if (gq) {
              Str GQ(gq + s.q_begin * width + col, n, dh, stride);
              GQ.noalias() += ds * K;
            }
            if (gk) {
              Str GK(gk + s.k_begin * width + col, m, dh, stride);
              GK.noalias() += ds.transpose() * Q;
            }
          }
        }
      });
}

}  // namespace plate
