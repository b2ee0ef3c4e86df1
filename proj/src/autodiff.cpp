#include "seqrec/autodiff.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <unordered_set>

#include "seqrec/rng.hpp"

namespace seqrec::ad {

namespace {

NodePtr new_node(Tensor value, std::vector<NodePtr> parents) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

Tensor transpose2d(const Tensor& a) {
  Tensor t({a.shape[1], a.shape[0]});
  for (int64_t i = 0; i < a.shape[0]; ++i)
    for (int64_t j = 0; j < a.shape[1]; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

Tensor matmul_plain(const Tensor& a, const Tensor& b) {
  const int64_t n = a.shape[0], k = a.shape[1], m = b.shape[1];
  if (b.shape[0] != k)
    throw std::invalid_argument("matmul: inner dimension mismatch " + a.shape_str() +
                                " x " + b.shape_str());
  Tensor c({n, m});
  for (int64_t i = 0; i < n; ++i) {
    const double* arow = a.data.data() + i * k;
    double* crow = c.data.data() + i * m;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      const double* brow = b.data.data() + kk * m;
      for (int64_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Tensor matmul_raw(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: rank-2 operands required");
  if (!ta && !tb) return matmul_plain(a, b);
  Tensor at = ta ? transpose2d(a) : a;
  Tensor bt = tb ? transpose2d(b) : b;
  return matmul_plain(at, bt);
}

void accum(const NodePtr& p, const Tensor& g, double c = 1.0) {
  if (!p->requires_grad) return;
  Tensor& dst = p->ensure_grad();
  const size_t n = dst.data.size();
  for (size_t i = 0; i < n; ++i) dst.data[i] += c * g.data[i];
}

}  // namespace

Var make_param(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(n);
}

Var make_const(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(n);
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.value().data[i];
  auto n = new_node(std::move(out), {a.node(), b.node()});
  n->backward_fn = [](Node& self) {
    accum(self.parents[0], self.grad);
    accum(self.parents[1], self.grad);
  };
  return Var(n);
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.value().data[i];
  auto n = new_node(std::move(out), {a.node(), b.node()});
  n->backward_fn = [](Node& self) {
    accum(self.parents[0], self.grad);
    accum(self.parents[1], self.grad, -1.0);
  };
  return Var(n);
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.value().data[i];
  auto n = new_node(std::move(out), {a.node(), b.node()});
  n->backward_fn = [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    if (self.parents[0]->requires_grad) {
      Tensor& g = self.parents[0]->ensure_grad();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += self.grad.data[i] * bv.data[i];
    }
    if (self.parents[1]->requires_grad) {
      Tensor& g = self.parents[1]->ensure_grad();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += self.grad.data[i] * av.data[i];
    }
  };
  return Var(n);
}

Var scale(const Var& a, double c) {
  Tensor out = a.value();
  for (double& v : out.data) v *= c;
  auto n = new_node(std::move(out), {a.node()});
  n->backward_fn = [c](Node& self) { accum(self.parents[0], self.grad, c); };
  return Var(n);
}

Var add_scalar(const Var& a, double c) {
  Tensor out = a.value();
  for (double& v : out.data) v += c;
  auto n = new_node(std::move(out), {a.node()});
  n->backward_fn = [](Node& self) { accum(self.parents[0], self.grad); };
  return Var(n);
}

Var add_rowvec(const Var& x, const Var& v) {
  const Tensor& xv = x.value();
  const Tensor& vv = v.value();
  if (xv.rank() != 2 || vv.numel() != xv.shape[1])
    throw std::invalid_argument("add_rowvec: x must be N x D and v length D");
  Tensor out = xv;
  const int64_t rows = xv.shape[0], cols = xv.shape[1];
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) out.at(i, j) += vv.at(j);
  auto n = new_node(std::move(out), {x.node(), v.node()});
  n->backward_fn = [rows, cols](Node& self) {
    accum(self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) {
      Tensor& g = self.parents[1]->ensure_grad();
      for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) g.at(j) += self.grad.at(i, j);
    }
  };
  return Var(n);
}

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  Tensor out = matmul_raw(a.value(), b.value(), trans_a, trans_b);
  auto n = new_node(std::move(out), {a.node(), b.node()});
  n->backward_fn = [trans_a, trans_b](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    const Tensor& gc = self.grad;
    if (self.parents[0]->requires_grad) {
      Tensor ga;
      if (!trans_a && !trans_b) ga = matmul_raw(gc, bv, false, true);
      else if (!trans_a && trans_b) ga = matmul_raw(gc, bv, false, false);
      else if (trans_a && !trans_b) ga = matmul_raw(bv, gc, false, true);
      else ga = matmul_raw(bv, gc, true, true);
      accum(self.parents[0], ga);
    }
    if (self.parents[1]->requires_grad) {
      Tensor gb;
      if (!trans_a && !trans_b) gb = matmul_raw(av, gc, true, false);
      else if (!trans_a && trans_b) gb = matmul_raw(gc, av, true, false);
      else if (trans_a && !trans_b) gb = matmul_raw(av, gc, false, false);
      else gb = matmul_raw(gc, av, true, true);
      accum(self.parents[1], gb);
    }
  };
  return Var(n);
}

Var embed_rows(const Var& table, const std::vector<int64_t>& ids) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw std::invalid_argument("embed_rows: table must be rank 2");
  const int64_t d = tv.shape[1];
  Tensor out({static_cast<int64_t>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.shape[0])
      throw std::out_of_range("embed_rows: id " + std::to_string(ids[i]) + " out of range");
    std::memcpy(out.data.data() + i * d, tv.data.data() + ids[i] * d, sizeof(double) * d);
  }
  auto n = new_node(std::move(out), {table.node()});
  n->backward_fn = [ids, d](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor& g = self.parents[0]->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i)
      for (int64_t j = 0; j < d; ++j) g.at(ids[i], j) += self.grad.at(static_cast<int64_t>(i), j);
  };
  return Var(n);
}

Var select_rows(const Var& x, const std::vector<int64_t>& rows) {
  const Tensor& xv = x.value();
  const int64_t d = xv.shape[1];
  Tensor out({static_cast<int64_t>(rows.size()), d});
  for (size_t i = 0; i < rows.size(); ++i)
    std::memcpy(out.data.data() + i * d, xv.data.data() + rows[i] * d, sizeof(double) * d);
  auto n = new_node(std::move(out), {x.node()});
  n->backward_fn = [rows, d](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor& g = self.parents[0]->ensure_grad();
    for (size_t i = 0; i < rows.size(); ++i)
      for (int64_t j = 0; j < d; ++j) g.at(rows[i], j) += self.grad.at(static_cast<int64_t>(i), j);
  };
  return Var(n);
}

Var concat_rows(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape[1] != bv.shape[1]) throw std::invalid_argument("concat_rows: column mismatch");
  Tensor out({av.shape[0] + bv.shape[0], av.shape[1]});
  std::memcpy(out.data.data(), av.data.data(), sizeof(double) * av.data.size());
  std::memcpy(out.data.data() + av.data.size(), bv.data.data(), sizeof(double) * bv.data.size());
  const int64_t na = av.numel();
  auto n = new_node(std::move(out), {a.node(), b.node()});
  n->backward_fn = [na](Node& self) {
    if (self.parents[0]->requires_grad) {
      Tensor& g = self.parents[0]->ensure_grad();
      for (int64_t i = 0; i < na; ++i) g.data[i] += self.grad.data[i];
    }
    if (self.parents[1]->requires_grad) {
      Tensor& g = self.parents[1]->ensure_grad();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += self.grad.data[na + i];
    }
  };
  return Var(n);
}

Var concat_cols(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape[0] != bv.shape[0]) throw std::invalid_argument("concat_cols: row mismatch");
  const int64_t rows = av.shape[0], ca = av.shape[1], cb = bv.shape[1];
  Tensor out({rows, ca + cb});
  for (int64_t i = 0; i < rows; ++i) {
    std::memcpy(out.data.data() + i * (ca + cb), av.data.data() + i * ca, sizeof(double) * ca);
    std::memcpy(out.data.data() + i * (ca + cb) + ca, bv.data.data() + i * cb, sizeof(double) * cb);
  }
  auto n = new_node(std::move(out), {a.node(), b.node()});
  n->backward_fn = [rows, ca, cb](Node& self) {
    if (self.parents[0]->requires_grad) {
      Tensor& g = self.parents[0]->ensure_grad();
      for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < ca; ++j) g.at(i, j) += self.grad.at(i, j);
    }
    if (self.parents[1]->requires_grad) {
      Tensor& g = self.parents[1]->ensure_grad();
      for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cb; ++j) g.at(i, j) += self.grad.at(i, ca + j);
    }
  };
  return Var(n);
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Tensor& xv = x.value();
  const int64_t rows = xv.shape[0], d = xv.shape[1];
  if (gain.value().numel() != d || bias.value().numel() != d)
    throw std::invalid_argument("layer_norm: gain/bias length mismatch");
  Tensor out({rows, d});
  auto xhat = std::make_shared<Tensor>(Tensor({rows, d}));
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (int64_t i = 0; i < rows; ++i) {
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += xv.at(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double c = xv.at(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (int64_t j = 0; j < d; ++j) {
      const double xh = (xv.at(i, j) - mean) * is;
      xhat->at(i, j) = xh;
      out.at(i, j) = xh * gain.value().at(j) + bias.value().at(j);
    }
  }
  auto n = new_node(std::move(out), {x.node(), gain.node(), bias.node()});
  n->backward_fn = [rows, d, xhat, inv_std](Node& self) {
    const Tensor& gv = self.parents[1]->value;
    for (int64_t i = 0; i < rows; ++i) {
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        const double dxh = self.grad.at(i, j) * gv.at(j);
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat->at(i, j);
      }
      mean_dxhat /= static_cast<double>(d);
      mean_dxhat_xhat /= static_cast<double>(d);
      if (self.parents[0]->requires_grad) {
        Tensor& gx = self.parents[0]->ensure_grad();
        for (int64_t j = 0; j < d; ++j) {
          const double dxh = self.grad.at(i, j) * gv.at(j);
          gx.at(i, j) += ((dxh - mean_dxhat) - xhat->at(i, j) * mean_dxhat_xhat) * (*inv_std)[i];
        }
      }
      if (self.parents[1]->requires_grad) {
        Tensor& gg = self.parents[1]->ensure_grad();
        for (int64_t j = 0; j < d; ++j) gg.at(j) += self.grad.at(i, j) * xhat->at(i, j);
      }
      if (self.parents[2]->requires_grad) {
        Tensor& gb = self.parents[2]->ensure_grad();
        for (int64_t j = 0; j < d; ++j) gb.at(j) += self.grad.at(i, j);
      }
    }
  };
  return Var(n);
}

Var gelu(const Var& x) {
  static const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  static const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::acos(-1.0));
  Tensor out = x.value();
  for (double& v : out.data) v = v * 0.5 * (1.0 + std::erf(v * inv_sqrt2));
  auto n = new_node(std::move(out), {x.node()});
  n->backward_fn = [](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    const Tensor& xv = self.parents[0]->value;
    Tensor& g = self.parents[0]->ensure_grad();
    for (size_t i = 0; i < g.data.size(); ++i) {
      const double v = xv.data[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      g.data[i] += self.grad.data[i] * (cdf + v * pdf);
    }
  };
  return Var(n);
}

Var tanh_op(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.data) v = std::tanh(v);
  auto n = new_node(std::move(out), {x.node()});
  n->backward_fn = [](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor& g = self.parents[0]->ensure_grad();
    for (size_t i = 0; i < g.data.size(); ++i) {
      const double y = self.value.data[i];
      g.data[i] += self.grad.data[i] * (1.0 - y * y);
    }
  };
  return Var(n);
}

Var dropout(const Var& x, double rate, uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
  if (rate == 0.0) return x;
  auto mask = std::make_shared<std::vector<double>>(x.value().data.size());
  Rng rng(seed);
  const double keep_scale = 1.0 / (1.0 - rate);
  Tensor out = x.value();
  for (size_t i = 0; i < out.data.size(); ++i) {
    const double m = rng.bernoulli(rate) ? 0.0 : keep_scale;
    (*mask)[i] = m;
    out.data[i] *= m;
  }
  auto n = new_node(std::move(out), {x.node()});
  n->backward_fn = [mask](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor& g = self.parents[0]->ensure_grad();
    for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += self.grad.data[i] * (*mask)[i];
  };
  return Var(n);
}

Var attention(const Var& q, const Var& k, const Var& v, int64_t batch, int64_t len,
              int64_t heads, const std::vector<int64_t>& lengths) {
  const Tensor& qv = q.value();
  const int64_t d = qv.shape[1];
  if (d % heads != 0) throw std::invalid_argument("attention: heads must divide dim");
  if (qv.shape[0] != batch * len) throw std::invalid_argument("attention: rows != batch*len");
  const int64_t dh = d / heads;
  const double scale_f = 1.0 / std::sqrt(static_cast<double>(dh));

  // Softmax weights saved for backward: (batch, heads, len, len).
  auto probs = std::make_shared<std::vector<double>>(
      static_cast<size_t>(batch * heads * len * len), 0.0);

  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  Tensor out({batch * len, d});
  std::vector<double> logits(static_cast<size_t>(len));
  for (int64_t b = 0; b < batch; ++b) {
    const int64_t start = len - lengths[static_cast<size_t>(b)];
    for (int64_t h = 0; h < heads; ++h) {
      double* pbase = probs->data() + ((b * heads + h) * len) * len;
      for (int64_t t = 0; t < len; ++t) {
        const int64_t lo = (t >= start) ? start : t;
        const int64_t hi = (t >= start) ? t : t;  // padded queries attend to self only
        double mx = -1e300;
        for (int64_t j = lo; j <= hi; ++j) {
          double s = 0.0;
          const double* qrow = qv.data.data() + (b * len + t) * d + h * dh;
          const double* krow = kv.data.data() + (b * len + j) * d + h * dh;
          for (int64_t c = 0; c < dh; ++c) s += qrow[c] * krow[c];
          s *= scale_f;
          logits[static_cast<size_t>(j)] = s;
          if (s > mx) mx = s;
        }
        double z = 0.0;
        for (int64_t j = lo; j <= hi; ++j) z += std::exp(logits[static_cast<size_t>(j)] - mx);
        double* prow = pbase + t * len;
        for (int64_t j = lo; j <= hi; ++j)
          prow[j] = std::exp(logits[static_cast<size_t>(j)] - mx) / z;
        double* orow = out.data.data() + (b * len + t) * d + h * dh;
        for (int64_t j = lo; j <= hi; ++j) {
          const double p = prow[j];
          const double* vrow = vv.data.data() + (b * len + j) * d + h * dh;
          for (int64_t c = 0; c < dh; ++c) orow[c] += p * vrow[c];
        }
      }
    }
  }

  auto n = new_node(std::move(out), {q.node(), k.node(), v.node()});
  n->backward_fn = [batch, len, heads, dh, d, scale_f, probs, lengths](Node& self) {
    const Tensor& qv2 = self.parents[0]->value;
    const Tensor& kv2 = self.parents[1]->value;
    const Tensor& vv2 = self.parents[2]->value;
    const bool need_q = self.parents[0]->requires_grad;
    const bool need_k = self.parents[1]->requires_grad;
    const bool need_v = self.parents[2]->requires_grad;
    Tensor* gq = need_q ? &self.parents[0]->ensure_grad() : nullptr;
    Tensor* gk = need_k ? &self.parents[1]->ensure_grad() : nullptr;
    Tensor* gv = need_v ? &self.parents[2]->ensure_grad() : nullptr;
    std::vector<double> dp(static_cast<size_t>(len));
    for (int64_t b = 0; b < batch; ++b) {
      const int64_t start = len - lengths[static_cast<size_t>(b)];
      for (int64_t h = 0; h < heads; ++h) {
        const double* pbase = probs->data() + ((b * heads + h) * len) * len;
        for (int64_t t = 0; t < len; ++t) {
          const int64_t lo = (t >= start) ? start : t;
          const int64_t hi = t;
          const double* prow = pbase + t * len;
          const double* dout = self.grad.data.data() + (b * len + t) * d + h * dh;
          // dP[j] = <dout, V_j>, then dlogits = P * (dP - sum_j dP[j]P[j])
          double dot = 0.0;
          for (int64_t j = lo; j <= hi; ++j) {
            const double* vrow = vv2.data.data() + (b * len + j) * d + h * dh;
            double s = 0.0;
            for (int64_t c = 0; c < dh; ++c) s += dout[c] * vrow[c];
            dp[static_cast<size_t>(j)] = s;
            dot += s * prow[j];
          }
          for (int64_t j = lo; j <= hi; ++j) {
            const double p = prow[j];
            if (need_v) {
              double* gvrow = gv->data.data() + (b * len + j) * d + h * dh;
              for (int64_t c = 0; c < dh; ++c) gvrow[c] += p * dout[c];
            }
            const double dlogit = p * (dp[static_cast<size_t>(j)] - dot) * scale_f;
            if (dlogit == 0.0) continue;
            const double* qrow = qv2.data.data() + (b * len + t) * d + h * dh;
            const double* krow = kv2.data.data() + (b * len + j) * d + h * dh;
            if (need_q) {
              double* gqrow = gq->data.data() + (b * len + t) * d + h * dh;
              for (int64_t c = 0; c < dh; ++c) gqrow[c] += dlogit * krow[c];
            }
            if (need_k) {
              double* gkrow = gk->data.data() + (b * len + j) * d + h * dh;
              for (int64_t c = 0; c < dh; ++c) gkrow[c] += dlogit * qrow[c];
            }
          }
        }
      }
    }
  };
  return Var(n);
}

Var row_l2_normalize(const Var& x) {
  const Tensor& xv = x.value();
  const int64_t rows = xv.shape[0], d = xv.shape[1];
  auto norms = std::make_shared<std::vector<double>>(rows);
  Tensor out({rows, d});
  for (int64_t i = 0; i < rows; ++i) {
    double sq = 0.0;
    for (int64_t j = 0; j < d; ++j) sq += xv.at(i, j) * xv.at(i, j);
    const double nn = std::sqrt(sq);
    if (nn == 0.0)
      throw std::domain_error("row_l2_normalize: zero-norm representation at view " +
                              std::to_string(i));
    (*norms)[i] = nn;
    for (int64_t j = 0; j < d; ++j) out.at(i, j) = xv.at(i, j) / nn;
  }
  auto n = new_node(std::move(out), {x.node()});
  n->backward_fn = [rows, d, norms](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor& g = self.parents[0]->ensure_grad();
    for (int64_t i = 0; i < rows; ++i) {
      double dot = 0.0;
      for (int64_t j = 0; j < d; ++j) dot += self.grad.at(i, j) * self.value.at(i, j);
      const double inv = 1.0 / (*norms)[i];
      for (int64_t j = 0; j < d; ++j)
        g.at(i, j) += (self.grad.at(i, j) - self.value.at(i, j) * dot) * inv;
    }
  };
  return Var(n);
}

Var cross_entropy_mean(const Var& logits, const std::vector<int64_t>& targets, bool mask_col0) {
  const Tensor& lv = logits.value();
  const int64_t rows = lv.shape[0], cols = lv.shape[1];
  if (static_cast<int64_t>(targets.size()) != rows)
    throw std::invalid_argument("cross_entropy_mean: target count mismatch");
  auto probs = std::make_shared<Tensor>(Tensor({rows, cols}));
  double total = 0.0;
  const int64_t c0 = mask_col0 ? 1 : 0;
  for (int64_t i = 0; i < rows; ++i) {
    const int64_t t = targets[static_cast<size_t>(i)];
    if (t < c0 || t >= cols)
      throw std::invalid_argument("cross_entropy_mean: target " + std::to_string(t) +
                                  " outside scored vocabulary");
    double mx = -1e300;
    for (int64_t j = c0; j < cols; ++j) mx = std::max(mx, lv.at(i, j));
    double z = 0.0;
    for (int64_t j = c0; j < cols; ++j) z += std::exp(lv.at(i, j) - mx);
    const double logz = mx + std::log(z);
    for (int64_t j = c0; j < cols; ++j) probs->at(i, j) = std::exp(lv.at(i, j) - logz);
    total += logz - lv.at(i, t);
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(rows));
  auto n = new_node(std::move(out), {logits.node()});
  n->backward_fn = [rows, cols, probs, targets](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor& g = self.parents[0]->ensure_grad();
    const double u = self.grad.data[0] / static_cast<double>(rows);
    for (int64_t i = 0; i < rows; ++i) {
      for (int64_t j = 0; j < cols; ++j) g.at(i, j) += u * probs->at(i, j);
      g.at(i, targets[static_cast<size_t>(i)]) -= u;
    }
  };
  return Var(n);
}

Var contrastive_terms(const Var& sim, const ContrastCtx& ctx) {
  const Tensor& sv = sim.value();
  const int64_t n_anchor = sv.shape[0];
  if (static_cast<int64_t>(ctx.pos.size()) != n_anchor ||
      static_cast<int64_t>(ctx.m_minus.size()) != n_anchor ||
      static_cast<int64_t>(ctx.m_plus.size()) != n_anchor)
    throw std::invalid_argument("contrastive_terms: context size mismatch");
  if (ctx.tau <= 0.0) throw std::invalid_argument("contrastive_terms: tau must be positive");

  const double tau = ctx.tau;
  Tensor out({n_anchor});
  auto logz = std::make_shared<std::vector<double>>(n_anchor, 0.0);
  auto active = std::make_shared<std::vector<char>>(n_anchor, 0);
  for (int64_t i = 0; i < n_anchor; ++i) {
    const auto& mm = ctx.m_minus[static_cast<size_t>(i)];
    const auto& mp = ctx.m_plus[static_cast<size_t>(i)];
    const int64_t m = ctx.positive_sampling ? static_cast<int64_t>(mp.size()) : 0;
    const double p = sv.at(i, ctx.pos[static_cast<size_t>(i)]) / tau;
    if (mm.empty() && m == 0) {
      out.at(i) = 0.0;  // denominator equals numerator, exactly
      continue;
    }
    (*active)[static_cast<size_t>(i)] = 1;
    double mx = p;
    for (int64_t j : mm) mx = std::max(mx, sv.at(i, j) / tau);
    double z = std::exp(p - mx);
    for (int64_t j : mm) z += std::exp(sv.at(i, j) / tau - mx);
    const double lz = mx + std::log(z);
    (*logz)[static_cast<size_t>(i)] = lz;
    if (m == 0) {
      out.at(i) = lz - p;
    } else {
      double sum_pos = 0.0;
      for (int64_t j : mp) sum_pos += sv.at(i, j) / tau;
      const double md = static_cast<double>(m);
      out.at(i) = (1.0 + md) * lz - p - sum_pos + std::log(2.0) + md * std::log(2.0 * md);
    }
  }
  auto n = new_node(std::move(out), {sim.node()});
  ContrastCtx ctx_copy = ctx;
  n->backward_fn = [ctx_copy, logz, active, tau, n_anchor](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    const Tensor& sv2 = self.parents[0]->value;
    Tensor& g = self.parents[0]->ensure_grad();
    for (int64_t i = 0; i < n_anchor; ++i) {
      if (!(*active)[static_cast<size_t>(i)]) continue;
      const double u = self.grad.at(i);
      if (u == 0.0) continue;
      const auto& mm = ctx_copy.m_minus[static_cast<size_t>(i)];
      const auto& mp = ctx_copy.m_plus[static_cast<size_t>(i)];
      const int64_t pos = ctx_copy.pos[static_cast<size_t>(i)];
      const int64_t m = ctx_copy.positive_sampling ? static_cast<int64_t>(mp.size()) : 0;
      const double lz = (*logz)[static_cast<size_t>(i)];
      const double zcoef = (1.0 + static_cast<double>(m)) / tau;
      for (int64_t j : mm) {
        const double w = std::exp(sv2.at(i, j) / tau - lz);
        g.at(i, j) += u * zcoef * w;
      }
      const double wp = std::exp(sv2.at(i, pos) / tau - lz);
      g.at(i, pos) += u * (zcoef * wp - 1.0 / tau);
      if (m > 0)
        for (int64_t j : mp) g.at(i, j) += u * (-1.0 / tau);
    }
  };
  return Var(n);
}

Var sum_all(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data) s += v;
  auto n = new_node(Tensor::scalar(s), {x.node()});
  n->backward_fn = [](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor& g = self.parents[0]->ensure_grad();
    const double u = self.grad.data[0];
    for (double& v : g.data) v += u;
  };
  return Var(n);
}

Var mean_all(const Var& x) {
  const double inv = 1.0 / static_cast<double>(x.value().numel());
  double s = 0.0;
  for (double v : x.value().data) s += v;
  auto n = new_node(Tensor::scalar(s * inv), {x.node()});
  n->backward_fn = [inv](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor& g = self.parents[0]->ensure_grad();
    const double u = self.grad.data[0] * inv;
    for (double& v : g.data) v += u;
  };
  return Var(n);
}

Var dot_const(const Var& x, const Tensor& w) {
  check_same_shape(x.value(), w, "dot_const");
  double s = 0.0;
  for (size_t i = 0; i < w.data.size(); ++i) s += x.value().data[i] * w.data[i];
  auto n = new_node(Tensor::scalar(s), {x.node()});
  Tensor w_copy = w;
  n->backward_fn = [w_copy](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor& g = self.parents[0]->ensure_grad();
    const double u = self.grad.data[0];
    for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += u * w_copy.data[i];
  };
  return Var(n);
}

Var sq_diff_sum(const Var& x, double target) {
  double s = 0.0;
  for (double v : x.value().data) s += (v - target) * (v - target);
  auto n = new_node(Tensor::scalar(s), {x.node()});
  n->backward_fn = [target](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    const Tensor& xv = self.parents[0]->value;
    Tensor& g = self.parents[0]->ensure_grad();
    const double u = self.grad.data[0];
    for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += u * 2.0 * (xv.data[i] - target);
  };
  return Var(n);
}

Var detach(const Var& x) { return make_const(x.value()); }

void backward(const Var& root) {
  if (!root.defined() || root.value().numel() != 1)
    throw std::invalid_argument("backward: root must be a defined scalar");
  Node* r = root.node().get();
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(r, 0);
  visited.insert(r);
  while (!stack.empty()) {
    auto& top = stack.back();
    Node* n = top.first;
    if (top.second < n->parents.size()) {
      Node* p = n->parents[top.second++].get();
      if (visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  r->ensure_grad();
  r->grad.data[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->requires_grad) continue;
    if (n->grad.data.empty()) continue;  // no cotangent reached this node
    if (n->backward_fn) n->backward_fn(*n);
  }
}

}  // namespace seqrec::ad
