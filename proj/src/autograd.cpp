#include "mvd/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace mvd::nn {

std::atomic<unsigned long long> g_flop_count{0};

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

ECMap emap(const Mat& m) { return ECMap(m.d.data(), m.rows, m.cols); }
EMap emap(Mat& m) { return EMap(m.d.data(), m.rows, m.cols); }

Var make_node(Mat value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  bool needs = false;
  for (const auto& p : n->parents) needs = needs || p->requires_grad;
  n->requires_grad = needs;
  if (needs) n->backprop = std::move(backprop);
  return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->value.rows != b->value.rows || a->value.cols != b->value.cols) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Var leaf(Mat value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

Var constant(Mat value) { return leaf(std::move(value), false); }

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Mat out = a->value;
  for (long i = 0; i < out.size(); ++i) out.d[static_cast<std::size_t>(i)] += b->value.d[static_cast<std::size_t>(i)];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node& p = *self.parents[static_cast<std::size_t>(k)];
      if (!p.requires_grad) continue;
      Mat& g = p.ensure_grad();
      for (long i = 0; i < g.size(); ++i) g.d[static_cast<std::size_t>(i)] += self.grad.d[static_cast<std::size_t>(i)];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Mat out = a->value;
  for (long i = 0; i < out.size(); ++i) out.d[static_cast<std::size_t>(i)] -= b->value.d[static_cast<std::size_t>(i)];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      Mat& g = pa.ensure_grad();
      for (long i = 0; i < g.size(); ++i) g.d[static_cast<std::size_t>(i)] += self.grad.d[static_cast<std::size_t>(i)];
    }
    if (pb.requires_grad) {
      Mat& g = pb.ensure_grad();
      for (long i = 0; i < g.size(); ++i) g.d[static_cast<std::size_t>(i)] -= self.grad.d[static_cast<std::size_t>(i)];
    }
  });
}

Var hadamard(const Var& a, const Var& b) {
  check_same_shape(a, b, "hadamard");
  Mat out = a->value;
  for (long i = 0; i < out.size(); ++i) out.d[static_cast<std::size_t>(i)] *= b->value.d[static_cast<std::size_t>(i)];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      Mat& g = pa.ensure_grad();
      for (long i = 0; i < g.size(); ++i)
        g.d[static_cast<std::size_t>(i)] += self.grad.d[static_cast<std::size_t>(i)] * pb.value.d[static_cast<std::size_t>(i)];
    }
    if (pb.requires_grad) {
      Mat& g = pb.ensure_grad();
      for (long i = 0; i < g.size(); ++i)
        g.d[static_cast<std::size_t>(i)] += self.grad.d[static_cast<std::size_t>(i)] * pa.value.d[static_cast<std::size_t>(i)];
    }
  });
}

Var scale(const Var& a, double c) {
  Mat out = a->value;
  for (auto& x : out.d) x *= c;
  return make_node(std::move(out), {a}, [c](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Mat& g = p.ensure_grad();
    for (long i = 0; i < g.size(); ++i) g.d[static_cast<std::size_t>(i)] += c * self.grad.d[static_cast<std::size_t>(i)];
  });
}

Var add_rowvec(const Var& x, const Var& row) {
  if (row->value.rows != 1 || row->value.cols != x->value.cols) {
    throw std::invalid_argument("add_rowvec: row must be 1 x cols(x)");
  }
  Mat out = x->value;
  for (long r = 0; r < out.rows; ++r)
    for (long c = 0; c < out.cols; ++c) out.at(r, c) += row->value.at(0, c);
  return make_node(std::move(out), {x, row}, [](Node& self) {
    Node& px = *self.parents[0];
    Node& pr = *self.parents[1];
    if (px.requires_grad) {
      Mat& g = px.ensure_grad();
      for (long i = 0; i < g.size(); ++i) g.d[static_cast<std::size_t>(i)] += self.grad.d[static_cast<std::size_t>(i)];
    }
    if (pr.requires_grad) {
      Mat& g = pr.ensure_grad();
      for (long r = 0; r < self.grad.rows; ++r)
        for (long c = 0; c < self.grad.cols; ++c) g.at(0, c) += self.grad.at(r, c);
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  if (a->value.cols != b->value.rows) throw std::invalid_argument("matmul: inner dims differ");
  Mat out(a->value.rows, b->value.cols);
  emap(out).noalias() = emap(a->value) * emap(b->value);
  g_flop_count.fetch_add(
      static_cast<unsigned long long>(a->value.rows) * static_cast<unsigned long long>(a->value.cols) *
          static_cast<unsigned long long>(b->value.cols),
      std::memory_order_relaxed);
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const unsigned long long f = static_cast<unsigned long long>(pa.value.rows) *
                                 static_cast<unsigned long long>(pa.value.cols) *
                                 static_cast<unsigned long long>(pb.value.cols);
    if (pa.requires_grad) {
      emap(pa.ensure_grad()).noalias() += emap(self.grad) * emap(pb.value).transpose();
      g_flop_count.fetch_add(f, std::memory_order_relaxed);
    }
    if (pb.requires_grad) {
      emap(pb.ensure_grad()).noalias() += emap(pa.value).transpose() * emap(self.grad);
      g_flop_count.fetch_add(f, std::memory_order_relaxed);
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a->value.cols != b->value.cols) throw std::invalid_argument("matmul_nt: inner dims differ");
  Mat out(a->value.rows, b->value.rows);
  emap(out).noalias() = emap(a->value) * emap(b->value).transpose();
  g_flop_count.fetch_add(
      static_cast<unsigned long long>(a->value.rows) * static_cast<unsigned long long>(a->value.cols) *
          static_cast<unsigned long long>(b->value.rows),
      std::memory_order_relaxed);
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const unsigned long long f = static_cast<unsigned long long>(pa.value.rows) *
                                 static_cast<unsigned long long>(pa.value.cols) *
                                 static_cast<unsigned long long>(pb.value.rows);
    if (pa.requires_grad) {
      emap(pa.ensure_grad()).noalias() += emap(self.grad) * emap(pb.value);
      g_flop_count.fetch_add(f, std::memory_order_relaxed);
    }
    if (pb.requires_grad) {
      emap(pb.ensure_grad()).noalias() += emap(self.grad).transpose() * emap(pa.value);
      g_flop_count.fetch_add(f, std::memory_order_relaxed);
    }
  });
}

Var gather_rows(const Var& x, std::vector<int> idx) {
  for (const int i : idx) {
    if (i < 0 || i >= x->value.rows) throw std::out_of_range("gather_rows: index out of range");
  }
  Mat out(static_cast<long>(idx.size()), x->value.cols);
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (long c = 0; c < out.cols; ++c) out.at(static_cast<long>(r), c) = x->value.at(idx[r], c);
  return make_node(std::move(out), {x}, [idx = std::move(idx)](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Mat& g = p.ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (long c = 0; c < self.grad.cols; ++c) g.at(idx[r], c) += self.grad.at(static_cast<long>(r), c);
  });
}

Var slice_cols(const Var& x, long c0, long c1) {
  if (c0 < 0 || c1 > x->value.cols || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
  Mat out(x->value.rows, c1 - c0);
  for (long r = 0; r < out.rows; ++r)
    for (long c = 0; c < out.cols; ++c) out.at(r, c) = x->value.at(r, c0 + c);
  return make_node(std::move(out), {x}, [c0](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Mat& g = p.ensure_grad();
    for (long r = 0; r < self.grad.rows; ++r)
      for (long c = 0; c < self.grad.cols; ++c) g.at(r, c0 + c) += self.grad.at(r, c);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  long cols = 0;
  const long rows = parts[0]->value.rows;
  for (const auto& p : parts) {
    if (p->value.rows != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p->value.cols;
  }
  Mat out(rows, cols);
  long off = 0;
  for (const auto& p : parts) {
    for (long r = 0; r < rows; ++r)
      for (long c = 0; c < p->value.cols; ++c) out.at(r, off + c) = p->value.at(r, c);
    off += p->value.cols;
  }
  return make_node(std::move(out), parts, [](Node& self) {
    long off = 0;
    for (auto& pv : self.parents) {
      Node& p = *pv;
      if (p.requires_grad) {
        Mat& g = p.ensure_grad();
        for (long r = 0; r < g.rows; ++r)
          for (long c = 0; c < g.cols; ++c) g.at(r, c) += self.grad.at(r, off + c);
      }
      off += p.value.cols;
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  long rows = 0;
  const long cols = parts[0]->value.cols;
  for (const auto& p : parts) {
    if (p->value.cols != cols) throw std::invalid_argument("concat_rows: col mismatch");
    rows += p->value.rows;
  }
  Mat out(rows, cols);
  long off = 0;
  for (const auto& p : parts) {
    for (long r = 0; r < p->value.rows; ++r)
      for (long c = 0; c < cols; ++c) out.at(off + r, c) = p->value.at(r, c);
    off += p->value.rows;
  }
  return make_node(std::move(out), parts, [](Node& self) {
    long off = 0;
    for (auto& pv : self.parents) {
      Node& p = *pv;
      if (p.requires_grad) {
        Mat& g = p.ensure_grad();
        for (long r = 0; r < g.rows; ++r)
          for (long c = 0; c < g.cols; ++c) g.at(r, c) += self.grad.at(off + r, c);
      }
      off += p.value.rows;
    }
  });
}

Var assemble_rows(const Var& visible, const Var& mask_token,
                  std::vector<int> vis_idx, std::vector<int> mask_idx) {
  if (static_cast<long>(vis_idx.size()) != visible->value.rows) {
    throw std::invalid_argument("assemble_rows: |vis_idx| != rows(visible)");
  }
  if (mask_token->value.rows != 1 || mask_token->value.cols != visible->value.cols) {
    throw std::invalid_argument("assemble_rows: mask token must be 1 x cols(visible)");
  }
  const long total = static_cast<long>(vis_idx.size() + mask_idx.size());
  std::vector<char> seen(static_cast<std::size_t>(total), 0);
  auto claim = [&](int i) {
    if (i < 0 || i >= total || seen[static_cast<std::size_t>(i)]) {
      throw std::invalid_argument("assemble_rows: index sets must partition [0, total)");
    }
    seen[static_cast<std::size_t>(i)] = 1;
  };
  for (const int i : vis_idx) claim(i);
  for (const int i : mask_idx) claim(i);

  Mat out(total, visible->value.cols);
  for (std::size_t r = 0; r < vis_idx.size(); ++r)
    for (long c = 0; c < out.cols; ++c) out.at(vis_idx[r], c) = visible->value.at(static_cast<long>(r), c);
  for (const int i : mask_idx)
    for (long c = 0; c < out.cols; ++c) out.at(i, c) = mask_token->value.at(0, c);
  return make_node(std::move(out), {visible, mask_token},
                   [vis_idx = std::move(vis_idx), mask_idx = std::move(mask_idx)](Node& self) {
                     Node& pv = *self.parents[0];
                     Node& pm = *self.parents[1];
                     if (pv.requires_grad) {
                       Mat& g = pv.ensure_grad();
                       for (std::size_t r = 0; r < vis_idx.size(); ++r)
                         for (long c = 0; c < self.grad.cols; ++c)
                           g.at(static_cast<long>(r), c) += self.grad.at(vis_idx[r], c);
                     }
                     if (pm.requires_grad) {
                       Mat& g = pm.ensure_grad();
                       for (const int i : mask_idx)
                         for (long c = 0; c < self.grad.cols; ++c) g.at(0, c) += self.grad.at(i, c);
                     }
                   });
}

Var mean_rows(const Var& x) {
  const long m = x->value.rows;
  Mat out(1, x->value.cols);
  for (long r = 0; r < m; ++r)
    for (long c = 0; c < out.cols; ++c) out.at(0, c) += x->value.at(r, c);
  for (auto& v : out.d) v /= static_cast<double>(m);
  return make_node(std::move(out), {x}, [m](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Mat& g = p.ensure_grad();
    const double inv = 1.0 / static_cast<double>(m);
    for (long r = 0; r < g.rows; ++r)
      for (long c = 0; c < g.cols; ++c) g.at(r, c) += self.grad.at(0, c) * inv;
  });
}

Var detach(const Var& x) { return constant(x->value); }

Var gelu(const Var& x) {
  static constexpr double kInvSqrt2 = 0.7071067811865475244;
  static constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  Mat out = x->value;
  for (auto& v : out.d) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Mat& g = p.ensure_grad();
    for (long i = 0; i < g.size(); ++i) {
      const double v = p.value.d[static_cast<std::size_t>(i)];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      g.d[static_cast<std::size_t>(i)] += self.grad.d[static_cast<std::size_t>(i)] * (cdf + v * pdf);
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const long n = x->value.cols;
  if (gamma->value.rows != 1 || gamma->value.cols != n || beta->value.rows != 1 || beta->value.cols != n) {
    throw std::invalid_argument("layer_norm: gamma/beta must be 1 x cols(x)");
  }
  Mat out(x->value.rows, n);
  Mat xhat(x->value.rows, n);
  std::vector<double> inv_sigma(static_cast<std::size_t>(x->value.rows));
  for (long r = 0; r < x->value.rows; ++r) {
    double mean = 0.0;
    for (long c = 0; c < n; ++c) mean += x->value.at(r, c);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (long c = 0; c < n; ++c) {
      const double dlt = x->value.at(r, c) - mean;
      var += dlt * dlt;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[static_cast<std::size_t>(r)] = is;
    for (long c = 0; c < n; ++c) {
      const double xh = (x->value.at(r, c) - mean) * is;
      xhat.at(r, c) = xh;
      out.at(r, c) = xh * gamma->value.at(0, c) + beta->value.at(0, c);
    }
  }
  return make_node(std::move(out), {x, gamma, beta},
                   [xhat = std::move(xhat), inv_sigma = std::move(inv_sigma), n](Node& self) {
                     Node& px = *self.parents[0];
                     Node& pg = *self.parents[1];
                     Node& pb = *self.parents[2];
                     if (pg.requires_grad) {
                       Mat& g = pg.ensure_grad();
                       for (long r = 0; r < self.grad.rows; ++r)
                         for (long c = 0; c < n; ++c) g.at(0, c) += self.grad.at(r, c) * xhat.at(r, c);
                     }
                     if (pb.requires_grad) {
                       Mat& g = pb.ensure_grad();
                       for (long r = 0; r < self.grad.rows; ++r)
                         for (long c = 0; c < n; ++c) g.at(0, c) += self.grad.at(r, c);
                     }
                     if (px.requires_grad) {
                       Mat& g = px.ensure_grad();
                       for (long r = 0; r < self.grad.rows; ++r) {
                         double sum_dy = 0.0;
                         double sum_dy_xhat = 0.0;
                         for (long c = 0; c < n; ++c) {
                           const double dy = self.grad.at(r, c) * pg.value.at(0, c);
                           sum_dy += dy;
                           sum_dy_xhat += dy * xhat.at(r, c);
                         }
                         const double inv_n = 1.0 / static_cast<double>(n);
                         const double is = inv_sigma[static_cast<std::size_t>(r)];
                         for (long c = 0; c < n; ++c) {
                           const double dy = self.grad.at(r, c) * pg.value.at(0, c);
                           g.at(r, c) += is * (dy - inv_n * sum_dy - xhat.at(r, c) * inv_n * sum_dy_xhat);
                         }
                       }
                     }
                   });
}

Var softmax_rows(const Var& x) {
  Mat out(x->value.rows, x->value.cols);
  for (long r = 0; r < x->value.rows; ++r) {
    double mx = x->value.at(r, 0);
    for (long c = 1; c < x->value.cols; ++c) mx = std::max(mx, x->value.at(r, c));
    double sum = 0.0;
    for (long c = 0; c < x->value.cols; ++c) {
      const double e = std::exp(x->value.at(r, c) - mx);
      out.at(r, c) = e;
      sum += e;
    }
    for (long c = 0; c < x->value.cols; ++c) out.at(r, c) /= sum;
  }
  // y is recoverable from self.value, no extra capture needed
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Mat& g = p.ensure_grad();
    for (long r = 0; r < self.grad.rows; ++r) {
      double dot = 0.0;
      for (long c = 0; c < self.grad.cols; ++c) dot += self.grad.at(r, c) * self.value.at(r, c);
      for (long c = 0; c < self.grad.cols; ++c)
        g.at(r, c) += self.value.at(r, c) * (self.grad.at(r, c) - dot);
    }
  });
}

Var mean_all(const Var& x) {
  double s = 0.0;
  for (const double v : x->value.d) s += v;
  Mat out(1, 1);
  out.at(0, 0) = s / static_cast<double>(x->value.size());
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Mat& g = p.ensure_grad();
    const double u = self.grad.at(0, 0) / static_cast<double>(g.size());
    for (auto& v : g.d) v += u;
  });
}

namespace {

void check_masked_loss_args(const Var& y, const Var& target, const std::vector<int>& mask_rows,
                            const char* op) {
  if (y->value.rows != target->value.rows || y->value.cols != target->value.cols) {
    throw std::invalid_argument(std::string(op) + ": prediction/target shape mismatch");
  }
  if (mask_rows.empty()) {
    throw std::invalid_argument(std::string(op) + ": empty mask, loss undefined");
  }
  for (const int r : mask_rows) {
    if (r < 0 || r >= y->value.rows) throw std::out_of_range(std::string(op) + ": mask row out of range");
  }
}

}  // namespace

Var mse_masked(const Var& y, const Var& target, std::vector<int> mask_rows) {
  check_masked_loss_args(y, target, mask_rows, "mse_masked");
  const long dim = y->value.cols;
  double acc = 0.0;
  for (const int r : mask_rows) {
    double row = 0.0;
    for (long c = 0; c < dim; ++c) {
      const double e = y->value.at(r, c) - target->value.at(r, c);
      row += e * e;
    }
    acc += row / static_cast<double>(dim);
  }
  Mat out(1, 1);
  out.at(0, 0) = acc / static_cast<double>(mask_rows.size());
  return make_node(std::move(out), {y, target}, [mask_rows = std::move(mask_rows), dim](Node& self) {
    Node& py = *self.parents[0];
    Node& pt = *self.parents[1];
    const double u = self.grad.at(0, 0) * 2.0 /
                     (static_cast<double>(mask_rows.size()) * static_cast<double>(dim));
    if (py.requires_grad) {
      Mat& g = py.ensure_grad();
      for (const int r : mask_rows)
        for (long c = 0; c < dim; ++c) g.at(r, c) += u * (py.value.at(r, c) - pt.value.at(r, c));
    }
    if (pt.requires_grad) {
      Mat& g = pt.ensure_grad();
      for (const int r : mask_rows)
        for (long c = 0; c < dim; ++c) g.at(r, c) -= u * (py.value.at(r, c) - pt.value.at(r, c));
    }
  });
}

Var huber_masked(const Var& y, const Var& target, std::vector<int> mask_rows, double beta) {
  check_masked_loss_args(y, target, mask_rows, "huber_masked");
  if (!(beta > 0.0)) throw std::invalid_argument("huber_masked: beta must be > 0");
  const long dim = y->value.cols;
  double acc = 0.0;
  for (const int r : mask_rows) {
    double row = 0.0;
    for (long c = 0; c < dim; ++c) {
      const double e = y->value.at(r, c) - target->value.at(r, c);
      const double a = std::abs(e);
      row += a < beta ? 0.5 * e * e / beta : a - 0.5 * beta;
    }
    acc += row / static_cast<double>(dim);
  }
  Mat out(1, 1);
  out.at(0, 0) = acc / static_cast<double>(mask_rows.size());
  return make_node(std::move(out), {y, target},
                   [mask_rows = std::move(mask_rows), dim, beta](Node& self) {
                     Node& py = *self.parents[0];
                     Node& pt = *self.parents[1];
                     const double u = self.grad.at(0, 0) /
                                      (static_cast<double>(mask_rows.size()) * static_cast<double>(dim));
                     auto d_elem = [beta](double e) {
                       const double a = std::abs(e);
                       return a < beta ? e / beta : (e > 0.0 ? 1.0 : -1.0);
                     };
                     if (py.requires_grad) {
                       Mat& g = py.ensure_grad();
                       for (const int r : mask_rows)
                         for (long c = 0; c < dim; ++c)
                           g.at(r, c) += u * d_elem(py.value.at(r, c) - pt.value.at(r, c));
                     }
                     if (pt.requires_grad) {
                       Mat& g = pt.ensure_grad();
                       for (const int r : mask_rows)
                         for (long c = 0; c < dim; ++c)
                           g.at(r, c) -= u * d_elem(py.value.at(r, c) - pt.value.at(r, c));
                     }
                   });
}

Var cross_entropy(const Var& logits, std::vector<int> labels) {
  const long n = logits->value.rows;
  const long k = logits->value.cols;
  if (static_cast<long>(labels.size()) != n) throw std::invalid_argument("cross_entropy: label count mismatch");
  for (const int l : labels) {
    if (l < 0 || l >= k) throw std::out_of_range("cross_entropy: label out of range");
  }
  Mat probs(n, k);
  double loss = 0.0;
  for (long r = 0; r < n; ++r) {
    double mx = logits->value.at(r, 0);
    for (long c = 1; c < k; ++c) mx = std::max(mx, logits->value.at(r, c));
    double sum = 0.0;
    for (long c = 0; c < k; ++c) {
      const double e = std::exp(logits->value.at(r, c) - mx);
      probs.at(r, c) = e;
      sum += e;
    }
    for (long c = 0; c < k; ++c) probs.at(r, c) /= sum;
    loss += std::log(sum) + mx - logits->value.at(r, static_cast<long>(labels[static_cast<std::size_t>(r)]));
  }
  Mat out(1, 1);
  out.at(0, 0) = loss / static_cast<double>(n);
  return make_node(std::move(out), {logits},
                   [probs = std::move(probs), labels = std::move(labels)](Node& self) {
                     Node& p = *self.parents[0];
                     if (!p.requires_grad) return;
                     Mat& g = p.ensure_grad();
                     const double u = self.grad.at(0, 0) / static_cast<double>(g.rows);
                     for (long r = 0; r < g.rows; ++r) {
                       for (long c = 0; c < g.cols; ++c) {
                         const double onehot =
                             c == static_cast<long>(labels[static_cast<std::size_t>(r)]) ? 1.0 : 0.0;
                         g.at(r, c) += u * (probs.at(r, c) - onehot);
                       }
                     }
                   });
}

void backward(const Var& root) {
  if (root->value.rows != 1 || root->value.cols != 1) {
    throw std::invalid_argument("backward: root must be scalar");
  }
  if (!root->requires_grad) return;

  // Iterative DFS postorder; reversed it gives a valid topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next].get();
      ++next;
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad().at(0, 0) = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop && node->grad_ready) node->backprop(*node);
  }
}

}  // namespace mvd::nn
