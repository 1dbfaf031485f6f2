#include "filo/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace filo::ad {

void Node::accumulate(const Mat& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Mat Var::grad() const {
  if (node_->grad.size() == 0) return Mat::Zero(rows(), cols());
  return node_->grad;
}

Var constant(Mat value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var leaf(Mat value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

namespace {

Var make(Mat value, std::initializer_list<Var> parents, std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& p : parents) {
    if (p.requires_grad()) {
      n->requires_grad = true;
      break;
    }
  }
  if (n->requires_grad) {
    for (const auto& p : parents) n->parents.push_back(p.ptr());
    n->backward = std::move(bw);
  }
  return Var(std::move(n));
}

Var make_many(Mat value, std::span<const Var> parents, std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& p : parents) {
    if (p.requires_grad()) {
      n->requires_grad = true;
      break;
    }
  }
  if (n->requires_grad) {
    for (const auto& p : parents) n->parents.push_back(p.ptr());
    n->backward = std::move(bw);
  }
  return Var(std::move(n));
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string("ad::") + op + ": shape mismatch");
  }
}

}  // namespace

void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) {
    throw std::invalid_argument("ad::backward: root must be a scalar");
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Mat::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("ad::matmul: inner dimension mismatch");
  Node* pa = a.node();
  Node* pb = b.node();
  return make(a.value() * b.value(), {a, b}, [pa, pb](Node& n) {
    if (pa->requires_grad) pa->accumulate(n.grad * pb->value.transpose());
    if (pb->requires_grad) pb->accumulate(pa->value.transpose() * n.grad);
  });
}

Var left_multiply(std::shared_ptr<const Mat> op, const Var& x) {
  Node* px = x.node();
  Mat out = (*op) * x.value();
  return make(std::move(out), {x}, [op, px](Node& n) { px->accumulate(op->transpose() * n.grad); });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Node* pa = a.node();
  Node* pb = b.node();
  return make(a.value() + b.value(), {a, b}, [pa, pb](Node& n) {
    if (pa->requires_grad) pa->accumulate(n.grad);
    if (pb->requires_grad) pb->accumulate(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Node* pa = a.node();
  Node* pb = b.node();
  return make(a.value() - b.value(), {a, b}, [pa, pb](Node& n) {
    if (pa->requires_grad) pa->accumulate(n.grad);
    if (pb->requires_grad) pb->accumulate(-n.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Node* pa = a.node();
  Node* pb = b.node();
  return make(a.value().cwiseProduct(b.value()), {a, b}, [pa, pb](Node& n) {
    if (pa->requires_grad) pa->accumulate(n.grad.cwiseProduct(pb->value));
    if (pb->requires_grad) pb->accumulate(n.grad.cwiseProduct(pa->value));
  });
}

Var scale(const Var& a, double s) {
  Node* pa = a.node();
  return make(a.value() * s, {a}, [pa, s](Node& n) { pa->accumulate(n.grad * s); });
}

Var add_scalar(const Var& a, double s) {
  Node* pa = a.node();
  return make(a.value().array() + s, {a}, [pa](Node& n) { pa->accumulate(n.grad); });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw std::invalid_argument("ad::add_row: expected 1xM row");
  }
  Node* pa = a.node();
  Node* pr = row.node();
  Mat out = a.value().rowwise() + row.value().row(0);
  return make(std::move(out), {a, row}, [pa, pr](Node& n) {
    if (pa->requires_grad) pa->accumulate(n.grad);
    if (pr->requires_grad) pr->accumulate(n.grad.colwise().sum());
  });
}

Var transpose(const Var& a) {
  Node* pa = a.node();
  return make(a.value().transpose(), {a}, [pa](Node& n) { pa->accumulate(n.grad.transpose()); });
}

Var sum(const Var& a) {
  Node* pa = a.node();
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return make(std::move(out), {a}, [pa](Node& n) {
    pa->accumulate(Mat::Constant(pa->value.rows(), pa->value.cols(), n.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  const double count = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / count);
}

Var col_mean(const Var& a) {
  Node* pa = a.node();
  const double rows = static_cast<double>(a.rows());
  Mat out = a.value().colwise().sum() / rows;
  return make(std::move(out), {a}, [pa, rows](Node& n) {
    Mat g = n.grad.replicate(pa->value.rows(), 1) / rows;
    pa->accumulate(g);
  });
}

Var relu(const Var& a) {
  Node* pa = a.node();
  Mat out = a.value().cwiseMax(0.0);
  return make(std::move(out), {a}, [pa](Node& n) {
    Mat g = (pa->value.array() > 0.0).select(n.grad, 0.0);
    pa->accumulate(g);
  });
}

Var silu(const Var& a) {
  Node* pa = a.node();
  Mat sig = (1.0 + (-a.value().array()).exp()).inverse().matrix();
  Mat out = a.value().cwiseProduct(sig);
  return make(std::move(out), {a}, [pa, sig](Node& n) {
    Mat d = (sig.array() * (1.0 + pa->value.array() * (1.0 - sig.array()))).matrix();
    pa->accumulate(n.grad.cwiseProduct(d));
  });
}

Var quick_gelu(const Var& a) {
  static constexpr double k = 1.702;
  Node* pa = a.node();
  Mat sig = (1.0 + (-k * a.value().array()).exp()).inverse().matrix();
  Mat out = a.value().cwiseProduct(sig);
  return make(std::move(out), {a}, [pa, sig](Node& n) {
    Mat d = (sig.array() * (1.0 + k * pa->value.array() * (1.0 - sig.array()))).matrix();
    pa->accumulate(n.grad.cwiseProduct(d));
  });
}

Var exp(const Var& a) {
  Node* pa = a.node();
  Mat out = a.value().array().exp().matrix();
  return make(out, {a}, [pa, out](Node& n) { pa->accumulate(n.grad.cwiseProduct(out)); });
}

Var log(const Var& a) {
  Node* pa = a.node();
  Mat out = a.value().array().log().matrix();
  return make(std::move(out), {a},
              [pa](Node& n) { pa->accumulate(n.grad.cwiseQuotient(pa->value)); });
}

Var clamp(const Var& a, double lo, double hi) {
  Node* pa = a.node();
  Mat out = a.value().cwiseMax(lo).cwiseMin(hi);
  return make(std::move(out), {a}, [pa, lo, hi](Node& n) {
    Mat g = (pa->value.array() >= lo && pa->value.array() <= hi).select(n.grad, 0.0);
    pa->accumulate(g);
  });
}

Var pow(const Var& a, double p) {
  Node* pa = a.node();
  Mat out = a.value().array().pow(p).matrix();
  return make(std::move(out), {a}, [pa, p](Node& n) {
    Mat d = (p * pa->value.array().pow(p - 1.0)).matrix();
    if (p >= 1.0) d = (pa->value.array() == 0.0).select(p == 1.0 ? 1.0 : 0.0, d.array()).matrix();
    pa->accumulate(n.grad.cwiseProduct(d));
  });
}

Var softmax_rows(const Var& a) {
  Node* pa = a.node();
  Mat out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double m = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return make(out, {a}, [pa, out](Node& n) {
    Eigen::VectorXd dots = n.grad.cwiseProduct(out).rowwise().sum();
    Mat g = out.cwiseProduct(n.grad - dots.replicate(1, out.cols()));
    pa->accumulate(g);
  });
}

Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps) {
  if (gamma.rows() != 1 || gamma.cols() != a.cols() || beta.rows() != 1 ||
      beta.cols() != a.cols()) {
    throw std::invalid_argument("ad::layer_norm_rows: gamma/beta must be 1xM");
  }
  const Eigen::Index rows = a.rows();
  const Eigen::Index cols = a.cols();
  Mat xhat(rows, cols);
  Eigen::VectorXd inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mu = a.value().row(r).mean();
    const double var = (a.value().row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (a.value().row(r).array() - mu) * inv_std(r);
  }
  Mat out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
            beta.value().row(0).array();
  Node* pa = a.node();
  Node* pg = gamma.node();
  Node* pb = beta.node();
  return make(std::move(out), {a, gamma, beta}, [pa, pg, pb, xhat, inv_std](Node& n) {
    if (pg->requires_grad) pg->accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
    if (pb->requires_grad) pb->accumulate(n.grad.colwise().sum());
    if (pa->requires_grad) {
      const double m = static_cast<double>(xhat.cols());
      Mat gx = n.grad.array().rowwise() * pg->value.row(0).array();
      Eigen::VectorXd s1 = gx.rowwise().sum();
      Eigen::VectorXd s2 = gx.cwiseProduct(xhat).rowwise().sum();
      Mat g(gx.rows(), gx.cols());
      for (Eigen::Index r = 0; r < gx.rows(); ++r) {
        g.row(r) = inv_std(r) / m *
                   (m * gx.row(r).array() - s1(r) - xhat.row(r).array() * s2(r));
      }
      pa->accumulate(g);
    }
  });
}

Var l2_normalize_rows(const Var& a, double eps) {
  Eigen::VectorXd norms = a.value().rowwise().norm().cwiseMax(eps);
  Mat out = a.value().array().colwise() / norms.array();
  Node* pa = a.node();
  return make(out, {a}, [pa, out, norms](Node& n) {
    Eigen::VectorXd dots = n.grad.cwiseProduct(out).rowwise().sum();
    Mat g = (n.grad - out.cwiseProduct(dots.replicate(1, out.cols()))).array().colwise() /
            norms.array();
    pa->accumulate(g);
  });
}

Var minmax_normalize(const Var& a, double tie_eps) {
  Eigen::Index rmin = 0, cmin = 0, rmax = 0, cmax = 0;
  const double lo = a.value().minCoeff(&rmin, &cmin);
  const double hi = a.value().maxCoeff(&rmax, &cmax);
  const double range = hi - lo;
  Node* pa = a.node();
  if (!(range > tie_eps)) {
    return make(Mat::Zero(a.rows(), a.cols()), {a}, [](Node&) {});
  }
  Mat out = (a.value().array() - lo) / range;
  return make(out, {a}, [pa, out, range, rmin, cmin, rmax, cmax](Node& n) {
    Mat g = n.grad / range;
    const double s1 = n.grad.sum();
    const double s2 = n.grad.cwiseProduct(out).sum();
    g(rmin, cmin) += (s2 - s1) / range;
    g(rmax, cmax) -= s2 / range;
    pa->accumulate(g);
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw std::out_of_range("ad::slice_rows: out of range");
  }
  Node* pa = a.node();
  return make(a.value().middleRows(start, count), {a}, [pa, start, count](Node& n) {
    if (pa->grad.size() == 0) pa->grad = Mat::Zero(pa->value.rows(), pa->value.cols());
    pa->grad.middleRows(start, count) += n.grad;
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::out_of_range("ad::slice_cols: out of range");
  }
  Node* pa = a.node();
  return make(a.value().middleCols(start, count), {a}, [pa, start, count](Node& n) {
    if (pa->grad.size() == 0) pa->grad = Mat::Zero(pa->value.rows(), pa->value.cols());
    pa->grad.middleCols(start, count) += n.grad;
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("ad::concat_rows: no parts");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("ad::concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat out(rows, cols);
  std::vector<Node*> nodes;
  std::vector<Eigen::Index> starts;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    nodes.push_back(p.node());
    starts.push_back(at);
    at += p.rows();
  }
  return make_many(std::move(out), parts, [nodes, starts](Node& n) {
    for (size_t i = 0; i < nodes.size(); ++i) {
      if (nodes[i]->requires_grad) {
        nodes[i]->accumulate(n.grad.middleRows(starts[i], nodes[i]->value.rows()));
      }
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("ad::concat_cols: no parts");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("ad::concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat out(rows, cols);
  std::vector<Node*> nodes;
  std::vector<Eigen::Index> starts;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    nodes.push_back(p.node());
    starts.push_back(at);
    at += p.cols();
  }
  return make_many(std::move(out), parts, [nodes, starts](Node& n) {
    for (size_t i = 0; i < nodes.size(); ++i) {
      if (nodes[i]->requires_grad) {
        nodes[i]->accumulate(n.grad.middleCols(starts[i], nodes[i]->value.cols()));
      }
    }
  });
}

Var gather_rows(const Var& a, std::span<const Eigen::Index> rows) {
  Mat out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw std::out_of_range("ad::gather_rows");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  Node* pa = a.node();
  std::vector<Eigen::Index> idx(rows.begin(), rows.end());
  return make(std::move(out), {a}, [pa, idx](Node& n) {
    Mat g = Mat::Zero(pa->value.rows(), pa->value.cols());
    for (size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    pa->accumulate(g);
  });
}

Var im2col(const Var& grid, int height, int width, std::span<const Tap> taps) {
  if (grid.rows() != static_cast<Eigen::Index>(height) * width) {
    throw std::invalid_argument("ad::im2col: grid rows != height*width");
  }
  const Eigen::Index c = grid.cols();
  const Eigen::Index t = static_cast<Eigen::Index>(taps.size());
  std::vector<Tap> tv(taps.begin(), taps.end());
  // src(p, k) = flat source index or -1 when padded.
  std::vector<Eigen::Index> src(static_cast<size_t>(height * width) * tv.size(), -1);
  Mat out = Mat::Zero(grid.rows(), t * c);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const Eigen::Index p = static_cast<Eigen::Index>(y) * width + x;
      for (Eigen::Index k = 0; k < t; ++k) {
        const int sy = y + tv[k].dy;
        const int sx = x + tv[k].dx;
        if (sy < 0 || sy >= height || sx < 0 || sx >= width) continue;
        const Eigen::Index s = static_cast<Eigen::Index>(sy) * width + sx;
        src[p * t + k] = s;
        out.block(p, k * c, 1, c) = grid.value().row(s);
      }
    }
  }
  Node* pg = grid.node();
  return make(std::move(out), {grid}, [pg, src, t, c](Node& n) {
    Mat g = Mat::Zero(pg->value.rows(), c);
    for (Eigen::Index p = 0; p < n.grad.rows(); ++p) {
      for (Eigen::Index k = 0; k < t; ++k) {
        const Eigen::Index s = src[p * t + k];
        if (s >= 0) g.row(s) += n.grad.block(p, k * c, 1, c);
      }
    }
    pg->accumulate(g);
  });
}

namespace {

struct Corner {
  Eigen::Index index;  // -1 when outside the grid
  double weight;
};

struct Sample {
  Corner c[4];  // (y0,x0), (y0,x1), (y1,x0), (y1,x1)
  double ly;
  double lx;
};

Sample bilinear_sample(double sy, double sx, int height, int width) {
  Sample s{};
  const double fy = std::floor(sy);
  const double fx = std::floor(sx);
  s.ly = sy - fy;
  s.lx = sx - fx;
  const int y0 = static_cast<int>(fy);
  const int x0 = static_cast<int>(fx);
  const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
  const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const double ws[4] = {(1 - s.ly) * (1 - s.lx), (1 - s.ly) * s.lx, s.ly * (1 - s.lx), s.ly * s.lx};
  for (int i = 0; i < 4; ++i) {
    const bool inside = ys[i] >= 0 && ys[i] < height && xs[i] >= 0 && xs[i] < width;
    s.c[i].index = inside ? static_cast<Eigen::Index>(ys[i]) * width + xs[i] : -1;
    s.c[i].weight = ws[i];
  }
  return s;
}

}  // namespace

Var deform_sum(const Var& grid, const Var& offsets, const Var& weights, int height, int width,
               std::span<const Tap> taps) {
  const Eigen::Index hw = static_cast<Eigen::Index>(height) * width;
  const Eigen::Index k_count = static_cast<Eigen::Index>(taps.size());
  if (grid.rows() != hw) throw std::invalid_argument("ad::deform_sum: grid rows != height*width");
  if (offsets.rows() != hw || offsets.cols() != 2 * k_count) {
    throw std::invalid_argument("ad::deform_sum: offsets must be (H*W)x(2K)");
  }
  if (weights.rows() != 1 || weights.cols() != k_count) {
    throw std::invalid_argument("ad::deform_sum: weights must be 1xK");
  }
  const Eigen::Index c = grid.cols();
  std::vector<Sample> samples(static_cast<size_t>(hw * k_count));
  Mat out = Mat::Zero(hw, c);
  const Mat& g = grid.value();
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const Eigen::Index p = static_cast<Eigen::Index>(y) * width + x;
      for (Eigen::Index k = 0; k < k_count; ++k) {
        const double sy = y + taps[k].dy + offsets.value()(p, 2 * k);
        const double sx = x + taps[k].dx + offsets.value()(p, 2 * k + 1);
        Sample s = bilinear_sample(sy, sx, height, width);
        const double wk = weights.value()(0, k);
        for (const auto& corner : s.c) {
          if (corner.index >= 0 && corner.weight != 0.0) {
            out.row(p) += (wk * corner.weight) * g.row(corner.index);
          }
        }
        samples[p * k_count + k] = s;
      }
    }
  }
  Node* pg = grid.node();
  Node* po = offsets.node();
  Node* pw = weights.node();
  return make(std::move(out), {grid, offsets, weights},
              [pg, po, pw, samples = std::move(samples), hw, k_count, c](Node& n) {
                const Mat& gv = pg->value;
                Mat g_grid = pg->requires_grad ? Mat::Zero(hw, c) : Mat();
                Mat g_off = po->requires_grad ? Mat::Zero(hw, 2 * k_count) : Mat();
                Mat g_w = pw->requires_grad ? Mat::Zero(1, k_count) : Mat();
                Eigen::RowVectorXd v[4];
                for (Eigen::Index p = 0; p < hw; ++p) {
                  const auto go = n.grad.row(p);
                  for (Eigen::Index k = 0; k < k_count; ++k) {
                    const Sample& s = samples[p * k_count + k];
                    const double wk = pw->value(0, k);
                    for (int i = 0; i < 4; ++i) {
                      if (s.c[i].index >= 0) {
                        v[i] = gv.row(s.c[i].index);
                      } else {
                        v[i] = Eigen::RowVectorXd::Zero(c);
                      }
                    }
                    if (pg->requires_grad) {
                      for (int i = 0; i < 4; ++i) {
                        if (s.c[i].index >= 0) g_grid.row(s.c[i].index) += (wk * s.c[i].weight) * go;
                      }
                    }
                    if (pw->requires_grad || po->requires_grad) {
                      if (pw->requires_grad) {
                        double val = 0.0;
                        for (int i = 0; i < 4; ++i) val += s.c[i].weight * go.dot(v[i]);
                        g_w(0, k) += val;
                      }
                      if (po->requires_grad) {
                        const double ly = s.ly;
                        const double lx = s.lx;
                        const double d_ly = go.dot(-(1 - lx) * v[0] - lx * v[1] + (1 - lx) * v[2] + lx * v[3]);
                        const double d_lx = go.dot(-(1 - ly) * v[0] + (1 - ly) * v[1] - ly * v[2] + ly * v[3]);
                        g_off(p, 2 * k) += wk * d_ly;
                        g_off(p, 2 * k + 1) += wk * d_lx;
                      }
                    }
                  }
                }
                if (pg->requires_grad) pg->accumulate(g_grid);
                if (po->requires_grad) po->accumulate(g_off);
                if (pw->requires_grad) pw->accumulate(g_w);
              });
}

}  // namespace filo::ad
