#include "avasr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace avasr {

namespace {

thread_local bool g_grad_enabled = true;

std::size_t checked_numel(const Shape& s) {
  if (s.empty()) throw DimError("empty shape; scalars use shape [1]");
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw DimError("non-positive extent in shape " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

bool want_grad(const Tensor& t) { return g_grad_enabled && t.requires_grad(); }

int norm_axis(const Shape& s, int axis) {
  int r = static_cast<int>(s.size());
  int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r)
    throw DimError("axis " + std::to_string(axis) + " out of range for shape " +
                   shape_str(s));
  return a;
}

// outer/inner extents around one axis of a row-major shape
void axis_split(const Shape& s, int axis, std::size_t& outer, std::size_t& len,
                std::size_t& inner) {
  outer = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s[i]);
  len = static_cast<std::size_t>(s[axis]);
  inner = 1;
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i)
    inner *= static_cast<std::size_t>(s[i]);
}

// Flattened broadcast batch index -> per-operand offsets in units of one
// matrix. Shared by matmul forward and backward.
struct BatchMap {
  Shape out_batch;
  std::vector<std::size_t> a_off, b_off;
  std::size_t count = 1;
};

BatchMap broadcast_batches(const Shape& a, const Shape& b) {
  int la = static_cast<int>(a.size()) - 2;
  int lb = static_cast<int>(b.size()) - 2;
  int lo = std::max(la, lb);
  BatchMap m;
  m.out_batch.resize(lo);
  for (int i = 0; i < lo; ++i) {
    int ad = i >= lo - la ? a[i - (lo - la)] : 1;
    int bd = i >= lo - lb ? b[i - (lo - lb)] : 1;
    if (ad != bd && ad != 1 && bd != 1)
      throw DimError("matmul batch dims disagree: " + shape_str(a) + " vs " +
                     shape_str(b));
    m.out_batch[i] = std::max(ad, bd);
  }
  for (int i = 0; i < lo; ++i)
    m.count *= static_cast<std::size_t>(m.out_batch[i]);
  m.a_off.resize(m.count);
  m.b_off.resize(m.count);
  std::vector<std::size_t> astr(lo, 0), bstr(lo, 0);
  std::size_t acc = 1;
  for (int i = la - 1; i >= 0; --i) {
    astr[i + (lo - la)] =
        (a[i] == 1 && m.out_batch[i + (lo - la)] > 1) ? 0 : acc;
    acc *= static_cast<std::size_t>(a[i]);
  }
  acc = 1;
  for (int i = lb - 1; i >= 0; --i) {
    bstr[i + (lo - lb)] =
        (b[i] == 1 && m.out_batch[i + (lo - lb)] > 1) ? 0 : acc;
    acc *= static_cast<std::size_t>(b[i]);
  }
  for (std::size_t idx = 0; idx < m.count; ++idx) {
    std::size_t rem = idx, ao = 0, bo = 0;
    for (int i = lo - 1; i >= 0; --i) {
      std::size_t extent = static_cast<std::size_t>(m.out_batch[i]);
      std::size_t digit = rem % extent;
      rem /= extent;
      ao += digit * astr[i];
      bo += digit * bstr[i];
    }
    m.a_off[idx] = ao;
    m.b_off[idx] = bo;
  }
  return m;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& s) { return checked_numel(s); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// --- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
  return full(s, real(0), requires_grad);
}

Tensor Tensor::full(const Shape& s, real v, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->shape = s;
  n->value.assign(checked_numel(s), v);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from_data(const Shape& s, std::vector<real> v,
                         bool requires_grad) {
  if (checked_numel(s) != v.size())
    throw DimError("data size " + std::to_string(v.size()) +
                   " does not match shape " + shape_str(s));
  auto n = std::make_shared<TensorNode>();
  n->shape = s;
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(real v, bool requires_grad) {
  return from_data({1}, {v}, requires_grad);
}

Tensor Tensor::randn(const Shape& s, Rng& rng, real stddev, bool requires_grad) {
  std::vector<real> v(checked_numel(s));
  for (auto& x : v) x = static_cast<real>(rng.normal(0.0, stddev));
  return from_data(s, std::move(v), requires_grad);
}

Tensor Tensor::rand_uniform(const Shape& s, Rng& rng, real lo, real hi,
                            bool requires_grad) {
  std::vector<real> v(checked_numel(s));
  for (auto& x : v) x = static_cast<real>(rng.uniform(lo, hi));
  return from_data(s, std::move(v), requires_grad);
}

Tensor Tensor::make(const Shape& s, std::vector<real> value,
                    std::vector<Tensor> parents, BackwardFn fn) {
  Tensor out = from_data(s, std::move(value), false);
  bool rg = false;
  if (g_grad_enabled)
    for (const Tensor& p : parents)
      if (p.requires_grad()) rg = true;
  if (rg) {
    out.node_->requires_grad = true;
    out.node_->parents = std::move(parents);
    out.node_->backward_fn = std::move(fn);
  }
  return out;
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->shape;
}

int Tensor::ndim() const { return static_cast<int>(shape().size()); }

int Tensor::dim(int axis) const {
  const Shape& s = shape();
  return s[norm_axis(s, axis)];
}

std::size_t Tensor::numel() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->value.size();
}

std::vector<real>& Tensor::data() {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->value;
}

const std::vector<real>& Tensor::data() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->value;
}

std::vector<real>& Tensor::grad() {
  if (!node_) throw ContractError("use of undefined tensor");
  node_->ensure_grad();
  return node_->grad;
}

const std::vector<real>& Tensor::grad() const {
  if (!node_ || node_->grad.size() != node_->value.size())
    throw ContractError("gradient not populated; call backward() first");
  return node_->grad;
}

bool Tensor::has_grad() const {
  return node_ && node_->grad.size() == node_->value.size();
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
  if (!node_) throw ContractError("use of undefined tensor");
  node_->requires_grad = rg;
}

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty())
    std::fill(node_->grad.begin(), node_->grad.end(), real(0));
}

real Tensor::item() const {
  if (numel() != 1)
    throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

real Tensor::at(std::initializer_list<int> idx) const {
  return const_cast<Tensor*>(this)->at_mut(idx);
}

real& Tensor::at_mut(std::initializer_list<int> idx) {
  const Shape& s = shape();
  if (idx.size() != s.size())
    throw DimError("index rank does not match shape " + shape_str(s));
  std::size_t off = 0;
  int i = 0;
  for (int ix : idx) {
    if (ix < 0 || ix >= s[i]) throw DimError("index out of bounds");
    off = off * static_cast<std::size_t>(s[i]) + static_cast<std::size_t>(ix);
    ++i;
  }
  return node_->value[off];
}

void Tensor::backward() const { avasr::backward(*this); }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward() needs a scalar loss");
  TensorNode* root = loss.node();
  if (!root->requires_grad) return;

  // iterative DFS post-order; parents before children in `order`
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next++].node();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Intermediate grads are per-sweep scratch; only leaves accumulate across
  // repeated calls.
  for (TensorNode* n : order)
    if (n->backward_fn) {
      n->ensure_grad();
      std::fill(n->grad.begin(), n->grad.end(), real(0));
    }
  root->ensure_grad();
  root->grad[0] += real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (!n->backward_fn) continue;
    for (Tensor& p : n->parents)
      if (p.requires_grad()) p.node()->ensure_grad();
    n->backward_fn(*n);
  }
}

// --- ops ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2)
    throw DimError("matmul needs rank >= 2: " + shape_str(sa) + " x " +
                   shape_str(sb));
  int m = sa[sa.size() - 2], k = sa[sa.size() - 1];
  int k2 = sb[sb.size() - 2], n = sb[sb.size() - 1];
  if (k != k2)
    throw DimError("matmul inner dims disagree: " + shape_str(sa) + " x " +
                   shape_str(sb));
  BatchMap map = broadcast_batches(sa, sb);
  Shape os = map.out_batch;
  os.push_back(m);
  os.push_back(n);

  std::vector<real> out(shape_numel(os), real(0));
  const std::size_t msz = static_cast<std::size_t>(m) * k;
  const std::size_t bsz = static_cast<std::size_t>(k) * n;
  const std::size_t osz = static_cast<std::size_t>(m) * n;
  const real* pa = a.data().data();
  const real* pb = b.data().data();
  for (std::size_t ob = 0; ob < map.count; ++ob) {
    const real* A = pa + map.a_off[ob] * msz;
    const real* B = pb + map.b_off[ob] * bsz;
    real* O = out.data() + ob * osz;
    for (int i = 0; i < m; ++i) {
      const real* arow = A + static_cast<std::size_t>(i) * k;
      real* orow = O + static_cast<std::size_t>(i) * n;
      for (int p = 0; p < k; ++p) {
        real av = arow[p];
        if (av == real(0)) continue;
        const real* brow = B + static_cast<std::size_t>(p) * n;
        for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }

  return Tensor::make(os, std::move(out), {a, b},
                      [m, k, n, map, msz, bsz, osz](TensorNode& o) {
    Tensor pa = o.parents[0];
    Tensor pb = o.parents[1];
    const real* G = o.grad.data();
    if (pa.requires_grad()) {
      real* dA = pa.grad().data();
      const real* B = pb.data().data();
      for (std::size_t ob = 0; ob < map.count; ++ob) {
        const real* Go = G + ob * osz;
        const real* Bo = B + map.b_off[ob] * bsz;
        real* dAo = dA + map.a_off[ob] * msz;
        // dA = dY . B^T
        for (int i = 0; i < m; ++i) {
          const real* grow = Go + static_cast<std::size_t>(i) * n;
          real* darow = dAo + static_cast<std::size_t>(i) * k;
          for (int p = 0; p < k; ++p) {
            const real* brow = Bo + static_cast<std::size_t>(p) * n;
            real acc = 0;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            darow[p] += acc;
          }
        }
      }
    }
    if (pb.requires_grad()) {
      real* dB = pb.grad().data();
      const real* A = pa.data().data();
      for (std::size_t ob = 0; ob < map.count; ++ob) {
        const real* Go = G + ob * osz;
        const real* Ao = A + map.a_off[ob] * msz;
        real* dBo = dB + map.b_off[ob] * bsz;
        // dB = A^T . dY
        for (int i = 0; i < m; ++i) {
          const real* arow = Ao + static_cast<std::size_t>(i) * k;
          const real* grow = Go + static_cast<std::size_t>(i) * n;
          for (int p = 0; p < k; ++p) {
            real av = arow[p];
            if (av == real(0)) continue;
            real* dbrow = dBo + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) dbrow[j] += av * grow[j];
          }
        }
      }
    }
  });
}

Tensor softmax(const Tensor& x, int axis) {
  const Shape& s = x.shape();
  int ax = norm_axis(s, axis);
  std::size_t outer, len, inner;
  axis_split(s, ax, outer, len, inner);
  std::vector<real> out(x.numel());
  const real* px = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      real mx = px[base];
      for (std::size_t l = 1; l < len; ++l)
        mx = std::max(mx, px[base + l * inner]);
      real denom = 0;
      for (std::size_t l = 0; l < len; ++l) {
        real e = std::exp(px[base + l * inner] - mx);
        out[base + l * inner] = e;
        denom += e;
      }
      for (std::size_t l = 0; l < len; ++l) out[base + l * inner] /= denom;
    }
  }
  return Tensor::make(s, std::move(out), {x},
                      [outer, len, inner](TensorNode& o) {
    Tensor px = o.parents[0];
    if (!px.requires_grad()) return;
    real* dx = px.grad().data();
    const real* y = o.value.data();
    const real* dy = o.grad.data();
    for (std::size_t ou = 0; ou < outer; ++ou) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = ou * len * inner + in;
        real dot = 0;
        for (std::size_t l = 0; l < len; ++l) {
          std::size_t i = base + l * inner;
          dot += dy[i] * y[i];
        }
        for (std::size_t l = 0; l < len; ++l) {
          std::size_t i = base + l * inner;
          dx[i] += y[i] * (dy[i] - dot);
        }
      }
    }
  });
}

static void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* op) {
  if (a.shape() != b.shape())
    throw DimError(std::string(op) + ": shape mismatch " +
                   shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<real> out(a.numel());
  const real* pa = a.data().data();
  const real* pb = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
  return Tensor::make(a.shape(), std::move(out), {a, b}, [](TensorNode& o) {
    for (int p = 0; p < 2; ++p) {
      Tensor t = o.parents[p];
      if (!t.requires_grad()) continue;
      real* g = t.grad().data();
      const real* dy = o.grad.data();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += dy[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<real> out(a.numel());
  const real* pa = a.data().data();
  const real* pb = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  return Tensor::make(a.shape(), std::move(out), {a, b}, [](TensorNode& o) {
    Tensor a = o.parents[0];
    Tensor b = o.parents[1];
    const real* dy = o.grad.data();
    if (a.requires_grad()) {
      real* g = a.grad().data();
      const real* pb = b.data().data();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += dy[i] * pb[i];
    }
    if (b.requires_grad()) {
      real* g = b.grad().data();
      const real* pa = a.data().data();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += dy[i] * pa[i];
    }
  });
}

Tensor scale(const Tensor& x, real c) {
  std::vector<real> out(x.numel());
  const real* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] * c;
  return Tensor::make(x.shape(), std::move(out), {x}, [c](TensorNode& o) {
    Tensor x = o.parents[0];
    if (!x.requires_grad()) return;
    real* g = x.grad().data();
    const real* dy = o.grad.data();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += dy[i] * c;
  });
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1)
    throw DimError("scale_by expects a scalar, got " + shape_str(s.shape()));
  real c = s.data()[0];
  std::vector<real> out(x.numel());
  const real* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] * c;
  return Tensor::make(x.shape(), std::move(out), {x, s}, [](TensorNode& o) {
    Tensor x = o.parents[0];
    Tensor s = o.parents[1];
    const real* dy = o.grad.data();
    if (x.requires_grad()) {
      real c = s.data()[0];
      real* g = x.grad().data();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += dy[i] * c;
    }
    if (s.requires_grad()) {
      const real* px = x.data().data();
      real acc = 0;
      for (std::size_t i = 0; i < o.grad.size(); ++i) acc += dy[i] * px[i];
      s.grad()[0] += acc;
    }
  });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  const Shape& s = x.shape();
  if (b.ndim() != 1 || b.dim(0) != s.back())
    throw DimError("add_bias: bias " + shape_str(b.shape()) +
                   " does not match last dim of " + shape_str(s));
  std::size_t d = static_cast<std::size_t>(s.back());
  std::size_t rows = x.numel() / d;
  std::vector<real> out(x.numel());
  const real* px = x.data().data();
  const real* pb = b.data().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = px[r * d + j] + pb[j];
  return Tensor::make(s, std::move(out), {x, b}, [d, rows](TensorNode& o) {
    Tensor x = o.parents[0];
    Tensor b = o.parents[1];
    const real* dy = o.grad.data();
    if (x.requires_grad()) {
      real* g = x.grad().data();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += dy[i];
    }
    if (b.requires_grad()) {
      real* g = b.grad().data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) g[j] += dy[r * d + j];
    }
  });
}

Tensor add_rowwise(const Tensor& x, const Tensor& r) {
  const Shape& s = x.shape();
  if (r.ndim() != 2 || s.size() < 2 || r.dim(0) != s[s.size() - 2] ||
      r.dim(1) != s.back())
    throw DimError("add_rowwise: " + shape_str(r.shape()) +
                   " does not match trailing dims of " + shape_str(s));
  std::size_t block = static_cast<std::size_t>(r.numel());
  std::size_t reps = x.numel() / block;
  std::vector<real> out(x.numel());
  const real* px = x.data().data();
  const real* pr = r.data().data();
  for (std::size_t b = 0; b < reps; ++b)
    for (std::size_t i = 0; i < block; ++i)
      out[b * block + i] = px[b * block + i] + pr[i];
  return Tensor::make(s, std::move(out), {x, r}, [block, reps](TensorNode& o) {
    Tensor x = o.parents[0];
    Tensor r = o.parents[1];
    const real* dy = o.grad.data();
    if (x.requires_grad()) {
      real* g = x.grad().data();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += dy[i];
    }
    if (r.requires_grad()) {
      real* g = r.grad().data();
      for (std::size_t b = 0; b < reps; ++b)
        for (std::size_t i = 0; i < block; ++i) g[i] += dy[b * block + i];
    }
  });
}

Tensor relu(const Tensor& x) {
  std::vector<real> out(x.numel());
  const real* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = px[i] > real(0) ? px[i] : real(0);
  return Tensor::make(x.shape(), std::move(out), {x}, [](TensorNode& o) {
    Tensor x = o.parents[0];
    if (!x.requires_grad()) return;
    real* g = x.grad().data();
    const real* px = x.data().data();
    const real* dy = o.grad.data();
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      if (px[i] > real(0)) g[i] += dy[i];
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  real eps) {
  const Shape& s = x.shape();
  int d = s.back();
  if (gain.ndim() != 1 || gain.dim(0) != d || bias.ndim() != 1 ||
      bias.dim(0) != d)
    throw DimError("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
  std::size_t D = static_cast<std::size_t>(d);
  std::size_t rows = x.numel() / D;
  std::vector<real> out(x.numel());
  auto xhat = std::make_shared<std::vector<real>>(x.numel());
  auto invstd = std::make_shared<std::vector<real>>(rows);
  const real* px = x.data().data();
  const real* pg = gain.data().data();
  const real* pb = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const real* row = px + r * D;
    real mu = 0;
    for (std::size_t j = 0; j < D; ++j) mu += row[j];
    mu /= static_cast<real>(D);
    real var = 0;
    for (std::size_t j = 0; j < D; ++j) {
      real c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<real>(D);
    real is = real(1) / std::sqrt(var + eps);
    (*invstd)[r] = is;
    for (std::size_t j = 0; j < D; ++j) {
      real xh = (row[j] - mu) * is;
      (*xhat)[r * D + j] = xh;
      out[r * D + j] = xh * pg[j] + pb[j];
    }
  }
  return Tensor::make(s, std::move(out), {x, gain, bias},
                      [D, rows, xhat, invstd](TensorNode& o) {
    Tensor x = o.parents[0];
    Tensor gain = o.parents[1];
    Tensor bias = o.parents[2];
    const real* dy = o.grad.data();
    const real* pg = gain.data().data();
    if (x.requires_grad()) {
      real* gx = x.grad().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const real* dyr = dy + r * D;
        const real* xh = xhat->data() + r * D;
        real is = (*invstd)[r];
        real sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (std::size_t j = 0; j < D; ++j) {
          real dxh = dyr[j] * pg[j];
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xh[j];
        }
        real invD = real(1) / static_cast<real>(D);
        for (std::size_t j = 0; j < D; ++j) {
          real dxh = dyr[j] * pg[j];
          gx[r * D + j] +=
              is * (dxh - invD * sum_dxhat - xh[j] * invD * sum_dxhat_xhat);
        }
      }
    }
    if (gain.requires_grad()) {
      real* gg = gain.grad().data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < D; ++j)
          gg[j] += dy[r * D + j] * (*xhat)[r * D + j];
    }
    if (bias.requires_grad()) {
      real* gb = bias.grad().data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < D; ++j) gb[j] += dy[r * D + j];
    }
  });
}

Tensor dropout(const Tensor& x, real rate, Rng& rng, bool train) {
  if (!train || rate <= real(0)) return x;
  if (rate >= real(1)) throw ConfigError("dropout rate must be < 1");
  real keep = real(1) - rate;
  real inv = real(1) / keep;
  auto mask = std::make_shared<std::vector<real>>(x.numel());
  std::vector<real> out(x.numel());
  const real* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    real m = rng.uniform01() < keep ? inv : real(0);
    (*mask)[i] = m;
    out[i] = px[i] * m;
  }
  return Tensor::make(x.shape(), std::move(out), {x}, [mask](TensorNode& o) {
    Tensor x = o.parents[0];
    if (!x.requires_grad()) return;
    real* g = x.grad().data();
    const real* dy = o.grad.data();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += dy[i] * (*mask)[i];
  });
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids,
                 const Shape& id_shape) {
  if (table.ndim() != 2)
    throw DimError("embedding table must be rank 2, got " +
                   shape_str(table.shape()));
  if (shape_numel(id_shape) != ids.size())
    throw DimError("id count does not match id shape " + shape_str(id_shape));
  int V = table.dim(0), D = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= V)
      throw ContractError("embedding id " + std::to_string(id) +
                          " outside [0, " + std::to_string(V) + ")");
  Shape os = id_shape;
  os.push_back(D);
  std::vector<real> out(ids.size() * static_cast<std::size_t>(D));
  const real* pt = table.data().data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(pt + static_cast<std::size_t>(ids[i]) * D,
              pt + static_cast<std::size_t>(ids[i] + 1) * D,
              out.begin() + i * static_cast<std::size_t>(D));
  auto idcopy = std::make_shared<std::vector<int>>(ids);
  return Tensor::make(os, std::move(out), {table}, [idcopy, D](TensorNode& o) {
    Tensor t = o.parents[0];
    if (!t.requires_grad()) return;
    real* g = t.grad().data();
    const real* dy = o.grad.data();
    for (std::size_t i = 0; i < idcopy->size(); ++i) {
      real* grow = g + static_cast<std::size_t>((*idcopy)[i]) * D;
      const real* dyrow = dy + i * static_cast<std::size_t>(D);
      for (int j = 0; j < D; ++j) grow[j] += dyrow[j];
    }
  });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw DimError("concat of zero tensors");
  const Shape& s0 = xs[0].shape();
  int ax = norm_axis(s0, axis);
  int total = 0;
  for (const Tensor& t : xs) {
    const Shape& s = t.shape();
    if (s.size() != s0.size())
      throw DimError("concat rank mismatch: " + shape_str(s0) + " vs " +
                     shape_str(s));
    for (std::size_t i = 0; i < s.size(); ++i)
      if (static_cast<int>(i) != ax && s[i] != s0[i])
        throw DimError("concat dim mismatch: " + shape_str(s0) + " vs " +
                       shape_str(s));
    total += s[ax];
  }
  Shape os = s0;
  os[ax] = total;
  std::size_t outer, olen, inner;
  axis_split(os, ax, outer, olen, inner);
  std::vector<real> out(shape_numel(os));
  std::vector<std::size_t> lens;
  std::size_t cursor = 0;
  for (const Tensor& t : xs) {
    std::size_t tl = static_cast<std::size_t>(t.shape()[ax]);
    lens.push_back(tl);
    const real* pt = t.data().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(pt + o * tl * inner, pt + (o + 1) * tl * inner,
                out.begin() + (o * olen + cursor) * inner);
    cursor += tl;
  }
  std::vector<Tensor> parents(xs.begin(), xs.end());
  return Tensor::make(os, std::move(out), std::move(parents),
                      [outer, olen, inner, lens](TensorNode& o) {
    std::size_t cursor = 0;
    for (std::size_t pi = 0; pi < o.parents.size(); ++pi) {
      Tensor t = o.parents[pi];
      std::size_t tl = lens[pi];
      if (t.requires_grad()) {
        real* g = t.grad().data();
        const real* dy = o.grad.data();
        for (std::size_t ou = 0; ou < outer; ++ou) {
          const real* src = dy + (ou * olen + cursor) * inner;
          real* dst = g + ou * tl * inner;
          for (std::size_t i = 0; i < tl * inner; ++i) dst[i] += src[i];
        }
      }
      cursor += tl;
    }
  });
}

Tensor mean(const Tensor& x, int axis) {
  const Shape& s = x.shape();
  int ax = norm_axis(s, axis);
  std::size_t outer, len, inner;
  axis_split(s, ax, outer, len, inner);
  Shape os;
  for (int i = 0; i < static_cast<int>(s.size()); ++i)
    if (i != ax) os.push_back(s[i]);
  if (os.empty()) os.push_back(1);
  std::vector<real> out(outer * inner, real(0));
  const real* px = x.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t in = 0; in < inner; ++in)
        out[o * inner + in] += px[(o * len + l) * inner + in];
  real invL = real(1) / static_cast<real>(len);
  for (auto& v : out) v *= invL;
  return Tensor::make(os, std::move(out), {x},
                      [outer, len, inner, invL](TensorNode& o) {
    Tensor x = o.parents[0];
    if (!x.requires_grad()) return;
    real* g = x.grad().data();
    const real* dy = o.grad.data();
    for (std::size_t ou = 0; ou < outer; ++ou)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t in = 0; in < inner; ++in)
          g[(ou * len + l) * inner + in] += dy[ou * inner + in] * invL;
  });
}

Tensor sum(const Tensor& x) {
  real acc = 0;
  for (real v : x.data()) acc += v;
  return Tensor::make({1}, {acc}, {x}, [](TensorNode& o) {
    Tensor x = o.parents[0];
    if (!x.requires_grad()) return;
    real* g = x.grad().data();
    real dy = o.grad[0];
    for (std::size_t i = 0; i < x.numel(); ++i) g[i] += dy;
  });
}

namespace {

// shared by transpose forward (values) and backward (grads, reversed)
void permute2(const Shape& in_shape, int a, int b, const real* src, real* dst,
              bool accumulate) {
  Shape os = in_shape;
  std::swap(os[a], os[b]);
  int r = static_cast<int>(in_shape.size());
  std::vector<std::size_t> istr(r, 1), ostr(r, 1);
  for (int i = r - 2; i >= 0; --i)
    istr[i] = istr[i + 1] * static_cast<std::size_t>(in_shape[i + 1]);
  for (int i = r - 2; i >= 0; --i)
    ostr[i] = ostr[i + 1] * static_cast<std::size_t>(os[i + 1]);
  std::size_t n = shape_numel(in_shape);
  std::vector<int> idx(r, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t rem = flat;
    for (int i = 0; i < r; ++i) {
      idx[i] = static_cast<int>(rem / istr[i]);
      rem %= istr[i];
    }
    std::swap(idx[a], idx[b]);
    std::size_t off = 0;
    for (int i = 0; i < r; ++i) off += static_cast<std::size_t>(idx[i]) * ostr[i];
    if (accumulate)
      dst[flat] += src[off];
    else
      dst[off] = src[flat];
  }
}

}  // namespace

Tensor transpose(const Tensor& x, int a, int b) {
  const Shape& s = x.shape();
  int na = norm_axis(s, a), nb = norm_axis(s, b);
  Shape os = s;
  std::swap(os[na], os[nb]);
  std::vector<real> out(x.numel());
  permute2(s, na, nb, x.data().data(), out.data(), false);
  Shape in_shape = s;
  return Tensor::make(os, std::move(out), {x}, [in_shape, na, nb](TensorNode& o) {
    Tensor x = o.parents[0];
    if (!x.requires_grad()) return;
    // grad flows back through the same index map
    permute2(in_shape, na, nb, o.grad.data(), x.grad().data(), true);
  });
}

Tensor reshape(const Tensor& x, Shape s) {
  std::size_t known = 1;
  int infer = -1;
  for (int i = 0; i < static_cast<int>(s.size()); ++i) {
    if (s[i] == -1) {
      if (infer >= 0) throw DimError("reshape: more than one -1");
      infer = i;
    } else {
      known *= static_cast<std::size_t>(s[i]);
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known)
      throw DimError("reshape: cannot infer dim for " + shape_str(x.shape()));
    s[infer] = static_cast<int>(x.numel() / known);
  }
  if (shape_numel(s) != x.numel())
    throw DimError("reshape " + shape_str(x.shape()) + " -> " + shape_str(s) +
                   " changes element count");
  std::vector<real> out = x.data();
  return Tensor::make(s, std::move(out), {x}, [](TensorNode& o) {
    Tensor x = o.parents[0];
    if (!x.requires_grad()) return;
    real* g = x.grad().data();
    const real* dy = o.grad.data();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += dy[i];
  });
}

Tensor repeat_interleave0(const Tensor& x, int times) {
  if (times < 1) throw DimError("repeat_interleave0: times must be >= 1");
  const Shape& s = x.shape();
  Shape os = s;
  os[0] = s[0] * times;
  std::size_t block = x.numel() / static_cast<std::size_t>(s[0]);
  std::vector<real> out(x.numel() * static_cast<std::size_t>(times));
  const real* px = x.data().data();
  for (int i = 0; i < s[0]; ++i)
    for (int t = 0; t < times; ++t)
      std::copy(px + static_cast<std::size_t>(i) * block,
                px + static_cast<std::size_t>(i + 1) * block,
                out.begin() +
                    (static_cast<std::size_t>(i) * times + t) * block);
  int d0 = s[0];
  return Tensor::make(os, std::move(out), {x}, [d0, times, block](TensorNode& o) {
    Tensor x = o.parents[0];
    if (!x.requires_grad()) return;
    real* g = x.grad().data();
    const real* dy = o.grad.data();
    for (int i = 0; i < d0; ++i)
      for (int t = 0; t < times; ++t) {
        const real* src =
            dy + (static_cast<std::size_t>(i) * times + t) * block;
        real* dst = g + static_cast<std::size_t>(i) * block;
        for (std::size_t j = 0; j < block; ++j) dst[j] += src[j];
      }
  });
}

std::vector<std::vector<real>> finite_diff_grad(
    const std::function<real()>& f, const std::vector<Tensor>& params, real h) {
  if (h <= real(0)) throw ContractError("finite_diff_grad: h must be > 0");
  NoGradGuard guard;  // probe evaluations never need a graph
  std::vector<std::vector<real>> grads;
  grads.reserve(params.size());
  for (const Tensor& p : params) {
    std::vector<real>& v = const_cast<Tensor&>(p).data();
    std::vector<real> g(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      real saved = v[i];
      v[i] = saved + h;
      real fp = f();
      v[i] = saved - h;
      real fm = f();
      v[i] = saved;
      g[i] = (fp - fm) / (real(2) * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace avasr
