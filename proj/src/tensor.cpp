#include "episeg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "episeg/rng.hpp"

namespace episeg {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor extents must be positive");
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

struct Tensor::Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized like data iff requires_grad
  bool requires_grad = false;
  bool is_leaf = true;
};

namespace {

void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto node = std::make_shared<Node>();
  const std::int64_t n = shape_numel(shape);
  node->shape = std::move(shape);
  node->data.assign(static_cast<std::size_t>(n), 0.0);
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(static_cast<std::size_t>(n), 0.0);
  return Tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data().begin(), t.data().end(), value);
  check_finite(t, "full");
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return full({1}, value, requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  const std::int64_t n = shape_numel(shape);
  if (static_cast<std::int64_t>(data.size()) != n)
    throw std::invalid_argument("from_data: buffer length does not match shape " + shape_str(shape));
  Tensor t = zeros(std::move(shape), requires_grad);
  t.node_->data = std::move(data);
  check_finite(t, "from_data");
  return t;
}

Tensor Tensor::randn(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->shape;
}

std::int64_t Tensor::rank() const { return static_cast<std::int64_t>(shape().size()); }

std::int64_t Tensor::size() const { return static_cast<std::int64_t>(node_->data.size()); }

std::int64_t Tensor::extent(std::int64_t dim) const { return shape().at(static_cast<std::size_t>(dim)); }

std::span<double> Tensor::data() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->data;
}

std::span<double> Tensor::grad() const {
  if (!node_ || !node_->requires_grad) throw std::logic_error("tensor has no gradient buffer");
  return node_->grad;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!node_) throw std::logic_error("use of undefined tensor");
  node_->requires_grad = value;
  if (value)
    node_->grad.assign(node_->data.size(), 0.0);
  else
    node_->grad.clear();
}

void Tensor::zero_grad() const {
  if (requires_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item() requires a single-element tensor");
  return node_->data[0];
}

const void* Tensor::id() const { return node_.get(); }

bool Tensor::is_leaf() const { return node_ && node_->is_leaf; }

Tensor Tensor::clone() const {
  if (!node_) return Tensor();
  return from_data(node_->shape, node_->data, node_->requires_grad);
}

// ---- Tape -------------------------------------------------------------------

void Tape::record_step(std::function<void()> backward_step) {
  if (recording_) steps_.push_back(std::move(backward_step));
}

void Tape::register_output(const Tensor& t) {
  if (recording_) outputs_.insert(t.id());
}

bool Tape::owns(const Tensor& t) const { return outputs_.count(t.id()) != 0; }

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) throw std::invalid_argument("backward: loss must be a scalar");
  if (!loss.is_leaf() && !owns(loss))
    throw std::invalid_argument("backward: loss tensor is detached from this tape");
  if (!loss.requires_grad()) return;  // constant graph, nothing reachable
  loss.grad()[0] += 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

Tensor op_output(Tape& tape, Shape shape, bool grad_needed) {
  Tensor out = Tensor::zeros(std::move(shape), grad_needed && tape.recording());
  out.node_->is_leaf = false;
  tape.register_output(out);
  return out;
}

void check_finite(const Tensor& t, const char* op_name) {
  for (double v : t.data())
    if (!std::isfinite(v))
      throw std::runtime_error(std::string(op_name) + ": non-finite value in output");
}

void check_same_tape(Tape& tape, const Tensor& input, const char* op_name) {
  if (!input.is_leaf() && tape.recording() && !tape.owns(input))
    throw std::invalid_argument(std::string(op_name) + ": input belongs to a different tape");
}

namespace {

bool wants_grad(Tape& tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape.recording()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Accumulates src into dst's grad if dst participates in differentiation.
inline bool has_grad(const Tensor& t) { return t.requires_grad(); }

}  // namespace

// ---- elementwise ------------------------------------------------------------

static void check_binary(Tape& tape, const Tensor& a, const Tensor& b, const char* name) {
  check_same_tape(tape, a, name);
  check_same_tape(tape, b, name);
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

// add and sub share a backward rule up to the sign on b's gradient.
static Tensor add_like(Tape& tape, const Tensor& a, const Tensor& b, const char* name,
                       double sign_b) {
  check_binary(tape, a, b, name);
  Tensor out = op_output(tape, a.shape(), wants_grad(tape, {&a, &b}));
  const auto av = a.data();
  const auto bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + sign_b * bv[i];
  check_finite(out, name);
  if (out.requires_grad()) {
    tape.record_step([a, b, out, sign_b]() {
      const auto g = out.grad();
      if (has_grad(a)) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (has_grad(b)) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sign_b * g[i];
      }
    });
  }
  return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return add_like(tape, a, b, "add", 1.0);
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return add_like(tape, a, b, "sub", -1.0);
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  check_binary(tape, a, b, "mul");
  Tensor out = op_output(tape, a.shape(), wants_grad(tape, {&a, &b}));
  const auto av = a.data();
  const auto bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  check_finite(out, "mul");
  if (out.requires_grad()) {
    tape.record_step([a, b, out]() {
      const auto g = out.grad();
      if (has_grad(a)) {
        auto ga = a.grad();
        const auto bv2 = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
      }
      if (has_grad(b)) {
        auto gb = b.grad();
        const auto av2 = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
  check_same_tape(tape, a, "scale");
  Tensor out = op_output(tape, a.shape(), wants_grad(tape, {&a}));
  const auto av = a.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = factor * av[i];
  check_finite(out, "scale");
  if (out.requires_grad()) {
    tape.record_step([a, out, factor]() {
      if (!has_grad(a)) return;
      const auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
    });
  }
  return out;
}

Tensor relu(Tape& tape, const Tensor& x) {
  check_same_tape(tape, x, "relu");
  Tensor out = op_output(tape, x.shape(), wants_grad(tape, {&x}));
  const auto xv = x.data();
  auto ov = out.data();
  std::uint64_t sign_bits = 0;
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const bool pos = xv[i] > 0.0;
    ov[i] = pos ? xv[i] : 0.0;
    sign_bits = (sign_bits << 1 | (pos ? 1u : 0u)) ^ (sign_bits >> 63);
  }
  tape.note_decision(sign_bits);
  if (out.requires_grad()) {
    tape.record_step([x, out]() {
      if (!has_grad(x)) return;
      const auto g = out.grad();
      const auto xv2 = x.data();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv2[i] > 0.0) gx[i] += g[i];
    });
  }
  return out;
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
  check_same_tape(tape, x, "sigmoid");
  Tensor out = op_output(tape, x.shape(), wants_grad(tape, {&x}));
  const auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  check_finite(out, "sigmoid");
  if (out.requires_grad()) {
    tape.record_step([x, out]() {
      if (!has_grad(x)) return;
      const auto g = out.grad();
      const auto ov2 = out.data();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * ov2[i] * (1.0 - ov2[i]);
    });
  }
  return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
  check_same_tape(tape, x, "sum");
  Tensor out = op_output(tape, {1}, wants_grad(tape, {&x}));
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  out.data()[0] = acc;
  check_finite(out, "sum");
  if (out.requires_grad()) {
    tape.record_step([x, out]() {
      if (!has_grad(x)) return;
      const double g = out.grad()[0];
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

// ---- linear -----------------------------------------------------------------

Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  check_same_tape(tape, x, "linear");
  check_same_tape(tape, weight, "linear");
  check_same_tape(tape, bias, "linear");
  require(x.rank() == 1 && weight.rank() == 2 && bias.rank() == 1, "linear: ranks must be 1/2/1");
  const std::int64_t m = x.extent(0);
  const std::int64_t n = weight.extent(0);
  if (weight.extent(1) != m || bias.extent(0) != n)
    throw std::invalid_argument("linear: shape mismatch");
  Tensor out = op_output(tape, {n}, wants_grad(tape, {&x, &weight, &bias}));
  const auto xv = x.data();
  const auto wv = weight.data();
  const auto bv = bias.data();
  auto ov = out.data();
  for (std::int64_t i = 0; i < n; ++i) {
    double acc = bv[i];
    const double* row = wv.data() + i * m;
    for (std::int64_t j = 0; j < m; ++j) acc += row[j] * xv[j];
    ov[i] = acc;
  }
  check_finite(out, "linear");
  if (out.requires_grad()) {
    tape.record_step([x, weight, bias, out, n, m]() {
      const auto g = out.grad();
      if (has_grad(x)) {
        auto gx = x.grad();
        const auto wv2 = weight.data();
        for (std::int64_t i = 0; i < n; ++i) {
          const double gi = g[i];
          const double* row = wv2.data() + i * m;
          for (std::int64_t j = 0; j < m; ++j) gx[j] += gi * row[j];
        }
      }
      if (has_grad(weight)) {
        auto gw = weight.grad();
        const auto xv2 = x.data();
        for (std::int64_t i = 0; i < n; ++i) {
          const double gi = g[i];
          double* row = gw.data() + i * m;
          for (std::int64_t j = 0; j < m; ++j) row[j] += gi * xv2[j];
        }
      }
      if (has_grad(bias)) {
        auto gb = bias.grad();
        for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

// ---- conv2d -----------------------------------------------------------------

namespace {

struct ConvDims {
  std::int64_t cin, h, w, cout, kh, kw, oh, ow;
  int stride, pad;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
                   int pad) {
  require(input.rank() == 3, "conv2d: input must be [C,H,W]");
  require(kernel.rank() == 4, "conv2d: kernel must be [Cout,Cin,kh,kw]");
  require(bias.rank() == 1, "conv2d: bias must be [Cout]");
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(pad >= 0, "conv2d: pad must be >= 0");
  ConvDims d;
  d.cin = input.extent(0);
  d.h = input.extent(1);
  d.w = input.extent(2);
  d.cout = kernel.extent(0);
  d.kh = kernel.extent(2);
  d.kw = kernel.extent(3);
  d.stride = stride;
  d.pad = pad;
  if (kernel.extent(1) != d.cin) throw std::invalid_argument("conv2d: channel mismatch");
  if (bias.extent(0) != d.cout) throw std::invalid_argument("conv2d: bias size mismatch");
  if (d.kh > d.h + 2 * pad || d.kw > d.w + 2 * pad)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
  d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
  return d;
}

// Valid output-x range for a given kernel column: 0 <= ox*stride + kx - pad < w.
inline void ox_range(std::int64_t kx, const ConvDims& d, std::int64_t& lo, std::int64_t& hi) {
  const std::int64_t off = kx - d.pad;
  lo = off < 0 ? (-off + d.stride - 1) / d.stride : 0;
  hi = (d.w - 1 - off) / d.stride;  // inclusive
  if (hi > d.ow - 1) hi = d.ow - 1;
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int pad) {
  check_same_tape(tape, input, "conv2d");
  check_same_tape(tape, kernel, "conv2d");
  check_same_tape(tape, bias, "conv2d");
  const ConvDims d = conv_dims(input, kernel, bias, stride, pad);
  Tensor out = op_output(tape, {d.cout, d.oh, d.ow}, wants_grad(tape, {&input, &kernel, &bias}));
  {
    const double* in = input.data().data();
    const double* k = kernel.data().data();
    const double* b = bias.data().data();
    double* o = out.data().data();
    for (std::int64_t co = 0; co < d.cout; ++co)
      std::fill(o + co * d.oh * d.ow, o + (co + 1) * d.oh * d.ow, b[co]);
    if (d.kh == 3 && d.kw == 3 && d.stride == 1) {
      // Fused three-tap stencil: one pass over each output row per kernel
      // row instead of nine scalar-coefficient passes. Matters most on the
      // small late-stage maps, where loop setup would otherwise dominate.
      const std::int64_t lo = std::max<std::int64_t>(0, d.pad);
      const std::int64_t hi = std::min<std::int64_t>(d.ow - 1, d.w + d.pad - 3);
      for (std::int64_t co = 0; co < d.cout; ++co) {
        for (std::int64_t ci = 0; ci < d.cin; ++ci) {
          const double* in_ch = in + ci * d.h * d.w;
          const double* kk = k + (co * d.cin + ci) * 9;
          for (std::int64_t oy = 0; oy < d.oh; ++oy) {
            double* out_row = o + (co * d.oh + oy) * d.ow;
            for (std::int64_t kr = 0; kr < 3; ++kr) {
              const std::int64_t iy = oy + kr - d.pad;
              if (iy < 0 || iy >= d.h) continue;
              const double* r = in_ch + iy * d.w;
              const double k0 = kk[kr * 3], k1 = kk[kr * 3 + 1], k2 = kk[kr * 3 + 2];
              for (std::int64_t ox = lo; ox <= hi; ++ox) {
                const std::int64_t ix = ox - d.pad;
                out_row[ox] += k0 * r[ix] + k1 * r[ix + 1] + k2 * r[ix + 2];
              }
              // columns where part of the stencil hangs off the image
              auto edge = [&](std::int64_t ox) {
                for (std::int64_t kx = 0; kx < 3; ++kx) {
                  const std::int64_t ix = ox - d.pad + kx;
                  if (ix >= 0 && ix < d.w) out_row[ox] += kk[kr * 3 + kx] * r[ix];
                }
              };
              for (std::int64_t ox = 0; ox < std::min(lo, d.ow); ++ox) edge(ox);
              for (std::int64_t ox = std::max(hi + 1, lo); ox < d.ow; ++ox) edge(ox);
            }
          }
        }
      }
    } else {
      for (std::int64_t co = 0; co < d.cout; ++co) {
        for (std::int64_t ci = 0; ci < d.cin; ++ci) {
          const double* in_ch = in + ci * d.h * d.w;
          for (std::int64_t ky = 0; ky < d.kh; ++ky) {
            for (std::int64_t kx = 0; kx < d.kw; ++kx) {
              const double kv = k[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
              if (kv == 0.0) continue;
              std::int64_t xlo, xhi;
              ox_range(kx, d, xlo, xhi);
              for (std::int64_t oy = 0; oy < d.oh; ++oy) {
                const std::int64_t iy = oy * d.stride + ky - d.pad;
                if (iy < 0 || iy >= d.h) continue;
                const double* in_row = in_ch + iy * d.w + (kx - d.pad);
                double* out_row = o + (co * d.oh + oy) * d.ow;
                if (d.stride == 1) {
                  for (std::int64_t ox = xlo; ox <= xhi; ++ox) out_row[ox] += kv * in_row[ox];
                } else {
                  for (std::int64_t ox = xlo; ox <= xhi; ++ox)
                    out_row[ox] += kv * in_row[ox * d.stride];
                }
              }
            }
          }
        }
      }
    }
  }
  check_finite(out, "conv2d");
  if (out.requires_grad()) {
    tape.record_step([input, kernel, bias, out, d]() {
      const double* g = out.grad().data();
      if (has_grad(bias)) {
        auto gb = bias.grad();
        for (std::int64_t co = 0; co < d.cout; ++co) {
          double acc = 0.0;
          const double* gch = g + co * d.oh * d.ow;
          for (std::int64_t i = 0; i < d.oh * d.ow; ++i) acc += gch[i];
          gb[co] += acc;
        }
      }
      const bool gi = has_grad(input);
      const bool gk = has_grad(kernel);
      if (!gi && !gk) return;
      const double* in = input.data().data();
      const double* k = kernel.data().data();
      double* din = gi ? input.grad().data() : nullptr;
      double* dk = gk ? kernel.grad().data() : nullptr;
      for (std::int64_t co = 0; co < d.cout; ++co) {
        for (std::int64_t ci = 0; ci < d.cin; ++ci) {
          const double* in_ch = in + ci * d.h * d.w;
          double* din_ch = gi ? din + ci * d.h * d.w : nullptr;
          for (std::int64_t ky = 0; ky < d.kh; ++ky) {
            for (std::int64_t kx = 0; kx < d.kw; ++kx) {
              const std::int64_t kidx = ((co * d.cin + ci) * d.kh + ky) * d.kw + kx;
              const double kv = k[kidx];
              double kacc = 0.0;
              std::int64_t xlo, xhi;
              ox_range(kx, d, xlo, xhi);
              for (std::int64_t oy = 0; oy < d.oh; ++oy) {
                const std::int64_t iy = oy * d.stride + ky - d.pad;
                if (iy < 0 || iy >= d.h) continue;
                const double* g_row = g + (co * d.oh + oy) * d.ow;
                const std::int64_t base = iy * d.w + (kx - d.pad);
                if (gk) {
                  const double* in_row = in_ch + base;
                  if (d.stride == 1)
                    for (std::int64_t ox = xlo; ox <= xhi; ++ox) kacc += g_row[ox] * in_row[ox];
                  else
                    for (std::int64_t ox = xlo; ox <= xhi; ++ox)
                      kacc += g_row[ox] * in_row[ox * d.stride];
                }
                if (gi) {
                  double* din_row = din_ch + base;
                  if (d.stride == 1)
                    for (std::int64_t ox = xlo; ox <= xhi; ++ox) din_row[ox] += kv * g_row[ox];
                  else
                    for (std::int64_t ox = xlo; ox <= xhi; ++ox)
                      din_row[ox * d.stride] += kv * g_row[ox];
                }
              }
              if (gk) dk[kidx] += kacc;
            }
          }
        }
      }
    });
  }
  return out;
}

// ---- pooling ----------------------------------------------------------------

Tensor maxpool2(Tape& tape, const Tensor& x) {
  check_same_tape(tape, x, "maxpool2");
  require(x.rank() == 3, "maxpool2: input must be [C,H,W]");
  const std::int64_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
  require(h >= 2 && w >= 2, "maxpool2: spatial size must be at least 2x2");
  const std::int64_t oh = h / 2, ow = w / 2;
  Tensor out = op_output(tape, {c, oh, ow}, wants_grad(tape, {&x}));
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(c * oh * ow));
  const double* xv = x.data().data();
  double* ov = out.data().data();
  std::uint64_t decisions = 0;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const double* xch = xv + ch * h * w;
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        const std::int64_t y0 = 2 * oy, x0 = 2 * ox;
        std::int64_t best = y0 * w + x0;
        double bv = xch[best];
        int which = 0, idx = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx, ++idx) {
            const std::int64_t p = (y0 + dy) * w + (x0 + dx);
            if (xch[p] > bv) {  // first max in scan order wins ties
              bv = xch[p];
              best = p;
              which = idx;
            }
          }
        ov[(ch * oh + oy) * ow + ox] = bv;
        (*argmax)[static_cast<std::size_t>((ch * oh + oy) * ow + ox)] = ch * h * w + best;
        decisions = (decisions << 2 | static_cast<unsigned>(which)) ^ (decisions >> 62);
      }
    }
  }
  tape.note_decision(decisions);
  if (out.requires_grad()) {
    tape.record_step([x, out, argmax]() {
      if (!has_grad(x)) return;
      const auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[static_cast<std::size_t>((*argmax)[i])] += g[i];
    });
  }
  return out;
}

Tensor global_avg_pool(Tape& tape, const Tensor& x) {
  check_same_tape(tape, x, "global_avg_pool");
  require(x.rank() == 3, "global_avg_pool: input must be [C,H,W]");
  const std::int64_t c = x.extent(0), hw = x.extent(1) * x.extent(2);
  Tensor out = op_output(tape, {c}, wants_grad(tape, {&x}));
  const double* xv = x.data().data();
  auto ov = out.data();
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    const double* xch = xv + ch * hw;
    for (std::int64_t i = 0; i < hw; ++i) acc += xch[i];
    ov[ch] = acc / static_cast<double>(hw);
  }
  check_finite(out, "global_avg_pool");
  if (out.requires_grad()) {
    tape.record_step([x, out, c, hw]() {
      if (!has_grad(x)) return;
      const auto g = out.grad();
      auto gx = x.grad();
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double gi = g[ch] / static_cast<double>(hw);
        double* gch = gx.data() + ch * hw;
        for (std::int64_t i = 0; i < hw; ++i) gch[i] += gi;
      }
    });
  }
  return out;
}

// ---- bilinear upsample --------------------------------------------------------

Tensor bilinear_upsample(Tape& tape, const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  check_same_tape(tape, x, "bilinear_upsample");
  require(x.rank() == 3, "bilinear_upsample: input must be [C,h,w]");
  const std::int64_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
  if (out_h < h || out_w < w)
    throw std::invalid_argument("bilinear_upsample: output must not be smaller than input");
  Tensor out = op_output(tape, {c, out_h, out_w}, wants_grad(tape, {&x}));

  // Per-axis source coordinates under the align-corners convention.
  struct AxisMap {
    std::vector<std::int64_t> i0, i1;
    std::vector<double> t;
  };
  auto build_axis = [](std::int64_t in_n, std::int64_t out_n) {
    AxisMap m;
    m.i0.resize(static_cast<std::size_t>(out_n));
    m.i1.resize(static_cast<std::size_t>(out_n));
    m.t.resize(static_cast<std::size_t>(out_n));
    const double s = (out_n > 1 && in_n > 1)
                         ? static_cast<double>(in_n - 1) / static_cast<double>(out_n - 1)
                         : 0.0;
    for (std::int64_t o = 0; o < out_n; ++o) {
      const double pos = s * static_cast<double>(o);
      std::int64_t i0 = static_cast<std::int64_t>(std::floor(pos));
      if (i0 > in_n - 1) i0 = in_n - 1;
      const std::int64_t i1 = std::min<std::int64_t>(i0 + 1, in_n - 1);
      m.i0[static_cast<std::size_t>(o)] = i0;
      m.i1[static_cast<std::size_t>(o)] = i1;
      m.t[static_cast<std::size_t>(o)] = pos - static_cast<double>(i0);
    }
    return m;
  };
  auto ym = std::make_shared<AxisMap>(build_axis(h, out_h));
  auto xm = std::make_shared<AxisMap>(build_axis(w, out_w));

  const double* xv = x.data().data();
  double* ov = out.data().data();
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const double* xch = xv + ch * h * w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const std::int64_t y0 = ym->i0[oy], y1 = ym->i1[oy];
      const double ty = ym->t[oy];
      double* orow = ov + (ch * out_h + oy) * out_w;
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const std::int64_t x0 = xm->i0[ox], x1 = xm->i1[ox];
        const double tx = xm->t[ox];
        const double a = xch[y0 * w + x0], b = xch[y0 * w + x1];
        const double cc = xch[y1 * w + x0], dd = xch[y1 * w + x1];
        orow[ox] = (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * cc + tx * dd);
      }
    }
  }
  check_finite(out, "bilinear_upsample");
  if (out.requires_grad()) {
    tape.record_step([x, out, ym, xm, c, h, w, out_h, out_w]() {
      if (!has_grad(x)) return;
      const double* g = out.grad().data();
      double* gx = x.grad().data();
      for (std::int64_t ch = 0; ch < c; ++ch) {
        double* gch = gx + ch * h * w;
        for (std::int64_t oy = 0; oy < out_h; ++oy) {
          const std::int64_t y0 = ym->i0[oy], y1 = ym->i1[oy];
          const double ty = ym->t[oy];
          const double* grow = g + (ch * out_h + oy) * out_w;
          for (std::int64_t ox = 0; ox < out_w; ++ox) {
            const std::int64_t x0 = xm->i0[ox], x1 = xm->i1[ox];
            const double tx = xm->t[ox];
            const double gv = grow[ox];
            gch[y0 * w + x0] += (1 - ty) * (1 - tx) * gv;
            gch[y0 * w + x1] += (1 - ty) * tx * gv;
            gch[y1 * w + x0] += ty * (1 - tx) * gv;
            gch[y1 * w + x1] += ty * tx * gv;
          }
        }
      }
    });
  }
  return out;
}

// ---- views ------------------------------------------------------------------

Tensor reshape(Tape& tape, const Tensor& x, Shape new_shape) {
  check_same_tape(tape, x, "reshape");
  if (shape_numel(new_shape) != x.size())
    throw std::invalid_argument("reshape: element count mismatch");
  Tensor out = op_output(tape, std::move(new_shape), wants_grad(tape, {&x}));
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  if (out.requires_grad()) {
    tape.record_step([x, out]() {
      if (!has_grad(x)) return;
      const auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor slice1d(Tape& tape, const Tensor& x, std::int64_t start, std::int64_t len) {
  check_same_tape(tape, x, "slice1d");
  require(x.rank() == 1, "slice1d: input must be rank 1");
  if (start < 0 || len <= 0 || start + len > x.extent(0))
    throw std::invalid_argument("slice1d: range out of bounds");
  Tensor out = op_output(tape, {len}, wants_grad(tape, {&x}));
  std::copy(x.data().begin() + start, x.data().begin() + start + len, out.data().begin());
  if (out.requires_grad()) {
    tape.record_step([x, out, start]() {
      if (!has_grad(x)) return;
      const auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[static_cast<std::size_t>(start) + i] += g[i];
    });
  }
  return out;
}

Tensor gather_columns(Tape& tape, const Tensor& features,
                      const std::vector<std::pair<std::int64_t, std::int64_t>>& positions) {
  check_same_tape(tape, features, "gather_columns");
  require(features.rank() == 3, "gather_columns: input must be [C,H,W]");
  const std::int64_t c = features.extent(0), h = features.extent(1), w = features.extent(2);
  const std::int64_t p = static_cast<std::int64_t>(positions.size());
  require(p > 0, "gather_columns: empty position list");
  for (const auto& [y, x] : positions)
    if (y < 0 || y >= h || x < 0 || x >= w)
      throw std::invalid_argument("gather_columns: position out of bounds");
  Tensor out = op_output(tape, {c, p}, wants_grad(tape, {&features}));
  const double* fv = features.data().data();
  double* ov = out.data().data();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t i = 0; i < p; ++i)
      ov[ch * p + i] = fv[ch * h * w + positions[i].first * w + positions[i].second];
  if (out.requires_grad()) {
    auto pos = std::make_shared<std::vector<std::pair<std::int64_t, std::int64_t>>>(positions);
    tape.record_step([features, out, pos, c, h, w, p]() {
      if (!has_grad(features)) return;
      const double* g = out.grad().data();
      double* gf = features.grad().data();
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t i = 0; i < p; ++i)
          gf[ch * h * w + (*pos)[i].first * w + (*pos)[i].second] += g[ch * p + i];
    });
  }
  return out;
}

Tensor concat_columns(Tape& tape, const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_columns: nothing to concatenate");
  std::int64_t c = -1, total = 0;
  bool grad_needed = false;
  for (const Tensor& part : parts) {
    check_same_tape(tape, part, "concat_columns");
    require(part.rank() == 2, "concat_columns: every part must be [C,P]");
    if (c < 0) c = part.extent(0);
    require(part.extent(0) == c, "concat_columns: parts disagree on the channel count");
    total += part.extent(1);
    grad_needed = grad_needed || part.requires_grad();
  }
  Tensor out = op_output(tape, {c, total}, tape.recording() && grad_needed);
  double* ov = out.data().data();
  std::int64_t base = 0;
  for (const Tensor& part : parts) {
    const std::int64_t p = part.extent(1);
    const double* pv = part.data().data();
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < p; ++i) ov[ch * total + base + i] = pv[ch * p + i];
    base += p;
  }
  if (out.requires_grad()) {
    auto held = std::make_shared<std::vector<Tensor>>(parts);
    tape.record_step([held, out, c, total]() {
      const double* g = out.grad().data();
      std::int64_t base = 0;
      for (const Tensor& part : *held) {
        const std::int64_t p = part.extent(1);
        if (has_grad(part)) {
          double* gp = part.grad().data();
          for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t i = 0; i < p; ++i) gp[ch * p + i] += g[ch * total + base + i];
        }
        base += p;
      }
    });
  }
  return out;
}

// ---- losses -----------------------------------------------------------------

Tensor bce_loss_sum(Tape& tape, const Tensor& prob, const Tensor& target, double eps) {
  check_same_tape(tape, prob, "bce_loss_sum");
  if (prob.shape() != target.shape())
    throw std::invalid_argument("bce_loss_sum: shape mismatch");
  Tensor out = op_output(tape, {1}, wants_grad(tape, {&prob}));
  const auto pv = prob.data();
  const auto tv = target.data();
  double acc = 0.0;
  std::uint64_t clamp_bits = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double p = std::clamp(pv[i], eps, 1.0 - eps);
    const unsigned state = (pv[i] < eps ? 2u : 0u) | (pv[i] > 1.0 - eps ? 1u : 0u);
    clamp_bits = (clamp_bits << 2 | state) ^ (clamp_bits >> 62);
    acc -= tv[i] * std::log(p) + (1.0 - tv[i]) * std::log(1.0 - p);
  }
  tape.note_decision(clamp_bits);
  out.data()[0] = acc;
  check_finite(out, "bce_loss_sum");
  if (out.requires_grad()) {
    tape.record_step([prob, target, out, eps]() {
      if (!has_grad(prob)) return;
      const double g = out.grad()[0];
      const auto pv2 = prob.data();
      const auto tv2 = target.data();
      auto gp = prob.grad();
      for (std::size_t i = 0; i < pv2.size(); ++i) {
        const double p = std::clamp(pv2[i], eps, 1.0 - eps);
        gp[i] += g * (-tv2[i] / p + (1.0 - tv2[i]) / (1.0 - p));
      }
    });
  }
  return out;
}

Tensor bce_with_logits_mean(Tape& tape, const Tensor& logits, const Tensor& target) {
  check_same_tape(tape, logits, "bce_with_logits_mean");
  if (logits.shape() != target.shape())
    throw std::invalid_argument("bce_with_logits_mean: shape mismatch");
  if (logits.size() == 0) throw std::invalid_argument("bce_with_logits_mean: empty input");
  Tensor out = op_output(tape, {1}, wants_grad(tape, {&logits}));
  const auto zv = logits.data();
  const auto tv = target.data();
  const double inv_n = 1.0 / static_cast<double>(zv.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < zv.size(); ++i) {
    const double z = zv[i];
    acc += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - tv[i] * z;
  }
  out.data()[0] = acc * inv_n;
  check_finite(out, "bce_with_logits_mean");
  if (out.requires_grad()) {
    tape.record_step([logits, target, out, inv_n]() {
      if (!has_grad(logits)) return;
      const double g = out.grad()[0] * inv_n;
      const auto zv2 = logits.data();
      const auto tv2 = target.data();
      auto gz = logits.grad();
      for (std::size_t i = 0; i < zv2.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-zv2[i]));
        gz[i] += g * (s - tv2[i]);
      }
    });
  }
  return out;
}

Tensor softmax_xent_mean(Tape& tape, const Tensor& logits, const std::vector<int>& labels) {
  check_same_tape(tape, logits, "softmax_xent_mean");
  require(logits.rank() == 3, "softmax_xent_mean: logits must be [K,h,w]");
  const std::int64_t k = logits.extent(0), hw = logits.extent(1) * logits.extent(2);
  if (static_cast<std::int64_t>(labels.size()) != hw)
    throw std::invalid_argument("softmax_xent_mean: label count mismatch");
  for (int l : labels)
    if (l < 0 || l >= k) throw std::invalid_argument("softmax_xent_mean: label out of range");
  Tensor out = op_output(tape, {1}, wants_grad(tape, {&logits}));
  const double* lv = logits.data().data();
  double acc = 0.0;
  for (std::int64_t px = 0; px < hw; ++px) {
    double mx = lv[px];
    for (std::int64_t ch = 1; ch < k; ++ch) mx = std::max(mx, lv[ch * hw + px]);
    double sum_exp = 0.0;
    for (std::int64_t ch = 0; ch < k; ++ch) sum_exp += std::exp(lv[ch * hw + px] - mx);
    const double lse = mx + std::log(sum_exp);
    acc += lse - lv[static_cast<std::int64_t>(labels[px]) * hw + px];
  }
  out.data()[0] = acc / static_cast<double>(hw);
  check_finite(out, "softmax_xent_mean");
  if (out.requires_grad()) {
    auto lab = std::make_shared<std::vector<int>>(labels);
    tape.record_step([logits, out, lab, k, hw]() {
      if (!has_grad(logits)) return;
      const double g = out.grad()[0] / static_cast<double>(hw);
      const double* lv2 = logits.data().data();
      double* gl = logits.grad().data();
      for (std::int64_t px = 0; px < hw; ++px) {
        double mx = lv2[px];
        for (std::int64_t ch = 1; ch < k; ++ch) mx = std::max(mx, lv2[ch * hw + px]);
        double sum_exp = 0.0;
        for (std::int64_t ch = 0; ch < k; ++ch) sum_exp += std::exp(lv2[ch * hw + px] - mx);
        for (std::int64_t ch = 0; ch < k; ++ch) {
          const double soft = std::exp(lv2[ch * hw + px] - mx) / sum_exp;
          gl[ch * hw + px] += g * (soft - (ch == (*lab)[px] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

Tensor batchnorm_columns(Tape& tape, const Tensor& x, double eps) {
  check_same_tape(tape, x, "batchnorm_columns");
  require(x.rank() == 2, "batchnorm_columns: input must be [C,P]");
  const std::int64_t c = x.extent(0), p = x.extent(1);
  Tensor out = op_output(tape, x.shape(), wants_grad(tape, {&x}));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c));
  const double* xv = x.data().data();
  double* ov = out.data().data();
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const double* row = xv + ch * p;
    double mean = 0.0;
    for (std::int64_t i = 0; i < p; ++i) mean += row[i];
    mean /= static_cast<double>(p);
    double var = 0.0;
    for (std::int64_t i = 0; i < p; ++i) var += (row[i] - mean) * (row[i] - mean);
    var /= static_cast<double>(p);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(ch)] = is;
    double* orow = ov + ch * p;
    for (std::int64_t i = 0; i < p; ++i) orow[i] = (row[i] - mean) * is;
  }
  check_finite(out, "batchnorm_columns");
  if (out.requires_grad()) {
    tape.record_step([x, out, inv_std, c, p]() {
      if (!has_grad(x)) return;
      const double* g = out.grad().data();
      const double* y = out.data().data();
      double* gx = x.grad().data();
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double* grow = g + ch * p;
        const double* yrow = y + ch * p;
        double gmean = 0.0, gymean = 0.0;
        for (std::int64_t i = 0; i < p; ++i) {
          gmean += grow[i];
          gymean += grow[i] * yrow[i];
        }
        gmean /= static_cast<double>(p);
        gymean /= static_cast<double>(p);
        const double is = (*inv_std)[static_cast<std::size_t>(ch)];
        double* gxrow = gx + ch * p;
        for (std::int64_t i = 0; i < p; ++i)
          gxrow[i] += is * (grow[i] - gmean - yrow[i] * gymean);
      }
    });
  }
  return out;
}

Tensor l1_similarity_bce(Tape& tape, const Tensor& a, const Tensor& b, const Tensor& alpha,
                         const Tensor& beta, const std::vector<std::uint8_t>& labels) {
  check_same_tape(tape, a, "l1_similarity_bce");
  check_same_tape(tape, b, "l1_similarity_bce");
  check_same_tape(tape, alpha, "l1_similarity_bce");
  check_same_tape(tape, beta, "l1_similarity_bce");
  require(a.rank() == 2 && b.rank() == 2, "l1_similarity_bce: features must be [C,P]/[C,Q]");
  require(alpha.rank() == 1 && beta.size() == 1, "l1_similarity_bce: alpha [C], beta scalar");
  const std::int64_t c = a.extent(0), pn = a.extent(1), qn = b.extent(1);
  if (b.extent(0) != c || alpha.extent(0) != c)
    throw std::invalid_argument("l1_similarity_bce: channel mismatch");
  if (static_cast<std::int64_t>(labels.size()) != pn * qn)
    throw std::invalid_argument("l1_similarity_bce: label count mismatch");
  Tensor out = op_output(tape, {1}, wants_grad(tape, {&a, &b, &alpha, &beta}));

  const double* av = a.data().data();
  const double* bv = b.data().data();
  const double* al = alpha.data().data();
  const double be = beta.data()[0];
  const double inv_n = 1.0 / static_cast<double>(pn * qn);

  auto logits = std::make_shared<std::vector<double>>(static_cast<std::size_t>(pn * qn));
  double acc = 0.0;
  std::uint64_t sign_bits = 0;
  for (std::int64_t p = 0; p < pn; ++p) {
    for (std::int64_t q = 0; q < qn; ++q) {
      double z = be;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double diff = av[ch * pn + p] - bv[ch * qn + q];
        const unsigned state = (diff > 0.0 ? 2u : 0u) | (diff < 0.0 ? 1u : 0u);
        sign_bits = (sign_bits << 2 | state) ^ (sign_bits >> 62);
        z += al[ch] * std::abs(diff);
      }
      (*logits)[static_cast<std::size_t>(p * qn + q)] = z;
      const double y = labels[static_cast<std::size_t>(p * qn + q)] ? 1.0 : 0.0;
      // BCE(sigmoid(z), y) = softplus(z) - y*z, computed stably
      acc += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - y * z;
    }
  }
  tape.note_decision(sign_bits);
  out.data()[0] = acc * inv_n;
  check_finite(out, "l1_similarity_bce");
  if (out.requires_grad()) {
    auto lab = std::make_shared<std::vector<std::uint8_t>>(labels);
    tape.record_step([a, b, alpha, beta, out, logits, lab, c, pn, qn, inv_n]() {
      const double g = out.grad()[0] * inv_n;
      const double* av2 = a.data().data();
      const double* bv2 = b.data().data();
      const double* al2 = alpha.data().data();
      double* ga = has_grad(a) ? a.grad().data() : nullptr;
      double* gb = has_grad(b) ? b.grad().data() : nullptr;
      double* gal = has_grad(alpha) ? alpha.grad().data() : nullptr;
      double* gbe = has_grad(beta) ? beta.grad().data() : nullptr;
      for (std::int64_t p = 0; p < pn; ++p) {
        for (std::int64_t q = 0; q < qn; ++q) {
          const double z = (*logits)[static_cast<std::size_t>(p * qn + q)];
          const double s = 1.0 / (1.0 + std::exp(-z));
          const double y = (*lab)[static_cast<std::size_t>(p * qn + q)] ? 1.0 : 0.0;
          const double dz = g * (s - y);
          if (gbe) gbe[0] += dz;
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const double diff = av2[ch * pn + p] - bv2[ch * qn + q];
            const double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
            if (gal) gal[ch] += dz * std::abs(diff);
            if (ga) ga[ch * pn + p] += dz * al2[ch] * sgn;
            if (gb) gb[ch * qn + q] -= dz * al2[ch] * sgn;
          }
        }
      }
    });
  }
  return out;
}

// ---- SGD --------------------------------------------------------------------

SgdState make_sgd(const std::vector<std::pair<Tensor, double>>& params_with_multiplier,
                  double learning_rate, double momentum) {
  if (learning_rate <= 0.0) throw std::invalid_argument("sgd: learning_rate must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("sgd: momentum must be in [0,1)");
  SgdState state;
  state.learning_rate = learning_rate;
  state.momentum = momentum;
  for (const auto& [param, mult] : params_with_multiplier) {
    if (!param.requires_grad())
      throw std::invalid_argument("sgd: parameter does not require gradients");
    SgdState::Slot slot;
    slot.param = param;
    slot.lr_multiplier = mult;
    slot.velocity.assign(static_cast<std::size_t>(param.size()), 0.0);
    state.slots.push_back(std::move(slot));
  }
  return state;
}

void sgd_step(SgdState& state) {
  for (auto& slot : state.slots) {
    if (!slot.param.requires_grad())
      throw std::invalid_argument("sgd_step: parameter is missing its gradient");
    auto g = slot.param.grad();
    auto p = slot.param.data();
    const double step = state.learning_rate * slot.lr_multiplier;
    for (std::size_t i = 0; i < g.size(); ++i) {
      slot.velocity[i] = state.momentum * slot.velocity[i] + g[i];
      p[i] -= step * slot.velocity[i];
      g[i] = 0.0;
    }
  }
}

}  // namespace episeg
