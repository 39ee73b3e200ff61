#include "atvc/nn.hpp"

#include "atvc/wire.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace atvc {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractError(msg);
}

// Below this many multiply-adds the OpenMP fork costs more than it saves.
constexpr long long kParallelFlops = 32768;

}  // namespace

Tensor::Tensor(int r, int c, double fill) : rows(r), cols(c) {
  require(r >= 1 && c >= 1, "tensor dims must be positive, got [" + std::to_string(r) + "," +
                                std::to_string(c) + "]");
  data.assign(static_cast<std::size_t>(r) * c, fill);
}

Tensor Tensor::row(std::vector<double> v) {
  Tensor t;
  t.rows = 1;
  t.cols = static_cast<int>(v.size());
  t.data = std::move(v);
  require(t.cols >= 1, "row tensor needs at least one entry");
  return t;
}

Tensor Tensor::col(std::vector<double> v) {
  Tensor t;
  t.rows = static_cast<int>(v.size());
  t.cols = 1;
  t.data = std::move(v);
  require(t.rows >= 1, "column tensor needs at least one entry");
  return t;
}

Tensor Tensor::scalar(double v) { return Tensor(1, 1, v); }

std::string shape_str(const Tensor& t) {
  return "[" + std::to_string(t.rows) + "," + std::to_string(t.cols) + "]";
}

bool all_finite(const Tensor& t) {
  for (double v : t.data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void dense_nn_serial(const double* a, const double* b, double* c, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(p) * m + j];
      c[static_cast<std::size_t>(i) * m + j] += acc;
    }
  }
}

void dense_nt_serial(const double* a, const double* b, double* c, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(j) * k + p];
      c[static_cast<std::size_t>(i) * m + j] += acc;
    }
  }
}

void dense_tn_serial(const double* a, const double* b, double* c, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a[static_cast<std::size_t>(p) * n + i] * b[static_cast<std::size_t>(p) * m + j];
      c[static_cast<std::size_t>(i) * m + j] += acc;
    }
  }
}

void dense_nn(const double* a, const double* b, double* c, int n, int k, int m, bool parallel) {
  const long long work = static_cast<long long>(n) * k * m;
#pragma omp parallel for schedule(static) if (parallel && work > kParallelFlops)
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(p) * m + j];
      c[static_cast<std::size_t>(i) * m + j] += acc;
    }
  }
}

void dense_nt(const double* a, const double* b, double* c, int n, int k, int m, bool parallel) {
  const long long work = static_cast<long long>(n) * k * m;
#pragma omp parallel for schedule(static) if (parallel && work > kParallelFlops)
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(j) * k + p];
      c[static_cast<std::size_t>(i) * m + j] += acc;
    }
  }
}

void dense_tn(const double* a, const double* b, double* c, int n, int k, int m, bool parallel) {
  const long long work = static_cast<long long>(n) * k * m;
#pragma omp parallel for schedule(static) if (parallel && work > kParallelFlops)
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a[static_cast<std::size_t>(p) * n + i] * b[static_cast<std::size_t>(p) * m + j];
      c[static_cast<std::size_t>(i) * m + j] += acc;
    }
  }
}

Tensor matmul_serial(const Tensor& a, const Tensor& b) {
  require(a.cols == b.rows, "matmul: inner dims differ, " + shape_str(a) + " x " + shape_str(b));
  Tensor out(a.rows, b.cols, 0.0);
  dense_nn_serial(a.data.data(), b.data.data(), out.data.data(), a.rows, a.cols, b.cols);
  return out;
}

Tensor& ParamStore::create(const std::string& name, Tensor init) {
  require(!entries_.count(name), "parameter already exists: " + name);
  require(name.find('\n') == std::string::npos, "parameter name may not contain newlines");
  Entry e;
  e.grad = Tensor(init.rows, init.cols, 0.0);
  e.m = Tensor(init.rows, init.cols, 0.0);
  e.v = Tensor(init.rows, init.cols, 0.0);
  e.value = std::move(init);
  auto [it, ok] = entries_.emplace(name, std::move(e));
  (void)ok;
  return it->second.value;
}

bool ParamStore::has(const std::string& name) const { return entries_.count(name) != 0; }

Tensor& ParamStore::value(const std::string& name) {
  auto it = entries_.find(name);
  require(it != entries_.end(), "unknown parameter: " + name);
  return it->second.value;
}

const Tensor& ParamStore::value(const std::string& name) const {
  auto it = entries_.find(name);
  require(it != entries_.end(), "unknown parameter: " + name);
  return it->second.value;
}

Tensor& ParamStore::grad(const std::string& name) {
  auto it = entries_.find(name);
  require(it != entries_.end(), "unknown parameter: " + name);
  return it->second.grad;
}

const Tensor& ParamStore::grad(const std::string& name) const {
  auto it = entries_.find(name);
  require(it != entries_.end(), "unknown parameter: " + name);
  return it->second.grad;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

void ParamStore::zero_grads() {
  for (auto& [k, e] : entries_) std::fill(e.grad.data.begin(), e.grad.data.end(), 0.0);
}

void ParamStore::adam_step(const AdamConfig& cfg) {
  ++step_;
  const double b1c = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
  const double b2c = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
  for (auto& [k, e] : entries_) {
    for (std::size_t i = 0; i < e.value.data.size(); ++i) {
      const double g = e.grad.data[i];
      e.m.data[i] = cfg.beta1 * e.m.data[i] + (1.0 - cfg.beta1) * g;
      e.v.data[i] = cfg.beta2 * e.v.data[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = e.m.data[i] / b1c;
      const double vhat = e.v.data[i] / b2c;
      e.value.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    std::fill(e.grad.data.begin(), e.grad.data.end(), 0.0);
  }
}

std::map<std::string, Tensor> ParamStore::to_arrays() const {
  std::map<std::string, Tensor> out;
  for (const auto& [k, e] : entries_) {
    out.emplace("param/" + k, e.value);
    out.emplace("adam_m/" + k, e.m);
    out.emplace("adam_v/" + k, e.v);
  }
  out.emplace("adam/step", Tensor::scalar(static_cast<double>(step_)));
  return out;
}

ParamStore ParamStore::from_arrays(const std::map<std::string, Tensor>& arrays) {
  ParamStore store;
  for (const auto& [k, t] : arrays) {
    if (k.rfind("param/", 0) == 0) {
      const std::string name = k.substr(6);
      Entry e;
      e.value = t;
      e.grad = Tensor(t.rows, t.cols, 0.0);
      auto mi = arrays.find("adam_m/" + name);
      auto vi = arrays.find("adam_v/" + name);
      e.m = mi != arrays.end() ? mi->second : Tensor(t.rows, t.cols, 0.0);
      e.v = vi != arrays.end() ? vi->second : Tensor(t.rows, t.cols, 0.0);
      require(e.m.same_shape(t) && e.v.same_shape(t),
              "optimizer state shape mismatch for parameter " + name);
      store.entries_.emplace(name, std::move(e));
    }
  }
  auto si = arrays.find("adam/step");
  if (si != arrays.end()) store.step_ = static_cast<std::int64_t>(si->second.data.at(0));
  return store;
}

namespace {

constexpr char kMagic[8] = {'A', 'T', 'V', 'C', 'T', 'N', 'S', 'R'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

void save_arrays(const std::string& path, const std::map<std::string, Tensor>& arrays) {
  std::string out;
  out.append(kMagic, sizeof(kMagic));
  wire::put_u32(out, kVersion);
  wire::put_u64(out, arrays.size());
  for (const auto& [name, t] : arrays) {
    wire::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    wire::put_u32(out, static_cast<std::uint32_t>(t.rows));
    wire::put_u32(out, static_cast<std::uint32_t>(t.cols));
    for (double v : t.data) wire::put_f64(out, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot open checkpoint for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw ConfigError("short write to checkpoint: " + path);
}

std::map<std::string, Tensor> load_arrays(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open checkpoint: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();

  wire::Reader r{buf};
  const std::string magic = r.bytes(sizeof(kMagic));
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CompatError("not a checkpoint file: " + path);
  }
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw CompatError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint64_t count = r.u64();
  std::map<std::string, Tensor> arrays;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    const std::string name = r.bytes(name_len);
    const int rows = static_cast<int>(r.u32());
    const int cols = static_cast<int>(r.u32());
    if (rows < 1 || cols < 1 || static_cast<long long>(rows) * cols > (1LL << 32)) {
      throw CompatError("corrupt shape in checkpoint for " + name);
    }
    Tensor t(rows, cols, 0.0);
    for (double& v : t.data) v = r.f64();
    if (!arrays.emplace(name, std::move(t)).second) {
      throw CompatError("duplicate array name in checkpoint: " + name);
    }
  }
  return arrays;
}

Tape::Tape(bool grads_enabled, bool parallel_kernels)
    : grads_enabled_(grads_enabled), parallel_(parallel_kernels) {}

int Tape::push(Tensor val) {
  Node n;
  if (grads_enabled_) n.grad = Tensor(val.rows, val.cols, 0.0);
  n.val = std::move(val);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::check(ValueRef v) const {
  require(v.idx >= 0 && v.idx < static_cast<int>(nodes_.size()),
          "value handle does not belong to this tape");
}

const Tensor& Tape::val(ValueRef v) const {
  check(v);
  return nodes_[v.idx].val;
}

ValueRef Tape::constant(Tensor t) { return {push(std::move(t))}; }

ValueRef Tape::param(ParamStore& store, const std::string& name) {
  const int idx = push(store.value(name));
  nodes_[idx].store = &store;
  nodes_[idx].pname = name;
  return {idx};
}

ValueRef Tape::matmul(ValueRef a, ValueRef b) {
  check(a);
  check(b);
  const Tensor& ta = val_at(a.idx);
  const Tensor& tb = val_at(b.idx);
  require(ta.cols == tb.rows, "matmul: inner dims differ, " + shape_str(ta) + " x " + shape_str(tb));
  Tensor out(ta.rows, tb.cols, 0.0);
  dense_nn(ta.data.data(), tb.data.data(), out.data.data(), ta.rows, ta.cols, tb.cols, parallel_);
  const int idx = push(std::move(out));
  if (grads_enabled_) {
    const int ai = a.idx, bi = b.idx;
    nodes_[idx].back = [ai, bi](Tape& t, int self) {
      const Tensor& g = t.grad_at(self);
      const Tensor& va = t.val_at(ai);
      const Tensor& vb = t.val_at(bi);
      dense_nt(g.data.data(), vb.data.data(), t.grad_at(ai).data.data(), va.rows, vb.cols, va.cols,
               t.parallel_);
      dense_tn(va.data.data(), g.data.data(), t.grad_at(bi).data.data(), va.cols, va.rows, vb.cols,
               t.parallel_);
    };
  }
  return {idx};
}

namespace {
void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.same_shape(b),
          std::string(op) + ": shapes differ, " + shape_str(a) + " vs " + shape_str(b));
}
}  // namespace

ValueRef Tape::add(ValueRef a, ValueRef b) {
  check(a);
  check(b);
  const Tensor& ta = val_at(a.idx);
  const Tensor& tb = val_at(b.idx);
  require_same_shape(ta, tb, "add");
  Tensor out = ta;
  for (int i = 0; i < out.size(); ++i) out.data[i] += tb.data[i];
  const int idx = push(std::move(out));
  if (grads_enabled_) {
    const int ai = a.idx, bi = b.idx;
    nodes_[idx].back = [ai, bi](Tape& t, int self) {
      const Tensor& g = t.grad_at(self);
      Tensor& ga = t.grad_at(ai);
      Tensor& gb = t.grad_at(bi);
      for (int i = 0; i < g.size(); ++i) {
        ga.data[i] += g.data[i];
        gb.data[i] += g.data[i];
      }
    };
  }
  return {idx};
}

ValueRef Tape::sub(ValueRef a, ValueRef b) {
  check(a);
  check(b);
  const Tensor& ta = val_at(a.idx);
  const Tensor& tb = val_at(b.idx);
  require_same_shape(ta, tb, "sub");
  Tensor out = ta;
  for (int i = 0; i < out.size(); ++i) out.data[i] -= tb.data[i];
  const int idx = push(std::move(out));
  if (grads_enabled_) {
    const int ai = a.idx, bi = b.idx;
    nodes_[idx].back = [ai, bi](Tape& t, int self) {
      const Tensor& g = t.grad_at(self);
      Tensor& ga = t.grad_at(ai);
      Tensor& gb = t.grad_at(bi);
      for (int i = 0; i < g.size(); ++i) {
        ga.data[i] += g.data[i];
        gb.data[i] -= g.data[i];
      }
    };
  }
  return {idx};
}

ValueRef Tape::mul(ValueRef a, ValueRef b) {
  check(a);
  check(b);
  const Tensor& ta = val_at(a.idx);
  const Tensor& tb = val_at(b.idx);
  require_same_shape(ta, tb, "mul");
  Tensor out = ta;
  for (int i = 0; i < out.size(); ++i) out.data[i] *= tb.data[i];
  const int idx = push(std::move(out));
  if (grads_enabled_) {
    const int ai = a.idx, bi = b.idx;
    nodes_[idx].back = [ai, bi](Tape& t, int self) {
      const Tensor& g = t.grad_at(self);
      const Tensor& va = t.val_at(ai);
      const Tensor& vb = t.val_at(bi);
      Tensor& ga = t.grad_at(ai);
      Tensor& gb = t.grad_at(bi);
      for (int i = 0; i < g.size(); ++i) {
        ga.data[i] += g.data[i] * vb.data[i];
        gb.data[i] += g.data[i] * va.data[i];
      }
    };
  }
  return {idx};
}

ValueRef Tape::minimum(ValueRef a, ValueRef b) {
  check(a);
  check(b);
  const Tensor& ta = val_at(a.idx);
  const Tensor& tb = val_at(b.idx);
  require_same_shape(ta, tb, "minimum");
  Tensor out = ta;
  for (int i = 0; i < out.size(); ++i) out.data[i] = std::min(ta.data[i], tb.data[i]);
  const int idx = push(std::move(out));
  if (grads_enabled_) {
    const int ai = a.idx, bi = b.idx;
    nodes_[idx].back = [ai, bi](Tape& t, int self) {
      const Tensor& g = t.grad_at(self);
      const Tensor& va = t.val_at(ai);
      const Tensor& vb = t.val_at(bi);
      Tensor& ga = t.grad_at(ai);
      Tensor& gb = t.grad_at(bi);
      for (int i = 0; i < g.size(); ++i) {
        if (va.data[i] <= vb.data[i]) {
          ga.data[i] += g.data[i];
        } else {
          gb.data[i] += g.data[i];
        }
      }
    };
  }
  return {idx};
}

ValueRef Tape::maximum(ValueRef a, ValueRef b) {
  check(a);
  check(b);
  const Tensor& ta = val_at(a.idx);
  const Tensor& tb = val_at(b.idx);
  require_same_shape(ta, tb, "maximum");
  Tensor out = ta;
  for (int i = 0; i < out.size(); ++i) out.data[i] = std::max(ta.data[i], tb.data[i]);
  const int idx = push(std::move(out));
  if (grads_enabled_) {
    const int ai = a.idx, bi = b.idx;
    nodes_[idx].back = [ai, bi](Tape& t, int self) {
      const Tensor& g = t.grad_at(self);
      const Tensor& va = t.val_at(ai);
      const Tensor& vb = t.val_at(bi);
      Tensor& ga = t.grad_at(ai);
      Tensor& gb = t.grad_at(bi);
      for (int i = 0; i < g.size(); ++i) {
        if (va.data[i] >= vb.data[i]) {
          ga.data[i] += g.data[i];
        } else {
          gb.data[i] += g.data[i];
        }
      }
    };
  }
  return {idx};
}

ValueRef Tape::add_row(ValueRef a, ValueRef row) {
  check(a);
  check(row);
  const Tensor& ta = val_at(a.idx);
  const Tensor& tr = val_at(row.idx);
  require(tr.rows == 1 && tr.cols == ta.cols,
          "add_row: want [1," + std::to_string(ta.cols) + "] row for " + shape_str(ta) + ", got " +
              shape_str(tr));
  Tensor out = ta;
  for (int r = 0; r < out.rows; ++r) {
    for (int c = 0; c < out.cols; ++c) out.at(r, c) += tr.data[c];
  }
  const int idx = push(std::move(out));
  if (grads_enabled_) {
    const int ai = a.idx, ri = row.idx;
    nodes_[idx].back = [ai, ri](Tape& t, int self) {
      const Tensor& g = t.grad_at(self);
      Tensor& ga = t.grad_at(ai);
      Tensor& gr = t.grad_at(ri);
      for (int r = 0; r < g.rows; ++r) {
        for (int c = 0; c < g.cols; ++c) {
          ga.at(r, c) += g.at(r, c);
          gr.data[c] += g.at(r, c);
        }
      }
    };
  }
  return {idx};
}

ValueRef Tape::mul_col(ValueRef a, ValueRef col) {
  check(a);
  check(col);
  const Tensor& ta = val_at(a.idx);
  const Tensor& tc = val_at(col.idx);
  require(tc.cols == 1 && tc.rows == ta.rows,
          "mul_col: want [" + std::to_string(ta.rows) + ",1] column for " + shape_str(ta) +
              ", got " + shape_str(tc));
  Tensor out = ta;
  for (int r = 0; r < out.rows; ++r) {
    for (int c = 0; c < out.cols; ++c) out.at(r, c) *= tc.data[r];
  }
  const int idx = push(std::move(out));
  if (grads_enabled_) {
    const int ai = a.idx, ci = col.idx;
    nodes_[idx].back = [ai, ci](Tape& t, int self) {
      const Tensor& g = t.grad_at(self);
      const Tensor& va = t.val_at(ai);
      const Tensor& vc = t.val_at(ci);
      Tensor& ga = t.grad_at(ai);
      Tensor& gc = t.grad_at(ci);
      for (int r = 0; r < g.rows; ++r) {
        double acc = 0.0;
        for (int c = 0; c < g.cols; ++c) {
          ga.at(r, c) += g.at(r, c) * vc.data[r];
          acc += g.at(r, c) * va.at(r, c);
        }
        gc.data[r] += acc;
      }
    };
  }
  return {idx};
}

// Shared scaffolding for elementwise unary ops. df receives (input, output)
// and returns the local derivative.
template <class F, class DF>
ValueRef Tape::unary(ValueRef a, F f, DF df) {
  check(a);
  const Tensor& ta = val_at(a.idx);
  Tensor out = ta;
  for (double& v : out.data) v = f(v);
  const int idx = push(std::move(out));
  if (grads_enabled_) {
    const int ai = a.idx;
    nodes_[idx].back = [ai, df](Tape& t, int self) {
      const Tensor& g = t.grad_at(self);
      const Tensor& vin = t.val_at(ai);
      const Tensor& vout = t.val_at(self);
      Tensor& ga = t.grad_at(ai);
      for (int i = 0; i < g.size(); ++i) {
        ga.data[i] += g.data[i] * df(vin.data[i], vout.data[i]);
      }
    };
  }
  return {idx};
}

ValueRef Tape::tanh(ValueRef a) {
  return unary(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

ValueRef Tape::exp(ValueRef a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

ValueRef Tape::log(ValueRef a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

ValueRef Tape::sqrt(ValueRef a) {
  return unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

ValueRef Tape::square(ValueRef a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

ValueRef Tape::recip(ValueRef a) {
  return unary(
      a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

ValueRef Tape::affine(ValueRef a, double scale, double shift) {
  return unary(
      a, [scale, shift](double x) { return scale * x + shift; },
      [scale](double, double) { return scale; });
}

ValueRef Tape::clamp(ValueRef a, double lo, double hi) {
  require(lo <= hi, "clamp: lo > hi");
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

ValueRef Tape::softmax_rows(ValueRef a) {
  check(a);
  const Tensor& ta = val_at(a.idx);
  Tensor out = ta;
  for (int r = 0; r < out.rows; ++r) {
    double mx = out.at(r, 0);
    for (int c = 1; c < out.cols; ++c) mx = std::max(mx, out.at(r, c));
    double sum = 0.0;
    for (int c = 0; c < out.cols; ++c) {
      out.at(r, c) = std::exp(out.at(r, c) - mx);
      sum += out.at(r, c);
    }
    for (int c = 0; c < out.cols; ++c) out.at(r, c) /= sum;
  }
  const int idx = push(std::move(out));
  if (grads_enabled_) {
    const int ai = a.idx;
    nodes_[idx].back = [ai](Tape& t, int self) {
      const Tensor& g = t.grad_at(self);
      const Tensor& y = t.val_at(self);
      Tensor& ga = t.grad_at(ai);
      for (int r = 0; r < g.rows; ++r) {
        double dot = 0.0;
        for (int c = 0; c < g.cols; ++c) dot += g.at(r, c) * y.at(r, c);
        for (int c = 0; c < g.cols; ++c) ga.at(r, c) += y.at(r, c) * (g.at(r, c) - dot);
      }
    };
  }
  return {idx};
}

ValueRef Tape::log_softmax_rows(ValueRef a) {
  check(a);
  const Tensor& ta = val_at(a.idx);
  Tensor out = ta;
  for (int r = 0; r < out.rows; ++r) {
    double mx = out.at(r, 0);
    for (int c = 1; c < out.cols; ++c) mx = std::max(mx, out.at(r, c));
    double sum = 0.0;
    for (int c = 0; c < out.cols; ++c) sum += std::exp(out.at(r, c) - mx);
    const double lse = mx + std::log(sum);
    for (int c = 0; c < out.cols; ++c) out.at(r, c) -= lse;
  }
  const int idx = push(std::move(out));
  if (grads_enabled_) {
    const int ai = a.idx;
    nodes_[idx].back = [ai](Tape& t, int self) {
      const Tensor& g = t.grad_at(self);
      const Tensor& y = t.val_at(self);
      Tensor& ga = t.grad_at(ai);
      for (int r = 0; r < g.rows; ++r) {
        double gsum = 0.0;
        for (int c = 0; c < g.cols; ++c) gsum += g.at(r, c);
        for (int c = 0; c < g.cols; ++c) {
          ga.at(r, c) += g.at(r, c) - std::exp(y.at(r, c)) * gsum;
        }
      }
    };
  }
  return {idx};
}

ValueRef Tape::concat_cols(const std::vector<ValueRef>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  int total = 0;
  const int rows = val(parts[0]).rows;
  for (ValueRef p : parts) {
    check(p);
    const Tensor& tp = val_at(p.idx);
    require(tp.rows == rows, "concat_cols: row counts differ, " + shape_str(val_at(parts[0].idx)) +
                                 " vs " + shape_str(tp));
    total += tp.cols;
  }
  Tensor out(rows, total, 0.0);
  int base = 0;
  for (ValueRef p : parts) {
    const Tensor& tp = val_at(p.idx);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < tp.cols; ++c) out.at(r, base + c) = tp.at(r, c);
    }
    base += tp.cols;
  }
  const int idx = push(std::move(out));
  if (grads_enabled_) {
    std::vector<int> srcs;
    for (ValueRef p : parts) srcs.push_back(p.idx);
    nodes_[idx].back = [srcs](Tape& t, int self) {
      const Tensor& g = t.grad_at(self);
      int base2 = 0;
      for (int src : srcs) {
        Tensor& gs = t.grad_at(src);
        for (int r = 0; r < g.rows; ++r) {
          for (int c = 0; c < gs.cols; ++c) gs.at(r, c) += g.at(r, base2 + c);
        }
        base2 += gs.cols;
      }
    };
  }
  return {idx};
}

ValueRef Tape::slice_cols(ValueRef a, int c0, int c1) {
  check(a);
  const Tensor& ta = val_at(a.idx);
  require(0 <= c0 && c0 < c1 && c1 <= ta.cols,
          "slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) + ") out of " +
              shape_str(ta));
  Tensor out(ta.rows, c1 - c0, 0.0);
  for (int r = 0; r < ta.rows; ++r) {
    for (int c = c0; c < c1; ++c) out.at(r, c - c0) = ta.at(r, c);
  }
  const int idx = push(std::move(out));
  if (grads_enabled_) {
    const int ai = a.idx;
    nodes_[idx].back = [ai, c0](Tape& t, int self) {
      const Tensor& g = t.grad_at(self);
      Tensor& ga = t.grad_at(ai);
      for (int r = 0; r < g.rows; ++r) {
        for (int c = 0; c < g.cols; ++c) ga.at(r, c0 + c) += g.at(r, c);
      }
    };
  }
  return {idx};
}

ValueRef Tape::gather_rows(ValueRef a, std::vector<int> idx_list) {
  check(a);
  const Tensor& ta = val_at(a.idx);
  require(!idx_list.empty(), "gather_rows: empty index list");
  for (int i : idx_list) {
    require(0 <= i && i < ta.rows,
            "gather_rows: index " + std::to_string(i) + " out of " + shape_str(ta));
  }
  Tensor out(static_cast<int>(idx_list.size()), ta.cols, 0.0);
  for (std::size_t j = 0; j < idx_list.size(); ++j) {
    for (int c = 0; c < ta.cols; ++c) out.at(static_cast<int>(j), c) = ta.at(idx_list[j], c);
  }
  const int idx = push(std::move(out));
  if (grads_enabled_) {
    const int ai = a.idx;
    nodes_[idx].back = [ai, idx_list](Tape& t, int self) {
      const Tensor& g = t.grad_at(self);
      Tensor& ga = t.grad_at(ai);
      for (std::size_t j = 0; j < idx_list.size(); ++j) {
        for (int c = 0; c < g.cols; ++c) ga.at(idx_list[j], c) += g.at(static_cast<int>(j), c);
      }
    };
  }
  return {idx};
}

ValueRef Tape::select_cols(ValueRef a, std::vector<int> col_per_row) {
  check(a);
  const Tensor& ta = val_at(a.idx);
  require(static_cast<int>(col_per_row.size()) == ta.rows,
          "select_cols: need one column index per row of " + shape_str(ta));
  for (int c : col_per_row) {
    require(0 <= c && c < ta.cols,
            "select_cols: column " + std::to_string(c) + " out of " + shape_str(ta));
  }
  Tensor out(ta.rows, 1, 0.0);
  for (int r = 0; r < ta.rows; ++r) out.at(r, 0) = ta.at(r, col_per_row[r]);
  const int idx = push(std::move(out));
  if (grads_enabled_) {
    const int ai = a.idx;
    nodes_[idx].back = [ai, col_per_row](Tape& t, int self) {
      const Tensor& g = t.grad_at(self);
      Tensor& ga = t.grad_at(ai);
      for (int r = 0; r < g.rows; ++r) ga.at(r, col_per_row[r]) += g.at(r, 0);
    };
  }
  return {idx};
}

ValueRef Tape::row_sum(ValueRef a) {
  check(a);
  const Tensor& ta = val_at(a.idx);
  Tensor out(ta.rows, 1, 0.0);
  for (int r = 0; r < ta.rows; ++r) {
    double acc = 0.0;
    for (int c = 0; c < ta.cols; ++c) acc += ta.at(r, c);
    out.at(r, 0) = acc;
  }
  const int idx = push(std::move(out));
  if (grads_enabled_) {
    const int ai = a.idx;
    nodes_[idx].back = [ai](Tape& t, int self) {
      const Tensor& g = t.grad_at(self);
      Tensor& ga = t.grad_at(ai);
      for (int r = 0; r < ga.rows; ++r) {
        for (int c = 0; c < ga.cols; ++c) ga.at(r, c) += g.at(r, 0);
      }
    };
  }
  return {idx};
}

ValueRef Tape::sum_all(ValueRef a) {
  check(a);
  const Tensor& ta = val_at(a.idx);
  double acc = 0.0;
  for (double v : ta.data) acc += v;
  const int idx = push(Tensor::scalar(acc));
  if (grads_enabled_) {
    const int ai = a.idx;
    nodes_[idx].back = [ai](Tape& t, int self) {
      const double g = t.grad_at(self).data[0];
      Tensor& ga = t.grad_at(ai);
      for (double& v : ga.data) v += g;
    };
  }
  return {idx};
}

ValueRef Tape::mean_all(ValueRef a) {
  check(a);
  const Tensor& ta = val_at(a.idx);
  double acc = 0.0;
  for (double v : ta.data) acc += v;
  const double inv = 1.0 / ta.size();
  const int idx = push(Tensor::scalar(acc * inv));
  if (grads_enabled_) {
    const int ai = a.idx;
    nodes_[idx].back = [ai, inv](Tape& t, int self) {
      const double g = t.grad_at(self).data[0] * inv;
      Tensor& ga = t.grad_at(ai);
      for (double& v : ga.data) v += g;
    };
  }
  return {idx};
}

ValueRef Tape::reparam_sample(ValueRef mu, ValueRef sd, Rng& rng) {
  check(mu);
  check(sd);
  const Tensor& tsd = val_at(sd.idx);
  Tensor eps(tsd.rows, tsd.cols, 0.0);
  for (double& v : eps.data) v = rng.normal();
  return reparam_sample(mu, sd, std::move(eps));
}

ValueRef Tape::reparam_sample(ValueRef mu, ValueRef sd, Tensor eps) {
  check(mu);
  check(sd);
  {
    const Tensor& tmu = val_at(mu.idx);
    const Tensor& tsd = val_at(sd.idx);
    require_same_shape(tmu, tsd, "reparam_sample");
    require_same_shape(tmu, eps, "reparam_sample(eps)");
    for (double v : tsd.data) {
      require(v > 0.0, "reparam_sample: sigma must be positive elementwise");
    }
  }
  const ValueRef eps_node = constant(std::move(eps));
  // Re-fetch after the push above: growing the node vector moves the tensors.
  Tensor out = val_at(mu.idx);
  {
    const Tensor& tsd = val_at(sd.idx);
    const Tensor& teps = val_at(eps_node.idx);
    for (int i = 0; i < out.size(); ++i) out.data[i] += tsd.data[i] * teps.data[i];
  }
  const int idx = push(std::move(out));
  if (grads_enabled_) {
    const int mi = mu.idx, si = sd.idx, ei = eps_node.idx;
    nodes_[idx].back = [mi, si, ei](Tape& t, int self) {
      const Tensor& g = t.grad_at(self);
      const Tensor& e = t.val_at(ei);
      Tensor& gm = t.grad_at(mi);
      Tensor& gs = t.grad_at(si);
      for (int i = 0; i < g.size(); ++i) {
        gm.data[i] += g.data[i];
        gs.data[i] += g.data[i] * e.data[i];
      }
    };
  }
  return {idx};
}

void Tape::backward(ValueRef loss) {
  check(loss);
  require(grads_enabled_, "backward: tape was built with gradients disabled");
  const Tensor& tl = val_at(loss.idx);
  require(tl.rows == 1 && tl.cols == 1, "backward: loss must be [1,1], got " + shape_str(tl));
  nodes_[loss.idx].grad.data[0] = 1.0;
  for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
    if (nodes_[i].back) nodes_[i].back(*this, i);
  }
  for (Node& n : nodes_) {
    if (n.store != nullptr) {
      Tensor& g = n.store->grad(n.pname);
      for (int i = 0; i < g.size(); ++i) g.data[i] += n.grad.data[i];
    }
  }
  nodes_.clear();
}

void Tape::clear() { nodes_.clear(); }

Tensor xavier_uniform(int in_dim, int out_dim, Rng& rng) {
  Tensor t(in_dim, out_dim, 0.0);
  const double limit = std::sqrt(6.0 / (in_dim + out_dim));
  for (double& v : t.data) v = (2.0 * rng.uniform() - 1.0) * limit;
  return t;
}

Tensor scaled_normal(int rows, int cols, double scale, Rng& rng) {
  Tensor t(rows, cols, 0.0);
  for (double& v : t.data) v = rng.normal() * scale;
  return t;
}

}  // namespace atvc
