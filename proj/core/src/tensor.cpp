#include "tl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace tl {

const char* nonlin_name(Nonlin k) {
  switch (k) {
    case Nonlin::Identity: return "identity";
    case Nonlin::Step: return "step";
    case Nonlin::Sigmoid: return "sig";
    case Nonlin::Relu: return "relu";
    case Nonlin::Exp: return "exp";
    case Nonlin::Sqrt: return "sqrt";
    case Nonlin::Power: return "pow";
    case Nonlin::Softmax: return "softmax";
    case Nonlin::Lnorm: return "lnorm";
    case Nonlin::Sin: return "sin";
    case Nonlin::Cos: return "cos";
  }
  return "?";
}

double sigmoid(double x, double temperature) {
  if (temperature <= 0.0) return step_fn(x);
  return 1.0 / (1.0 + std::exp(-x / temperature));
}

double step_fn(double x) { return x > 0.0 ? 1.0 : 0.0; }

void TensorValue::compute_strides() {
  strides_.assign(axes_.size(), 1);
  for (int i = (int)axes_.size() - 2; i >= 0; --i)
    strides_[i] = strides_[i + 1] * axes_[i + 1].domain->cardinality();
}

std::int64_t TensorValue::offset(const Coord& c) const {
  std::int64_t off = 0;
  for (size_t i = 0; i < c.size(); ++i) off += strides_[i] * c[i];
  return off;
}

TensorValue TensorValue::dense_zeros(Dtype dt, std::vector<Axis> axes) {
  TensorValue t;
  t.dtype_ = dt;
  t.axes_ = std::move(axes);
  t.dense_ = true;
  t.compute_strides();
  t.data_.assign((size_t)t.total_size(), 0.0);
  return t;
}

TensorValue TensorValue::sparse_zeros(Dtype dt, std::vector<Axis> axes) {
  TensorValue t;
  t.dtype_ = dt;
  t.axes_ = std::move(axes);
  t.dense_ = false;
  t.data_.clear();
  t.compute_strides();
  return t;
}

TensorValue TensorValue::scalar(double v) {
  TensorValue t = dense_zeros(Dtype::Real, {});
  t.data_[0] = v;
  return t;
}

int TensorValue::axis_pos(const std::string& name) const {
  for (size_t i = 0; i < axes_.size(); ++i)
    if (axes_[i].name == name) return (int)i;
  return -1;
}

std::int64_t TensorValue::total_size() const {
  std::int64_t n = 1;
  for (auto& a : axes_) n *= a.domain->cardinality();
  return n;
}

std::int64_t TensorValue::nonzero_count() const {
  if (!dense_) {
    std::int64_t n = 0;
    for (auto& [c, v] : map_)
      if (v != 0.0) ++n;
    return n;
  }
  std::int64_t n = 0;
  for (double v : data_)
    if (v != 0.0) ++n;
  return n;
}

double TensorValue::fill_ratio() const {
  std::int64_t tot = total_size();
  if (tot == 0) return 0.0;
  return (double)nonzero_count() / (double)tot;
}

double TensorValue::at(const Coord& c) const {
  if (dense_) return data_[(size_t)offset(c)];
  auto it = map_.find(c);
  return it == map_.end() ? 0.0 : it->second;
}

void TensorValue::set(const Coord& c, double v) {
  if (dense_) {
    data_[(size_t)offset(c)] = v;
  } else if (v == 0.0) {
    map_.erase(c);
  } else {
    map_[c] = v;
  }
}

void TensorValue::add(const Coord& c, double v) {
  if (v == 0.0) return;
  if (dense_) {
    data_[(size_t)offset(c)] += v;
  } else {
    auto [it, fresh] = map_.try_emplace(c, 0.0);
    it->second += v;
    if (it->second == 0.0) map_.erase(it);
  }
}

double TensorValue::scalar_value() const {
  if (rank() != 0) throw std::runtime_error("scalar_value on rank-" +
                                            std::to_string(rank()) + " tensor");
  return at({});
}

void TensorValue::for_each(const std::function<void(const Coord&, double)>& fn) const {
  if (!dense_) {
    for (auto& [c, v] : map_) fn(c, v);
    return;
  }
  Coord c(axes_.size(), 0);
  std::int64_t n = total_size();
  for (std::int64_t i = 0; i < n; ++i) {
    fn(c, data_[(size_t)i]);
    for (int d = (int)c.size() - 1; d >= 0; --d) {
      if (++c[d] < axes_[d].domain->cardinality()) break;
      c[d] = 0;
    }
  }
}

void TensorValue::for_each_nonzero(
    const std::function<void(const Coord&, double)>& fn) const {
  for_each([&](const Coord& c, double v) {
    if (v != 0.0) fn(c, v);
  });
}

TensorValue TensorValue::to_dense() const {
  if (dense_) return *this;
  TensorValue t = dense_zeros(dtype_, axes_);
  for (auto& [c, v] : map_) t.data_[(size_t)t.offset(c)] = v;
  return t;
}

TensorValue TensorValue::to_sparse() const {
  if (!dense_) return *this;
  TensorValue t = sparse_zeros(dtype_, axes_);
  for_each_nonzero([&](const Coord& c, double v) { t.map_[c] = v; });
  return t;
}

TensorValue TensorValue::with_axis_names(const std::vector<std::string>& names) const {
  if (names.size() != axes_.size())
    throw std::runtime_error("with_axis_names: rank mismatch");
  TensorValue t = *this;
  for (size_t i = 0; i < names.size(); ++i) t.axes_[i].name = names[i];
  return t;
}

TensorValue TensorValue::permuted(const std::vector<int>& order) const {
  std::vector<Axis> ax;
  for (int i : order) ax.push_back(axes_[i]);
  TensorValue t = dense_ ? dense_zeros(dtype_, ax) : sparse_zeros(dtype_, ax);
  Coord pc(order.size());
  for_each_nonzero([&](const Coord& c, double v) {
    for (size_t i = 0; i < order.size(); ++i) pc[i] = c[order[i]];
    t.set(pc, v);
  });
  return t;
}

double TensorValue::max_abs() const {
  double m = 0.0;
  for_each_nonzero([&](const Coord&, double v) { m = std::max(m, std::fabs(v)); });
  return m;
}

double TensorValue::max_abs_diff(const TensorValue& other) const {
  double m = 0.0;
  for_each([&](const Coord& c, double v) {
    m = std::max(m, std::fabs(v - other.at(c)));
  });
  other.for_each_nonzero([&](const Coord& c, double v) {
    m = std::max(m, std::fabs(v - at(c)));
  });
  return m;
}

namespace {

void check_domains(const Axis& a, const Axis& b) {
  if (a.domain->cardinality() != b.domain->cardinality())
    throw std::runtime_error("domain mismatch on index '" + a.name + "': " +
                             std::to_string(a.domain->cardinality()) + " vs " +
                             std::to_string(b.domain->cardinality()));
}

}  // namespace

TensorValue tensor_join(const TensorValue& u, const TensorValue& v) {
  // Result axes: u's axes then v's exclusive axes.
  std::vector<Axis> axes = u.axes();
  std::vector<int> v_shared_u;   // for each shared v-axis, its position in u
  std::vector<int> v_shared_v;   // ... and in v
  std::vector<int> v_excl;       // v-exclusive axis positions in v
  for (int j = 0; j < v.rank(); ++j) {
    int p = u.axis_pos(v.axis(j).name);
    if (p >= 0) {
      check_domains(u.axis(p), v.axis(j));
      v_shared_u.push_back(p);
      v_shared_v.push_back(j);
    } else {
      v_excl.push_back(j);
      axes.push_back(v.axis(j));
    }
  }
  Dtype dt = (u.dtype() == Dtype::Boolean && v.dtype() == Dtype::Boolean)
                 ? Dtype::Boolean
                 : Dtype::Real;

  if (!u.is_dense() && !v.is_dense()) {
    // Hash join on the shared coordinates.
    TensorValue out = TensorValue::sparse_zeros(dt, axes);
    std::unordered_map<std::string, std::vector<std::pair<Coord, double>>> buckets;
    auto key_of = [](const Coord& full, const std::vector<int>& pos) {
      std::string k;
      for (int p : pos) {
        k += std::to_string(full[p]);
        k += ',';
      }
      return k;
    };
    for (auto& [c, val] : v.sparse_data()) {
      if (val == 0.0) continue;
      Coord excl;
      for (int p : v_excl) excl.push_back(c[p]);
      buckets[key_of(c, v_shared_v)].emplace_back(std::move(excl), val);
    }
    Coord rc;
    for (auto& [c, val] : u.sparse_data()) {
      if (val == 0.0) continue;
      auto it = buckets.find(key_of(c, v_shared_u));
      if (it == buckets.end()) continue;
      for (auto& [excl, vval] : it->second) {
        rc = c;
        rc.insert(rc.end(), excl.begin(), excl.end());
        out.add(rc, val * vval);
      }
    }
    return out;
  }

  // Mixed or dense: dense result, odometer over the union.
  TensorValue out = TensorValue::dense_zeros(dt, axes);
  int ur = u.rank();
  std::vector<int> v_from_out(v.rank(), -1);  // v axis -> out axis
  for (size_t k = 0; k < v_shared_v.size(); ++k)
    v_from_out[v_shared_v[k]] = v_shared_u[k];
  for (size_t k = 0; k < v_excl.size(); ++k)
    v_from_out[v_excl[k]] = ur + (int)k;

  Coord uc(ur), vc(v.rank());
  TensorValue ud = u.to_dense();
  TensorValue vd = v.to_dense();
  Coord c(axes.size(), 0);
  std::int64_t n = out.total_size();
  auto& data = out.dense_data();
  for (std::int64_t i = 0; i < n; ++i) {
    for (int d = 0; d < ur; ++d) uc[d] = c[d];
    for (int d = 0; d < v.rank(); ++d) vc[d] = c[v_from_out[d]];
    data[(size_t)i] = ud.at(uc) * vd.at(vc);
    for (int d = (int)c.size() - 1; d >= 0; --d) {
      if (++c[d] < axes[d].domain->cardinality()) break;
      c[d] = 0;
    }
  }
  return out;
}

TensorValue tensor_project(const TensorValue& t, const std::vector<std::string>& keep,
                           ReduceOp op) {
  std::vector<int> keep_pos;
  std::vector<Axis> axes;
  for (auto& k : keep) {
    int p = t.axis_pos(k);
    if (p < 0) throw std::runtime_error("projection keeps unknown index '" + k + "'");
    keep_pos.push_back(p);
    axes.push_back(t.axis(p));
  }
  std::int64_t group = 1;  // size of each reduction group
  for (int i = 0; i < t.rank(); ++i)
    if (std::find(keep_pos.begin(), keep_pos.end(), i) == keep_pos.end())
      group *= t.axis(i).domain->cardinality();

  // Max over sparse reals must see the implicit zeros; go dense there.
  const TensorValue src =
      (!t.is_dense() && op == ReduceOp::Max && t.dtype() != Dtype::Boolean)
          ? t.to_dense()
          : t;

  Dtype out_dtype = (t.dtype() == Dtype::Boolean && op == ReduceOp::Max)
                        ? Dtype::Boolean
                        : Dtype::Real;
  bool sparse_out = !src.is_dense();
  TensorValue out = sparse_out ? TensorValue::sparse_zeros(out_dtype, axes)
                               : TensorValue::dense_zeros(out_dtype, axes);
  if (op == ReduceOp::Max && !sparse_out) {
    // start groups at -inf, fix up empty groups to 0 after
    std::fill(out.dense_data().begin(), out.dense_data().end(),
              group == 0 ? 0.0 : -HUGE_VAL);
  }
  Coord kc(keep_pos.size());
  src.for_each([&](const Coord& c, double v) {
    for (size_t i = 0; i < keep_pos.size(); ++i) kc[i] = c[keep_pos[i]];
    switch (op) {
      case ReduceOp::Sum:
      case ReduceOp::Avg:
        out.add(kc, v);
        break;
      case ReduceOp::Max:
        out.set(kc, std::max(out.at(kc), v));
        break;
    }
  });
  if (op == ReduceOp::Avg) {
    if (group == 0) return out;  // all zero by convention
    if (out.is_dense())
      for (auto& v : out.dense_data()) v /= (double)group;
    else {
      TensorValue scaled = TensorValue::sparse_zeros(out.dtype(), axes);
      out.for_each_nonzero(
          [&](const Coord& c, double v) { scaled.set(c, v / (double)group); });
      out = scaled;
    }
  }
  if (op == ReduceOp::Max && out.is_dense())
    for (auto& v : out.dense_data())
      if (v == -HUGE_VAL) v = 0.0;
  return out;
}

namespace {

double eval_unary(Nonlin k, double x, const NonlinearitySpec& f, const Coord& c) {
  switch (k) {
    case Nonlin::Identity: return x;
    case Nonlin::Step: return step_fn(x);
    case Nonlin::Sigmoid:
      return sigmoid(x, f.has_temperature ? f.temperature : 1.0);
    case Nonlin::Relu: return x > 0.0 ? x : 0.0;
    case Nonlin::Exp: return std::exp(x);
    case Nonlin::Sqrt: {
      if (x < 0.0) {
        std::string where = "(";
        for (size_t i = 0; i < c.size(); ++i)
          where += (i ? "," : "") + std::to_string(c[i]);
        throw std::runtime_error("sqrt of negative element " + std::to_string(x) +
                                 " at " + where + ")");
      }
      return std::sqrt(x);
    }
    case Nonlin::Power: return std::pow(x, f.power);
    case Nonlin::Sin: return std::sin(x);
    case Nonlin::Cos: return std::cos(x);
    default:
      throw std::runtime_error("apply_unary: normalizers go through normalize()");
  }
}

bool zero_preserving(Nonlin k, const NonlinearitySpec& f) {
  switch (k) {
    case Nonlin::Identity:
    case Nonlin::Step:
    case Nonlin::Relu:
    case Nonlin::Sqrt:
    case Nonlin::Sin:
      return true;
    case Nonlin::Power: return f.power > 0.0;
    case Nonlin::Sigmoid: return f.has_temperature && f.temperature <= 0.0;
    default: return false;
  }
}

}  // namespace

TensorValue apply_unary(const TensorValue& t, const NonlinearitySpec& f) {
  if (f.is_normalizer())
    throw std::runtime_error("apply_unary: normalizers go through normalize()");
  Dtype dt = (f.kind == Nonlin::Step ||
              (f.kind == Nonlin::Sigmoid && f.has_temperature && f.temperature <= 0.0))
                 ? Dtype::Boolean
                 : Dtype::Real;
  const TensorValue src =
      (!t.is_dense() && !zero_preserving(f.kind, f)) ? t.to_dense() : t;
  TensorValue out = src.is_dense() ? TensorValue::dense_zeros(dt, t.axes())
                                   : TensorValue::sparse_zeros(dt, t.axes());
  src.for_each([&](const Coord& c, double v) {
    out.set(c, eval_unary(f.kind, v, f, c));
  });
  return out;
}

TensorValue normalize(const TensorValue& t, const std::string& over, Nonlin kind,
                      double eps) {
  int p = t.axis_pos(over);
  if (p < 0) throw std::runtime_error("normalize: unknown index '" + over + "'");
  TensorValue src = t.to_dense();
  TensorValue out = TensorValue::dense_zeros(Dtype::Real, t.axes());
  int n = t.axis(p).domain->cardinality();

  // Iterate slices: all coords with axis p = 0.
  std::vector<Axis> rest;
  for (int i = 0; i < t.rank(); ++i)
    if (i != p) rest.push_back(t.axis(i));
  TensorValue iter = TensorValue::dense_zeros(Dtype::Real, rest);
  std::vector<double> slice(n);
  Coord full(t.rank());
  iter.for_each([&](const Coord& rc, double) {
    for (int i = 0, j = 0; i < t.rank(); ++i)
      if (i != p) full[i] = rc[j++];
    for (int k = 0; k < n; ++k) {
      full[p] = k;
      slice[k] = src.at(full);
    }
    if (kind == Nonlin::Softmax) {
      double mx = *std::max_element(slice.begin(), slice.end());
      double sum = 0.0;
      for (int k = 0; k < n; ++k) {
        slice[k] = std::exp(slice[k] - mx);
        sum += slice[k];
      }
      for (int k = 0; k < n; ++k) slice[k] /= sum;
    } else if (kind == Nonlin::Lnorm) {
      double mean = 0.0;
      for (double v : slice) mean += v;
      mean /= n;
      double var = 0.0;
      for (double v : slice) var += (v - mean) * (v - mean);
      var /= n;
      double inv = 1.0 / std::sqrt(var + eps);
      for (int k = 0; k < n; ++k) slice[k] = (slice[k] - mean) * inv;
    } else {
      throw std::runtime_error("normalize: kind must be softmax or lnorm");
    }
    for (int k = 0; k < n; ++k) {
      full[p] = k;
      out.set(full, slice[k]);
    }
  });
  return out;
}

TensorValue concat_axes(const TensorValue& t, const std::vector<std::string>& merge,
                        const std::string& into) {
  std::vector<int> mp;
  for (auto& m : merge) {
    int p = t.axis_pos(m);
    if (p < 0) throw std::runtime_error("concat: unknown index '" + m + "'");
    mp.push_back(p);
  }
  std::int64_t card = 1;
  for (int p : mp) card *= t.axis(p).domain->cardinality();
  std::vector<Axis> axes;
  int insert_at = -1;
  for (int i = 0; i < t.rank(); ++i) {
    if (std::find(mp.begin(), mp.end(), i) != mp.end()) {
      if (insert_at < 0) {
        insert_at = (int)axes.size();
        axes.push_back({into, make_domain(into, (int)card)});
      }
      continue;
    }
    if (t.axis(i).name == into)
      throw std::runtime_error("concat: result name '" + into +
                               "' collides with surviving index");
    axes.push_back(t.axis(i));
  }
  if (insert_at < 0) throw std::runtime_error("concat: empty merge list");

  TensorValue out = t.is_dense() ? TensorValue::dense_zeros(t.dtype(), axes)
                                 : TensorValue::sparse_zeros(t.dtype(), axes);
  Coord oc(axes.size());
  t.for_each_nonzero([&](const Coord& c, double v) {
    std::int64_t flat = 0;
    for (int p : mp) flat = flat * t.axis(p).domain->cardinality() + c[p];
    int j = 0;
    for (int i = 0; i < t.rank(); ++i) {
      if (std::find(mp.begin(), mp.end(), i) != mp.end()) continue;
      if (j == insert_at) ++j;
      oc[j++] = c[i];
    }
    oc[insert_at] = (int)flat;
    out.set(oc, v);
  });
  return out;
}

TensorValue maybe_densify(TensorValue t, double threshold) {
  if (!t.is_dense() && t.fill_ratio() > threshold) return t.to_dense();
  return t;
}

bool approx_equal(const TensorValue& a, const TensorValue& b, double tol) {
  if (a.rank() != b.rank()) return false;
  return a.max_abs_diff(b) <= tol;
}

void write_tensor(std::ostream& os, const std::string& name, const TensorValue& t) {
  os << name << ' ' << (t.dtype() == Dtype::Boolean ? "boolean" : "real");
  for (auto& a : t.axes())
    os << ' ' << a.name << ':' << a.domain->name() << ':'
       << a.domain->cardinality();
  os << '\n';
  char buf[64];
  if (t.is_dense()) {
    os << "dense";
    for (double v : t.dense_data()) {
      std::snprintf(buf, sizeof buf, " %.17g", v);
      os << buf;
    }
    os << '\n';
  } else {
    os << "sparse\n";
    for (auto& [c, v] : t.sparse_data()) {
      if (v == 0.0) continue;
      for (int x : c) os << x << ' ';
      std::snprintf(buf, sizeof buf, "%.17g", v);
      os << buf << '\n';
    }
  }
}

std::pair<std::string, TensorValue> read_tensor(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw std::runtime_error("tensor read: empty input");
  std::istringstream hs(header);
  std::string name, dt;
  hs >> name >> dt;
  Dtype dtype = dt == "boolean" ? Dtype::Boolean : Dtype::Real;
  std::vector<Axis> axes;
  std::string spec;
  while (hs >> spec) {
    auto c1 = spec.find(':');
    auto c2 = spec.rfind(':');
    if (c1 == std::string::npos || c2 == c1)
      throw std::runtime_error("tensor read: bad axis spec '" + spec + "'");
    std::string iname = spec.substr(0, c1);
    std::string dname = spec.substr(c1 + 1, c2 - c1 - 1);
    int card = std::stoi(spec.substr(c2 + 1));
    axes.push_back({iname, make_domain(dname, card)});
  }
  std::string kind;
  is >> kind;
  if (kind == "dense") {
    TensorValue t = TensorValue::dense_zeros(dtype, axes);
    for (auto& v : t.dense_data())
      if (!(is >> v)) throw std::runtime_error("tensor read: short dense payload");
    return {name, t};
  }
  if (kind != "sparse") throw std::runtime_error("tensor read: bad storage kind");
  TensorValue t = TensorValue::sparse_zeros(dtype, axes);
  std::string line;
  std::getline(is, line);  // rest of the "sparse" line
  while (std::getline(is, line)) {
    if (line.empty()) break;
    std::istringstream ls(line);
    Coord c(axes.size());
    for (auto& x : c) ls >> x;
    double v;
    ls >> v;
    if (!ls) throw std::runtime_error("tensor read: bad sparse line '" + line + "'");
    t.set(c, v);
  }
  return {name, t};
}

}  // namespace tl
