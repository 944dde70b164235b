#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tl/domain.hpp"

namespace tl {

enum class Dtype { Boolean, Real };
enum class ReduceOp { Sum, Max, Avg };

enum class Nonlin {
  Identity,
  Step,
  Sigmoid,
  Relu,
  Exp,
  Sqrt,
  Power,
  Softmax,
  Lnorm,
  Sin,
  Cos
};

struct NonlinearitySpec {
  Nonlin kind = Nonlin::Identity;
  double temperature = 1.0;   // sigmoid only
  bool has_temperature = false;
  double power = 1.0;         // power(n) only
  std::string normalized_index;  // softmax/lnorm
  double eps = 1e-5;             // lnorm stabilizer

  bool is_normalizer() const {
    return kind == Nonlin::Softmax || kind == Nonlin::Lnorm;
  }
};

const char* nonlin_name(Nonlin k);

struct Axis {
  std::string name;
  DomainPtr domain;
};

using Coord = std::vector<int>;

// A named-index tensor over real or Boolean values, stored dense (row-major)
// or sparse (sorted coordinate map, absent coordinates are 0).
class TensorValue {
 public:
  TensorValue() : dtype_(Dtype::Real), dense_(true), data_{0.0} {}

  static TensorValue dense_zeros(Dtype dt, std::vector<Axis> axes);
  static TensorValue sparse_zeros(Dtype dt, std::vector<Axis> axes);
  static TensorValue scalar(double v);

  Dtype dtype() const { return dtype_; }
  void set_dtype(Dtype d) { dtype_ = d; }
  bool is_dense() const { return dense_; }
  int rank() const { return (int)axes_.size(); }
  const std::vector<Axis>& axes() const { return axes_; }
  const Axis& axis(int i) const { return axes_[i]; }
  int axis_pos(const std::string& name) const;  // -1 if absent
  std::int64_t total_size() const;
  std::int64_t nonzero_count() const;
  double fill_ratio() const;

  double at(const Coord& c) const;
  void set(const Coord& c, double v);
  void add(const Coord& c, double v);
  double scalar_value() const;  // rank-0 access

  // Visits every nonzero (sparse) or every element (dense).
  void for_each(const std::function<void(const Coord&, double)>& fn) const;
  // Visits only stored nonzeros for sparse, skips zeros for dense too.
  void for_each_nonzero(const std::function<void(const Coord&, double)>& fn) const;

  TensorValue to_dense() const;
  TensorValue to_sparse() const;
  TensorValue with_axis_names(const std::vector<std::string>& names) const;
  TensorValue permuted(const std::vector<int>& axis_order) const;

  double max_abs() const;
  double max_abs_diff(const TensorValue& other) const;  // same shape

  const std::vector<double>& dense_data() const { return data_; }
  std::vector<double>& dense_data() { return data_; }
  const std::map<Coord, double>& sparse_data() const { return map_; }

 private:
  Dtype dtype_;
  std::vector<Axis> axes_;
  bool dense_;
  std::vector<double> data_;      // dense storage
  std::map<Coord, double> map_;   // sparse storage
  std::vector<std::int64_t> strides_;

  void compute_strides();
  std::int64_t offset(const Coord& c) const;
  friend TensorValue tensor_join(const TensorValue&, const TensorValue&);
};

// The three primitives plus normalization and concatenation.

// Join: index union, product over shared names. Sparse x sparse stays sparse.
TensorValue tensor_join(const TensorValue& u, const TensorValue& v);

// Projection onto `keep` (result axis order = keep order); the remaining
// axes are reduced with `op`.
TensorValue tensor_project(const TensorValue& t, const std::vector<std::string>& keep,
                           ReduceOp op = ReduceOp::Sum);

// Elementwise nonlinearity (not softmax/lnorm).
TensorValue apply_unary(const TensorValue& t, const NonlinearitySpec& f);

// softmax / lnorm over one index, per slice of the others.
TensorValue normalize(const TensorValue& t, const std::string& over, Nonlin kind,
                      double eps = 1e-5);

// Flattens `merge` (row-major in the listed order) into a single new index.
TensorValue concat_axes(const TensorValue& t, const std::vector<std::string>& merge,
                        const std::string& into);

// Densifies when the fill ratio exceeds the threshold; otherwise returns as-is.
TensorValue maybe_densify(TensorValue t, double threshold = 0.25);

bool approx_equal(const TensorValue& a, const TensorValue& b, double tol);

double sigmoid(double x, double temperature);
double step_fn(double x);

// Text serialization: header "name dtype index:domain:card ..." then
// "dense" + row-major values or "sparse" + one "coord... value" line each.
void write_tensor(std::ostream& os, const std::string& name, const TensorValue& t);
std::pair<std::string, TensorValue> read_tensor(std::istream& is);

}  // namespace tl
