#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace worldlm {

/// Raised when two parameter sets or tensors are not congruent.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation would leave a NaN/Inf in a tensor.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major float tensor with a name.
struct Tensor {
  std::string name;
  Shape shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::string name, Shape shape);  // zero-filled
  Tensor(std::string name, Shape shape, std::vector<float> data);

  std::size_t numel() const { return data.size(); }
  bool same_layout(const Tensor& other) const {
    return name == other.name && shape == other.shape;
  }
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

enum class ParamRole { model, backbone, keys, pseudo_gradient, residual };

std::string_view role_name(ParamRole role);
ParamRole role_from_name(std::string_view name);

/// Ordered collection of uniquely named tensors. Iteration order is insertion
/// order; every reduction walks entries in that order.
class ParamSet {
 public:
  ParamSet() = default;
  explicit ParamSet(ParamRole role) : role_(role) {}

  ParamRole role() const { return role_; }
  void set_role(ParamRole role) { role_ = role; }

  void add(Tensor tensor);
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t numel() const;

  const Tensor& operator[](std::size_t i) const { return entries_[i]; }
  Tensor& operator[](std::size_t i) { return entries_[i]; }
  const Tensor* find(std::string_view name) const;
  Tensor* find(std::string_view name);
  const Tensor& at(std::string_view name) const;

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  std::vector<std::string> names() const;

  /// Same name/shape sequence (role is ignored).
  bool congruent(const ParamSet& other) const;

  /// Copy of the named subset, in the order given.
  ParamSet select(std::span<const std::string> names, ParamRole role) const;

  /// Copy with every value set to zero.
  ParamSet zeros_like(ParamRole role) const;

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    return a.entries_ == b.entries_;
  }

 private:
  ParamRole role_ = ParamRole::model;
  std::vector<Tensor> entries_;
};

void require_congruent(const ParamSet& a, const ParamSet& b, std::string_view context);
void require_finite(const ParamSet& p, std::string_view context);
void require_finite(const Tensor& t, std::string_view context);

/// a*x + y, element-wise. Result takes y's role.
ParamSet axpy(double a, const ParamSet& x, const ParamSet& y);
ParamSet scale(double a, const ParamSet& x);

std::vector<float> flatten(const Tensor& t);

// Reductions accumulate in double, left to right.
double dot(std::span<const float> a, std::span<const float> b);
double l2_norm(std::span<const float> a);
double l2_norm(const ParamSet& p);
/// Cosine similarity; 0 when either vector has zero norm.
double cosine(std::span<const float> a, std::span<const float> b);

/// Writes `<stem>.json` (manifest) and `<stem>.bin` (little-endian float32).
/// `extra_json` is spliced verbatim into the manifest under "meta"
/// (must itself be a JSON value, or empty).
void save_params(const ParamSet& params, const std::filesystem::path& stem,
                 std::string_view extra_json = {});
ParamSet load_params(const std::filesystem::path& stem);
/// Returns the "meta" member of a manifest as JSON text ("null" if absent).
std::string load_params_meta(const std::filesystem::path& stem);

/// Little-endian float32 payload in entry order.
std::vector<std::uint8_t> encode_payload(const ParamSet& params);

/// 64-bit FNV-1a over names, shapes and payload; used to detect stale caches.
std::uint64_t fingerprint(const ParamSet& params);

}  // namespace worldlm
