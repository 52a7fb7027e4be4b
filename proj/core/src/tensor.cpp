#include "worldlm/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace worldlm {

using nlohmann::json;

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(std::string name_, Shape shape_)
    : name(std::move(name_)), shape(std::move(shape_)), data(shape_numel(shape), 0.0f) {
  if (shape.empty() || std::ranges::any_of(shape, [](auto e) { return e == 0; })) {
    throw ShapeError("tensor '" + name + "' needs positive extents, got " + shape_to_string(shape));
  }
}

Tensor::Tensor(std::string name_, Shape shape_, std::vector<float> data_)
    : name(std::move(name_)), shape(std::move(shape_)), data(std::move(data_)) {
  if (shape.empty() || std::ranges::any_of(shape, [](auto e) { return e == 0; })) {
    throw ShapeError("tensor '" + name + "' needs positive extents, got " + shape_to_string(shape));
  }
  if (data.size() != shape_numel(shape)) {
    throw ShapeError("tensor '" + name + "': " + std::to_string(data.size()) +
                     " values for shape " + shape_to_string(shape));
  }
}

std::string_view role_name(ParamRole role) {
  switch (role) {
    case ParamRole::model: return "model";
    case ParamRole::backbone: return "backbone";
    case ParamRole::keys: return "keys";
    case ParamRole::pseudo_gradient: return "pseudo_gradient";
    case ParamRole::residual: return "residual";
  }
  return "model";
}

ParamRole role_from_name(std::string_view name) {
  for (auto r : {ParamRole::model, ParamRole::backbone, ParamRole::keys,
                 ParamRole::pseudo_gradient, ParamRole::residual}) {
    if (role_name(r) == name) return r;
  }
  throw std::invalid_argument("unknown parameter role '" + std::string(name) + "'");
}

void ParamSet::add(Tensor tensor) {
  if (find(tensor.name) != nullptr) {
    throw ShapeError("duplicate tensor name '" + tensor.name + "'");
  }
  entries_.push_back(std::move(tensor));
}

std::size_t ParamSet::numel() const {
  std::size_t n = 0;
  for (const auto& t : entries_) n += t.numel();
  return n;
}

const Tensor* ParamSet::find(std::string_view name) const {
  for (const auto& t : entries_) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

Tensor* ParamSet::find(std::string_view name) {
  for (auto& t : entries_) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

const Tensor& ParamSet::at(std::string_view name) const {
  const auto* t = find(name);
  if (t == nullptr) throw ShapeError("no tensor named '" + std::string(name) + "'");
  return *t;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& t : entries_) out.push_back(t.name);
  return out;
}

bool ParamSet::congruent(const ParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!entries_[i].same_layout(other.entries_[i])) return false;
  }
  return true;
}

ParamSet ParamSet::select(std::span<const std::string> names, ParamRole role) const {
  ParamSet out(role);
  for (const auto& n : names) out.add(at(n));
  return out;
}

ParamSet ParamSet::zeros_like(ParamRole role) const {
  ParamSet out(role);
  for (const auto& t : entries_) out.add(Tensor(t.name, t.shape));
  return out;
}

void require_congruent(const ParamSet& a, const ParamSet& b, std::string_view context) {
  if (a.congruent(b)) return;
  std::ostringstream os;
  os << context << ": parameter sets are not congruent";
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (!a[i].same_layout(b[i])) {
      os << " (entry " << i << ": '" << a[i].name << "' " << shape_to_string(a[i].shape)
         << " vs '" << b[i].name << "' " << shape_to_string(b[i].shape) << ')';
      throw ShapeError(os.str());
    }
  }
  os << " (" << a.size() << " vs " << b.size() << " entries)";
  throw ShapeError(os.str());
}

void require_finite(const Tensor& t, std::string_view context) {
  for (float v : t.data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(context) + ": non-finite value in '" + t.name + "'");
    }
  }
}

void require_finite(const ParamSet& p, std::string_view context) {
  for (const auto& t : p) require_finite(t, context);
}

ParamSet axpy(double a, const ParamSet& x, const ParamSet& y) {
  require_congruent(x, y, "axpy");
  ParamSet out = y;
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& dst = out[i].data;
    const auto& src = x[i].data;
    for (std::size_t j = 0; j < dst.size(); ++j) {
      dst[j] = static_cast<float>(a * static_cast<double>(src[j]) + static_cast<double>(dst[j]));
    }
  }
  require_finite(out, "axpy");
  return out;
}

ParamSet scale(double a, const ParamSet& x) {
  ParamSet out = x;
  for (auto& t : out) {
    for (auto& v : t.data) v = static_cast<float>(a * static_cast<double>(v));
  }
  require_finite(out, "scale");
  return out;
}

std::vector<float> flatten(const Tensor& t) { return t.data; }

double dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw ShapeError("dot: length " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return acc;
}

double l2_norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

double l2_norm(const ParamSet& p) {
  double acc = 0.0;
  for (const auto& t : p) {
    for (float v : t.data) acc += static_cast<double>(v) * static_cast<double>(v);
  }
  return std::sqrt(acc);
}

double cosine(std::span<const float> a, std::span<const float> b) {
  const double ab = dot(a, b);
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(ab / (na * nb), -1.0, 1.0);
}

namespace {

void append_le32(std::vector<std::uint8_t>& out, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
}

float read_le32(const std::uint8_t* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
  return std::bit_cast<float>(bits);
}

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return std::filesystem::path(stem.string() + suffix);
}

json read_manifest(const std::filesystem::path& stem) {
  std::ifstream in(with_suffix(stem, ".json"));
  if (!in) throw std::runtime_error("cannot open manifest " + with_suffix(stem, ".json").string());
  return json::parse(in);
}

}  // namespace

std::vector<std::uint8_t> encode_payload(const ParamSet& params) {
  std::vector<std::uint8_t> out;
  out.reserve(params.numel() * 4);
  for (const auto& t : params) {
    for (float v : t.data) append_le32(out, v);
  }
  return out;
}

void save_params(const ParamSet& params, const std::filesystem::path& stem,
                 std::string_view extra_json) {
  json manifest;
  manifest["format"] = "worldlm-params/1";
  manifest["role"] = std::string(role_name(params.role()));
  manifest["dtype"] = "float32-le";
  json entries = json::array();
  std::size_t offset = 0;
  for (const auto& t : params) {
    entries.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset},
                       {"bytes", t.numel() * 4}});
    offset += t.numel() * 4;
  }
  manifest["tensors"] = std::move(entries);
  manifest["payload_bytes"] = offset;
  if (!extra_json.empty()) manifest["meta"] = json::parse(extra_json);

  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  {
    std::ofstream out(with_suffix(stem, ".json"));
    out << manifest.dump(2) << '\n';
    if (!out) throw std::runtime_error("failed writing " + with_suffix(stem, ".json").string());
  }
  const auto payload = encode_payload(params);
  std::ofstream out(with_suffix(stem, ".bin"), std::ios::binary);
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!out) throw std::runtime_error("failed writing " + with_suffix(stem, ".bin").string());
}

ParamSet load_params(const std::filesystem::path& stem) {
  const json manifest = read_manifest(stem);
  if (manifest.value("format", "") != "worldlm-params/1") {
    throw std::runtime_error("unsupported parameter manifest format in " + stem.string());
  }
  std::ifstream in(with_suffix(stem, ".bin"), std::ios::binary);
  if (!in) throw std::runtime_error("cannot open payload " + with_suffix(stem, ".bin").string());
  std::vector<std::uint8_t> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (payload.size() != manifest.at("payload_bytes").get<std::size_t>()) {
    throw std::runtime_error("payload size mismatch in " + stem.string());
  }

  ParamSet out(role_from_name(manifest.at("role").get<std::string>()));
  for (const auto& e : manifest.at("tensors")) {
    Shape shape = e.at("shape").get<Shape>();
    const auto offset = e.at("offset").get<std::size_t>();
    const auto n = shape_numel(shape);
    if (offset + n * 4 > payload.size()) throw std::runtime_error("tensor extends past payload");
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = read_le32(payload.data() + offset + 4 * i);
    out.add(Tensor(e.at("name").get<std::string>(), std::move(shape), std::move(data)));
  }
  return out;
}

std::string load_params_meta(const std::filesystem::path& stem) {
  const json manifest = read_manifest(stem);
  if (!manifest.contains("meta")) return "null";
  return manifest["meta"].dump();
}

std::uint64_t fingerprint(const ParamSet& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const std::uint8_t*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& t : params) {
    mix(t.name.data(), t.name.size());
    for (auto e : t.shape) mix(&e, sizeof(e));
    mix(t.data.data(), t.data.size() * sizeof(float));
  }
  return h;
}

}  // namespace worldlm
