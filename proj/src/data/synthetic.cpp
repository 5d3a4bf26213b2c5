#include "sona/data/synthetic.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "sona/core/error.hpp"
#include "sona/core/kvconfig.hpp"

namespace sona::data {

namespace {

constexpr double kPi = std::numbers::pi;

const std::vector<std::pair<Shape2D, std::string>>& shape_table() {
  static const std::vector<std::pair<Shape2D, std::string>> t{
      {Shape2D::kCircle, "circle"}, {Shape2D::kSquare, "square"}, {Shape2D::kTriangle, "triangle"},
      {Shape2D::kCross, "cross"},   {Shape2D::kRing, "ring"},     {Shape2D::kStar, "star"},
      {Shape2D::kDiamond, "diamond"}, {Shape2D::kPlus, "plus"}};
  return t;
}

struct Pt {
  double x, y;
};

bool in_polygon(const std::vector<Pt>& poly, double x, double y) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Pt a = poly[i], b = poly[j];
    if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) inside = !inside;
  }
  return inside;
}

std::vector<Pt> star_polygon(double r) {
  std::vector<Pt> p;
  for (int k = 0; k < 10; ++k) {
    const double rad = (k % 2 == 0) ? r : 0.45 * r;
    const double ang = -kPi / 2 + k * kPi / 5;
    p.push_back({rad * std::cos(ang), rad * std::sin(ang)});
  }
  return p;
}

// Membership of offset (dx, dy) from the shape centre for a shape of radius r.
bool inside(Shape2D s, double dx, double dy, double r) {
  const double d = std::hypot(dx, dy);
  switch (s) {
    case Shape2D::kCircle: return d <= r;
    case Shape2D::kRing: return d <= r && d >= 0.55 * r;
    case Shape2D::kSquare: return std::abs(dx) <= 0.82 * r && std::abs(dy) <= 0.82 * r;
    case Shape2D::kDiamond: return std::abs(dx) + std::abs(dy) <= 1.1 * r;
    case Shape2D::kTriangle: {
      static const std::vector<Pt> unit{{0.0, -1.0}, {-0.95, 0.75}, {0.95, 0.75}};
      return in_polygon(unit, dx / r, dy / r);
    }
    case Shape2D::kPlus:
      return (std::abs(dx) <= r && std::abs(dy) <= 0.3 * r) || (std::abs(dy) <= r && std::abs(dx) <= 0.3 * r);
    case Shape2D::kCross: {
      const double u = (dx + dy) / std::numbers::sqrt2, v = (dx - dy) / std::numbers::sqrt2;
      return (std::abs(u) <= r && std::abs(v) <= 0.3 * r) || (std::abs(v) <= r && std::abs(u) <= 0.3 * r);
    }
    case Shape2D::kStar: {
      static const std::vector<Pt> unit = star_polygon(1.0);
      return in_polygon(unit, dx / r, dy / r);
    }
  }
  return false;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(' ');
    const auto e = item.find_last_not_of(' ');
    out.push_back(b == std::string::npos ? "" : item.substr(b, e - b + 1));
  }
  return out;
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ConfigError("'" + key + "': expected a number, got '" + s + "'");
  }
  return v;
}

std::size_t parse_size(const std::string& key, const std::string& s) {
  std::size_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("'" + key + "': expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

Range parse_range(const std::string& key, const std::string& s) {
  const auto parts = split_list(s);
  if (parts.size() != 2) throw ConfigError("'" + key + "': expected 'lo,hi', got '" + s + "'");
  Range r{parse_double(key, parts[0]), parse_double(key, parts[1])};
  if (r.lo > r.hi) throw ConfigError("'" + key + "': empty range");
  return r;
}

std::string fmt_range(Range r) { return fmt(r.lo) + "," + fmt(r.hi); }

void render_background(const FactorSpec& spec, const Background& bg, Rng& rng, Tensor& pixels) {
  const std::size_t n = spec.side;
  if (bg.family == Background::Family::kStriped) {
    const double cs = std::cos(bg.orientation), sn = std::sin(bg.orientation);
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const double u = ((x + 0.5) * cs + (y + 0.5) * sn) / static_cast<double>(n);
        const double wave = spec.stripe_amplitude * std::sin(2 * kPi * bg.frequency * u + bg.phase);
        for (std::size_t c = 0; c < 3; ++c) {
          pixels[(c * n + y) * n + x] = static_cast<real>(std::clamp(bg.base[c] + wave, 0.0, 1.0));
        }
      }
    }
    return;
  }
  const std::size_t cell = std::max<std::size_t>(1, spec.noise_cell);
  const std::size_t cells = (n + cell - 1) / cell;
  std::vector<double> tex(3 * cells * cells);
  for (auto& v : tex) v = rng.uniform(-spec.noise_amplitude, spec.noise_amplitude);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const double v = bg.base[c] + tex[(c * cells + y / cell) * cells + x / cell];
        pixels[(c * n + y) * n + x] = static_cast<real>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
}

ImageSet render_split(const FactorSpec& spec, const std::vector<std::int32_t>& classes, Background::Family family,
                      std::size_t count, std::uint64_t seed, std::uint64_t tag) {
  ImageSet set;
  if (count == 0) return set;
  const std::size_t n = spec.side;
  set.images = Tensor(Shape{count, 3, n, n});
  set.masks = Tensor(Shape{count, n, n});
  const std::size_t img = 3 * n * n, msk = n * n;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, (tag << 32) + i));
    const std::int32_t cls = classes[i % classes.size()];
    LabeledImage li = render_image(spec, cls, family, rng);
    std::copy(li.pixels.data().begin(), li.pixels.data().end(),
              set.images.data().begin() + static_cast<std::ptrdiff_t>(i * img));
    std::copy(li.mask.data().begin(), li.mask.data().end(),
              set.masks.data().begin() + static_cast<std::ptrdiff_t>(i * msk));
    set.labels.push_back(cls);
    set.backgrounds.push_back(li.background);
  }
  return set;
}

std::vector<std::int32_t> ids_of(const FactorSpec& spec, const std::vector<std::string>& names) {
  std::vector<std::int32_t> out;
  for (const auto& n : names) out.push_back(spec.class_id(n));
  return out;
}

Tensor backgrounds_tensor(const std::vector<Background>& bgs) {
  Tensor t(Shape{bgs.size(), 7});
  for (std::size_t i = 0; i < bgs.size(); ++i) {
    const auto& b = bgs[i];
    const double row[7] = {b.family == Background::Family::kNoise ? 1.0 : 0.0, b.base[0], b.base[1], b.base[2],
                           b.frequency, b.phase, b.orientation};
    for (std::size_t k = 0; k < 7; ++k) t[i * 7 + k] = static_cast<real>(row[k]);
  }
  return t;
}

std::vector<Background> backgrounds_from(const Tensor& t) {
  std::vector<Background> out(t.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& b = out[i];
    b.family = t[i * 7] != 0 ? Background::Family::kNoise : Background::Family::kStriped;
    b.base = {t[i * 7 + 1], t[i * 7 + 2], t[i * 7 + 3]};
    b.frequency = t[i * 7 + 4];
    b.phase = t[i * 7 + 5];
    b.orientation = t[i * 7 + 6];
  }
  return out;
}

void put_set(Archive& a, const std::string& prefix, const ImageSet& s) {
  a.add(prefix + ".count", std::to_string(s.size()));
  if (s.size() == 0) return;
  a.add(prefix + ".images", s.images);
  a.add(prefix + ".masks", s.masks);
  a.add(prefix + ".labels", ints_to_tensor(s.labels));
  a.add(prefix + ".backgrounds", backgrounds_tensor(s.backgrounds));
}

ImageSet get_set(const Archive& a, const std::string& prefix) {
  ImageSet s;
  if (a.text(prefix + ".count") == "0") return s;
  s.images = a.tensor(prefix + ".images");
  s.masks = a.tensor(prefix + ".masks");
  s.labels = tensor_to_ints(a.tensor(prefix + ".labels"));
  s.backgrounds = backgrounds_from(a.tensor(prefix + ".backgrounds"));
  if (s.images.dim(0) != s.labels.size() || s.masks.dim(0) != s.labels.size()) {
    throw FormatError("split '" + prefix + "' has inconsistent entry sizes");
  }
  return s;
}

}  // namespace

Shape2D parse_shape(const std::string& name) {
  for (const auto& [s, n] : shape_table()) {
    if (n == name) return s;
  }
  throw ConfigError("unknown shape '" + name + "'");
}

std::string shape_name(Shape2D s) {
  for (const auto& [k, n] : shape_table()) {
    if (k == s) return n;
  }
  return "?";
}

std::int32_t FactorSpec::class_id(const std::string& name) const {
  const auto it = std::find(classes.begin(), classes.end(), name);
  if (it == classes.end()) throw ConfigError("class '" + name + "' is not in the class list");
  return static_cast<std::int32_t>(it - classes.begin());
}

void FactorSpec::validate() const {
  if (side < 8) throw ConfigError("image side must be at least 8 pixels");
  std::set<std::string> seen;
  for (const auto& c : classes) {
    parse_shape(c);
    if (!seen.insert(c).second) throw ConfigError("class '" + c + "' listed twice");
  }
  auto check_role = [&](const std::vector<std::string>& role, const char* what) {
    if (role.empty()) throw ConfigError(std::string("class budget exhausted: no ") + what + " classes");
    std::set<std::string> r;
    for (const auto& c : role) {
      class_id(c);
      if (!r.insert(c).second) throw ConfigError(std::string(what) + " class '" + c + "' listed twice");
    }
  };
  check_role(id_classes, "ID");
  check_role(near_classes, "near-OOD");
  check_role(far_classes, "far-OOD");
  check_role(prompt_classes, "OOD-prompt");
  if (id_classes.size() < 2) throw ConfigError("class budget exhausted: need at least 2 ID classes");
  auto disjoint = [](const std::vector<std::string>& a, const std::vector<std::string>& b, const std::string& what) {
    for (const auto& x : a) {
      if (std::find(b.begin(), b.end(), x) != b.end()) {
        throw ConfigError("class budget: '" + x + "' is used as both " + what);
      }
    }
  };
  disjoint(id_classes, near_classes, "ID and near-OOD");
  disjoint(id_classes, far_classes, "ID and far-OOD");
  disjoint(near_classes, far_classes, "near-OOD and far-OOD");
  disjoint(id_classes, prompt_classes, "ID and OOD prompt");
  if (!allow_near_prompts) disjoint(near_classes, prompt_classes, "near-OOD and OOD prompt");
  for (Range r : {base_color, far_base_color, foreground, stripe_frequency, radius}) {
    if (r.lo > r.hi) throw ConfigError("empty parameter range");
  }
  if (base_color.hi >= far_base_color.lo && far_base_color.hi >= base_color.lo) {
    throw ConfigError("far-OOD base-colour range must not overlap the ID range");
  }
  if (radius.hi + jitter > 0.5) throw ConfigError("shape radius plus jitter exceeds the image");
}

std::map<std::string, std::string> spec_to_key_values(const FactorSpec& s) {
  return {{"side", std::to_string(s.side)},
          {"classes", join(s.classes)},
          {"id_classes", join(s.id_classes)},
          {"near_classes", join(s.near_classes)},
          {"far_classes", join(s.far_classes)},
          {"prompt_classes", join(s.prompt_classes)},
          {"allow_near_prompts", s.allow_near_prompts ? "true" : "false"},
          {"base_color", fmt_range(s.base_color)},
          {"stripe_frequency", fmt_range(s.stripe_frequency)},
          {"stripe_amplitude", fmt(s.stripe_amplitude)},
          {"far_base_color", fmt_range(s.far_base_color)},
          {"noise_amplitude", fmt(s.noise_amplitude)},
          {"noise_cell", std::to_string(s.noise_cell)},
          {"foreground", fmt_range(s.foreground)},
          {"radius", fmt_range(s.radius)},
          {"jitter", fmt(s.jitter)}};
}

FactorSpec spec_from_key_values(const std::map<std::string, std::string>& values) {
  FactorSpec s;
  for (const auto& [k, v] : values) {
    if (k == "side") s.side = parse_size(k, v);
    else if (k == "classes") s.classes = split_list(v);
    else if (k == "id_classes") s.id_classes = split_list(v);
    else if (k == "near_classes") s.near_classes = split_list(v);
    else if (k == "far_classes") s.far_classes = split_list(v);
    else if (k == "prompt_classes") s.prompt_classes = split_list(v);
    else if (k == "allow_near_prompts") {
      if (v != "true" && v != "false") throw ConfigError("'" + k + "': expected true or false");
      s.allow_near_prompts = v == "true";
    } else if (k == "base_color") s.base_color = parse_range(k, v);
    else if (k == "stripe_frequency") s.stripe_frequency = parse_range(k, v);
    else if (k == "stripe_amplitude") s.stripe_amplitude = parse_double(k, v);
    else if (k == "far_base_color") s.far_base_color = parse_range(k, v);
    else if (k == "noise_amplitude") s.noise_amplitude = parse_double(k, v);
    else if (k == "noise_cell") s.noise_cell = parse_size(k, v);
    else if (k == "foreground") s.foreground = parse_range(k, v);
    else if (k == "radius") s.radius = parse_range(k, v);
    else if (k == "jitter") s.jitter = parse_double(k, v);
    else throw ConfigError("unknown data key '" + k + "'");
  }
  return s;
}

Tensor shape_mask(Shape2D shape, std::size_t side, double cx, double cy, double r) {
  Tensor m(Shape{side, side});
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      if (inside(shape, x + 0.5 - cx, y + 0.5 - cy, r)) m[y * side + x] = real(1);
    }
  }
  return m;
}

double disc_area(double radius) { return kPi * radius * radius; }

LabeledImage render_image(const FactorSpec& spec, std::int32_t class_id, Background::Family family, Rng& rng) {
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= spec.classes.size()) {
    throw ArgumentError("class id " + std::to_string(class_id) + " out of range");
  }
  const Shape2D shape = parse_shape(spec.classes[static_cast<std::size_t>(class_id)]);
  const std::size_t n = spec.side;
  const double side = static_cast<double>(n);

  LabeledImage out;
  out.label = class_id;
  Background& bg = out.background;
  bg.family = family;
  const Range base = family == Background::Family::kStriped ? spec.base_color : spec.far_base_color;
  for (auto& c : bg.base) c = rng.uniform(base.lo, base.hi);
  if (family == Background::Family::kStriped) {
    bg.frequency = rng.uniform(spec.stripe_frequency.lo, spec.stripe_frequency.hi);
    bg.phase = rng.uniform(0.0, 2 * kPi);
    bg.orientation = rng.uniform(0.0, kPi);
  }
  std::array<double, 3> fg;
  for (auto& c : fg) c = rng.uniform(spec.foreground.lo, spec.foreground.hi);
  const double r = rng.uniform(spec.radius.lo, spec.radius.hi) * side;
  const double cx = side / 2 + rng.uniform(-spec.jitter, spec.jitter) * side;
  const double cy = side / 2 + rng.uniform(-spec.jitter, spec.jitter) * side;

  out.pixels = Tensor(Shape{3, n, n});
  render_background(spec, bg, rng, out.pixels);
  out.mask = shape_mask(shape, n, cx, cy, r);
  for (std::size_t p = 0; p < n * n; ++p) {
    if (out.mask[p] == real(0)) continue;
    for (std::size_t c = 0; c < 3; ++c) out.pixels[c * n * n + p] = static_cast<real>(fg[c]);
  }
  return out;
}

LabeledImage ImageSet::at(std::size_t i) const {
  if (i >= size()) throw ArgumentError("image index out of range");
  LabeledImage li;
  li.pixels = images.slice_rows(i, i + 1).reshaped(Shape(images.shape().begin() + 1, images.shape().end()));
  li.mask = masks.slice_rows(i, i + 1).reshaped(Shape(masks.shape().begin() + 1, masks.shape().end()));
  li.label = labels[i];
  li.background = backgrounds[i];
  return li;
}

std::int32_t BenchmarkSplits::id_index(std::int32_t class_id) const {
  const auto it = std::find(id_classes.begin(), id_classes.end(), class_id);
  return it == id_classes.end() ? -1 : static_cast<std::int32_t>(it - id_classes.begin());
}

BenchmarkSplits generate_benchmark(const FactorSpec& spec, const SplitCounts& counts, std::uint64_t seed) {
  spec.validate();
  BenchmarkSplits out;
  out.spec = spec;
  out.id_classes = ids_of(spec, spec.id_classes);
  out.ood_prompt_labels = ids_of(spec, spec.prompt_classes);
  const auto near = ids_of(spec, spec.near_classes);
  const auto far = ids_of(spec, spec.far_classes);
  using F = Background::Family;
  out.id_train = render_split(spec, out.id_classes, F::kStriped, counts.id_train, seed, 1);
  out.id_test = render_split(spec, out.id_classes, F::kStriped, counts.id_test, seed, 2);
  out.near_ood = render_split(spec, near, F::kStriped, counts.near_ood, seed, 3);
  out.far_ood = render_split(spec, far, F::kNoise, counts.far_ood, seed, 4);
  out.prompt_train = render_split(spec, out.ood_prompt_labels, F::kStriped, counts.prompt_train, seed, 5);
  return out;
}

Archive benchmark_to_archive(const BenchmarkSplits& splits) {
  Archive a;
  a.add("spec", canonical_key_values(spec_to_key_values(splits.spec)));
  put_set(a, "id_train", splits.id_train);
  put_set(a, "id_test", splits.id_test);
  put_set(a, "near_ood", splits.near_ood);
  put_set(a, "far_ood", splits.far_ood);
  put_set(a, "prompt_train", splits.prompt_train);
  return a;
}

BenchmarkSplits benchmark_from_archive(const Archive& a) {
  BenchmarkSplits out;
  out.spec = spec_from_key_values(parse_key_values(a.text("spec"), "archive spec"));
  out.spec.validate();
  out.id_classes = ids_of(out.spec, out.spec.id_classes);
  out.ood_prompt_labels = ids_of(out.spec, out.spec.prompt_classes);
  out.id_train = get_set(a, "id_train");
  out.id_test = get_set(a, "id_test");
  out.near_ood = get_set(a, "near_ood");
  out.far_ood = get_set(a, "far_ood");
  out.prompt_train = get_set(a, "prompt_train");
  return out;
}

}  // namespace sona::data
