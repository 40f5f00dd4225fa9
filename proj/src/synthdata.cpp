#include "xda/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "xda/errors.hpp"

namespace xda {

namespace {

constexpr std::uint64_t kGeometryStream = 0x9e3779b97f4a7c15ULL;
constexpr std::uint64_t kNoiseStream = 0xc2b2ae3d27d4eb4fULL;

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

std::array<Real, 3> hsv_to_rgb(Real h, Real s, Real v) {
  h = std::fmod(h, 360.0);
  if (h < 0) h += 360.0;
  const Real c = v * s;
  const Real hp = h / 60.0;
  const Real x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  Real r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const Real m = v - c;
  return {r + m, g + m, b + m};
}

std::array<Real, 3> rgb_to_hsv(Real r, Real g, Real b) {
  const Real mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const Real d = mx - mn;
  Real h = 0;
  if (d > 0) {
    if (mx == r) h = 60.0 * std::fmod((g - b) / d, 6.0);
    else if (mx == g) h = 60.0 * ((b - r) / d + 2.0);
    else h = 60.0 * ((r - g) / d + 4.0);
  }
  return {h, mx > 0 ? d / mx : 0.0, mx};
}

Real edge(Real ax, Real ay, Real bx, Real by, Real px, Real py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

constexpr std::array<Real, 3> kBaseHue{0.0, 120.0, 240.0};  // circle, rectangle, triangle
constexpr std::array<Real, 3> kBaseSaturation{0.88, 0.62, 0.38};

}  // namespace

std::string to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

Domain parse_domain(const std::string& s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw FormatError("unknown domain '" + s + "'");
}

std::string to_string(Split s) {
  switch (s) {
    case Split::source_train: return "source_train";
    case Split::target_train: return "target_train";
    default: return "target_eval";
  }
}

bool ShapeInstance::contains(Real x, Real y) const {
  const auto& g = geom;
  switch (kind) {
    case ShapeKind::circle: return (x - g[0]) * (x - g[0]) + (y - g[1]) * (y - g[1]) <= g[2] * g[2];
    case ShapeKind::rectangle: return x >= g[0] && x <= g[2] && y >= g[1] && y <= g[3];
    case ShapeKind::triangle: {
      const Real e0 = edge(g[0], g[1], g[2], g[3], x, y);
      const Real e1 = edge(g[2], g[3], g[4], g[5], x, y);
      const Real e2 = edge(g[4], g[5], g[0], g[1], x, y);
      return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
  }
  return false;
}

void DomainShift::validate() const {
  auto fail = [](const std::string& what) { throw ContractError("domain shift: " + what); };
  if (!(hue_degrees >= -180 && hue_degrees <= 180)) fail("hue rotation must be in [-180, 180]");
  if (!(noise_sigma >= 0 && noise_sigma <= 0.5)) fail("noise sigma must be in [0, 0.5]");
  if (blur_width < 0 || blur_width > 9 || (blur_width > 0 && blur_width % 2 == 0))
    fail("blur width must be 0 or odd in [1, 9]");
  if (!(gain >= 0.25 && gain <= 2)) fail("gain must be in [0.25, 2]");
}

void SceneConfig::validate() const {
  auto fail = [](const std::string& what) { throw ContractError("scene config: " + what); };
  if (height < 4 || width < 4) fail("image must be at least 4x4");
  if (classes != 4) fail("the generator renders exactly 4 classes");
  if (min_shapes < 0 || max_shapes < min_shapes) fail("bad shape count range");
  Real total = 0;
  for (Real p : shape_prior) {
    if (!(p >= 0)) fail("shape prior must be non-negative");
    total += p;
  }
  if (!(total > 0)) fail("shape prior must have positive mass");
  if (!(min_size > 0 && max_size >= min_size && max_size <= 1)) fail("bad size range");
  if (!(hue_jitter >= 0 && hue_jitter <= 180)) fail("hue jitter must be in [0, 180]");
  if (!(color_tie >= 0 && color_tie <= 1)) fail("color_tie must be in [0, 1]");
  shift.validate();
}

void apply_shift(std::vector<Real>& image, std::size_t height, std::size_t width, const DomainShift& shift,
                 std::uint64_t seed) {
  shift.validate();
  const std::size_t n = height * width;
  if (image.size() != n * 3) throw DimensionError("apply_shift: image size does not match");
  if (shift.hue_degrees != 0) {
    for (std::size_t p = 0; p < n; ++p) {
      Real* px = &image[p * 3];
      const auto hsv = rgb_to_hsv(px[0], px[1], px[2]);
      const auto rgb = hsv_to_rgb(hsv[0] + shift.hue_degrees, hsv[1], hsv[2]);
      std::copy(rgb.begin(), rgb.end(), px);
    }
  }
  if (shift.gain != 1)
    for (auto& v : image) v *= shift.gain;
  if (shift.blur_width > 1) {
    const long r = shift.blur_width / 2;
    const long h = static_cast<long>(height), w = static_cast<long>(width);
    std::vector<Real> tmp(image.size());
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x)
        for (long c = 0; c < 3; ++c) {
          Real s = 0;
          for (long k = -r; k <= r; ++k) s += image[(y * w + std::clamp(x + k, 0L, w - 1)) * 3 + c];
          tmp[(y * w + x) * 3 + c] = s / static_cast<Real>(2 * r + 1);
        }
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x)
        for (long c = 0; c < 3; ++c) {
          Real s = 0;
          for (long k = -r; k <= r; ++k) s += tmp[(std::clamp(y + k, 0L, h - 1) * w + x) * 3 + c];
          image[(y * w + x) * 3 + c] = s / static_cast<Real>(2 * r + 1);
        }
  }
  if (shift.noise_sigma > 0) {
    auto rng = stream_rng(seed, kNoiseStream);
    std::normal_distribution<Real> noise(0.0, shift.noise_sigma);
    for (auto& v : image) v += noise(rng);
  }
  for (auto& v : image) v = std::clamp(v, 0.0, 1.0);
}

Scene gen_scene(Domain domain, std::uint64_t seed, const SceneConfig& config) {
  config.validate();
  const std::size_t h = config.height, w = config.width;
  auto rng = stream_rng(seed, kGeometryStream);
  std::uniform_real_distribution<Real> unit(0.0, 1.0);
  auto uniform = [&](Real lo, Real hi) { return lo + (hi - lo) * unit(rng); };

  Scene scene;
  scene.domain = domain;
  scene.seed = seed;

  const auto background = hsv_to_rgb(uniform(0, 360), uniform(0, 0.2), uniform(0.3, 0.7));
  std::discrete_distribution<int> pick(config.shape_prior.begin(), config.shape_prior.end());
  std::uniform_int_distribution<int> count(config.min_shapes, config.max_shapes);
  const int shapes = count(rng);
  const Real side = static_cast<Real>(std::min(h, w));
  for (int i = 0; i < shapes; ++i) {
    ShapeInstance s;
    s.kind = static_cast<ShapeKind>(pick(rng) + 1);
    const Real size = uniform(config.min_size, config.max_size) * side;
    const Real cx = uniform(0.15, 0.85) * static_cast<Real>(w);
    const Real cy = uniform(0.15, 0.85) * static_cast<Real>(h);
    switch (s.kind) {
      case ShapeKind::circle: s.geom = {cx, cy, size / 2, 0, 0, 0}; break;
      case ShapeKind::rectangle: {
        const Real hw = size * uniform(0.35, 0.65), hh = size * uniform(0.35, 0.65);
        s.geom = {cx - hw, cy - hh, cx + hw, cy + hh, 0, 0};
        break;
      }
      case ShapeKind::triangle: {
        const Real theta = uniform(0, 2 * std::numbers::pi), rad = size * 0.6;
        for (int k = 0; k < 3; ++k) {
          const Real a = theta + 2 * std::numbers::pi * k / 3;
          s.geom[2 * k] = cx + rad * std::cos(a);
          s.geom[2 * k + 1] = cy + rad * std::sin(a);
        }
        break;
      }
    }
    // Draws are unconditional so geometry streams do not depend on color_tie.
    const bool tied = unit(rng) < config.color_tie;
    const Real tied_hue = kBaseHue[static_cast<std::size_t>(s.kind) - 1] + uniform(-config.hue_jitter, config.hue_jitter);
    const Real free_hue = uniform(0, 360);
    const Real hue = tied ? tied_hue : free_hue;
    const Real s_lo = kBaseSaturation[static_cast<std::size_t>(s.kind) - 1];
    s.color = hsv_to_rgb(hue, uniform(s_lo, s_lo + 0.12), uniform(0.6, 0.95));
    scene.shapes.push_back(s);
  }

  std::vector<Real> pixels(h * w * 3);
  scene.label.assign(h * w, 0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t p = y * w + x;
      std::array<Real, 3> color = background;
      for (const auto& s : scene.shapes) {
        if (s.contains(static_cast<Real>(x) + 0.5, static_cast<Real>(y) + 0.5)) {
          scene.label[p] = static_cast<int>(s.kind);
          color = s.color;
        }
      }
      std::copy(color.begin(), color.end(), pixels.begin() + static_cast<std::ptrdiff_t>(p * 3));
    }
  if (domain == Domain::target) apply_shift(pixels, h, w, config.shift, seed);
  scene.image = Tensor::constant({h, w, 3}, std::move(pixels));
  return scene;
}

std::uint64_t split_seed(Split split, std::size_t index) {
  switch (split) {
    case Split::source_train: return index;
    case Split::target_train: return 1'000'000 + index;
    default: return 2'000'000 + index;
  }
}

Domain split_domain(Split split) { return split == Split::source_train ? Domain::source : Domain::target; }

std::vector<Scene> gen_split(Split split, std::size_t count, const SceneConfig& config) {
  if (count >= 1'000'000) throw ContractError("split size must stay inside its seed range");
  std::vector<Scene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(gen_scene(split_domain(split), split_seed(split, i), config));
  return out;
}

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw ContractError("confusion matrix needs at least one class");
}

void ConfusionMatrix::add(const std::vector<int>& pred, const std::vector<int>& label) {
  if (pred.empty() || label.empty()) throw ContractError("miou: empty input");
  if (pred.size() != label.size())
    throw DimensionError("miou: prediction has " + std::to_string(pred.size()) + " pixels, label has " +
                         std::to_string(label.size()));
  const int c = static_cast<int>(classes_);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= c || label[i] < 0 || label[i] >= c)
      throw ContractError("miou: class id out of range at pixel " + std::to_string(i));
    ++counts_[static_cast<std::size_t>(label[i]) * classes_ + static_cast<std::size_t>(pred[i])];
  }
}

IouResult ConfusionMatrix::iou() const {
  IouResult r;
  r.per_class.resize(classes_);
  Real total = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes_; ++c) {
    std::uint64_t tp = at(c, c), fp = 0, fn = 0;
    for (std::size_t o = 0; o < classes_; ++o) {
      if (o == c) continue;
      fp += at(o, c);
      fn += at(c, o);
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) continue;
    r.per_class[c] = static_cast<Real>(tp) / static_cast<Real>(denom);
    total += *r.per_class[c];
    ++present;
  }
  if (present == 0) throw ContractError("miou: no pixels accumulated");
  r.mean = total / static_cast<Real>(present);
  return r;
}

IouResult miou(const std::vector<int>& pred, const std::vector<int>& label, std::size_t classes) {
  ConfusionMatrix m(classes);
  m.add(pred, label);
  return m.iou();
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  return f;
}

// Reads "P5"/"P6" header fields, skipping comments.
void read_header(std::istream& in, const std::string& magic, const std::filesystem::path& path, std::size_t& w,
                 std::size_t& h) {
  std::string m;
  in >> m;
  if (m != magic) throw FormatError(path.string() + ": expected " + magic + " header");
  std::size_t fields[3];
  for (auto& f : fields) {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
      in >> std::ws;
    }
    if (!(in >> f)) throw FormatError(path.string() + ": truncated header");
  }
  if (fields[2] != 255) throw FormatError(path.string() + ": only maxval 255 is supported");
  in.get();
  w = fields[0];
  h = fields[1];
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("write_ppm: expected [H x W x 3]");
  auto f = open_out(path);
  f << "P6\n" << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
  std::vector<char> bytes;
  bytes.reserve(image.size());
  for (Real v : image.data())
    bytes.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot read " + path.string());
  std::size_t w = 0, h = 0;
  read_header(f, "P6", path, w, h);
  std::vector<char> bytes(w * h * 3);
  if (!f.read(bytes.data(), static_cast<std::streamsize>(bytes.size())))
    throw FormatError(path.string() + ": truncated pixel data");
  std::vector<Real> v(bytes.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<std::uint8_t>(bytes[i]) / 255.0;
  return Tensor::constant({h, w, 3}, std::move(v));
}

void write_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels, std::size_t height,
               std::size_t width) {
  if (pixels.size() != height * width) throw DimensionError("write_pgm: pixel count does not match size");
  auto f = open_out(path);
  f << "P5\n" << width << ' ' << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::size_t* height, std::size_t* width) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot read " + path.string());
  std::size_t w = 0, h = 0;
  read_header(f, "P5", path, w, h);
  std::vector<std::uint8_t> out(w * h);
  if (!f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size())))
    throw FormatError(path.string() + ": truncated pixel data");
  if (height) *height = h;
  if (width) *width = w;
  return out;
}

void export_dataset(const std::filesystem::path& dir, const SceneConfig& config, const SplitSizes& sizes) {
  config.validate();
  std::filesystem::create_directories(dir);
  auto manifest = open_out(dir / "manifest.tsv");
  manifest << "seed\tdomain\tsplit\timage\tlabel\n";
  for (auto [split, n] : {std::pair{Split::source_train, sizes.source_train},
                          std::pair{Split::target_train, sizes.target_train},
                          std::pair{Split::target_eval, sizes.target_eval}}) {
    const std::string name = to_string(split);
    std::filesystem::create_directories(dir / name);
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint64_t seed = split_seed(split, i);
      const Scene s = gen_scene(split_domain(split), seed, config);
      const std::string stem = name + "/" + std::to_string(seed);
      write_ppm(dir / (stem + ".ppm"), s.image);
      std::vector<std::uint8_t> labels(s.label.begin(), s.label.end());
      write_pgm(dir / (stem + ".pgm"), labels, config.height, config.width);
      manifest << seed << '\t' << to_string(s.domain) << '\t' << name << '\t' << stem << ".ppm\t" << stem << ".pgm\n";
    }
  }
}

}  // namespace xda
