#pragma once

// Two-domain synthetic segmentation scenes (background, circle, rectangle,
// triangle), the target-domain appearance shift, mIoU, and PPM/PGM export.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xda/tensor.hpp"

namespace xda {

enum class Domain { source, target };
std::string to_string(Domain d);
Domain parse_domain(const std::string& s);

enum class ShapeKind : int { circle = 1, rectangle = 2, triangle = 3 };

// Analytic description of one painted shape, in pixel coordinates where pixel
// (x, y) is sampled at (x + 0.5, y + 0.5).
struct ShapeInstance {
  ShapeKind kind = ShapeKind::circle;
  std::array<Real, 6> geom{};  // circle: cx cy r; rectangle: x0 y0 x1 y1; triangle: 3 vertices
  std::array<Real, 3> color{};
  bool contains(Real x, Real y) const;
};

struct DomainShift {
  Real hue_degrees = 0;  // [-180, 180]
  Real noise_sigma = 0;  // [0, 0.5]
  int blur_width = 0;    // 0 or odd in [1, 9]; 0 and 1 leave the image sharp
  Real gain = 1;         // [0.25, 2]
  void validate() const;
  bool operator==(const DomainShift&) const = default;
};

struct SceneConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t classes = 4;
  int min_shapes = 1;
  int max_shapes = 3;
  std::array<Real, 3> shape_prior{1.0 / 3, 1.0 / 3, 1.0 / 3};  // circle, rectangle, triangle
  Real min_size = 0.2;  // fraction of the shorter image side
  Real max_size = 0.45;
  Real hue_jitter = 25;  // degrees around each class's base hue
  Real color_tie = 1.0;  // probability a shape takes its class hue; otherwise any hue
  DomainShift shift{60, 0.08, 3, 0.8};
  void validate() const;
  bool operator==(const SceneConfig&) const = default;
};

struct Scene {
  Tensor image;           // [H x W x 3] in [0, 1]
  std::vector<int> label;  // H*W class ids
  Domain domain = Domain::source;
  std::uint64_t seed = 0;
  std::vector<ShapeInstance> shapes;  // paint order; later shapes occlude earlier ones
};

// Geometry and clean appearance depend only on the seed; the target domain
// then applies the configured DomainShift.
Scene gen_scene(Domain domain, std::uint64_t seed, const SceneConfig& config);

// In-place appearance shift of an [H x W x 3] image.
void apply_shift(std::vector<Real>& image, std::size_t height, std::size_t width, const DomainShift& shift,
                 std::uint64_t seed);

enum class Split { source_train, target_train, target_eval };
std::string to_string(Split s);

struct SplitSizes {
  std::size_t source_train = 512;
  std::size_t target_train = 512;
  std::size_t target_eval = 128;
  bool operator==(const SplitSizes&) const = default;
};

// Disjoint seed ranges per split.
std::uint64_t split_seed(Split split, std::size_t index);
Domain split_domain(Split split);
std::vector<Scene> gen_split(Split split, std::size_t count, const SceneConfig& config);

struct IouResult {
  std::vector<std::optional<Real>> per_class;  // empty when the class is absent from both maps
  Real mean = 0;
};

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes);
  void add(const std::vector<int>& pred, const std::vector<int>& label);
  std::uint64_t at(std::size_t label, std::size_t pred) const { return counts_[label * classes_ + pred]; }
  std::size_t classes() const { return classes_; }
  IouResult iou() const;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

IouResult miou(const std::vector<int>& pred, const std::vector<int>& label, std::size_t classes);

// Binary P6 / P5 files.
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels, std::size_t height,
               std::size_t width);
std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::size_t* height, std::size_t* width);

// Writes every scene as PPM + PGM and a tab-separated manifest
// (seed, domain, split, image, label) into `dir`.
void export_dataset(const std::filesystem::path& dir, const SceneConfig& config, const SplitSizes& sizes);

}  // namespace xda
