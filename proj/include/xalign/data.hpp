#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "xalign/model.hpp"
#include "xalign/tensor.hpp"

namespace xalign {

enum class ShapeKind { circle, square, triangle, cross, ring, diamond };
enum class Texture { solid, stripes, checker };

std::string_view shape_name(ShapeKind kind);
std::string_view texture_name(Texture texture);
ShapeKind parse_shape(std::string_view name);
Texture parse_texture(std::string_view name);

struct ClassSpec {
  ShapeKind shape = ShapeKind::circle;
  Texture texture = Texture::solid;
};

struct SplitSizes {
  std::int64_t train = 2000;
  std::int64_t val = 400;
  std::int64_t finetune = 400;
  std::int64_t eval = 400;
  std::int64_t total() const { return train + val + finetune + eval; }
};

/// Parameters of the synthetic generator.
///
/// `cooccurrence[i][i]` is P(label i) and `cooccurrence[i][j]` the joint
/// P(label i and label j). Labels are drawn as a Markov chain in class order,
/// so adjacent pairs are reproduced exactly and every other pair must equal
/// the value the chain implies. An empty matrix means independent labels with
/// prevalence 0.5.
struct GenSpec {
  std::int64_t size = 64;
  std::int64_t channels = 1;
  std::vector<ClassSpec> classes{{ShapeKind::circle, Texture::solid},
                                 {ShapeKind::square, Texture::stripes},
                                 {ShapeKind::triangle, Texture::checker}};
  std::vector<std::vector<double>> cooccurrence;
  double noise = 0.05;
  bool confounder = false;
  double confounder_probability = 0.9;  // P(patch | label 0) = P(no patch | not label 0)
  std::uint64_t seed = 0;
  SplitSizes splits;

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  std::vector<std::vector<double>> joint_matrix() const;
};

/// Stand-in used for the "pretrained" factor: same geometry, disjoint shape
/// vocabulary (ring, diamond, cross).
GenSpec pretraining_spec(const GenSpec& main);

struct AnnotatedSample {
  std::int64_t id = 0;
  Tensor image;                              // (C, H, W) in [0, 1]
  std::vector<std::uint8_t> labels;          // one 0/1 entry per class
  std::map<std::int64_t, Tensor> masks;      // label -> (H, W) 0/1
  bool confounded = false;                   // carries the corner patch
};

enum class Split { train, val, finetune, eval };
std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct Dataset {
  InputShape shape;
  std::int64_t num_labels = 0;
  std::vector<AnnotatedSample> samples;      // ascending id
  std::map<std::int64_t, Split> split_of;    // id -> split
  std::vector<std::pair<std::int64_t, std::int64_t>> excluded;  // (id, label) positives lacking a mask
  std::string manifest;                      // canonical JSON describing the source

  /// Indices into `samples` belonging to `split`, ascending by id.
  std::vector<std::size_t> indices(Split split) const;
  const AnnotatedSample& by_id(std::int64_t id) const;
};

Dataset generate(const GenSpec& spec);

/// Layout: images/NNNNN.pgm (1 channel) or .png (3 channels),
/// masks/NNNNN_labelK.png, labels.csv, splits.csv, manifest.json.
void save_directory(const Dataset& dataset, const std::string& path);
/// Reads the layout above. Masks are binarized at 0.5. Malformed CSV rows
/// raise std::runtime_error naming file and line; positives without a mask
/// are listed in Dataset::excluded and reported on stderr.
Dataset load_directory(const std::string& path);

std::string genspec_to_json(const GenSpec& spec);
GenSpec genspec_from_json(const std::string& text);

// 8-bit image I/O. Values are stored as round(255 * v) after clamping to [0, 1].
void write_pgm(const std::string& path, const Tensor& image);  // (1, H, W) or (H, W)
Tensor read_pgm(const std::string& path);                        // (1, H, W)
void write_png(const std::string& path, const Tensor& image);  // (C, H, W) with C in {1, 3}, or (H, W)
Tensor read_png(const std::string& path);                        // (C, H, W)

}  // namespace xalign
