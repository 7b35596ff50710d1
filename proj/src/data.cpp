#include "xalign/data.hpp"
#include "xalign/seed.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <random>
#include <stdexcept>

namespace xalign {

namespace {

using nlohmann::json;

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

bool inside(ShapeKind kind, double dx, double dy, double r) {
  switch (kind) {
    case ShapeKind::circle: return dx * dx + dy * dy <= r * r;
    case ShapeKind::square: return std::fabs(dx) <= 0.85 * r && std::fabs(dy) <= 0.85 * r;
    case ShapeKind::triangle: return dy >= -r && dy <= r && std::fabs(dx) <= 0.5 * (dy + r);
    case ShapeKind::cross:
      return (std::fabs(dx) <= r / 3.0 && std::fabs(dy) <= r) || (std::fabs(dy) <= r / 3.0 && std::fabs(dx) <= r);
    case ShapeKind::ring: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.3025 * r * r;
    }
    case ShapeKind::diamond: return std::fabs(dx) + std::fabs(dy) <= r;
  }
  return false;
}

double textured(Texture texture, std::int64_t x, std::int64_t y, double intensity) {
  switch (texture) {
    case Texture::solid: return intensity;
    case Texture::stripes: return (y / 2) % 2 == 0 ? intensity : 0.6 * intensity;
    case Texture::checker: return ((x / 3) + (y / 3)) % 2 == 0 ? intensity : 0.55 * intensity;
  }
  return intensity;
}

struct Box {
  double x0, y0, x1, y1;
  bool overlaps(const Box& o, double gap) const {
    return !(x1 + gap < o.x0 || o.x1 + gap < x0 || y1 + gap < o.y0 || o.y1 + gap < y0);
  }
};

std::vector<std::uint8_t> draw_labels(const std::vector<std::vector<double>>& joint, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto n = joint.size();
  std::vector<std::uint8_t> labels(n, 0);
  for (std::size_t j = 0; j < n; ++j) {
    double p = joint[j][j];
    if (j > 0) {
      const double prev = joint[j - 1][j - 1];
      const double both = joint[j - 1][j];
      p = labels[j - 1] ? (prev > 0 ? both / prev : 0.0) : (prev < 1 ? (joint[j][j] - both) / (1.0 - prev) : 0.0);
    }
    labels[j] = u(rng) < p ? 1 : 0;
  }
  return labels;
}

/// Joint P(i and k), i < k, implied by the adjacent-pair Markov chain.
double chain_joint(const std::vector<std::vector<double>>& m, std::size_t i, std::size_t k) {
  double on = 1.0, off = 0.0;  // state distribution given label i = 1
  for (std::size_t j = i + 1; j <= k; ++j) {
    const double prev = m[j - 1][j - 1], both = m[j - 1][j], p = m[j][j];
    const double stay = prev > 0 ? both / prev : 0.0;
    const double rise = prev < 1 ? (p - both) / (1.0 - prev) : 0.0;
    const double next_on = on * stay + off * rise;
    off = 1.0 - next_on;
    on = next_on;
  }
  return m[i][i] * on;
}

AnnotatedSample make_sample(const GenSpec& spec, const std::vector<std::vector<double>>& joint, std::int64_t id) {
  std::mt19937_64 rng(derive_seed(spec.seed, static_cast<std::uint64_t>(id)));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const auto size = spec.size;
  const auto channels = spec.channels;
  const auto pixels = size * size;

  AnnotatedSample s;
  s.id = id;
  s.labels = draw_labels(joint, rng);

  std::vector<double> gray(static_cast<std::size_t>(pixels), 0.1);
  const std::int64_t patch = std::max<std::int64_t>(2, size / 8);
  if (spec.confounder) {
    const double p = s.labels[0] ? spec.confounder_probability : 1.0 - spec.confounder_probability;
    s.confounded = u(rng) < p;
    if (s.confounded) {
      for (std::int64_t y = 0; y < patch; ++y) {
        for (std::int64_t x = 0; x < patch; ++x) gray[static_cast<std::size_t>(y * size + x)] = 0.95;
      }
    }
  }

  std::vector<Box> placed;
  if (spec.confounder) placed.push_back({0.0, 0.0, static_cast<double>(patch), static_cast<double>(patch)});
  const double sz = static_cast<double>(size);
  for (std::size_t c = 0; c < s.labels.size(); ++c) {
    if (!s.labels[c]) continue;
    const double r = sz * (0.14 + 0.08 * u(rng));
    const double margin = r + 1.0;
    double cx = 0, cy = 0;
    for (int attempt = 0; attempt < 64; ++attempt) {
      cx = margin + u(rng) * (sz - 2 * margin);
      cy = margin + u(rng) * (sz - 2 * margin);
      const Box box{cx - r, cy - r, cx + r, cy + r};
      if (std::none_of(placed.begin(), placed.end(), [&](const Box& b) { return b.overlaps(box, 2.0); })) break;
    }
    placed.push_back({cx - r, cy - r, cx + r, cy + r});
    const double intensity = 0.55 + 0.35 * u(rng);
    const auto& cls = spec.classes[c];
    Tensor mask({size, size}, 0.0);
    auto mv = mask.mutable_values();
    for (std::int64_t y = 0; y < size; ++y) {
      for (std::int64_t x = 0; x < size; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
        if (!inside(cls.shape, dx, dy, r)) continue;
        const auto at = static_cast<std::size_t>(y * size + x);
        mv[at] = 1.0;
        gray[at] = textured(cls.texture, x, y, intensity);
      }
    }
    s.masks.emplace(static_cast<std::int64_t>(c), std::move(mask));
  }

  std::vector<double> image(static_cast<std::size_t>(channels * pixels));
  for (std::int64_t ch = 0; ch < channels; ++ch) {
    const double tint = 1.0 - 0.1 * static_cast<double>(ch);
    for (std::int64_t i = 0; i < pixels; ++i) {
      const double v = gray[static_cast<std::size_t>(i)] * tint + spec.noise * noise(rng);
      image[static_cast<std::size_t>(ch * pixels + i)] = quantize(v);
    }
  }
  s.image = Tensor({channels, size, size}, std::move(image));
  return s;
}

}  // namespace

std::string_view shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::cross: return "cross";
    case ShapeKind::ring: return "ring";
    case ShapeKind::diamond: return "diamond";
  }
  return "unknown";
}

std::string_view texture_name(Texture texture) {
  switch (texture) {
    case Texture::solid: return "solid";
    case Texture::stripes: return "stripes";
    case Texture::checker: return "checker";
  }
  return "unknown";
}

ShapeKind parse_shape(std::string_view name) {
  for (auto k : {ShapeKind::circle, ShapeKind::square, ShapeKind::triangle, ShapeKind::cross, ShapeKind::ring,
                 ShapeKind::diamond}) {
    if (shape_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown shape '" + std::string(name) + "'");
}

Texture parse_texture(std::string_view name) {
  for (auto t : {Texture::solid, Texture::stripes, Texture::checker}) {
    if (texture_name(t) == name) return t;
  }
  throw std::invalid_argument("unknown texture '" + std::string(name) + "'");
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::finetune: return "finetune";
    case Split::eval: return "eval";
  }
  return "unknown";
}

Split parse_split(std::string_view name) {
  for (auto s : {Split::train, Split::val, Split::finetune, Split::eval}) {
    if (split_name(s) == name) return s;
  }
  throw std::invalid_argument("unknown split '" + std::string(name) + "'");
}

std::vector<std::vector<double>> GenSpec::joint_matrix() const {
  if (!cooccurrence.empty()) return cooccurrence;
  const auto n = classes.size();
  std::vector<std::vector<double>> m(n, std::vector<double>(n, 0.25));
  for (std::size_t i = 0; i < n; ++i) m[i][i] = 0.5;
  return m;
}

void GenSpec::validate() const {
  auto fail = [](const std::string& why) { throw std::invalid_argument("generator spec: " + why); };
  if (size < 16) fail("size must be at least 16");
  if (channels != 1 && channels != 3) fail("channels must be 1 or 3");
  if (classes.empty()) fail("at least one class is required");
  if (!(noise >= 0.0)) fail("noise must be nonnegative");
  if (!(confounder_probability >= 0.0 && confounder_probability <= 1.0)) fail("confounder_probability outside [0, 1]");
  if (splits.train < 1 || splits.val < 1 || splits.finetune < 1 || splits.eval < 1) fail("every split needs a sample");
  const auto m = joint_matrix();
  const auto n = classes.size();
  if (m.size() != n) fail("cooccurrence must be " + std::to_string(n) + "x" + std::to_string(n));
  for (std::size_t i = 0; i < n; ++i) {
    if (m[i].size() != n) fail("cooccurrence row " + std::to_string(i) + " has the wrong length");
    for (std::size_t j = 0; j < n; ++j) {
      if (!(m[i][j] >= 0.0 && m[i][j] <= 1.0)) fail("cooccurrence entry outside [0, 1]");
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const std::string at = "(" + std::to_string(i) + "," + std::to_string(j) + ")";
      if (std::fabs(m[i][j] - m[j][i]) > 1e-12) fail("cooccurrence not symmetric at " + at);
      const double lo = std::max(0.0, m[i][i] + m[j][j] - 1.0), hi = std::min(m[i][i], m[j][j]);
      if (m[i][j] < lo - 1e-12 || m[i][j] > hi + 1e-12) fail("joint probability at " + at + " violates its marginals");
      if (j > i + 1 && std::fabs(m[i][j] - chain_joint(m, i, j)) > 1e-9) {
        fail("joint probability at " + at + " is not implied by the adjacent pairs (expected " +
             std::to_string(chain_joint(m, i, j)) + ")");
      }
    }
  }
}

GenSpec pretraining_spec(const GenSpec& main) {
  GenSpec spec = main;
  const ShapeKind vocabulary[] = {ShapeKind::ring, ShapeKind::diamond, ShapeKind::cross};
  const Texture textures[] = {Texture::solid, Texture::stripes, Texture::checker};
  for (std::size_t i = 0; i < spec.classes.size(); ++i) spec.classes[i] = {vocabulary[i % 3], textures[(i + 1) % 3]};
  spec.confounder = false;
  spec.seed = splitmix(main.seed ^ 0x5052455452414eULL);
  return spec;
}

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (split_of.at(samples[i].id) == split) out.push_back(i);
  }
  return out;
}

const AnnotatedSample& Dataset::by_id(std::int64_t id) const {
  auto it = std::lower_bound(samples.begin(), samples.end(), id,
                             [](const AnnotatedSample& s, std::int64_t v) { return s.id < v; });
  if (it == samples.end() || it->id != id) throw std::out_of_range("dataset: no sample with id " + std::to_string(id));
  return *it;
}

Dataset generate(const GenSpec& spec) {
  spec.validate();
  const auto joint = spec.joint_matrix();
  Dataset d;
  d.shape = {spec.channels, spec.size, spec.size};
  d.num_labels = static_cast<std::int64_t>(spec.classes.size());
  d.manifest = genspec_to_json(spec);
  const auto total = spec.splits.total();
  d.samples.reserve(static_cast<std::size_t>(total));
  const std::pair<Split, std::int64_t> order[] = {{Split::train, spec.splits.train},
                                                  {Split::val, spec.splits.val},
                                                  {Split::finetune, spec.splits.finetune},
                                                  {Split::eval, spec.splits.eval}};
  std::int64_t id = 0;
  for (const auto& [split, count] : order) {
    for (std::int64_t k = 0; k < count; ++k, ++id) {
      d.samples.push_back(make_sample(spec, joint, id));
      d.split_of[id] = split;
    }
  }
  return d;
}

std::string genspec_to_json(const GenSpec& spec) {
  json classes = json::array();
  for (const auto& c : spec.classes) {
    classes.push_back({{"shape", std::string(shape_name(c.shape))}, {"texture", std::string(texture_name(c.texture))}});
  }
  json j = {{"size", spec.size},
            {"channels", spec.channels},
            {"classes", classes},
            {"cooccurrence", spec.joint_matrix()},
            {"noise", spec.noise},
            {"confounder", spec.confounder},
            {"confounder_probability", spec.confounder_probability},
            {"seed", spec.seed},
            {"splits",
             {{"train", spec.splits.train},
              {"val", spec.splits.val},
              {"finetune", spec.splits.finetune},
              {"eval", spec.splits.eval}}}};
  return j.dump();
}

GenSpec genspec_from_json(const std::string& text) {
  const json j = json::parse(text);
  GenSpec spec;
  spec.size = j.value("size", spec.size);
  spec.channels = j.value("channels", spec.channels);
  if (j.contains("classes")) {
    spec.classes.clear();
    for (const auto& c : j.at("classes")) {
      spec.classes.push_back({parse_shape(c.at("shape").get<std::string>()),
                              parse_texture(c.value("texture", std::string("solid")))});
    }
  }
  if (j.contains("cooccurrence")) spec.cooccurrence = j.at("cooccurrence").get<std::vector<std::vector<double>>>();
  spec.noise = j.value("noise", spec.noise);
  spec.confounder = j.value("confounder", spec.confounder);
  spec.confounder_probability = j.value("confounder_probability", spec.confounder_probability);
  spec.seed = j.value("seed", spec.seed);
  if (j.contains("splits")) {
    const auto& s = j.at("splits");
    spec.splits.train = s.value("train", spec.splits.train);
    spec.splits.val = s.value("val", spec.splits.val);
    spec.splits.finetune = s.value("finetune", spec.splits.finetune);
    spec.splits.eval = s.value("eval", spec.splits.eval);
  }
  return spec;
}

}  // namespace xalign
