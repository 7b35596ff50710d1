#include <png.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>
#include <stdexcept>

#include "xalign/data.hpp"

namespace fs = std::filesystem;

namespace xalign {

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

std::string padded(std::int64_t id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05lld", static_cast<long long>(id));
  return buf;
}

Shape chw_of(const Tensor& image, const char* op) {
  if (image.dim() == 2) return {1, image.size(0), image.size(1)};
  if (image.dim() == 3) return image.shape();
  throw ShapeError(std::string(op) + ": expected (C, H, W) or (H, W), got " + to_string(image.shape()));
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::int64_t parse_int(const std::string& text, const std::string& where) {
  std::int64_t v = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw std::runtime_error(where + ": expected an integer, got '" + text + "'");
  return v;
}

struct CsvRow {
  std::size_t line;
  std::vector<std::string> cells;
};

std::vector<CsvRow> read_csv(const fs::path& path, std::vector<std::string>& header) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::size_t number = 0;
  std::vector<CsvRow> rows;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_csv(line);
    if (header.empty()) {
      header = std::move(cells);
      continue;
    }
    if (cells.size() != header.size()) {
      throw std::runtime_error(path.string() + ":" + std::to_string(number) + ": expected " +
                               std::to_string(header.size()) + " fields, got " + std::to_string(cells.size()));
    }
    rows.push_back({number, std::move(cells)});
  }
  if (header.empty()) throw std::runtime_error(path.string() + ": missing header row");
  return rows;
}

/// Parses "<id>" or "<id>_label<k>" file stems; returns false for other names.
bool parse_stem(const std::string& stem, std::int64_t& id, std::int64_t& label) {
  label = -1;
  std::string head = stem;
  const auto pos = stem.find("_label");
  if (pos != std::string::npos) {
    head = stem.substr(0, pos);
    const auto tail = stem.substr(pos + 6);
    auto [p, ec] = std::from_chars(tail.data(), tail.data() + tail.size(), label);
    if (ec != std::errc() || p != tail.data() + tail.size()) return false;
  }
  auto [p, ec] = std::from_chars(head.data(), head.data() + head.size(), id);
  return ec == std::errc() && p == head.data() + head.size() && !head.empty();
}

}  // namespace

void write_pgm(const std::string& path, const Tensor& image) {
  const auto shape = chw_of(image, "write_pgm");
  if (shape[0] != 1) throw ShapeError("write_pgm: expected one channel, got " + to_string(image.shape()));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
  out << "P5\n" << shape[2] << " " << shape[1] << "\n255\n";
  std::vector<std::uint8_t> bytes;
  bytes.reserve(static_cast<std::size_t>(image.numel()));
  for (double v : image.values()) bytes.push_back(to_byte(v));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write_pgm: write failed for " + path);
}

Tensor read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_pgm: cannot open " + path);
  auto token = [&]() {
    std::string t;
    while (in >> std::ws && in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
    }
    in >> t;
    return t;
  };
  if (token() != "P5") throw std::runtime_error("read_pgm: " + path + " is not a binary PGM");
  const auto w = parse_int(token(), path), h = parse_int(token(), path), maxval = parse_int(token(), path);
  if (w < 1 || h < 1 || maxval < 1 || maxval > 255) throw std::runtime_error("read_pgm: unsupported header in " + path);
  in.get();
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w * h));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw std::runtime_error("read_pgm: truncated pixel data in " + path);
  std::vector<double> values(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) values[i] = static_cast<double>(bytes[i]) / static_cast<double>(maxval);
  return Tensor({1, h, w}, std::move(values));
}

void write_png(const std::string& path, const Tensor& image) {
  const auto shape = chw_of(image, "write_png");
  const auto c = shape[0], h = shape[1], w = shape[2];
  if (c != 1 && c != 3) throw ShapeError("write_png: expected 1 or 3 channels, got " + to_string(image.shape()));
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(c * h * w));
  const auto v = image.values();
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        bytes[static_cast<std::size_t>((y * w + x) * c + ch)] = to_byte(v[static_cast<std::size_t>((ch * h + y) * w + x)]);
      }
    }
  }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(w);
  png.height = static_cast<png_uint_32>(h);
  png.format = c == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw std::runtime_error("write_png: " + path + ": " + png.message);
  }
}

Tensor read_png(const std::string& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw std::runtime_error("read_png: " + path + ": " + png.message);
  }
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const std::int64_t c = color ? 3 : 1, h = png.height, w = png.width;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, bytes.data(), 0, nullptr)) {
    throw std::runtime_error("read_png: " + path + ": " + png.message);
  }
  std::vector<double> values(static_cast<std::size_t>(c * h * w));
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        values[static_cast<std::size_t>((ch * h + y) * w + x)] =
            static_cast<double>(bytes[static_cast<std::size_t>((y * w + x) * c + ch)]) / 255.0;
      }
    }
  }
  return Tensor({c, h, w}, std::move(values));
}

void save_directory(const Dataset& dataset, const std::string& path) {
  const fs::path root(path);
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  std::ofstream labels(root / "labels.csv"), splits(root / "splits.csv");
  if (!labels || !splits) throw std::runtime_error("save_directory: cannot write CSVs under " + path);
  labels << "id";
  for (std::int64_t k = 0; k < dataset.num_labels; ++k) labels << ",label" << k;
  labels << "\n";
  splits << "id,split\n";
  for (const auto& s : dataset.samples) {
    const auto stem = padded(s.id);
    if (s.image.size(0) == 1) {
      write_pgm((root / "images" / (stem + ".pgm")).string(), s.image);
    } else {
      write_png((root / "images" / (stem + ".png")).string(), s.image);
    }
    for (const auto& [label, mask] : s.masks) {
      write_png((root / "masks" / (stem + "_label" + std::to_string(label) + ".png")).string(), mask);
    }
    labels << s.id;
    for (auto v : s.labels) labels << "," << static_cast<int>(v);
    labels << "\n";
    splits << s.id << "," << split_name(dataset.split_of.at(s.id)) << "\n";
  }
  std::ofstream manifest(root / "manifest.json");
  manifest << (dataset.manifest.empty() ? std::string("{}") : dataset.manifest) << "\n";
}

Dataset load_directory(const std::string& path) {
  const fs::path root(path);
  if (!fs::is_directory(root)) throw std::runtime_error("load_directory: " + path + " is not a directory");

  std::map<std::int64_t, fs::path> images;
  std::map<std::pair<std::int64_t, std::int64_t>, fs::path> masks;
  if (!fs::is_directory(root / "images")) throw std::runtime_error("load_directory: missing images/ under " + path);
  for (const auto& entry : fs::directory_iterator(root / "images")) {
    std::int64_t id = 0, label = 0;
    const auto ext = entry.path().extension().string();
    if ((ext == ".png" || ext == ".pgm") && parse_stem(entry.path().stem().string(), id, label) && label < 0) {
      images[id] = entry.path();
    }
  }
  if (fs::is_directory(root / "masks")) {
    for (const auto& entry : fs::directory_iterator(root / "masks")) {
      std::int64_t id = 0, label = 0;
      if (entry.path().extension() == ".png" && parse_stem(entry.path().stem().string(), id, label) && label >= 0) {
        masks[{id, label}] = entry.path();
      }
    }
  }

  Dataset d;
  std::vector<std::string> header;
  const auto label_rows = read_csv(root / "labels.csv", header);
  if (header.size() < 2 || header[0] != "id") {
    throw std::runtime_error((root / "labels.csv").string() + ":1: header must be 'id' followed by label columns");
  }
  d.num_labels = static_cast<std::int64_t>(header.size() - 1);
  const auto labels_file = (root / "labels.csv").string();
  for (const auto& row : label_rows) {
    const std::string where = labels_file + ":" + std::to_string(row.line);
    AnnotatedSample s;
    s.id = parse_int(row.cells[0], where);
    auto img = images.find(s.id);
    if (img == images.end()) throw std::runtime_error(where + ": unknown sample id " + row.cells[0] + " (no image)");
    for (std::size_t k = 1; k < row.cells.size(); ++k) {
      const auto v = parse_int(row.cells[k], where);
      if (v != 0 && v != 1) throw std::runtime_error(where + ": label values must be 0 or 1");
      s.labels.push_back(static_cast<std::uint8_t>(v));
    }
    s.image = img->second.extension() == ".pgm" ? read_pgm(img->second.string()) : read_png(img->second.string());
    for (std::int64_t k = 0; k < d.num_labels; ++k) {
      if (!s.labels[static_cast<std::size_t>(k)]) continue;
      auto m = masks.find({s.id, k});
      if (m == masks.end()) {
        d.excluded.emplace_back(s.id, k);
        std::cerr << "warning: sample " << s.id << " is positive for label " << k << " but has no mask\n";
        continue;
      }
      const Tensor raw = read_png(m->second.string());
      const auto h = raw.size(1), w = raw.size(2);
      if (h != s.image.size(1) || w != s.image.size(2)) {
        throw std::runtime_error(m->second.string() + ": mask shape does not match its image");
      }
      std::vector<double> bin(static_cast<std::size_t>(h * w));
      for (std::size_t i = 0; i < bin.size(); ++i) bin[i] = raw.values()[i] >= 0.5 ? 1.0 : 0.0;
      s.masks.emplace(k, Tensor({h, w}, std::move(bin)));
    }
    d.samples.push_back(std::move(s));
  }
  std::sort(d.samples.begin(), d.samples.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < d.samples.size(); ++i) {
    if (d.samples[i].id == d.samples[i - 1].id) {
      throw std::runtime_error(labels_file + ": duplicate sample id " + std::to_string(d.samples[i].id));
    }
  }
  if (d.samples.empty()) throw std::runtime_error(labels_file + ": no samples");
  const auto& first = d.samples.front().image;
  d.shape = {first.size(0), first.size(1), first.size(2)};
  for (const auto& s : d.samples) {
    if (s.image.shape() != first.shape()) {
      throw std::runtime_error("load_directory: image " + std::to_string(s.id) + " has shape " +
                               to_string(s.image.shape()) + ", expected " + to_string(first.shape()));
    }
  }

  std::vector<std::string> split_header;
  const auto split_file = (root / "splits.csv").string();
  const auto split_rows = read_csv(root / "splits.csv", split_header);
  if (split_header.size() != 2 || split_header[0] != "id" || split_header[1] != "split") {
    throw std::runtime_error(split_file + ":1: header must be 'id,split'");
  }
  for (const auto& row : split_rows) {
    const std::string where = split_file + ":" + std::to_string(row.line);
    const auto id = parse_int(row.cells[0], where);
    try {
      d.by_id(id);
    } catch (const std::out_of_range&) {
      throw std::runtime_error(where + ": unknown sample id " + row.cells[0]);
    }
    try {
      d.split_of[id] = parse_split(row.cells[1]);
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error(where + ": " + e.what());
    }
  }
  for (const auto& s : d.samples) {
    if (!d.split_of.count(s.id)) throw std::runtime_error(split_file + ": sample " + std::to_string(s.id) + " has no split");
  }
  std::ifstream manifest(root / "manifest.json");
  if (manifest) {
    std::stringstream text;
    text << manifest.rdbuf();
    d.manifest = text.str().empty() ? std::string() : nlohmann::json::parse(text.str()).dump();
  }
  return d;
}

}  // namespace xalign
