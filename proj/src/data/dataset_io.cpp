#include "pmss/data/dataset_io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "pmss/numerics/checkpoint.hpp"

namespace pmss::data {

namespace {

std::filesystem::path numbered(const std::filesystem::path& dir, const char* stem, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05zu.bin", stem, i);
  return dir / buf;
}

void write_one(const std::filesystem::path& path, const std::string& name, const Tensor& t, DType dtype) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_entry(out, name, t, dtype);
}

Tensor read_one(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing dataset file " + path.string());
  return read_entry(in).tensor;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta = ds.spec;
  meta["train_count"] = ds.train.size();
  meta["val_count"] = ds.val.size();
  {
    std::ofstream out(dir / "meta.json");
    out << meta.dump(2) << '\n';
  }
  std::size_t index = 0;
  for (const auto* split : {&ds.train, &ds.val})
    for (const Sample& s : *split) {
      write_one(numbered(dir, "img", index), "image", s.image, DType::f64);
      std::vector<double> lab(s.label.labels.begin(), s.label.labels.end());
      write_one(numbered(dir, "lab", index), "label", Tensor::from({s.label.n, s.label.h, s.label.w}, lab),
                DType::f32);
      ++index;
    }
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw std::runtime_error("dataset directory lacks meta.json: " + dir.string());
  const nlohmann::json meta = nlohmann::json::parse(in);
  Dataset ds;
  ds.spec = meta.get<SynthSpec>();
  const std::size_t n_train = meta.value("train_count", ds.spec.n_train);
  const std::size_t n_val = meta.value("val_count", ds.spec.n_val);
  for (std::size_t i = 0; i < n_train + n_val; ++i) {
    Tensor image = read_one(numbered(dir, "img", i));
    Tensor lab = read_one(numbered(dir, "lab", i));
    if (image.rank() != 4 || lab.rank() != 3 || image.dim(2) != lab.dim(1) || image.dim(3) != lab.dim(2))
      throw std::runtime_error("sample " + std::to_string(i) + " has inconsistent image/label shapes");
    LabelMap label(lab.dim(0), lab.dim(1), lab.dim(2));
    const auto d = lab.data();
    for (std::size_t j = 0; j < label.size(); ++j) label.labels[j] = static_cast<std::int32_t>(std::lround(d[j]));
    (i < n_train ? ds.train : ds.val).push_back({std::move(image), std::move(label)});
  }
  return ds;
}

}  // namespace pmss::data
