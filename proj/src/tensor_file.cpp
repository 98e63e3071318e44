#include "roundfit/tensor_file.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>

namespace roundfit {

namespace {

constexpr std::size_t kMagicLen = sizeof(kTensorFileMagic) - 1;

template <typename T>
void append_raw(std::vector<std::uint8_t>& out, const Tensor<T>& t) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(t.data());
  out.insert(out.end(), p, p + t.numel() * static_cast<Index>(sizeof(T)));
}

template <typename T>
Tensor<T> read_raw(const std::string& name, const Shape& shape, std::span<const std::uint8_t> bytes) {
  const Index n = shape_numel(shape);
  if (static_cast<Index>(bytes.size()) != n * static_cast<Index>(sizeof(T))) {
    throw FormatError("tensor '" + name + "': byte length " + std::to_string(bytes.size()) +
                      " does not match shape " + shape_str(shape));
  }
  Buffer<T> b(n);
  std::memcpy(b.data(), bytes.data(), bytes.size());
  return Tensor<T>(shape, std::move(b));
}

struct ManifestEntry {
  std::string name;
  std::string dtype;
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

}  // namespace

const TensorEntry* TensorFile::find(const std::string& name) const {
  for (const auto& [n, e] : tensors) {
    if (n == name) return &e;
  }
  return nullptr;
}

std::vector<std::uint8_t> encode_tensor_file(const TensorFile& file) {
  std::set<std::string> seen;
  std::vector<std::uint8_t> blob;
  nlohmann::json table = nlohmann::json::object();
  for (const auto& [name, entry] : file.tensors) {
    if (!seen.insert(name).second) throw ArgumentError("duplicate tensor name '" + name + "'");
    const std::uint64_t offset = blob.size();
    std::string dtype;
    Shape shape;
    if (const auto* f = std::get_if<Tensor<float>>(&entry)) {
      dtype = "f32";
      shape = f->shape();
      append_raw(blob, *f);
    } else if (const auto* d = std::get_if<Tensor<double>>(&entry)) {
      dtype = "f64";
      shape = d->shape();
      append_raw(blob, *d);
    } else {
      const auto& p = std::get<PackedTensor>(entry);
      dtype = "packed";
      shape = p.shape;
      const auto bytes = p.serialize();
      blob.insert(blob.end(), bytes.begin(), bytes.end());
    }
    table[name] = {{"dtype", dtype}, {"shape", shape}, {"offset", offset}, {"length", blob.size() - offset}};
  }
  const nlohmann::json manifest = {
      {"format_version", kTensorFileVersion}, {"meta", file.meta}, {"tensors", table}};
  const std::string m = manifest.dump();
  std::vector<std::uint8_t> out(kTensorFileMagic, kTensorFileMagic + kMagicLen);
  const std::uint64_t mlen = m.size();
  const auto* lp = reinterpret_cast<const std::uint8_t*>(&mlen);
  out.insert(out.end(), lp, lp + sizeof(mlen));
  out.insert(out.end(), m.begin(), m.end());
  out.insert(out.end(), blob.begin(), blob.end());
  return out;
}

TensorFile decode_tensor_file(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagicLen + sizeof(std::uint64_t) ||
      std::memcmp(bytes.data(), kTensorFileMagic, kMagicLen) != 0) {
    throw FormatError("not a tensor file: missing RFTF1 magic");
  }
  std::uint64_t mlen = 0;
  std::memcpy(&mlen, bytes.data() + kMagicLen, sizeof(mlen));
  const std::size_t header_end = kMagicLen + sizeof(mlen);
  if (mlen > bytes.size() - header_end) throw FormatError("tensor file manifest is truncated");
  const auto manifest_bytes = bytes.subspan(header_end, mlen);
  const auto blob = bytes.subspan(header_end + mlen);

  TensorFile file;
  std::vector<ManifestEntry> entries;
  try {
    const auto manifest = nlohmann::json::parse(manifest_bytes.begin(), manifest_bytes.end());
    const int version = manifest.at("format_version").get<int>();
    if (version != kTensorFileVersion) {
      throw FormatError("unsupported tensor file version " + std::to_string(version));
    }
    if (manifest.contains("meta")) file.meta = manifest["meta"];
    for (const auto& [name, e] : manifest.at("tensors").items()) {
      try {
        entries.push_back({name, e.at("dtype").get<std::string>(), e.at("shape").get<Shape>(),
                           e.at("offset").get<std::uint64_t>(), e.at("length").get<std::uint64_t>()});
      } catch (const nlohmann::json::exception& ex) {
        throw FormatError("tensor '" + name + "': bad manifest entry: " + ex.what());
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt tensor file manifest: ") + e.what());
  }

  std::vector<const ManifestEntry*> by_offset;
  for (const auto& e : entries) by_offset.push_back(&e);
  std::stable_sort(by_offset.begin(), by_offset.end(),
                   [](const ManifestEntry* a, const ManifestEntry* b) { return a->offset < b->offset; });
  std::uint64_t cursor = 0;
  const ManifestEntry* prev = nullptr;
  for (const ManifestEntry* e : by_offset) {
    if (e->offset < cursor) {
      throw FormatError("tensor '" + e->name + "' overlaps tensor '" + (prev ? prev->name : std::string("?")) + "'");
    }
    if (e->offset > cursor) throw FormatError("gap in tensor file blob before tensor '" + e->name + "'");
    if (e->length > blob.size() || e->offset > blob.size() - e->length) {
      throw FormatError("tensor '" + e->name + "' extends past the end of the blob (file truncated)");
    }
    cursor = e->offset + e->length;
    prev = e;
  }
  if (cursor != blob.size()) throw FormatError("tensor file blob has trailing bytes not covered by the manifest");

  // Manifest objects come back sorted by name; present tensors in blob order.
  for (const ManifestEntry* e : by_offset) {
    const auto data = blob.subspan(e->offset, e->length);
    if (e->dtype == "f32") {
      file.tensors.emplace_back(e->name, read_raw<float>(e->name, e->shape, data));
    } else if (e->dtype == "f64") {
      file.tensors.emplace_back(e->name, read_raw<double>(e->name, e->shape, data));
    } else if (e->dtype == "packed") {
      PackedTensor p;
      try {
        p = PackedTensor::deserialize(data);
      } catch (const FormatError& ex) {
        throw FormatError("tensor '" + e->name + "': " + ex.what());
      }
      if (p.shape != e->shape) throw FormatError("tensor '" + e->name + "': packed shape disagrees with manifest");
      file.tensors.emplace_back(e->name, std::move(p));
    } else {
      throw FormatError("tensor '" + e->name + "': unknown dtype '" + e->dtype + "'");
    }
  }
  return file;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to '" + path.string() + "'");
}

void save_tensors(const std::filesystem::path& path, const TensorFile& file) {
  write_file_bytes(path, encode_tensor_file(file));
}

TensorFile load_tensors(const std::filesystem::path& path) { return decode_tensor_file(read_file_bytes(path)); }

}  // namespace roundfit
