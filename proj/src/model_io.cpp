#include "roundfit/model_io.hpp"

namespace roundfit {

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},         {"n_heads", c.n_heads},
          {"n_layers", c.n_layers},     {"d_ff", c.d_ff},               {"max_seq_len", c.max_seq_len},
          {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<Index>();
    c.d_model = j.at("d_model").get<Index>();
    c.n_heads = j.at("n_heads").get<Index>();
    c.n_layers = j.at("n_layers").get<Index>();
    c.d_ff = j.at("d_ff").get<Index>();
    c.max_seq_len = j.at("max_seq_len").get<Index>();
    c.seed = j.value("seed", std::uint64_t{0});
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
}

TensorFile model_to_file(const Model& model) {
  TensorFile f;
  f.meta = {{"kind", "model"}, {"config", config_to_json(model.config)}};
  for (auto& [name, t] : model.named_tensors()) f.tensors.emplace_back(name, t);
  return f;
}

TensorFile quantized_model_to_file(const Model& model, const std::map<std::string, PackedTensor>& packed,
                                   const nlohmann::json& extra) {
  TensorFile f;
  f.meta = extra;
  f.meta["kind"] = "quantized_model";
  f.meta["config"] = config_to_json(model.config);
  if (!packed.empty()) {
    const auto& cfg = packed.begin()->second.config;
    f.meta["quantization"] = {{"bits", cfg.bits}, {"group_size", cfg.group_size}};
  }
  for (auto& [name, t] : model.named_tensors()) {
    auto it = packed.find(name);
    if (it != packed.end()) {
      f.tensors.emplace_back(name, it->second);
    } else {
      f.tensors.emplace_back(name, t);
    }
  }
  return f;
}

Model model_from_file(const TensorFile& file) {
  if (!file.meta.contains("config")) throw FormatError("tensor file has no model config in its metadata");
  const ModelConfig config = config_from_json(file.meta["config"]);
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  for (const auto& [name, entry] : file.tensors) {
    if (const auto* f = std::get_if<Tensor<float>>(&entry)) {
      tensors.emplace_back(name, *f);
    } else if (const auto* d = std::get_if<Tensor<double>>(&entry)) {
      tensors.emplace_back(name, d->cast<float>());
    } else {
      tensors.emplace_back(name, std::get<PackedTensor>(entry).dequantize());
    }
  }
  return Model::from_named(config, tensors);
}

void save_model(const std::filesystem::path& path, const Model& model) { save_tensors(path, model_to_file(model)); }

Model load_model(const std::filesystem::path& path) { return model_from_file(load_tensors(path)); }

}  // namespace roundfit
