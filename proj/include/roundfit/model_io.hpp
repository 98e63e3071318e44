#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "roundfit/model.hpp"
#include "roundfit/pack.hpp"
#include "roundfit/tensor_file.hpp"

namespace roundfit {

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

/// Full-precision model as a tensor file; meta carries {"kind": "model", "config": ...}.
TensorFile model_to_file(const Model& model);

/// Model whose block linears are stored packed; every other tensor stays f32.
/// meta carries {"kind": "quantized_model", "config", "quantization": {bits, group_size}} plus `extra`.
TensorFile quantized_model_to_file(const Model& model, const std::map<std::string, PackedTensor>& packed,
                                   const nlohmann::json& extra = nlohmann::json::object());

/// Reads either kind of model file; packed weights come back dequantized.
Model model_from_file(const TensorFile& file);

void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

}  // namespace roundfit
