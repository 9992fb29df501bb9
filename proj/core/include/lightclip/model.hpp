#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>

#include "lightclip/config.hpp"
#include "lightclip/encoders.hpp"
#include "lightclip/masked_language.hpp"
#include "lightclip/params.hpp"

namespace lightclip {

/// Both encoders, the train-time fusion branch, the text MLM head and the
/// learnable log-temperature, all registered in one parameter store.
class Model {
 public:
  Model(const TrainConfig& config, std::uint64_t init_seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const ImageEncoder& image() const { return *image_; }
  const TextEncoder& text() const { return *text_; }
  const FusionModule& fusion() const { return *fusion_; }
  FusionModule& fusion() { return *fusion_; }
  const VocabHead& text_head() const { return text_head_; }
  const Tensor& log_tau() const { return log_tau_; }
  Tensor& log_tau() { return log_tau_; }
  double tau() const;
  const EncoderConfig& encoder_config() const { return encoder_; }

 private:
  EncoderConfig encoder_;
  ParameterStore store_;
  std::unique_ptr<ImageEncoder> image_;
  std::unique_ptr<TextEncoder> text_;
  std::unique_ptr<FusionModule> fusion_;
  VocabHead text_head_;
  Tensor log_tau_;
};

/// Writes every parameter by name plus `meta` into a checkpoint container.
void save_checkpoint(const std::filesystem::path& manifest, const Model& model,
                     const std::map<std::string, std::string>& meta = {});

/// Builds a model for `config` and overwrites its parameters from the
/// checkpoint. Throws FormatError on missing, extra or mis-shaped arrays.
std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& manifest, const TrainConfig& config,
                                       std::map<std::string, std::string>* meta = nullptr);

}  // namespace lightclip
