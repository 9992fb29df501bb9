#include "lightclip/model.hpp"

#include <cmath>

#include "lightclip/container.hpp"
#include "lightclip/errors.hpp"

namespace lightclip {

Model::Model(const TrainConfig& config, std::uint64_t init_seed) : encoder_(config.encoder) {
  encoder_.validate();
  Rng rng(init_seed);
  image_ = std::make_unique<ImageEncoder>(encoder_, store_, rng);
  text_ = std::make_unique<TextEncoder>(encoder_, store_, rng);
  fusion_ = std::make_unique<FusionModule>(config.fusion, encoder_.image_widths, encoder_.width,
                                           encoder_.vocab_size, store_, rng);
  text_head_ = VocabHead::create(store_, "text.mlm_head", encoder_.width, encoder_.vocab_size, rng);
  log_tau_ = store_.add_constant("log_tau", {1}, std::log(kInitialTemperature));
}

double Model::tau() const { return std::exp(log_tau_.item()); }

void save_checkpoint(const std::filesystem::path& manifest, const Model& model,
                     const std::map<std::string, std::string>& meta) {
  Container c;
  c.format = "lightclip.checkpoint";
  c.meta = meta;
  for (const auto& e : model.params().entries()) {
    c.arrays.push_back({e.name, e.value.shape(),
                        std::vector<double>(e.value.data().begin(), e.value.data().end())});
  }
  write_container(manifest, c);
}

std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& manifest, const TrainConfig& config,
                                       std::map<std::string, std::string>* meta) {
  Container c = read_container(manifest, "lightclip.checkpoint");
  auto model = std::make_unique<Model>(config, 0);
  auto& entries = model->params().entries();
  if (c.arrays.size() != entries.size()) {
    throw FormatError("checkpoint holds " + std::to_string(c.arrays.size()) +
                      " arrays but the configured model has " + std::to_string(entries.size()));
  }
  for (auto& e : entries) {
    const auto& a = c.find(e.name);
    if (a.shape != e.value.shape()) {
      throw FormatError("checkpoint array '" + e.name + "' has shape " + shape_str(a.shape) +
                        ", configured model expects " + shape_str(e.value.shape()));
    }
    auto dst = e.value.mutable_data();
    std::copy(a.values.begin(), a.values.end(), dst.begin());
  }
  if (meta) *meta = c.meta;
  return model;
}

}  // namespace lightclip
