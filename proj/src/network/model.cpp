#include "condvid/network/model.hpp"

#include <fstream>
#include <map>
#include <stdexcept>

#include "condvid/numerics/cvt1.hpp"

namespace condvid {

namespace {

template <typename T>
void require_latent(const Tensor<T>& z, const NetworkConfig& cfg, const char* what) {
  if (z.rank() != 4 || z.dim(1) != cfg.latent_channels || z.dim(2) != cfg.latent_size ||
      z.dim(3) != cfg.latent_size)
    throw std::invalid_argument(std::string(what) + " expects (F, " + std::to_string(cfg.latent_channels) + ", " +
                                std::to_string(cfg.latent_size) + ", " + std::to_string(cfg.latent_size) +
                                ") latents, got " + shape_string(z.dims()));
}

template <typename T>
void require_text(const Tensor<T>& text, const NetworkConfig& cfg) {
  if (text.rank() != 2 || text.dim(1) != cfg.text_dim)
    throw std::invalid_argument("text embedding must be (L, " + std::to_string(cfg.text_dim) + "), got " +
                                shape_string(text.dims()));
}

}  // namespace

template <typename T>
VideoModel<T> inflate_2d_to_3d(const ImageModel<T>& m, const FrameSamplingPlan& plan) {
  if (!m.unet) throw std::invalid_argument("inflate_2d_to_3d: image model has no weights");
  return VideoModel<T>{m.unet, plan};
}

template <typename T>
ControlModel<T> inflate_control(std::shared_ptr<const ControlBranch<T>> branch, const FrameSamplingPlan& plan) {
  if (!branch) throw std::invalid_argument("inflate_control: missing control branch");
  return ControlModel<T>{std::move(branch), plan};
}

template <typename T>
Tensor<T> image_denoise(const ImageModel<T>& m, const Tensor<T>& z, int t, const Tensor<T>& text) {
  const VideoModel<T> v{m.unet, FrameSamplingPlan(AttentionMode::self, 1)};
  return unet_denoise<T>(v, z, t, text, nullptr);
}

template <typename T>
Tensor<T> unet_denoise(const VideoModel<T>& m, const Tensor<T>& z_t, int t, const Tensor<T>& text,
                       const ControlResiduals<T>* residuals) {
  const UNet<T>& unet = *m.unet;
  require_latent(z_t, unet.config, "unet_denoise");
  require_text(text, unet.config);
  const std::size_t f = z_t.dim(0);
  const auto y = unet.forward(nn::to_channel_last(z_t), std::vector<int>(f, t), TextBatch<T>::shared(text, f),
                              m.plan_for(f), residuals, nullptr);
  return nn::to_channel_first(y);
}

template <typename T>
ControlResiduals<T> control_forward(const ControlModel<T>& c, const Tensor<T>& c_cond, int t, const Tensor<T>& text) {
  const ControlBranch<T>& b = *c.branch;
  require_latent(c_cond, b.config, "control_forward");
  require_text(text, b.config);
  const std::size_t f = c_cond.dim(0);
  return b.forward(nn::to_channel_last(c_cond), std::vector<int>(f, t), TextBatch<T>::shared(text, f),
                   c.plan_for(f), nullptr);
}

template <typename T>
Tensor<T> encode_condition(const ControlBranch<T>& branch, const Tensor<T>& cond) {
  const NetworkConfig& cfg = branch.config;
  if (cond.rank() != 4 || cond.dim(1) != cfg.cond_channels)
    throw std::invalid_argument("condition must be (F, " + std::to_string(cfg.cond_channels) +
                                ", H_px, W_px), got " + shape_string(cond.dims()));
  if (cond.dim(2) != cfg.image_size() || cond.dim(3) != cfg.image_size())
    throw std::invalid_argument("condition raster must be " + std::to_string(cfg.image_size()) + "x" +
                                std::to_string(cfg.image_size()) + ", got " + shape_string(cond.dims()));
  return nn::to_channel_first(branch.encode_condition(nn::to_channel_last(cond), nullptr));
}

#define CONDVID_INSTANTIATE(T)                                                                                      \
  template VideoModel<T> inflate_2d_to_3d(const ImageModel<T>&, const FrameSamplingPlan&);                         \
  template ControlModel<T> inflate_control(std::shared_ptr<const ControlBranch<T>>, const FrameSamplingPlan&);     \
  template Tensor<T> image_denoise(const ImageModel<T>&, const Tensor<T>&, int, const Tensor<T>&);                 \
  template Tensor<T> unet_denoise(const VideoModel<T>&, const Tensor<T>&, int, const Tensor<T>&,                   \
                                  const ControlResiduals<T>*);                                                      \
  template ControlResiduals<T> control_forward(const ControlModel<T>&, const Tensor<T>&, int, const Tensor<T>&);   \
  template Tensor<T> encode_condition(const ControlBranch<T>&, const Tensor<T>&);
CONDVID_INSTANTIATE(float)
CONDVID_INSTANTIATE(double)
#undef CONDVID_INSTANTIATE

// ---- checkpoints ----

namespace {

constexpr const char* kFormat = "condvid-checkpoint-1";

template <template <class> class Model>
void save_model(const std::filesystem::path& dir, const std::string& prefix, Model<float>& m, nlohmann::json& list) {
  m.visit(prefix, [&](const std::string& name, nn::Param<float>& p) {
    const std::string file = name + ".cvt1";
    write_cvt1(dir / file, p.value);
    list.push_back({{"name", name}, {"file", file}, {"shape", p.value.dims()}});
  });
}

template <template <class> class Model>
void load_model(const std::filesystem::path& dir, const std::string& prefix, Model<float>& m,
                const std::map<std::string, nlohmann::json>& entries) {
  m.visit(prefix, [&](const std::string& name, nn::Param<float>& p) {
    const auto it = entries.find(name);
    if (it == entries.end()) throw std::runtime_error("checkpoint " + dir.string() + " lacks tensor '" + name + "'");
    auto value = read_cvt1<float>(dir / it->second.at("file").get<std::string>());
    if (value.dims() != p.value.dims())
      throw std::runtime_error("checkpoint tensor '" + name + "' has shape " + shape_string(value.dims()) +
                               ", expected " + shape_string(p.value.dims()));
    p.value = std::move(value);
  });
}

nlohmann::json read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw std::runtime_error("checkpoint manifest not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed checkpoint manifest " + path.string() + ": " + e.what());
  }
  if (j.value("format", "") != kFormat) throw std::runtime_error("unsupported checkpoint format in " + path.string());
  return j;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
  if (!ckpt.unet) throw std::invalid_argument("save_checkpoint: no UNet weights");
  std::filesystem::create_directories(dir);
  nlohmann::json tensors = nlohmann::json::array();
  save_model(dir, "unet", *ckpt.unet, tensors);
  if (ckpt.control) save_model(dir, "control", *ckpt.control, tensors);
  const nlohmann::json net = ckpt.config;
  nlohmann::json manifest = {{"format", kFormat},
                             {"network", net},
                             {"config_hash", hash_hex(json_hash(net))},
                             {"has_control", static_cast<bool>(ckpt.control)},
                             {"meta", ckpt.meta},
                             {"tensors", tensors}};
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = read_manifest(dir);
  Checkpoint ckpt;
  ckpt.config = manifest.at("network").get<NetworkConfig>();
  if (manifest.value("config_hash", "") != hash_hex(json_hash(manifest.at("network"))))
    throw std::runtime_error("checkpoint " + dir.string() + ": config hash does not match network config");
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  std::map<std::string, nlohmann::json> entries;
  for (const auto& e : manifest.at("tensors")) entries[e.at("name").get<std::string>()] = e;
  ckpt.unet = std::make_shared<UNet<float>>(ckpt.config);
  load_model(dir, "unet", *ckpt.unet, entries);
  if (manifest.value("has_control", false)) {
    ckpt.control = std::make_shared<ControlBranch<float>>(ckpt.config);
    load_model(dir, "control", *ckpt.control, entries);
  }
  return ckpt;
}

std::vector<std::string> checkpoint_tensor_names(const std::filesystem::path& dir) {
  std::vector<std::string> names;
  const auto manifest = read_manifest(dir);
  for (const auto& e : manifest.at("tensors")) names.push_back(e.at("name").get<std::string>());
  return names;
}

}  // namespace condvid
