#include "halos/network.hpp"

#include <cstring>
#include <fstream>

namespace halos {

using nlohmann::json;

void NetworkConfig::validate() const {
  if (in_channels < 1) throw std::invalid_argument("network: in_channels must be >= 1");
  if (num_classes < 2) throw std::invalid_argument("network: num_classes must be >= 2");
  if (base_channels < 1) throw std::invalid_argument("network: base_channels must be >= 1");
  if (num_levels < 2) throw std::invalid_argument("network: num_levels must be >= 2");
  if (max_channels < base_channels)
    throw std::invalid_argument("network: max_channels must be >= base_channels");
  if (classifier_enabled && (classifier_block < 1 || classifier_block > num_levels))
    throw std::invalid_argument("network: classifier_block must lie in [1, num_levels]");
  if (fusion_hidden_reduction < 1)
    throw std::invalid_argument("network: fusion_hidden_reduction must be >= 1");
  if ((fusion_enabled || classifier_enabled) && num_removable_organs < 1)
    throw std::invalid_argument("network: num_removable_organs must be >= 1");
}

Index NetworkConfig::stage_channels(int stage) const {
  return std::min(max_channels, base_channels << stage);
}

int NetworkConfig::supervised_scales() const {
  // The two lowest-resolution decoder outputs are never supervised.
  return deep_supervision ? std::max(1, num_levels - 1) : 1;
}

std::string to_string(NormType n) { return n == NormType::instance ? "instance" : "batch"; }

NormType norm_from_string(const std::string& s) {
  if (s == "instance") return NormType::instance;
  if (s == "batch") return NormType::batch;
  throw std::invalid_argument("unknown norm '" + s + "' (expected instance or batch)");
}

json to_json(const NetworkConfig& c) {
  return json{{"in_channels", c.in_channels},
              {"num_classes", c.num_classes},
              {"base_channels", c.base_channels},
              {"num_levels", c.num_levels},
              {"max_channels", c.max_channels},
              {"norm", to_string(c.norm)},
              {"classifier_enabled", c.classifier_enabled},
              {"classifier_site", c.classifier_site == ClassifierSite::encoder ? "encoder" : "decoder"},
              {"classifier_block", c.classifier_block},
              {"fusion_enabled", c.fusion_enabled},
              {"fusion_hidden_reduction", c.fusion_hidden_reduction},
              {"deep_supervision", c.deep_supervision},
              {"num_removable_organs", c.num_removable_organs},
              {"seed", c.seed}};
}

NetworkConfig network_config_from_json(const json& j) {
  NetworkConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.num_levels = j.value("num_levels", c.num_levels);
  c.max_channels = j.value("max_channels", c.max_channels);
  c.norm = norm_from_string(j.value("norm", std::string("instance")));
  c.classifier_enabled = j.value("classifier_enabled", c.classifier_enabled);
  const std::string site = j.value("classifier_site", std::string("encoder"));
  if (site != "encoder" && site != "decoder")
    throw std::invalid_argument("unknown classifier_site '" + site + "'");
  c.classifier_site = site == "encoder" ? ClassifierSite::encoder : ClassifierSite::decoder;
  c.classifier_block = j.value("classifier_block", c.classifier_block);
  c.fusion_enabled = j.value("fusion_enabled", c.fusion_enabled);
  c.fusion_hidden_reduction = j.value("fusion_hidden_reduction", c.fusion_hidden_reduction);
  c.deep_supervision = j.value("deep_supervision", c.deep_supervision);
  c.num_removable_organs = j.value("num_removable_organs", c.num_removable_organs);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

BaselineKind baseline_from_string(const std::string& s) {
  if (s == "plain") return BaselineKind::plain;
  if (s == "decoder_classifier") return BaselineKind::decoder_classifier;
  throw std::invalid_argument("unknown baseline kind '" + s + "'");
}

NetworkConfig baseline_config(const NetworkConfig& base, BaselineKind kind) {
  NetworkConfig c = base;
  c.fusion_enabled = false;
  if (kind == BaselineKind::plain) {
    c.classifier_enabled = false;
  } else {
    c.classifier_enabled = true;
    c.classifier_site = ClassifierSite::decoder;
  }
  return c;
}

template <typename Scalar>
UNet<Scalar>::UNet(const NetworkConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int L = cfg_.num_levels;
  const NormType norm = cfg_.norm;
  for (int s = 0; s <= L; ++s) {
    const Index in = s == 0 ? cfg_.in_channels : cfg_.stage_channels(s - 1);
    encoder_.emplace_back(in, cfg_.stage_channels(s), s == 0 ? 1 : 2, norm,
                          "encoder." + std::to_string(s));
  }
  for (int s = 0; s < L; ++s) {
    const Index c = cfg_.stage_channels(s);
    up_.emplace_back(cfg_.stage_channels(s + 1), c, "decoder." + std::to_string(s) + ".up");
    decoder_.emplace_back(2 * c, c, 1, norm, "decoder." + std::to_string(s) + ".block");
  }
  for (int k = 0; k < cfg_.supervised_scales(); ++k) {
    heads_.emplace_back(cfg_.stage_channels(k), cfg_.num_classes, 1, 1,
                        "seg_head." + std::to_string(k));
  }
  if (cfg_.fusion_enabled) {
    for (int s = 0; s < L; ++s) {
      fusion_.emplace_back(2 * cfg_.stage_channels(s), cfg_.num_removable_organs,
                           cfg_.fusion_hidden_reduction, "fusion.decoder." + std::to_string(s));
    }
    fusion_.emplace_back(cfg_.stage_channels(L), cfg_.num_removable_organs,
                         cfg_.fusion_hidden_reduction, "fusion.bottleneck");
  }
  if (cfg_.classifier_enabled) {
    const Index c = cfg_.classifier_site == ClassifierSite::encoder
                        ? cfg_.stage_channels(classifier_stage())
                        : cfg_.stage_channels(0);
    clf_block_.emplace(c, c, 1, norm, "classifier.block", ParamGroup::classifier);
    clf_fc_.emplace(c, cfg_.num_removable_organs, "classifier.fc", ParamGroup::classifier);
  }

  const std::uint64_t seed = cfg_.seed;
  for (auto& b : encoder_) b.init(seed);
  for (auto& u : up_) u.init(seed);
  for (auto& b : decoder_) b.init(seed);
  for (auto& h : heads_) h.init(seed);
  for (auto& f : fusion_) f.init(seed);
  if (clf_block_) {
    clf_block_->init(seed);
    clf_fc_->init(seed);
  }
}

template <typename Scalar>
FusionModule<Scalar>& UNet<Scalar>::fusion_at_stage(int s) {
  if (!cfg_.fusion_enabled) throw std::logic_error("model has no fusion modules");
  return fusion_.at(static_cast<std::size_t>(s));
}

template <typename Scalar>
ModelOutput<Scalar> UNet<Scalar>::forward(const Tensor5<Scalar>& x, const Matrix<Scalar>* existence,
                                          ForwardOptions opts) {
  if (x.channels() != cfg_.in_channels)
    throw std::invalid_argument("forward: expected " + std::to_string(cfg_.in_channels) +
                                " input channels, got " + std::to_string(x.channels()));
  const Index div = size_divisor();
  const GridShape g = x.grid();
  if (g.depth % div != 0 || g.height % div != 0 || g.width % div != 0 || g.voxels() == 0)
    throw std::invalid_argument("forward: spatial dims " + g.str() + " must be divisible by " +
                                std::to_string(div));
  opts.classification = opts.classification && cfg_.classifier_enabled;
  const bool need_decoder =
      opts.segmentation || (opts.classification && cfg_.classifier_site == ClassifierSite::decoder);
  if (need_decoder && cfg_.fusion_enabled) {
    if (existence == nullptr)
      throw std::invalid_argument("forward: existence input required when fusion is enabled");
    if (existence->rows() != x.batch() || existence->cols() != cfg_.num_removable_organs)
      throw std::invalid_argument("forward: existence input must be " + std::to_string(x.batch()) +
                                  " x " + std::to_string(cfg_.num_removable_organs));
  }
  const bool cache = training_;
  const int L = cfg_.num_levels;

  last_ = opts;
  top_stage_ = need_decoder ? L : (opts.classification ? classifier_stage() : -1);

  std::vector<Tensor5<Scalar>> enc(static_cast<std::size_t>(L + 1));
  enc_shapes_.assign(static_cast<std::size_t>(L + 1), Shape5{});
  const Tensor5<Scalar>* h = &x;
  for (int s = 0; s <= top_stage_; ++s) {
    enc[static_cast<std::size_t>(s)] = encoder_[static_cast<std::size_t>(s)].forward(*h, cache);
    enc_shapes_[static_cast<std::size_t>(s)] = enc[static_cast<std::size_t>(s)].shape();
    h = &enc[static_cast<std::size_t>(s)];
  }

  ModelOutput<Scalar> out;
  Tensor5<Scalar> decoder_top;
  if (need_decoder) {
    Tensor5<Scalar> cur = enc[static_cast<std::size_t>(L)];
    if (cfg_.fusion_enabled) cur = fusion_.back().forward(cur, *existence, cache);
    out.deep_supervision_logits.resize(static_cast<std::size_t>(cfg_.supervised_scales()));
    for (int s = L - 1; s >= 0; --s) {
      const auto i = static_cast<std::size_t>(s);
      Tensor5<Scalar> cat = concat_channels(up_[i].forward(cur, cache), enc[i]);
      if (cfg_.fusion_enabled) cat = fusion_[i].forward(cat, *existence, cache);
      cur = decoder_[i].forward(cat, cache);
      if (s < cfg_.supervised_scales() && opts.segmentation)
        out.deep_supervision_logits[i] = heads_[i].forward(cur, cache);
    }
    if (opts.segmentation) out.logits = out.deep_supervision_logits.front();
    else out.deep_supervision_logits.clear();
    decoder_top = std::move(cur);
  }

  if (opts.classification) {
    const Tensor5<Scalar>& in = cfg_.classifier_site == ClassifierSite::encoder
                                    ? enc[static_cast<std::size_t>(classifier_stage())]
                                    : decoder_top;
    clf_input_grid_ = in.grid();
    const Tensor5<Scalar> feat = clf_block_->forward(in, cache);
    clf_block_out_ = feat.shape();
    out.existence_logits = clf_fc_->forward(global_average_pool(feat), cache);
  }
  need_decoder_ = need_decoder;
  return out;
}

template <typename Scalar>
void UNet<Scalar>::backward(const OutputGradient<Scalar>& g) {
  if (!training_) throw std::logic_error("backward requires a training-mode forward");
  const int L = cfg_.num_levels;
  std::vector<Tensor5<Scalar>> enc_grad(static_cast<std::size_t>(L + 1));
  auto accumulate = [](Tensor5<Scalar>& acc, Tensor5<Scalar>&& add) {
    if (acc.empty()) acc = std::move(add);
    else acc.array() += add.array();
  };

  Tensor5<Scalar> top_grad;  // gradient w.r.t. the last decoder block output
  const bool clf_grad = last_.classification && g.existence.size() > 0;
  Tensor5<Scalar> clf_in_grad;
  if (clf_grad) {
    const Matrix<Scalar> gp = clf_fc_->backward(g.existence);
    clf_in_grad = clf_block_->backward(global_average_pool_backward<Scalar>(gp, clf_block_out_));
  }

  if (need_decoder_) {
    std::vector<Tensor5<Scalar>> dec_grad(static_cast<std::size_t>(L));
    if (clf_grad && cfg_.classifier_site == ClassifierSite::decoder) dec_grad[0] = std::move(clf_in_grad);
    if (last_.segmentation) {
      for (std::size_t k = 0; k < g.deep_supervision.size() && k < heads_.size(); ++k) {
        if (g.deep_supervision[k].empty()) continue;
        accumulate(dec_grad[k], heads_[k].backward(g.deep_supervision[k]));
      }
    }
    Tensor5<Scalar> bottleneck_grad;
    for (int s = 0; s < L; ++s) {
      const auto i = static_cast<std::size_t>(s);
      Tensor5<Scalar> gd = std::move(dec_grad[i]);
      if (gd.empty()) {
        // No gradient reached this block; propagate zeros of the right shape.
        gd = Tensor5<Scalar>(enc_shapes_[i]);
      }
      Tensor5<Scalar> gcat = decoder_[i].backward(gd);
      if (cfg_.fusion_enabled) gcat = fusion_[i].backward(gcat);
      auto [gup, gskip] = split_channels(gcat, cfg_.stage_channels(s));
      accumulate(enc_grad[i], std::move(gskip));
      Tensor5<Scalar> gprev = up_[i].backward(gup);
      if (s + 1 < L) accumulate(dec_grad[i + 1], std::move(gprev));
      else bottleneck_grad = std::move(gprev);
    }
    if (cfg_.fusion_enabled) bottleneck_grad = fusion_.back().backward(bottleneck_grad);
    accumulate(enc_grad[static_cast<std::size_t>(L)], std::move(bottleneck_grad));
  }
  if (clf_grad && cfg_.classifier_site == ClassifierSite::encoder)
    accumulate(enc_grad[static_cast<std::size_t>(classifier_stage())], std::move(clf_in_grad));

  for (int s = top_stage_; s >= 0; --s) {
    const auto i = static_cast<std::size_t>(s);
    if (enc_grad[i].empty()) continue;
    Tensor5<Scalar> gin = encoder_[i].backward(enc_grad[i]);
    if (s > 0) accumulate(enc_grad[i - 1], std::move(gin));
  }
}

template <typename Scalar>
void UNet<Scalar>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> UNet<Scalar>::parameters() {
  std::vector<Parameter<Scalar>*> out;
  auto add = [&out](Parameter<Scalar>& p) { out.push_back(&p); };
  for (auto& b : encoder_) b.visit_parameters(add);
  for (std::size_t s = 0; s < up_.size(); ++s) {
    add(up_[s].weight);
    add(up_[s].bias);
    decoder_[s].visit_parameters(add);
  }
  for (auto& h : heads_) {
    add(h.weight);
    add(h.bias);
  }
  for (auto& f : fusion_) f.visit_parameters(add);
  if (clf_block_) {
    clf_block_->visit_parameters(add);
    add(clf_fc_->weight);
    add(clf_fc_->bias);
  }
  return out;
}

template <typename Scalar>
std::vector<Buffer<Scalar>*> UNet<Scalar>::buffers() {
  std::vector<Buffer<Scalar>*> out;
  auto add = [&out](Buffer<Scalar>& b) { out.push_back(&b); };
  for (auto& b : encoder_) b.visit_buffers(add);
  for (auto& b : decoder_) b.visit_buffers(add);
  if (clf_block_) clf_block_->visit_buffers(add);
  return out;
}

template <typename Scalar>
Parameter<Scalar>& UNet<Scalar>::parameter(const std::string& name) {
  for (auto* p : parameters())
    if (p->name == name) return *p;
  throw std::out_of_range("no parameter named '" + name + "'");
}

template class UNet<float>;
template class UNet<double>;

// --- archives ---------------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'H', 'A', 'L', 'O', 'S', 'C', 'K', '1'};
}

void write_archive(const std::filesystem::path& path, const WeightArchive& archive) {
  json header;
  header["meta"] = archive.meta;
  header["tensors"] = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive.tensors) {
    if (t.dtype != "f4" && t.dtype != "f8")
      throw std::invalid_argument("write_archive: unsupported dtype '" + t.dtype + "'");
    header["tensors"].push_back(
        {{"name", name}, {"dtype", t.dtype}, {"size", t.values.size()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.values.size()) * (t.dtype == "f4" ? 4 : 8);
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write archive " + path.string());
  out.write(kMagic, 8);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : archive.tensors) {
    if (t.dtype == "f4") {
      const Eigen::ArrayXf v = t.values.cast<float>();
      out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 4));
    } else {
      out.write(reinterpret_cast<const char*>(t.values.data()),
                static_cast<std::streamsize>(t.values.size() * 8));
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

WeightArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open archive " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&len), 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("not a weight archive: " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  const json header = json::parse(text);
  WeightArchive archive;
  archive.meta = header.at("meta");
  std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  for (const auto& t : header.at("tensors")) {
    ArchiveTensor tensor;
    tensor.dtype = t.at("dtype").get<std::string>();
    const auto size = t.at("size").get<Index>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    const std::uint64_t width = tensor.dtype == "f4" ? 4 : 8;
    if (offset + static_cast<std::uint64_t>(size) * width > data.size())
      throw std::runtime_error("truncated archive: " + path.string());
    if (tensor.dtype == "f4") {
      Eigen::ArrayXf v(size);
      std::memcpy(v.data(), data.data() + offset, static_cast<std::size_t>(size) * 4);
      tensor.values = v.cast<double>();
    } else {
      tensor.values.resize(size);
      std::memcpy(tensor.values.data(), data.data() + offset, static_cast<std::size_t>(size) * 8);
    }
    archive.tensors.emplace(t.at("name").get<std::string>(), std::move(tensor));
  }
  return archive;
}

template <typename Scalar>
void export_model(UNet<Scalar>& model, WeightArchive& archive, const std::string& prefix) {
  const std::string dtype = sizeof(Scalar) == 4 ? "f4" : "f8";
  for (auto* p : model.parameters())
    archive.tensors[prefix + p->name] = {dtype, p->value.template cast<double>()};
  for (auto* b : model.buffers())
    archive.tensors[prefix + b->name] = {dtype, b->value.template cast<double>()};
  archive.meta["network_config"] = to_json(model.config());
}

template <typename Scalar>
void import_model(UNet<Scalar>& model, const WeightArchive& archive, const std::string& prefix) {
  auto fetch = [&](const std::string& name, Index size) -> const Eigen::ArrayXd& {
    const auto it = archive.tensors.find(prefix + name);
    if (it == archive.tensors.end()) throw std::runtime_error("archive lacks tensor '" + name + "'");
    if (it->second.values.size() != size)
      throw std::runtime_error("archive tensor '" + name + "' has wrong size");
    return it->second.values;
  };
  for (auto* p : model.parameters()) p->value = fetch(p->name, p->value.size()).template cast<Scalar>();
  for (auto* b : model.buffers()) b->value = fetch(b->name, b->value.size()).template cast<Scalar>();
}

template void export_model<float>(UNet<float>&, WeightArchive&, const std::string&);
template void export_model<double>(UNet<double>&, WeightArchive&, const std::string&);
template void import_model<float>(UNet<float>&, const WeightArchive&, const std::string&);
template void import_model<double>(UNet<double>&, const WeightArchive&, const std::string&);

}  // namespace halos
