#include "ovrn/model_io.hpp"

#include <fstream>
#include <json.hpp>
#include <map>

namespace ovrn {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'O', 'V', 'R', 'N', 'M', 'D', 'L', '1'};
constexpr std::uint32_t kFormatVersion = 1;

json spec_to_json(const ModelSpec& s) {
  return json{{"extractor", to_string(s.extractor)},
              {"kernel_sizes", s.kernel_sizes},
              {"channel_widths", s.channel_widths},
              {"residual_depth", s.residual_depth},
              {"head", to_string(s.head)},
              {"ovrn_hidden", s.ovrn_hidden},
              {"num_classes", s.num_classes},
              {"window_len", s.window_len},
              {"num_variables", s.num_variables}};
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec s;
  s.extractor = parse_extractor_kind(j.at("extractor").get<std::string>());
  s.kernel_sizes = j.at("kernel_sizes").get<std::vector<int>>();
  s.channel_widths = j.at("channel_widths").get<std::vector<int>>();
  s.residual_depth = j.at("residual_depth").get<int>();
  s.head = parse_head_kind(j.at("head").get<std::string>());
  s.ovrn_hidden = j.at("ovrn_hidden").get<int>();
  s.num_classes = j.at("num_classes").get<int>();
  s.window_len = j.at("window_len").get<int>();
  s.num_variables = j.at("num_variables").get<int>();
  return s;
}

}  // namespace

void save_model(Model<float>& model, const std::string& path) {
  json header;
  header["scalar"] = "f32";
  header["spec"] = spec_to_json(model.spec);
  header["meta"] = json{{"epochs", model.meta.epochs},
                        {"final_loss", model.meta.final_loss},
                        {"seed", model.meta.seed}};
  header["stats_fingerprint"] = model.stats_fingerprint;
  if (model.norm_stats) {
    const auto& ns = *model.norm_stats;
    header["normalization"] =
        json{{"mean", std::vector<double>(ns.mean.data(),
                                          ns.mean.data() + ns.mean.size())},
             {"std", std::vector<double>(ns.std_dev.data(),
                                         ns.std_dev.data() + ns.std_dev.size())},
             {"fitted_on", ns.fitted_on}};
  }

  auto state = named_state(model);
  json directory = json::array();
  for (auto& [name, tensor] : state) {
    std::vector<long long> shape(tensor.shape().begin(), tensor.shape().end());
    directory.push_back(json{{"name", name}, {"shape", shape}});
  }
  header["tensors"] = std::move(directory);

  const std::string head_str = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(kMagic, sizeof(kMagic));
  const std::uint32_t version = kFormatVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t len = head_str.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(head_str.data(), static_cast<std::streamsize>(head_str.size()));
  for (auto& [name, tensor] : state)
    out.write(reinterpret_cast<const char*>(tensor.value().data()),
              static_cast<std::streamsize>(sizeof(float) * tensor.size()));
  if (!out) throw IoError("failed while writing '" + path + "'");
}

Model<float> load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");

  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("'" + path + "' is not a model file (bad magic)");
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || version != kFormatVersion)
    throw IoError("'" + path + "' has model format version " +
                  std::to_string(version) + ", this build reads version " +
                  std::to_string(kFormatVersion));
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string head_str(len, '\0');
  in.read(head_str.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("'" + path + "' is truncated in the header");

  json header;
  try {
    header = json::parse(head_str);
  } catch (const json::exception& e) {
    throw IoError("'" + path + "' has a corrupt header: " + e.what());
  }

  ModelSpec spec;
  try {
    if (header.at("scalar").get<std::string>() != "f32")
      throw IoError("'" + path + "' stores scalar type '" +
                    header.at("scalar").get<std::string>() +
                    "', this build reads f32");
    spec = spec_from_json(header.at("spec"));
  } catch (const json::exception& e) {
    throw IoError("'" + path + "' has a malformed header: " + e.what());
  }
  spec.validate();

  Model<float> model = build<float>(spec, 0);
  auto state = named_state(model);
  std::map<std::string, Tensor<float>> by_name;
  for (auto& [name, tensor] : state) by_name.emplace(name, tensor);

  const auto& directory = header.at("tensors");
  if (directory.size() != state.size())
    throw SpecError("'" + path + "' lists " + std::to_string(directory.size()) +
                    " tensors but the declared spec requires " +
                    std::to_string(state.size()));
  for (const auto& entry : directory) {
    const std::string name = entry.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw SpecError("'" + path + "' contains tensor '" + name +
                      "' that does not belong to the declared spec");
    auto shape = entry.at("shape").get<std::vector<long long>>();
    Shape expect = it->second.shape();
    if (shape.size() != expect.size() ||
        !std::equal(shape.begin(), shape.end(), expect.begin()))
      throw SpecError("'" + path + "' tensor '" + name + "' has shape " +
                      seq_str(shape) + ", spec requires " + seq_str(expect));
    in.read(reinterpret_cast<char*>(it->second.value().data()),
            static_cast<std::streamsize>(sizeof(float) * it->second.size()));
    if (!in)
      throw IoError("'" + path + "' is truncated in tensor '" + name + "'");
  }

  if (header.contains("meta")) {
    const auto& meta = header.at("meta");
    model.meta.epochs = meta.value("epochs", 0);
    model.meta.final_loss = meta.value("final_loss", 0.0);
    model.meta.seed = meta.value("seed", std::uint64_t{0});
  }
  model.stats_fingerprint = header.value("stats_fingerprint", "");
  if (header.contains("normalization")) {
    const auto& ns = header.at("normalization");
    NormalizationStats stats;
    const auto mean = ns.at("mean").get<std::vector<double>>();
    const auto sd = ns.at("std").get<std::vector<double>>();
    stats.mean = Eigen::Map<const Eigen::VectorXd>(
        mean.data(), static_cast<Eigen::Index>(mean.size()));
    stats.std_dev = Eigen::Map<const Eigen::VectorXd>(
        sd.data(), static_cast<Eigen::Index>(sd.size()));
    stats.fitted_on = ns.value("fitted_on", "");
    model.norm_stats = std::move(stats);
  }
  return model;
}

}  // namespace ovrn
