#include <bit>
#include <cstring>
#include <stdexcept>

#include "mvr/io_util.hpp"
#include "mvr/trainer.hpp"

namespace mvr {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint layout assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'V', 'R', 'C', 'K', 'P', 'T', '1'};
constexpr std::size_t kDigestHexLen = 64;

template <typename T>
void put(std::string& out, const T& value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(std::string_view bytes, std::size_t& offset) {
  if (offset + sizeof(T) > bytes.size()) throw std::runtime_error("checkpoint truncated");
  T value;
  std::memcpy(&value, bytes.data() + offset, sizeof(T));
  offset += sizeof(T);
  return value;
}

void put_doubles(std::string& out, const std::vector<double>& values) {
  out.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
}

void get_doubles(std::string_view bytes, std::size_t& offset, std::vector<double>& values) {
  const std::size_t n = values.size() * sizeof(double);
  if (offset + n > bytes.size()) throw std::runtime_error("checkpoint truncated");
  std::memcpy(values.data(), bytes.data() + offset, n);
  offset += n;
}

std::string param_bytes(const EncoderParams& params) {
  std::string out;
  for_each_tensor(params, [&](const std::string&, const Matrix& m) { put_doubles(out, m.data()); });
  return out;
}

}  // namespace

std::string checkpoint_hash(const EncoderParams& params) {
  return sha256_hex(param_bytes(params));
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  json tensors = json::array();
  for_each_tensor(state.params, [&](const std::string& name, const Matrix& m) {
    tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  });
  json header{{"encoder", to_json(state.params.config)},
              {"train", to_json(state.config)},
              {"state",
               {{"epoch", state.epoch},
                {"step", state.step},
                {"step_in_epoch", state.step_in_epoch},
                {"seed", state.seed},
                {"tau", state.tau},
                {"optimizer_t", state.optimizer.t},
                {"has_moments", !state.optimizer.m.empty()}}},
              {"tensors", tensors}};
  const std::string header_text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, header_text.size());
  out += header_text;
  out += param_bytes(state.params);
  for (const auto& m : state.optimizer.m) put_doubles(out, m);
  for (const auto& v : state.optimizer.v) put_doubles(out, v);
  out += sha256_hex(out);
  write_file_atomic(path, out);
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::string_view view(bytes);
  if (bytes.size() < sizeof(kMagic) + 12 + kDigestHexLen ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path.string());
  }
  std::size_t offset = sizeof(kMagic);
  const auto version = get<std::uint32_t>(view, offset);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                             std::to_string(kCheckpointVersion) + "): " + path.string());
  }
  const std::string_view body = view.substr(0, bytes.size() - kDigestHexLen);
  if (sha256_hex(body) != view.substr(bytes.size() - kDigestHexLen)) {
    throw std::runtime_error("checkpoint checksum mismatch (corrupted file): " + path.string());
  }

  const auto header_len = get<std::uint64_t>(body, offset);
  if (offset + header_len > body.size()) throw std::runtime_error("checkpoint truncated");
  const json header = json::parse(body.substr(offset, header_len));
  offset += header_len;

  TrainState state;
  state.config = train_config_from_json(header.at("train"));
  const EncoderConfig enc = encoder_config_from_json(header.at("encoder"));
  enc.validate();
  state.params.config = enc;
  state.params.towers.resize(enc.tied ? 1 : 2);
  const json& tensors = header.at("tensors");
  for (auto& tower : state.params.towers) tower.layers.resize(enc.n_layers);
  // Allocate from the header's shapes, then check names against the layout.
  std::vector<std::pair<std::string, Matrix*>> slots;
  for_each_tensor(state.params, [&](const std::string& name, Matrix& m) { slots.emplace_back(name, &m); });
  if (slots.size() != tensors.size()) throw std::runtime_error("checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const json& t = tensors[i];
    if (t.at("name").get<std::string>() != slots[i].first) {
      throw std::runtime_error("checkpoint tensor order mismatch at " + slots[i].first);
    }
    *slots[i].second = Matrix(t.at("rows").get<std::size_t>(), t.at("cols").get<std::size_t>());
    get_doubles(body, offset, slots[i].second->data());
  }
  const json& s = header.at("state");
  state.epoch = s.at("epoch").get<std::size_t>();
  state.step = s.at("step").get<std::size_t>();
  state.step_in_epoch = s.at("step_in_epoch").get<std::size_t>();
  state.seed = s.at("seed").get<std::uint64_t>();
  state.tau = s.at("tau").get<double>();
  state.optimizer.t = s.at("optimizer_t").get<std::uint64_t>();
  if (s.at("has_moments").get<bool>()) {
    for (auto* moments : {&state.optimizer.m, &state.optimizer.v}) {
      for (const auto& [name, m] : slots) {
        moments->emplace_back(m->size(), 0.0);
        get_doubles(body, offset, moments->back());
      }
    }
  }
  if (offset != body.size()) throw std::runtime_error("checkpoint has trailing bytes");
  return state;
}

}  // namespace mvr
