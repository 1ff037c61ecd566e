#include "domix/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace domix {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

void append(std::vector<std::uint8_t>& out, std::span<const double> values, Precision dtype) {
  const std::size_t width = dtype == Precision::f32 ? 4 : 8;
  const std::size_t at = out.size();
  out.resize(at + values.size() * width);
  std::uint8_t* dst = out.data() + at;
  for (double v : values) {
    if (dtype == Precision::f32) {
      const float f = static_cast<float>(v);
      std::memcpy(dst, &f, 4);
    } else {
      std::memcpy(dst, &v, 8);
    }
    dst += width;
  }
}

void extract(std::span<const std::uint8_t> bytes, std::span<double> out, Precision dtype) {
  const std::size_t width = dtype == Precision::f32 ? 4 : 8;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (dtype == Precision::f32) {
      float f;
      std::memcpy(&f, bytes.data() + i * width, 4);
      out[i] = f;
    } else {
      std::memcpy(&out[i], bytes.data() + i * width, 8);
    }
  }
}

[[noreturn]] void corrupt(const std::filesystem::path& path, const std::string& what) {
  throw std::runtime_error("checkpoint " + path.string() + ": " + what);
}

}  // namespace

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << value;
  return s.str();
}

CheckpointInfo save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocab& vocab,
                               const RunConfig& config, const TrainState* state) {
  const Precision dtype = config.train.precision;
  const char* dtype_name = dtype == Precision::f32 ? "f32" : "f64";
  std::vector<std::uint8_t> payload;
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  auto add = [&](const std::string& name, const ad::Shape& shape, std::span<const double> values) {
    const std::size_t offset = payload.size();
    append(payload, values, dtype);
    tensors.push_back({{"name", name},
                       {"shape", shape},
                       {"dtype", dtype_name},
                       {"offset", offset},
                       {"nbytes", payload.size() - offset}});
  };
  const auto& params = model.parameters();
  for (const auto& p : params) add(p.name, p.tensor.shape(), p.tensor.data());
  if (state != nullptr && !state->optimizer.m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      add("adam.m/" + params[i].name, params[i].tensor.shape(), state->optimizer.m.at(i));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      add("adam.v/" + params[i].name, params[i].tensor.shape(), state->optimizer.v.at(i));
    }
  }

  CheckpointInfo info{fnv1a(payload), payload.size(), dtype};
  nlohmann::ordered_json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["version"] = kCheckpointVersion;
  manifest["dtype"] = dtype_name;
  manifest["step"] = state ? state->step : 0;
  manifest["optimizer_step"] = state ? state->optimizer.step : 0;
  manifest["config"] = to_json(config);
  manifest["vocab"] = vocab.non_reserved();
  manifest["vocab_hash"] = hex64(vocab.hash());
  manifest["tensors"] = tensors;
  manifest["payload_bytes"] = payload.size();
  manifest["payload_fnv1a"] = hex64(info.payload_hash);
  const std::string text = manifest.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (!out) throw std::runtime_error("short write to checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
  return info;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  if (!in || len == 0 || len > (1ULL << 32)) corrupt(path, "bad manifest length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) corrupt(path, "truncated manifest");
  std::vector<std::uint8_t> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  LoadedCheckpoint out;
  try {
    out.manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    corrupt(path, std::string("manifest is not JSON: ") + e.what());
  }
  const auto& mf = out.manifest;
  if (mf.value("format", "") != kCheckpointFormat) corrupt(path, "not a domix checkpoint");
  if (mf.value("version", 0) != kCheckpointVersion) {
    corrupt(path, "unsupported version " + mf.value("version", nlohmann::json()).dump());
  }
  if (mf.at("payload_bytes").get<std::size_t>() != payload.size()) corrupt(path, "payload size mismatch");
  out.info.payload_bytes = payload.size();
  out.info.payload_hash = fnv1a(payload);
  if (hex64(out.info.payload_hash) != mf.at("payload_fnv1a").get<std::string>()) {
    corrupt(path, "payload hash mismatch");
  }
  out.info.dtype = parse_precision(mf.at("dtype").get<std::string>());

  out.config = parse_run_config(mf.at("config"));
  const auto tokens = mf.at("vocab").get<std::vector<std::string>>();
  out.vocab = Vocab::from_tokens(tokens);
  if (hex64(out.vocab.hash()) != mf.at("vocab_hash").get<std::string>()) corrupt(path, "vocab hash mismatch");
  if (out.config.model.vocab_size != out.vocab.size()) corrupt(path, "model.vocab_size disagrees with vocab");
  out.model.emplace(out.config.model);

  std::map<std::string, const nlohmann::json*> entries;
  for (const auto& t : mf.at("tensors")) entries[t.at("name").get<std::string>()] = &t;
  auto read = [&](const std::string& name, const ad::Shape& shape, std::span<double> dst) {
    const auto it = entries.find(name);
    if (it == entries.end()) corrupt(path, "missing tensor " + name);
    const auto& t = *it->second;
    if (t.at("shape").get<ad::Shape>() != shape) {
      corrupt(path, "tensor " + name + " has shape " + t.at("shape").dump() + ", model expects " +
                        ad::shape_str(shape));
    }
    const std::size_t offset = t.at("offset").get<std::size_t>();
    const std::size_t nbytes = t.at("nbytes").get<std::size_t>();
    const std::size_t width = out.info.dtype == Precision::f32 ? 4 : 8;
    if (nbytes != dst.size() * width || offset + nbytes > payload.size()) corrupt(path, "bad extent for " + name);
    extract(std::span(payload).subspan(offset, nbytes), dst, out.info.dtype);
  };
  const auto& params = out.model->parameters();
  for (const auto& p : params) {
    ad::Tensor t = p.tensor;
    read(p.name, t.shape(), t.mutable_data());
  }
  out.state.step = mf.value("step", std::size_t{0});
  out.state.optimizer.step = mf.value("optimizer_step", std::uint64_t{0});
  if (!params.empty() && entries.count("adam.m/" + params.front().name)) {
    for (const auto& p : params) {
      out.state.optimizer.m.emplace_back(p.tensor.numel());
      out.state.optimizer.v.emplace_back(p.tensor.numel());
      read("adam.m/" + p.name, p.tensor.shape(), out.state.optimizer.m.back());
      read("adam.v/" + p.name, p.tensor.shape(), out.state.optimizer.v.back());
    }
  }
  return out;
}

}  // namespace domix
