#include "spotlight/checkpoint.hpp"

#include "binary_io.hpp"
#include "spotlight/errors.hpp"

namespace spotlight::spot {
namespace {

constexpr char kMagic[4] = {'S', 'P', 'O', 'T'};

void write_tensor(detail::ByteWriter& w, const Tensor& t) {
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (double v : t.values()) w.f64(v);
}

// Reads into `into`, whose shape the stored header must match.
void read_tensor(detail::ByteReader& r, Tensor& into, const char* what) {
  const std::size_t rank = r.u8();
  Shape shape(rank);
  for (auto& d : shape) d = r.u32();
  if (shape != into.shape()) {
    throw FormatError(std::string("checkpoint tensor ") + what + " has shape " + shape_string(shape) +
                      ", expected " + shape_string(into.shape()));
  }
  r.need(into.numel() * 8);
  for (double& v : into.values()) v = r.f64();
}

nlohmann::json header_json(const Checkpoint& c) {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t i = 0; i < c.labels.class_codes.size(); ++i) {
    classes.push_back({{"code", c.labels.class_codes[i]},
                       {"name", i < c.labels.class_names.size() ? c.labels.class_names[i] : ""}});
  }
  return {{"model", c.config.to_json()}, {"dims", c.labels.dims.to_json()}, {"classes", classes}};
}

}  // namespace

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
  check_parameters(ckpt.config, ckpt.params);
  detail::ByteWriter w;
  w.raw(kMagic, 4);
  w.u8(kVersion);
  const std::string json = header_json(ckpt).dump();
  w.u32(static_cast<std::uint32_t>(json.size()));
  w.raw(json.data(), json.size());
  for (const Tensor& t : ckpt.params.parameters()) write_tensor(w, t);
  for (const Tensor& t : ckpt.params.buffers()) write_tensor(w, t);
  w.u8(ckpt.optimizer ? 1 : 0);
  if (ckpt.optimizer) {
    const auto& o = *ckpt.optimizer;
    const std::size_t n = ckpt.params.parameters().size();
    if (o.m.size() != n || o.v.size() != n) throw DimensionError("optimizer state does not match parameters");
    w.u64(o.step);
    w.u64(o.epoch);
    for (const Tensor& t : o.m) write_tensor(w, t);
    for (const Tensor& t : o.v) write_tensor(w, t);
  }
  return std::move(w.bytes());
}

Checkpoint deserialize(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes.data(), bytes.size(), "checkpoint");
  char magic[4];
  r.raw(magic, 4);
  if (std::string(magic, 4) != std::string(kMagic, 4)) throw FormatError("not a checkpoint (bad magic)");
  const std::uint8_t version = r.u8();
  if (version != kVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kVersion) + ")");
  }
  const std::uint32_t len = r.u32();
  std::string json(len, '\0');
  r.raw(json.data(), len);

  Checkpoint c;
  try {
    const auto j = nlohmann::json::parse(json);
    c.config = ModelConfig::from_json(j.at("model"));
    c.labels.dims = DimensionConfig::from_json(j.at("dims"));
    for (const auto& cls : j.at("classes")) {
      c.labels.class_codes.push_back(cls.at("code").get<std::uint32_t>());
      c.labels.class_names.push_back(cls.at("name").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }

  c.params = make_parameters(c.config);
  for (Tensor& t : c.params.parameters()) read_tensor(r, t, "parameter");
  for (Tensor& t : c.params.buffers()) read_tensor(r, t, "buffer");
  const std::uint8_t has_opt = r.u8();
  if (has_opt > 1) throw FormatError("checkpoint optimizer flag is corrupt");
  if (has_opt) {
    OptimizerState o;
    o.step = r.u64();
    o.epoch = r.u64();
    for (const Tensor& p : c.params.parameters()) o.m.emplace_back(p.shape());
    for (const Tensor& p : c.params.parameters()) o.v.emplace_back(p.shape());
    for (Tensor& t : o.m) read_tensor(r, t, "optimizer moment");
    for (Tensor& t : o.v) read_tensor(r, t, "optimizer moment");
    c.optimizer = std::move(o);
  }
  if (r.remaining() != 0) throw FormatError("checkpoint has trailing bytes");
  return c;
}

void save(const std::string& path, const Checkpoint& ckpt) { detail::write_file_bytes(path, serialize(ckpt)); }

Checkpoint load(const std::string& path) { return deserialize(detail::read_file_bytes(path)); }

}  // namespace spotlight::spot
