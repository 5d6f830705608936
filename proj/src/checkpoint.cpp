#include "dsta/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "dsta/errors.hpp"

namespace dsta {
namespace {

constexpr char kMagic[4] = {'D', 'S', 'T', 'A'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

std::string config_text(const ModelConfig& c) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "height " << c.height << '\n'
     << "width " << c.width << '\n'
     << "frames " << c.frames << '\n'
     << "channels " << c.channels << '\n'
     << "patch " << c.patch << '\n'
     << "dim " << c.dim << '\n'
     << "heads " << c.heads << '\n'
     << "depth " << c.depth << '\n'
     << "mlp_dim " << c.mlp_dim << '\n'
     << "num_classes " << c.num_classes << '\n'
     << "scheme " << scheme_name(c.scheme) << '\n'
     << "temporal_pos_emb " << (c.temporal_pos_emb ? 1 : 0) << '\n'
     << "ln_eps " << c.ln_eps << '\n';
  return os.str();
}

void set_config_field(ModelConfig& c, const std::string& key, std::istringstream& in) {
  auto read_size = [&](std::size_t& field) {
    if (!(in >> field)) throw LoadError("checkpoint header: bad value for " + key);
  };
  if (key == "height") return read_size(c.height);
  if (key == "width") return read_size(c.width);
  if (key == "frames") return read_size(c.frames);
  if (key == "channels") return read_size(c.channels);
  if (key == "patch") return read_size(c.patch);
  if (key == "dim") return read_size(c.dim);
  if (key == "heads") return read_size(c.heads);
  if (key == "depth") return read_size(c.depth);
  if (key == "mlp_dim") return read_size(c.mlp_dim);
  if (key == "num_classes") return read_size(c.num_classes);
  if (key == "scheme") {
    std::string name;
    in >> name;
    try {
      c.scheme = parse_scheme(name);
    } catch (const ConfigError& e) {
      throw LoadError(std::string("checkpoint header: ") + e.what());
    }
    return;
  }
  if (key == "temporal_pos_emb") {
    int flag = 0;
    if (!(in >> flag)) throw LoadError("checkpoint header: bad value for " + key);
    c.temporal_pos_emb = flag != 0;
    return;
  }
  if (key == "ln_eps") {
    if (!(in >> c.ln_eps)) throw LoadError("checkpoint header: bad value for " + key);
    return;
  }
  throw LoadError("checkpoint header: unknown field '" + key + "'");
}

}  // namespace

Checkpoint Checkpoint::of(const Model& model) {
  Checkpoint ckpt;
  ckpt.config = model.config;
  for (const auto& [name, t] : model.parameters()) ckpt.parameters.emplace_back(name, t.clone());
  return ckpt;
}

Model Checkpoint::to_model() const { return Model::from_parameters(config, parameters); }

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::string header = config_text(ckpt.config);
  std::size_t total = 0;
  for (const auto& [name, t] : ckpt.parameters) {
    header += "param " + name;
    for (auto d : t.shape()) header += " " + std::to_string(d);
    header += '\n';
    total += t.numel();
  }

  std::string bytes(kMagic, 4);
  put_u32(bytes, ckpt.version);
  put_u32(bytes, static_cast<std::uint32_t>(header.size()));
  bytes += header;
  bytes.reserve(bytes.size() + total * 8);
  for (const auto& [name, t] : ckpt.parameters) {
    for (double v : t.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto where = " in " + path.string();

  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw LoadError("not a checkpoint" + where);
  Checkpoint ckpt;
  ckpt.version = get_u32(bytes.data() + 4);
  if (ckpt.version != Checkpoint::kFormatVersion) {
    throw LoadError("unsupported checkpoint version " + std::to_string(ckpt.version) + where);
  }
  const auto header_len = get_u32(bytes.data() + 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(header_len)) throw LoadError("truncated header" + where);

  std::istringstream header(bytes.substr(12, header_len));
  std::vector<std::pair<std::string, Shape>> declared;
  std::string line;
  while (std::getline(header, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string key;
    fields >> key;
    if (key == "param") {
      std::string name;
      fields >> name;
      Shape shape;
      std::size_t d;
      while (fields >> d) shape.push_back(d);
      if (name.empty() || shape.empty()) throw LoadError("malformed parameter line '" + line + "'" + where);
      declared.emplace_back(name, shape);
    } else {
      set_config_field(ckpt.config, key, fields);
    }
  }

  std::vector<std::pair<std::string, Shape>> expected;
  try {
    expected = parameter_layout(ckpt.config);
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint config invalid: ") + e.what() + where);
  }
  for (std::size_t i = 0; i < std::max(expected.size(), declared.size()); ++i) {
    if (i >= declared.size()) throw LoadError("parameter " + expected[i].first + " missing" + where);
    if (i >= expected.size()) throw LoadError("unexpected parameter " + declared[i].first + where);
    if (declared[i].first != expected[i].first) {
      throw LoadError("parameter " + declared[i].first + " found where " + expected[i].first + " was expected" +
                      where);
    }
    if (declared[i].second != expected[i].second) {
      throw LoadError("parameter " + declared[i].first + " has shape " + shape_to_string(declared[i].second) +
                      " but the config implies " + shape_to_string(expected[i].second) + where);
    }
  }

  std::size_t offset = 12 + header_len;
  for (const auto& [name, shape] : declared) {
    const auto n = shape_numel(shape);
    if (bytes.size() < offset + n * 8) throw LoadError("payload truncated in parameter " + name + where);
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + i * 8 + b])) << (8 * b);
      }
      values[i] = std::bit_cast<double>(bits);
    }
    offset += n * 8;
    ckpt.parameters.emplace_back(name, Tensor::from(shape, std::move(values), true));
  }
  if (offset != bytes.size()) throw LoadError("trailing bytes after payload" + where);
  return ckpt;
}

}  // namespace dsta
