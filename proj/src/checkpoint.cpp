#include "vpt/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "vpt/errors.hpp"

namespace vptlab {
namespace {

constexpr char kMagic[4] = {'V', 'P', 'T', 'C'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = (v >> (8 * i)) & 0xFF;
  out.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& out, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (v >> (8 * i)) & 0xFF;
  out.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

// Floats are stored little-endian; on big-endian hosts the bytes are swapped
// explicitly so checkpoints stay portable.
bool host_little_endian() {
  uint16_t probe = 1;
  unsigned char first;
  std::memcpy(&first, &probe, 1);
  return first == 1;
}

void write_floats(std::ostream& out, const std::vector<float>& v) {
  if (host_little_endian()) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(float)));
    return;
  }
  for (float f : v) {
    unsigned char b[4];
    std::memcpy(b, &f, 4);
    std::swap(b[0], b[3]);
    std::swap(b[1], b[2]);
    out.write(reinterpret_cast<const char*>(b), 4);
  }
}

void read_floats(std::istream& in, std::vector<float>& v) {
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(float)));
  if (!host_little_endian()) {
    for (float& f : v) {
      unsigned char b[4];
      std::memcpy(b, &f, 4);
      std::swap(b[0], b[3]);
      std::swap(b[1], b[2]);
      std::memcpy(&f, b, 4);
    }
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointData& data) {
  std::ostringstream header;
  for (const auto& [k, v] : data.meta) {
    if (k.find_first_of(" \n=") != std::string::npos) {
      throw usage_error("save_checkpoint: bad meta key \"" + k + "\"");
    }
    header << "meta " << k << "=" << v << "\n";
  }
  uint64_t offset = 0;
  for (const auto& [name, sv] : data.tensors) {
    const auto& [shape, values] = sv;
    if (name.find_first_of(" \n") != std::string::npos) {
      throw usage_error("save_checkpoint: bad tensor name \"" + name + "\"");
    }
    if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
      throw shape_error("save_checkpoint: " + name + " has " +
                        std::to_string(values.size()) + " values for shape " +
                        shape_str(shape));
    }
    header << "tensor " << name << " ";
    for (size_t i = 0; i < shape.size(); ++i) {
      header << (i ? "," : "") << shape[i];
    }
    header << " " << offset << "\n";
    offset += values.size() * sizeof(float);
  }
  std::string header_str = header.str();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("save_checkpoint: cannot open " + path);
  out.write(kMagic, 4);
  write_u32(out, kVersion);
  write_u64(out, header_str.size());
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& [name, sv] : data.tensors) write_floats(out, sv.second);
  if (!out) throw data_error("save_checkpoint: write failed for " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("load_checkpoint: cannot open " + path);

  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw data_error("load_checkpoint: " + path + " is not a VPTC checkpoint");
  }
  uint32_t version = read_u32(in);
  if (version != kVersion) {
    throw data_error("load_checkpoint: unsupported version " +
                     std::to_string(version));
  }
  uint64_t header_len = read_u64(in);
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw data_error("load_checkpoint: truncated header in " + path);

  CheckpointData data;
  std::vector<std::pair<std::string, std::pair<Shape, uint64_t>>> entries;
  std::istringstream hs(header);
  std::string line;
  while (std::getline(hs, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string kv;
      ls >> kv;
      auto eq = kv.find('=');
      if (eq == std::string::npos) {
        throw data_error("load_checkpoint: bad meta line \"" + line + "\"");
      }
      data.meta[kv.substr(0, eq)] = kv.substr(eq + 1);
    } else if (kind == "tensor") {
      std::string name, shape_s;
      uint64_t off;
      if (!(ls >> name >> shape_s >> off)) {
        throw data_error("load_checkpoint: bad tensor line \"" + line + "\"");
      }
      Shape shape;
      std::istringstream ss(shape_s);
      std::string dim;
      while (std::getline(ss, dim, ',')) shape.push_back(std::stoi(dim));
      entries.emplace_back(name, std::make_pair(shape, off));
    } else {
      throw data_error("load_checkpoint: unknown header entry \"" + kind + "\"");
    }
  }

  uint64_t payload_start = 4 + 4 + 8 + header_len;
  for (auto& [name, se] : entries) {
    auto& [shape, off] = se;
    std::vector<float> values(static_cast<size_t>(shape_numel(shape)));
    in.seekg(static_cast<std::streamoff>(payload_start + off));
    read_floats(in, values);
    if (!in) throw data_error("load_checkpoint: truncated payload for " + name);
    data.tensors[name] = {shape, std::move(values)};
  }
  return data;
}

uint64_t file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("file_hash: cannot open " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
    if (!in) break;
  }
  return h;
}

}  // namespace vptlab
