#include "glyphdm/safetensors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace glyphdm {

static_assert(std::endian::native == std::endian::little, "tensor blobs assume a little-endian host");

void write_safetensors(const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, torch::Tensor>>& tensors,
                       const std::map<std::string, std::string>& metadata) {
  std::map<std::string, torch::Tensor> sorted;
  for (const auto& [name, t] : tensors) {
    if (!sorted.emplace(name, t.detach().to(torch::kCPU, torch::kFloat32).contiguous()).second) {
      throw std::invalid_argument("write_safetensors: duplicate tensor name " + name);
    }
  }

  nlohmann::json header = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : sorted) {
    const std::uint64_t nbytes = static_cast<std::uint64_t>(t.numel()) * sizeof(float);
    header[name] = {{"dtype", "F32"}, {"shape", t.sizes().vec()}, {"data_offsets", {offset, offset + nbytes}}};
    offset += nbytes;
  }
  if (!metadata.empty()) header["__metadata__"] = metadata;

  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');
  const std::uint64_t header_size = text.size();

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("write_safetensors: cannot open " + tmp.string());
    out.write(reinterpret_cast<const char*>(&header_size), sizeof(header_size));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : sorted) {
      out.write(reinterpret_cast<const char*>(t.data_ptr<float>()),
                static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("write_safetensors: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

namespace {

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = (h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1Fu;
  std::uint32_t mant = h & 0x3FFu;
  std::uint32_t bits = 0;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      exp = 127 - 15 + 1;
      while ((mant & 0x400u) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3FFu;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1F) {
    bits = sign | 0x7F800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

}  // namespace

TensorFile read_safetensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_safetensors: cannot open " + path.string());
  std::uint64_t header_size = 0;
  in.read(reinterpret_cast<char*>(&header_size), sizeof(header_size));
  if (!in || header_size > (std::uint64_t{1} << 30)) {
    throw std::runtime_error("read_safetensors: bad header in " + path.string());
  }
  std::string text(header_size, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_size));
  if (!in) throw std::runtime_error("read_safetensors: truncated header in " + path.string());
  const auto data_start = static_cast<std::streamoff>(8 + header_size);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("read_safetensors: invalid JSON header in " + path.string() + ": " + e.what());
  }

  TensorFile file;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : entry.items()) file.metadata[k] = v.get<std::string>();
      continue;
    }
    const auto dtype = entry.at("dtype").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
    if (offsets.size() != 2 || offsets[1] < offsets[0]) {
      throw std::runtime_error("read_safetensors: bad offsets for " + name);
    }
    std::int64_t numel = 1;
    for (auto d : shape) numel *= d;
    const std::uint64_t nbytes = offsets[1] - offsets[0];

    std::size_t elem = 0;
    if (dtype == "F32") elem = 4;
    else if (dtype == "F16" || dtype == "BF16") elem = 2;
    else if (dtype == "F64") elem = 8;
    else continue;  // integer buffers (e.g. position ids) are not needed
    if (nbytes != static_cast<std::uint64_t>(numel) * elem) {
      throw std::runtime_error("read_safetensors: size mismatch for " + name);
    }

    std::vector<char> raw(nbytes);
    in.seekg(data_start + static_cast<std::streamoff>(offsets[0]));
    in.read(raw.data(), static_cast<std::streamsize>(nbytes));
    if (!in) throw std::runtime_error("read_safetensors: truncated data for " + name);

    auto t = torch::empty(shape, torch::kFloat32);
    float* dst = t.data_ptr<float>();
    if (dtype == "F32") {
      std::memcpy(dst, raw.data(), nbytes);
    } else if (dtype == "F64") {
      for (std::int64_t i = 0; i < numel; ++i) {
        double v;
        std::memcpy(&v, raw.data() + i * 8, 8);
        dst[i] = static_cast<float>(v);
      }
    } else {
      for (std::int64_t i = 0; i < numel; ++i) {
        std::uint16_t h;
        std::memcpy(&h, raw.data() + i * 2, 2);
        dst[i] = dtype == "F16" ? half_to_float(h) : std::bit_cast<float>(std::uint32_t{h} << 16);
      }
    }
    file.tensors.emplace(name, std::move(t));
  }
  return file;
}

}  // namespace glyphdm
