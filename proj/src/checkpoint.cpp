#include "lamoe/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "lamoe/error.hpp"

namespace lamoe {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'L', 'S', 'M', 'T', '0', '0', '0', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& is, std::size_t& offset, const std::string& path) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is)
    throw FormatError("checkpoint " + path + ": truncated at offset " + std::to_string(offset));
  offset += sizeof v;
  return v;
}

}  // namespace

void write_checkpoint(const std::string& path, const NamedTensors& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, sizeof kMagic);
  for (const auto& [name, tensor] : params) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t e : tensor.shape()) put_u32(os, static_cast<std::uint32_t>(e));
    const auto& d = tensor.data();
    os.write(reinterpret_cast<const char*>(d.data()),
             static_cast<std::streamsize>(d.size() * sizeof(double)));
  }
  if (!os) throw IoError("checkpoint: write failed for " + path);
}

NamedTensors read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  char magic[8] = {};
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw FormatError("checkpoint " + path + ": bad magic at offset 0");
  std::size_t offset = sizeof kMagic;

  NamedTensors out;
  while (true) {
    is.peek();
    if (is.eof()) break;
    const std::uint32_t name_len = get_u32(is, offset, path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is)
      throw FormatError("checkpoint " + path + ": truncated name at offset " +
                        std::to_string(offset));
    offset += name_len;
    const std::uint32_t rank = get_u32(is, offset, path);
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) shape[i] = get_u32(is, offset, path);
    std::vector<double> values(shape_size(shape));
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!is)
      throw FormatError("checkpoint " + path + ": truncated data for \"" + name +
                        "\" at offset " + std::to_string(offset));
    offset += values.size() * sizeof(double);
    out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  return out;
}

void load_checkpoint_into(const std::string& path, NamedTensors& params) {
  NamedTensors stored = read_checkpoint(path);
  for (auto& [name, dest] : params) {
    bool found = false;
    for (const auto& [sname, src] : stored) {
      if (sname != name) continue;
      if (src.shape() != dest.shape())
        throw FormatError("checkpoint " + path + ": \"" + name + "\" has shape " +
                          shape_str(src.shape()) + ", expected " + shape_str(dest.shape()));
      dest.data() = src.data();
      found = true;
      break;
    }
    if (!found) throw FormatError("checkpoint " + path + ": missing parameter \"" + name + "\"");
  }
}

}  // namespace lamoe
