#include "mocaps/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <vector>

namespace mocaps::model {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint codec writes host byte order and assumes it is "
              "little-endian");

constexpr char kMagic[4] = {'M', 'O', 'C', 'P'};
// Sanity bounds so a corrupt header cannot demand a huge allocation.
constexpr uint32_t kMaxNameLen = 4096;
constexpr uint32_t kMaxRank = 32;

void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

bool read_exact(std::istream& is, void* buf, size_t n) {
  is.read(reinterpret_cast<char*>(buf), static_cast<std::streamsize>(n));
  return static_cast<size_t>(is.gcount()) == n;
}

}  // namespace

void checkpoint_save(const ModelParams& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os)
    throw CheckpointError("cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  write_u32(os, kCheckpointVersion);
  for (const auto& [name, t] : params.values) {
    if (name.empty() || name.size() > kMaxNameLen)
      throw CheckpointError("parameter name '" + name +
                            "' is not serializable");
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) {
      if (t.dim(i) > std::numeric_limits<uint32_t>::max())
        throw CheckpointError("parameter '" + name + "' dimension too large");
      write_u32(os, static_cast<uint32_t>(t.dim(i)));
    }
    Tensor t64 = t.dtype() == DType::kF64 ? t : t.astype(DType::kF64);
    os.write(reinterpret_cast<const char*>(t64.data<double>()),
             static_cast<std::streamsize>(t64.size()) * 8);
  }
  os.close();
  if (!os)
    throw CheckpointError("write to '" + path + "' failed");
}

ModelParams checkpoint_load(const std::string& path, DType dtype) {
  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw CheckpointError("cannot open checkpoint '" + path + "'");
  char magic[4];
  if (!read_exact(is, magic, 4))
    throw CheckpointError("'" + path + "' is truncated before the magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw CheckpointError("'" + path + "' is not a checkpoint (bad magic)");
  uint32_t version = 0;
  if (!read_exact(is, &version, 4))
    throw CheckpointError("'" + path + "' is truncated before the version");
  if (version != kCheckpointVersion)
    throw CheckpointError(
        "checkpoint version " + std::to_string(version) +
        " is not supported (this build reads version " +
        std::to_string(kCheckpointVersion) + ")");

  bench::MemSiteScope site(bench::MemSite::kParameter);
  ModelParams params;
  for (;;) {
    uint32_t name_len = 0;
    is.read(reinterpret_cast<char*>(&name_len), 4);
    if (is.gcount() == 0) break;  // clean end at a record boundary
    if (is.gcount() < 4)
      throw CheckpointError("'" + path + "' ends mid-record (name length)");
    if (name_len == 0 || name_len > kMaxNameLen)
      throw CheckpointError("'" + path + "' has an implausible name length " +
                            std::to_string(name_len));
    std::string name(name_len, '\0');
    if (!read_exact(is, name.data(), name_len))
      throw CheckpointError("'" + path + "' ends mid-record (name)");
    uint32_t rank = 0;
    if (!read_exact(is, &rank, 4))
      throw CheckpointError("'" + path + "' ends mid-record (rank of '" +
                            name + "')");
    if (rank > kMaxRank)
      throw CheckpointError("'" + path + "' has an implausible rank " +
                            std::to_string(rank) + " for '" + name + "'");
    std::vector<int64_t> shape(rank);
    for (uint32_t i = 0; i < rank; ++i) {
      uint32_t dim = 0;
      if (!read_exact(is, &dim, 4))
        throw CheckpointError("'" + path + "' ends mid-record (dims of '" +
                              name + "')");
      shape[i] = dim;
    }
    Tensor t64(shape, DType::kF64);
    if (!read_exact(is, t64.mutable_data<double>(),
                    static_cast<size_t>(t64.size()) * 8))
      throw CheckpointError("'" + path + "' ends mid-record (payload of '" +
                            name + "')");
    if (params.values.count(name))
      throw CheckpointError("'" + path + "' repeats parameter '" + name +
                            "'");
    params.values[name] =
        dtype == DType::kF64 ? std::move(t64) : t64.astype(dtype);
  }
  return params;
}

}  // namespace mocaps::model
