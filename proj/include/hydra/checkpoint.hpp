#pragma once

// Lossless text checkpoints for adapters and auxiliary tensors.
//
//   HYDRA-PEFT-CHECKPOINT
//   version 1
//   seed <u64>
//   meta <key> <value>                      zero or more
//   adapter <name> <lora|split|hydra>       zero or more blocks
//   alpha <f64>
//   routing <sum|task>                      split only
//   tensor <tname> <rows> <cols> <f64...>   per adapter tensor
//   end
//   tensor <name> <rows> <cols> <f64...>    zero or more free tensors
//
// Every <f64> is 16 lowercase hex digits: the 8 bytes of the IEEE-754 value
// in little-endian order. Tensor payloads are row-major with no separators.
// Lines end with '\n'.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hydra/adapters.hpp"
#include "hydra/errors.hpp"

namespace hydra {

inline constexpr int kCheckpointVersion = 1;

class VersionError : public ParseError {
 public:
  VersionError(const std::string& what, std::size_t position, int found)
      : ParseError(what, position), found_(found) {}
  int found() const noexcept { return found_; }

 private:
  int found_;
};

struct Checkpoint {
  std::uint64_t seed = 0;
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Adapter>> adapters;
  std::vector<std::pair<std::string, Matrix>> tensors;

  const Adapter* find_adapter(std::string_view name) const;
  const Matrix* find_tensor(std::string_view name) const;
};

std::string encode_f64(double v);
double decode_f64(std::string_view hex, std::size_t offset);

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view text);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace hydra
