#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ilora/adapter.hpp"
#include "ilora/base64.hpp"
#include "ilora/error.hpp"

namespace ilora {

// Checkpoint file:
//   {"version": 1,
//    "config": {"h", "d", "r", "n", "alpha", "dropout_p"},
//    "tensors": [{"name", "rows", "cols", "data_b64"}, ...]}
// Tensor names are "W0", "A", "B.0" .. "B.{n-1}", "Wr". data_b64 holds the
// row-major entries as little-endian IEEE-754 binary64.
inline constexpr int kCheckpointVersion = 1;

enum class CheckpointErrc { io, malformed, version_mismatch, shape_mismatch, corrupt_base64 };

inline const char* to_string(CheckpointErrc c) noexcept {
  switch (c) {
    case CheckpointErrc::io: return "io";
    case CheckpointErrc::malformed: return "malformed";
    case CheckpointErrc::version_mismatch: return "version_mismatch";
    case CheckpointErrc::shape_mismatch: return "shape_mismatch";
    case CheckpointErrc::corrupt_base64: return "corrupt_base64";
  }
  return "malformed";
}

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrc code, const std::string& what)
      : std::runtime_error(std::string("checkpoint ") + to_string(code) + ": " + what),
        code_(code) {}
  CheckpointErrc code() const noexcept { return code_; }

 private:
  CheckpointErrc code_;
};

namespace detail {

inline std::string encode_tensor(const Matrix& m) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(m.size() * 8);
  for (double v : m.data()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int k = 0; k < 8; ++k) bytes.push_back(static_cast<std::uint8_t>(bits >> (8 * k)));
  }
  return base64::encode(bytes);
}

inline Matrix decode_tensor(const std::string& name, std::size_t rows, std::size_t cols,
                            const std::string& b64) {
  auto bytes = base64::decode(b64);
  if (!bytes) throw CheckpointError(CheckpointErrc::corrupt_base64, "tensor " + name);
  if (bytes->size() != rows * cols * 8) {
    throw CheckpointError(CheckpointErrc::shape_mismatch,
                          "tensor " + name + " declares " + Matrix::shape_string(rows, cols) +
                              " but holds " + std::to_string(bytes->size()) + " bytes");
  }
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) {
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) bits |= std::uint64_t{(*bytes)[i * 8 + k]} << (8 * k);
    m[i] = std::bit_cast<double>(bits);
  }
  return m;
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const ILoRALayer& layer) {
  const auto& c = layer.config;
  nlohmann::json j;
  j["version"] = kCheckpointVersion;
  j["config"] = {{"h", c.h}, {"d", c.d}, {"r", c.r}, {"n", c.n}, {"alpha", c.alpha},
                 {"dropout_p", c.dropout_p}};
  auto tensors = nlohmann::json::array();
  auto add = [&](const std::string& name, const Matrix& m) {
    tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()},
                       {"data_b64", detail::encode_tensor(m)}});
  };
  add("W0", layer.W0);
  add("A", layer.A);
  for (std::size_t i = 0; i < layer.B.size(); ++i) add("B." + std::to_string(i), layer.B[i]);
  add("Wr", layer.Wr);
  j["tensors"] = std::move(tensors);
  return j;
}

inline ILoRALayer checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object() || !j.contains("version")) {
      throw CheckpointError(CheckpointErrc::malformed, "missing version field");
    }
    if (!j.at("version").is_number_integer() || j.at("version").get<int>() != kCheckpointVersion) {
      throw CheckpointError(CheckpointErrc::version_mismatch,
                            "expected version " + std::to_string(kCheckpointVersion) + ", found " +
                                j.at("version").dump());
    }
    const auto& jc = j.at("config");
    ILoRAConfig c;
    c.h = jc.at("h").get<std::size_t>();
    c.d = jc.at("d").get<std::size_t>();
    c.r = jc.at("r").get<std::size_t>();
    c.n = jc.at("n").get<std::size_t>();
    c.alpha = jc.at("alpha").get<double>();
    c.dropout_p = jc.at("dropout_p").get<double>();
    try {
      c.validate();
    } catch (const ValidationError& e) {
      throw CheckpointError(CheckpointErrc::malformed, e.what());
    }

    ILoRALayer layer;
    layer.config = c;
    layer.B.resize(c.n);
    std::vector<bool> seen(c.n + 3, false);
    for (const auto& t : j.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto rows = t.at("rows").get<std::size_t>();
      const auto cols = t.at("cols").get<std::size_t>();
      std::size_t er = 0, ec = 0, slot = 0;
      Matrix* target = nullptr;
      if (name == "W0") {
        er = c.d, ec = c.h, slot = 0, target = &layer.W0;
      } else if (name == "A") {
        er = c.r, ec = c.h, slot = 1, target = &layer.A;
      } else if (name == "Wr") {
        er = c.n, ec = c.r, slot = 2, target = &layer.Wr;
      } else if (name.rfind("B.", 0) == 0) {
        std::size_t idx = 0;
        try {
          std::size_t used = 0;
          idx = std::stoul(name.substr(2), &used);
          if (used != name.size() - 2) throw std::invalid_argument(name);
        } catch (const std::exception&) {
          throw CheckpointError(CheckpointErrc::malformed, "bad tensor name " + name);
        }
        if (idx >= c.n) {
          throw CheckpointError(CheckpointErrc::shape_mismatch,
                                "head " + name + " exceeds n=" + std::to_string(c.n));
        }
        er = c.d, ec = c.r, slot = 3 + idx, target = &layer.B[idx];
      } else {
        throw CheckpointError(CheckpointErrc::malformed, "unknown tensor " + name);
      }
      if (rows != er || cols != ec) {
        throw CheckpointError(CheckpointErrc::shape_mismatch,
                              "tensor " + name + " is " + Matrix::shape_string(rows, cols) +
                                  ", config requires " + Matrix::shape_string(er, ec));
      }
      if (seen[slot]) throw CheckpointError(CheckpointErrc::malformed, "duplicate tensor " + name);
      seen[slot] = true;
      *target = detail::decode_tensor(name, rows, cols, t.at("data_b64").get<std::string>());
    }
    for (std::size_t s = 0; s < seen.size(); ++s) {
      if (!seen[s]) throw CheckpointError(CheckpointErrc::malformed, "missing tensor(s)");
    }
    return layer;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointErrc::malformed, e.what());
  }
}

inline void save_checkpoint(const ILoRALayer& layer, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointErrc::io, "cannot open " + path.string());
  out << checkpoint_to_json(layer).dump(2) << '\n';
  if (!out) throw CheckpointError(CheckpointErrc::io, "write failed for " + path.string());
}

inline ILoRALayer load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrc::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointErrc::malformed, e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace ilora
