// SPDX-License-Identifier: Apache-2.0
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "switchsim/cli.hpp"
#include "switchsim/errors.hpp"

namespace switchsim {

namespace {

using json = nlohmann::json;

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(std::string_view in, std::size_t at) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

std::vector<std::pair<std::string, Tensor*>> all_tensors(ToyModel& model, AdamState& adam) {
  auto out = model.named_params();
  for (auto& [n, t] : adam.m.named_params()) out.emplace_back("adam.m." + n, t);
  for (auto& [n, t] : adam.v.named_params()) out.emplace_back("adam.v." + n, t);
  return out;
}

}  // namespace

Checkpoint make_checkpoint(const ExperimentConfig& cfg, const Trainer& trainer) {
  Checkpoint ck;
  ck.config = cfg;
  ck.step = trainer.current_step();
  ck.rng_seed = trainer.seed();
  ck.model = trainer.model();
  ck.adam = trainer.optimizer();
  return ck;
}

std::string encode_checkpoint(const Checkpoint& ck_in) {
  Checkpoint ck = ck_in;
  json header;
  header["format"] = "switchsim-checkpoint";
  header["config"] = serialize_config(ck.config);
  header["step"] = ck.step;
  header["rng"] = {{"kind", "counter"}, {"seed", ck.rng_seed}, {"next_step", ck.step}};
  header["adam_t"] = ck.adam.t;
  json records = json::array();
  std::string payload;
  for (const auto& [name, t] : all_tensors(ck.model, ck.adam)) {
    records.push_back({{"name", name}, {"shape", t->shape()}, {"dtype", "f32"}, {"bytes", t->size() * 4}});
    for (float v : t->storage()) put_le(payload, std::bit_cast<std::uint32_t>(v));
  }
  header["tensors"] = std::move(records);
  const std::string text = header.dump();
  std::string out(kCheckpointMagic, 4);
  put_le<std::uint32_t>(out, ck.version);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  out += payload;
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  constexpr std::size_t preamble = 16;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw CorruptionError("checkpoint: missing SWCK magic", 0);
  if (bytes.size() < 8) throw CorruptionError("checkpoint: truncated before the version field", bytes.size());
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion)
    throw UnsupportedVersion("checkpoint: format version " + std::to_string(version) + " is not supported (expected " +
                             std::to_string(kCheckpointVersion) + ")");
  if (bytes.size() < preamble) throw CorruptionError("checkpoint: truncated before the header length", bytes.size());
  const auto header_len = get_le<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - preamble) throw CorruptionError("checkpoint: header runs past end of file", bytes.size());

  json header;
  try {
    header = json::parse(bytes.substr(preamble, header_len));
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("checkpoint: malformed header: ") + e.what(), preamble);
  }

  Checkpoint ck;
  ck.version = version;
  try {
    ck.config = parse_config_text(header.at("config").get<std::string>());
    ck.step = header.at("step").get<int>();
    ck.rng_seed = header.at("rng").at("seed").get<std::uint64_t>();
    ck.adam.t = header.at("adam_t").get<std::int64_t>();
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("checkpoint: bad header field: ") + e.what(), preamble);
  } catch (const InvalidArgument& e) {
    throw CorruptionError(std::string("checkpoint: bad config snapshot: ") + e.what(), preamble);
  }
  if (ck.step < 0) throw CorruptionError("checkpoint: negative step", preamble);

  ck.model = init_model(ck.config.model, RngStream(0));
  ck.adam.m = ck.model.zeros_like();
  ck.adam.v = ck.model.zeros_like();
  std::map<std::string, Tensor*> expected;
  for (auto& [n, t] : all_tensors(ck.model, ck.adam)) expected.emplace(n, t);

  std::size_t at = preamble + header_len;
  const json* records = nullptr;
  try {
    records = &header.at("tensors");
  } catch (const json::exception&) {
    throw CorruptionError("checkpoint: header has no tensor table", preamble);
  }
  for (const auto& rec : *records) {
    std::string name;
    Shape shape;
    try {
      name = rec.at("name").get<std::string>();
      shape = rec.at("shape").get<Shape>();
      if (rec.at("dtype").get<std::string>() != "f32")
        throw CorruptionError("checkpoint: tensor '" + name + "' has unsupported dtype", preamble);
    } catch (const json::exception& e) {
      throw CorruptionError(std::string("checkpoint: bad tensor record: ") + e.what(), preamble);
    }
    const auto it = expected.find(name);
    if (it == expected.end()) throw CorruptionError("checkpoint: unknown tensor '" + name + "'", at);
    Tensor& t = *it->second;
    if (shape != t.shape())
      throw CorruptionError("checkpoint: tensor '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                                shape_str(t.shape()),
                            at);
    const std::size_t need = t.size() * 4;
    if (bytes.size() - at < need) throw CorruptionError("checkpoint: payload of '" + name + "' is truncated", bytes.size());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, at + 4 * i));
    at += need;
    expected.erase(it);
  }
  if (!expected.empty()) throw CorruptionError("checkpoint: tensor '" + expected.begin()->first + "' is missing", at);
  if (at != bytes.size()) throw CorruptionError("checkpoint: unexpected trailing bytes", at);
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const std::string bytes = encode_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidArgument("cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InvalidArgument("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot read checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace switchsim
