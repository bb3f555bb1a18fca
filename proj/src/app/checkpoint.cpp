#include <fstream>
#include <map>
#include <sstream>

#include "dfx/app.hpp"
#include "dfx/serialize.hpp"

namespace dfx {

namespace {

// state.dfxc: "DFXC" | version u16 | count u32 | entries, each
//   tag u8 | tensor index u32 | blob length u64 | DFXT blob
constexpr char kMagic[4] = {'D', 'F', 'X', 'C'};
constexpr std::uint16_t kContainerVersion = 1;
constexpr std::uint8_t kTagMaster = 1;
constexpr std::uint8_t kTagVelocity = 2;

template <typename T>
void put(std::ostream& os, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) os.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <typename T>
T get(std::istream& is) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = is.get();
    if (c == EOF) throw DfxError(ErrorCode::kMalformedFile, "truncated checkpoint container");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<T>(v);
}

std::string floats(const std::vector<float>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt9(v[i]);
  return s;
}

std::vector<float> parse_floats(const std::string& s) {
  std::vector<float> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stof(item));
  return out;
}

std::map<std::string, std::string> read_manifest(const std::filesystem::path& path, std::string& config_text) {
  std::ifstream in(path);
  if (!in) throw DfxError(ErrorCode::kMalformedFile, "cannot open " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    if (line.empty() || line[0] == '#') continue;
    if (eq == std::string::npos) throw DfxError(ErrorCode::kMalformedFile, "bad manifest line: " + line);
    const std::string key = line.substr(0, eq), value = line.substr(eq + 3);
    if (key.rfind("config.", 0) == 0)
      config_text += key.substr(7) + " = " + value + "\n";
    else
      kv[key] = value;
  }
  return kv;
}

const std::string& field(const std::map<std::string, std::string>& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw DfxError(ErrorCode::kMalformedFile, "manifest lacks " + key);
  return it->second;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream m(dir / "manifest.txt");
    m << "format = dfx-checkpoint\n"
      << "optimizer_state_version = " << kOptimizerStateVersion << "\n"
      << "steps = " << ckpt.state.steps << "\n"
      << "tensors = " << ckpt.state.master.size() << "\n"
      << "lr = " << ckpt.state.lr.mant << "," << ckpt.state.lr.exp << "\n"
      << "momentum = " << ckpt.state.momentum.mant << "," << ckpt.state.momentum.exp << "\n"
      << "weight_decay = " << ckpt.state.weight_decay.mant << "," << ckpt.state.weight_decay.exp << "\n"
      << "norm_layers = " << ckpt.stats.layers.size() << "\n";
    for (std::size_t i = 0; i < ckpt.stats.layers.size(); ++i) {
      m << "norm" << i << ".mean = " << floats(ckpt.stats.layers[i].mean) << "\n";
      m << "norm" << i << ".var = " << floats(ckpt.stats.layers[i].var) << "\n";
    }
    std::istringstream cfg(format_run_config(ckpt.config));
    std::string line;
    while (std::getline(cfg, line)) m << "config." << line << "\n";
    if (!m) throw DfxError(ErrorCode::kMalformedFile, "failed writing manifest in " + dir.string());
  }
  std::ofstream os(dir / "state.dfxc", std::ios::binary);
  os.write(kMagic, 4);
  put<std::uint16_t>(os, kContainerVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(2 * ckpt.state.master.size()));
  auto entry = [&](std::uint8_t tag, std::size_t index, const Fxp16& t) {
    std::ostringstream blob;
    write_dfxt(blob, t);
    const std::string bytes = blob.str();
    put<std::uint8_t>(os, tag);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(index));
    put<std::uint64_t>(os, bytes.size());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  };
  for (std::size_t i = 0; i < ckpt.state.master.size(); ++i) entry(kTagMaster, i, ckpt.state.master[i]);
  for (std::size_t i = 0; i < ckpt.state.velocity.size(); ++i) entry(kTagVelocity, i, ckpt.state.velocity[i]);
  if (!os) throw DfxError(ErrorCode::kMalformedFile, "failed writing state in " + dir.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::string config_text;
  const auto kv = read_manifest(dir / "manifest.txt", config_text);
  if (field(kv, "format") != "dfx-checkpoint") throw DfxError(ErrorCode::kMalformedFile, "not a checkpoint manifest");
  if (std::stoul(field(kv, "optimizer_state_version")) != kOptimizerStateVersion)
    throw DfxError(ErrorCode::kMalformedFile, "unsupported optimizer state version");

  Checkpoint ck;
  std::istringstream cfg(config_text);
  ck.config = parse_run_config(cfg);
  ck.state.steps = std::stoull(field(kv, "steps"));
  auto scalar = [&](const std::string& key) {
    const std::string& v = field(kv, key);
    const auto comma = v.find(',');
    return Wide{std::stoll(v.substr(0, comma)), std::stoi(v.substr(comma + 1))};
  };
  ck.state.lr = scalar("lr");
  ck.state.momentum = scalar("momentum");
  ck.state.weight_decay = scalar("weight_decay");
  const std::size_t norms = std::stoul(field(kv, "norm_layers"));
  for (std::size_t i = 0; i < norms; ++i)
    ck.stats.layers.push_back(NormStats::Channel{parse_floats(field(kv, "norm" + std::to_string(i) + ".mean")),
                                                 parse_floats(field(kv, "norm" + std::to_string(i) + ".var"))});

  const std::size_t n = std::stoul(field(kv, "tensors"));
  ck.state.master.resize(n);
  ck.state.velocity.resize(n);
  std::ifstream is(dir / "state.dfxc", std::ios::binary);
  if (!is) throw DfxError(ErrorCode::kMalformedFile, "cannot open " + (dir / "state.dfxc").string());
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != std::string(kMagic, 4))
    throw DfxError(ErrorCode::kMalformedFile, "bad checkpoint container magic");
  if (get<std::uint16_t>(is) != kContainerVersion) throw DfxError(ErrorCode::kMalformedFile, "bad container version");
  const auto count = get<std::uint32_t>(is);
  if (count != 2 * n) throw DfxError(ErrorCode::kMalformedFile, "container entry count does not match manifest");
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto tag = get<std::uint8_t>(is);
    const auto index = get<std::uint32_t>(is);
    const auto len = get<std::uint64_t>(is);
    if (index >= n || (tag != kTagMaster && tag != kTagVelocity))
      throw DfxError(ErrorCode::kMalformedFile, "bad container entry");
    std::string bytes(len, '\0');
    if (!is.read(bytes.data(), static_cast<std::streamsize>(len)))
      throw DfxError(ErrorCode::kMalformedFile, "truncated container entry");
    std::istringstream blob(bytes);
    (tag == kTagMaster ? ck.state.master : ck.state.velocity)[index] = read_dfxt<std::int16_t>(blob);
  }
  return ck;
}

}  // namespace dfx
