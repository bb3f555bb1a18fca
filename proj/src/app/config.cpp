#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "dfx/app.hpp"

namespace dfx {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void invalid(const std::string& key, const std::string& value, const std::string& why) {
  throw DfxError(ErrorCode::kConfigInvalid, key + " = '" + value + "': " + why);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) invalid(key, v, "not a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  invalid(key, v, "expected true or false");
}

RoundingMode parse_mode(const std::string& key, const std::string& v) {
  try {
    return parse_rounding_mode(v);
  } catch (const DfxError&) {
    invalid(key, v, "expected nearest or stochastic");
  }
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<int>(key, item));
  }
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"model", [](RunConfig& c, const std::string&, const std::string& v) { c.model = v; }},
      {"dataset", [](RunConfig& c, const std::string&, const std::string& v) { c.dataset = v; }},
      {"data_dir", [](RunConfig& c, const std::string&, const std::string& v) { c.data_dir = v; }},
      {"hidden", [](RunConfig& c, const std::string& k, const std::string& v) { c.hidden = parse_number<Index>(k, v); }},
      {"bit_width", [](RunConfig& c, const std::string& k, const std::string& v) { c.bit_width = parse_number<int>(k, v); }},
      {"forward_rounding", [](RunConfig& c, const std::string& k, const std::string& v) { c.forward_rounding = parse_mode(k, v); }},
      {"backward_rounding", [](RunConfig& c, const std::string& k, const std::string& v) { c.backward_rounding = parse_mode(k, v); }},
      {"update_rounding", [](RunConfig& c, const std::string& k, const std::string& v) { c.update_rounding = parse_mode(k, v); }},
      {"seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.seed = parse_number<std::uint64_t>(k, v); }},
      {"epochs", [](RunConfig& c, const std::string& k, const std::string& v) { c.epochs = parse_number<int>(k, v); }},
      {"batch_size", [](RunConfig& c, const std::string& k, const std::string& v) { c.batch_size = parse_number<Index>(k, v); }},
      {"lr", [](RunConfig& c, const std::string& k, const std::string& v) { c.lr = parse_number<float>(k, v); }},
      {"lr_drops", [](RunConfig& c, const std::string& k, const std::string& v) { c.lr_drops = parse_int_list(k, v); }},
      {"momentum", [](RunConfig& c, const std::string& k, const std::string& v) { c.momentum = parse_number<float>(k, v); }},
      {"weight_decay", [](RunConfig& c, const std::string& k, const std::string& v) { c.weight_decay = parse_number<float>(k, v); }},
      {"out_dir", [](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; }},
      {"paired", [](RunConfig& c, const std::string& k, const std::string& v) { c.paired = parse_bool(k, v); }},
      {"checkpoint", [](RunConfig& c, const std::string& k, const std::string& v) { c.checkpoint = parse_bool(k, v); }},
      {"synthetic_classes", [](RunConfig& c, const std::string& k, const std::string& v) { c.synthetic_classes = parse_number<Index>(k, v); }},
      {"synthetic_train", [](RunConfig& c, const std::string& k, const std::string& v) { c.synthetic_train = parse_number<Index>(k, v); }},
      {"synthetic_test", [](RunConfig& c, const std::string& k, const std::string& v) { c.synthetic_test = parse_number<Index>(k, v); }},
      {"synthetic_margin", [](RunConfig& c, const std::string& k, const std::string& v) { c.synthetic_margin = parse_number<float>(k, v); }},
      {"synthetic_noise", [](RunConfig& c, const std::string& k, const std::string& v) { c.synthetic_noise = parse_number<float>(k, v); }},
      {"divergence_loss", [](RunConfig& c, const std::string& k, const std::string& v) { c.divergence_loss = parse_number<double>(k, v); }},
      {"divergence_patience", [](RunConfig& c, const std::string& k, const std::string& v) { c.divergence_patience = parse_number<int>(k, v); }},
  };
  return table;
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

std::string fmt9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

RunConfig parse_run_config(std::istream& is) {
  RunConfig c;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw DfxError(ErrorCode::kConfigInvalid, "line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) throw DfxError(ErrorCode::kConfigInvalid, "unknown key '" + key + "'");
    it->second(c, key, value);
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DfxError(ErrorCode::kConfigInvalid, "cannot open config " + path.string());
  return parse_run_config(in);
}

void apply_environment(RunConfig& config) {
  if (const char* s = std::getenv("DFX_SEED"); s && *s) config.seed = parse_number<std::uint64_t>("DFX_SEED", s);
  if (const char* o = std::getenv("DFX_OUT"); o && *o) config.out_dir = o;
}

void validate(const RunConfig& c) {
  auto require = [](bool ok, const std::string& key, const std::string& why) {
    if (!ok) throw DfxError(ErrorCode::kConfigInvalid, key + ": " + why);
  };
  require(c.model == "mlp" || c.model == "cnn", "model", "expected mlp or cnn");
  require(c.dataset == "synthetic" || c.dataset == "idx", "dataset", "expected synthetic or idx");
  require(c.dataset != "idx" || !c.data_dir.empty(), "data_dir", "required for idx datasets");
  require(c.hidden >= 1, "hidden", "must be positive");
  require(c.bit_width >= kMinBitWidth && c.bit_width <= kMaxBitWidth, "bit_width", "must be in [4, 8]");
  require(c.epochs >= 1, "epochs", "must be positive");
  require(c.batch_size >= 2, "batch_size", "must be at least 2");
  require(std::isfinite(c.lr) && c.lr > 0.0f, "lr", "must be positive");
  require(std::isfinite(c.momentum) && c.momentum >= 0.0f && c.momentum < 1.0f, "momentum", "must be in [0, 1)");
  require(std::isfinite(c.weight_decay) && c.weight_decay >= 0.0f, "weight_decay", "must be >= 0");
  for (int d : c.lr_drops) require(d >= 1, "lr_drops", "epochs must be >= 1");
  require(!c.out_dir.empty(), "out_dir", "must not be empty");
  require(c.synthetic_classes >= 2, "synthetic_classes", "need at least 2 classes");
  require(c.synthetic_train >= c.batch_size, "synthetic_train", "smaller than one batch");
  require(c.synthetic_test >= 1, "synthetic_test", "must be positive");
  require(std::isfinite(c.synthetic_margin) && c.synthetic_margin > 0.0f, "synthetic_margin", "must be positive");
  require(std::isfinite(c.synthetic_noise) && c.synthetic_noise > 0.0f, "synthetic_noise", "must be positive");
  require(c.divergence_loss > 0.0, "divergence_loss", "must be positive");
  require(c.divergence_patience >= 1, "divergence_patience", "must be positive");
}

std::string format_run_config(const RunConfig& c) {
  std::ostringstream os;
  os << "model = " << c.model << "\n"
     << "dataset = " << c.dataset << "\n"
     << "data_dir = " << c.data_dir << "\n"
     << "hidden = " << c.hidden << "\n"
     << "bit_width = " << c.bit_width << "\n"
     << "forward_rounding = " << to_string(c.forward_rounding) << "\n"
     << "backward_rounding = " << to_string(c.backward_rounding) << "\n"
     << "update_rounding = " << to_string(c.update_rounding) << "\n"
     << "seed = " << c.seed << "\n"
     << "epochs = " << c.epochs << "\n"
     << "batch_size = " << c.batch_size << "\n"
     << "lr = " << fmt9(c.lr) << "\n"
     << "lr_drops = " << join(c.lr_drops) << "\n"
     << "momentum = " << fmt9(c.momentum) << "\n"
     << "weight_decay = " << fmt9(c.weight_decay) << "\n"
     << "out_dir = " << c.out_dir.string() << "\n"
     << "paired = " << (c.paired ? "true" : "false") << "\n"
     << "checkpoint = " << (c.checkpoint ? "true" : "false") << "\n"
     << "synthetic_classes = " << c.synthetic_classes << "\n"
     << "synthetic_train = " << c.synthetic_train << "\n"
     << "synthetic_test = " << c.synthetic_test << "\n"
     << "synthetic_margin = " << fmt9(c.synthetic_margin) << "\n"
     << "synthetic_noise = " << fmt9(c.synthetic_noise) << "\n"
     << "divergence_loss = " << fmt9(c.divergence_loss) << "\n"
     << "divergence_patience = " << c.divergence_patience << "\n";
  return os.str();
}

ModelConfig model_config(const RunConfig& c, const Shape& sample_shape, Index classes) {
  ModelConfig m;
  if (c.model == "mlp") {
    m = mlp_preset(numel(sample_shape), c.hidden, classes);
  } else {
    if (sample_shape.size() != 3) throw DfxError(ErrorCode::kConfigInvalid, "cnn needs CHW samples");
    m = cnn_preset(sample_shape[0], sample_shape[1], sample_shape[2], classes);
  }
  m.bit_width = c.bit_width;
  m.forward_mode = c.forward_rounding;
  m.backward_mode = c.backward_rounding;
  m.seed = c.seed;
  return m;
}

}  // namespace dfx
