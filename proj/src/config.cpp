#include "xda/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "xda/errors.hpp"

namespace xda {

namespace {

struct Field {
  std::string section;
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

std::string format_real(Real v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc{} || r.ptr != text.data() + text.size())
    throw FormatError("config: '" + key + "' expects a number, got '" + text + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "on") return true;
  if (text == "false" || text == "0" || text == "off") return false;
  throw FormatError("config: '" + key + "' expects true/false, got '" + text + "'");
}

std::vector<Field> fields(TrainConfig& c) {
  std::vector<Field> out;
  auto real = [&out](std::string s, std::string k, Real& v) {
    const std::string name = s + "." + k;
    out.push_back({s, k, [&v] { return format_real(v); }, [&v, name](const std::string& t) { v = parse_number<Real>(name, t); }});
  };
  auto size = [&out](std::string s, std::string k, std::size_t& v) {
    const std::string name = s + "." + k;
    out.push_back({s, k, [&v] { return std::to_string(v); },
                   [&v, name](const std::string& t) { v = parse_number<std::size_t>(name, t); }});
  };
  auto integer = [&out](std::string s, std::string k, int& v) {
    const std::string name = s + "." + k;
    out.push_back({s, k, [&v] { return std::to_string(v); }, [&v, name](const std::string& t) { v = parse_number<int>(name, t); }});
  };
  auto flag = [&out](std::string s, std::string k, bool& v) {
    const std::string name = s + "." + k;
    out.push_back({s, k, [&v] { return std::string(v ? "true" : "false"); },
                   [&v, name](const std::string& t) { v = parse_bool(name, t); }});
  };

  size("model", "height", c.model.height);
  size("model", "width", c.model.width);
  size("model", "patch", c.model.patch);
  size("model", "embed", c.model.embed);
  size("model", "layers", c.model.layers);
  size("model", "heads", c.model.heads);
  size("model", "classes", c.model.classes);
  size("model", "mlp_ratio", c.model.mlp_ratio);

  size("data", "height", c.data.height);
  size("data", "width", c.data.width);
  integer("data", "min_shapes", c.data.min_shapes);
  integer("data", "max_shapes", c.data.max_shapes);
  real("data", "prior_circle", c.data.shape_prior[0]);
  real("data", "prior_rectangle", c.data.shape_prior[1]);
  real("data", "prior_triangle", c.data.shape_prior[2]);
  real("data", "min_size", c.data.min_size);
  real("data", "max_size", c.data.max_size);
  real("data", "hue_jitter", c.data.hue_jitter);
  real("data", "color_tie", c.data.color_tie);
  real("data", "shift_hue", c.data.shift.hue_degrees);
  real("data", "shift_noise", c.data.shift.noise_sigma);
  integer("data", "shift_blur", c.data.shift.blur_width);
  real("data", "shift_gain", c.data.shift.gain);
  size("data", "source_train", c.splits.source_train);
  size("data", "target_train", c.splits.target_train);
  size("data", "target_eval", c.splits.target_eval);

  size("train", "iterations", c.iterations);
  size("train", "batch_size", c.batch_size);
  real("train", "lr", c.lr);
  real("train", "encoder_lr", c.encoder_lr);
  real("train", "weight_decay", c.weight_decay);
  real("train", "beta1", c.beta1);
  real("train", "beta2", c.beta2);
  real("train", "adam_eps", c.adam_eps);
  size("train", "warmup", c.warmup);
  real("train", "poly_power", c.poly_power);
  real("train", "ema_alpha", c.ema_alpha);
  real("train", "tau", c.tau);
  {
    auto& v = c.seed;
    out.push_back({"train", "seed", [&v] { return std::to_string(v); },
                   [&v](const std::string& t) { v = parse_number<std::uint64_t>("train.seed", t); }});
  }
  size("train", "eval_every", c.eval_every);
  flag("train", "target_labels", c.target_labels);

  flag("losses", "sup", c.losses.sup);
  flag("losses", "tgt", c.losses.tgt);
  flag("losses", "t2s", c.losses.t2s);
  flag("losses", "s2t", c.losses.s2t);
  flag("losses", "attn", c.losses.attn);
  flag("losses", "stop_query_grad", c.losses.stop_query_grad);
  real("losses", "lambda_attn", c.lambda_attn);
  {
    auto& v = c.perturbation;
    out.push_back({"losses", "perturbation", [&v] { return to_string(v); },
                   [&v](const std::string& t) { v = parse_perturbation(t); }});
  }
  size("losses", "noise_h", c.noise_h);
  size("losses", "noise_w", c.noise_w);
  return out;
}

}  // namespace

std::string to_string(PerturbationMode m) {
  switch (m) {
    case PerturbationMode::random: return "random";
    case PerturbationMode::uniform: return "uniform";
    default: return "none";
  }
}

PerturbationMode parse_perturbation(const std::string& s) {
  if (s == "none") return PerturbationMode::none;
  if (s == "random") return PerturbationMode::random;
  if (s == "uniform") return PerturbationMode::uniform;
  throw FormatError("config: unknown perturbation mode '" + s + "'");
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ContractError("train config: " + what); };
  model.validate();
  data.validate();
  if (model.height != data.height || model.width != data.width) fail("model and data image sizes differ");
  if (model.classes != data.classes) fail("model and data class counts differ");
  for (Real r : {lr, encoder_lr, weight_decay, lambda_attn, adam_eps, poly_power})
    if (!(r >= 0 && std::isfinite(r))) fail("rates must be finite and >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("adam betas must be in [0, 1)");
  if (!(ema_alpha >= 0 && ema_alpha <= 1)) fail("ema_alpha must be in [0, 1]");
  if (!(tau > 0 && tau < 1)) fail("tau must be in (0, 1)");
  if (batch_size == 0) fail("batch_size must be positive");
  if (iterations > 0 && warmup > iterations) fail("warmup longer than the run");
  if (!(losses.sup || losses.tgt || losses.t2s || losses.s2t)) fail("at least one prediction loss must be enabled");
  if (splits.source_train == 0 || splits.target_eval == 0) fail("source_train and target_eval must be non-empty");
  if (uses_teacher() && splits.target_train == 0) fail("target terms need target_train scenes");
  if (target_labels && splits.target_train == 0) fail("target_labels needs target_train scenes");
  if (perturbation == PerturbationMode::random) {
    if (noise_h == 0 || noise_w == 0 || model.grid_h() % noise_h != 0 || model.grid_w() % noise_w != 0)
      fail("noise resolution must divide the token grid");
  }
}

std::string TrainConfig::canonical() const {
  TrainConfig copy = *this;
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields(copy)) {
    if (f.section != section) {
      if (!section.empty()) os << '\n';
      section = f.section;
      os << '[' << section << "]\n";
    }
    os << f.key << " = " << f.get() << '\n';
  }
  return os.str();
}

std::uint64_t TrainConfig::hash() const { return fnv1a(canonical()); }

TrainConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  TrainConfig c;
  auto table = fields(c);
  std::set<std::string> known;
  for (const auto& f : table) known.insert(f.section + "." + f.key);
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw FormatError("config: key '" + section + "' outside a section");
    for (const auto& [key, value] : body)
      if (!known.count(section + "." + key)) throw FormatError("config: unknown key '" + section + "." + key + "'");
  }
  for (const auto& f : table) {
    if (auto v = tree.get_optional<std::string>(pt::ptree::path_type(f.section + "." + f.key, '.'))) f.set(*v);
  }
  c.validate();
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot read config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

}  // namespace xda
