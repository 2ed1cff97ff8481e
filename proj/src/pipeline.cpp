#include "ibd/pipeline.hpp"

#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "ibd/binio.hpp"
#include "ibd/error.hpp"

namespace ibd {

namespace {

[[noreturn]] void bad_field(const std::string& key, const std::string& why) {
  fail(ErrorKind::Config, "config field '" + key + "': " + why);
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) bad_field(key, "expected a non-negative integer, got '" + v + "'");
  return out;
}

int to_int(const std::string& key, const std::string& v) {
  int out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) bad_field(key, "expected an integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used == v.size() && std::isfinite(out)) return out;
  } catch (const std::exception&) {
  }
  bad_field(key, "expected a number, got '" + v + "'");
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_field(key, "expected true or false, got '" + v + "'");
}

std::vector<std::size_t> to_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(to_uint(key, item));
  }
  return out;
}

std::string list_str(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string bool_str(bool b) { return b ? "true" : "false"; }

struct Key {
  std::function<void(PipelineConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

template <class F, class G>
Key key(F set, G get) {
  return Key{set, get};
}

#define UINT_KEY(expr) \
  key([](PipelineConfig& c, const std::string& k, const std::string& v) { expr = to_uint(k, v); }, \
      [](const PipelineConfig& c) { return std::to_string(expr); })
#define DOUBLE_KEY(expr) \
  key([](PipelineConfig& c, const std::string& k, const std::string& v) { expr = to_double(k, v); }, \
      [](const PipelineConfig& c) { return fmt(expr); })
#define BOOL_KEY(expr) \
  key([](PipelineConfig& c, const std::string& k, const std::string& v) { expr = to_bool(k, v); }, \
      [](const PipelineConfig& c) { return bool_str(expr); })
#define STRING_KEY(expr) \
  key([](PipelineConfig& c, const std::string&, const std::string& v) { expr = v; }, \
      [](const PipelineConfig& c) { return std::string(expr); })

const std::map<std::string, Key>& registry() {
  static const std::map<std::string, Key> keys = [] {
    std::map<std::string, Key> m;
    m["data.source"] = STRING_KEY(c.source);
    m["data.classes"] = UINT_KEY(c.synthetic.classes);
    m["data.height"] = UINT_KEY(c.synthetic.shape.height);
    m["data.width"] = UINT_KEY(c.synthetic.shape.width);
    m["data.channels"] = UINT_KEY(c.synthetic.shape.channels);
    m["data.train_per_class"] = UINT_KEY(c.synthetic.train_per_class);
    m["data.val_per_class"] = UINT_KEY(c.synthetic.val_per_class);
    m["data.noise"] = DOUBLE_KEY(c.synthetic.noise);
    m["data.train_images"] = STRING_KEY(c.train_images);
    m["data.train_labels"] = STRING_KEY(c.train_labels);
    m["data.val_images"] = STRING_KEY(c.val_images);
    m["data.val_labels"] = STRING_KEY(c.val_labels);

    m["model.filters"] = key(
        [](PipelineConfig& c, const std::string& k, const std::string& v) {
          const auto f = to_list(k, v);
          if (f.empty()) bad_field(k, "needs at least one conv block");
          const std::size_t kernel = c.arch.conv.empty() ? 3 : c.arch.conv.front().kernel;
          c.arch.conv.clear();
          for (std::size_t n : f) c.arch.conv.push_back({n, kernel});
        },
        [](const PipelineConfig& c) {
          std::vector<std::size_t> f;
          for (const auto& b : c.arch.conv) f.push_back(b.filters);
          return list_str(f);
        });
    m["model.kernel"] = key(
        [](PipelineConfig& c, const std::string& k, const std::string& v) {
          const auto n = to_uint(k, v);
          for (auto& b : c.arch.conv) b.kernel = n;
        },
        [](const PipelineConfig& c) { return std::to_string(c.arch.conv.empty() ? 0 : c.arch.conv.front().kernel); });
    m["model.hidden"] = UINT_KEY(c.arch.hidden);

    m["pretrain.epochs"] = UINT_KEY(c.pretrain.epochs);
    m["pretrain.batch_size"] = UINT_KEY(c.pretrain.batch_size);
    m["pretrain.lr"] = DOUBLE_KEY(c.pretrain.lr);
    m["retrain.epochs"] = UINT_KEY(c.retrain.epochs);
    m["retrain.batch_size"] = UINT_KEY(c.retrain.batch_size);
    m["retrain.lr"] = DOUBLE_KEY(c.retrain.lr);
    m["retrain.converge_asr"] = DOUBLE_KEY(c.converge_asr);
    m["retrain.early_stop"] = BOOL_KEY(c.early_stop);

    m["attack.family"] = key(
        [](PipelineConfig& c, const std::string& k, const std::string& v) {
          if (v == "stego")
            c.family = AttackFamily::Stego;
          else if (v == "regularized")
            c.family = AttackFamily::Regularized;
          else
            bad_field(k, "expected stego or regularized, got '" + v + "'");
        },
        [](const PipelineConfig& c) { return std::string(c.family == AttackFamily::Stego ? "stego" : "regularized"); });
    m["attack.payload"] = STRING_KEY(c.payload);
    m["attack.size"] = UINT_KEY(c.size);
    m["attack.k"] = key([](PipelineConfig& c, const std::string& k,
                           const std::string& v) { c.k = static_cast<unsigned>(to_uint(k, v)); },
                        [](const PipelineConfig& c) { return std::to_string(c.k); });
    m["attack.norm"] = key(
        [](PipelineConfig& c, const std::string& k, const std::string& v) {
          try {
            c.norm = parse_norm(v);
          } catch (const Error& e) {
            bad_field(k, e.what());
          }
        },
        [](const PipelineConfig& c) { return std::string(norm_name(c.norm)); });
    m["attack.stop"] = DOUBLE_KEY(c.schedule.stop);
    m["attack.keep"] = UINT_KEY(c.keep);
    m["attack.anchors"] = UINT_KEY(c.anchors);
    m["attack.scale"] = DOUBLE_KEY(c.scale);
    m["attack.lambda"] = DOUBLE_KEY(c.schedule.lambda);
    m["attack.theta_amplify"] = DOUBLE_KEY(c.schedule.theta_amplify);
    m["attack.theta_shrink"] = DOUBLE_KEY(c.schedule.theta_shrink);
    m["attack.switch_iters"] = UINT_KEY(c.schedule.switch_iters);
    m["attack.lr"] = DOUBLE_KEY(c.schedule.lr);
    m["attack.lr_decay"] = DOUBLE_KEY(c.schedule.lr_decay);
    m["attack.decay_every"] = UINT_KEY(c.schedule.decay_every);
    m["attack.max_iters"] = UINT_KEY(c.schedule.max_iters);
    m["attack.rho_init"] = DOUBLE_KEY(c.schedule.rho_init);
    m["attack.rho_decay"] = DOUBLE_KEY(c.schedule.rho_decay);
    m["attack.rho_floor"] = DOUBLE_KEY(c.schedule.rho_floor);
    m["attack.inner_iters"] = UINT_KEY(c.schedule.inner_iters);
    m["attack.theta_linf"] = DOUBLE_KEY(c.schedule.theta_linf);
    m["attack.linf_patience"] = UINT_KEY(c.schedule.linf_patience);
    m["attack.init_std"] = DOUBLE_KEY(c.schedule.init_std);

    m["poison.mode"] = key(
        [](PipelineConfig& c, const std::string& k, const std::string& v) {
          try {
            c.poison.mode = parse_mode(v);
          } catch (const Error& e) {
            bad_field(k, e.what());
          }
        },
        [](const PipelineConfig& c) { return std::string(mode_name(c.poison.mode)); });
    m["poison.source"] = key([](PipelineConfig& c, const std::string& k,
                                const std::string& v) { c.poison.source = to_int(k, v); },
                             [](const PipelineConfig& c) { return std::to_string(c.poison.source); });
    m["poison.target"] = key([](PipelineConfig& c, const std::string& k,
                                const std::string& v) { c.poison.target = to_int(k, v); },
                             [](const PipelineConfig& c) { return std::to_string(c.poison.target); });
    m["poison.rate"] = DOUBLE_KEY(c.poison.rate);

    m["metrics.pass"] = BOOL_KEY(c.pass);
    m["metrics.activation"] = BOOL_KEY(c.activation);

    m["detect.enabled"] = BOOL_KEY(c.detect);
    m["detect.epochs"] = UINT_KEY(c.detection.reverse.epochs);
    m["detect.batch_size"] = UINT_KEY(c.detection.reverse.batch_size);
    m["detect.lr"] = DOUBLE_KEY(c.detection.reverse.lr);
    m["detect.init_lambda"] = DOUBLE_KEY(c.detection.reverse.init_lambda);
    m["detect.patience"] = UINT_KEY(c.detection.reverse.patience);
    m["detect.target_rate"] = DOUBLE_KEY(c.detection.reverse.target_rate);
    m["detect.samples"] = UINT_KEY(c.detection.samples);
    m["detect.threshold"] = DOUBLE_KEY(c.detection.threshold);

    m["sweep.sizes"] = key([](PipelineConfig& c, const std::string& k,
                              const std::string& v) { c.sweep_sizes = to_list(k, v); },
                           [](const PipelineConfig& c) { return list_str(c.sweep_sizes); });
    m["sweep.pairs"] = BOOL_KEY(c.sweep_pairs);

    m["run.seed"] = UINT_KEY(c.seed);
    m["run.out"] = key([](PipelineConfig& c, const std::string&, const std::string& v) { c.out = v; },
                       [](const PipelineConfig& c) { return c.out.string(); });
    return m;
  }();
  return keys;
}

#undef UINT_KEY
#undef DOUBLE_KEY
#undef BOOL_KEY
#undef STRING_KEY

void set_key(PipelineConfig& cfg, const std::string& name, const std::string& value) {
  const auto& keys = registry();
  const auto it = keys.find(name);
  if (it == keys.end()) bad_field(name, "unknown setting");
  it->second.set(cfg, name, trim(value));
  if (std::find(cfg.explicit_keys.begin(), cfg.explicit_keys.end(), name) == cfg.explicit_keys.end())
    cfg.explicit_keys.push_back(name);
}

bool is_set(const PipelineConfig& cfg, const std::string& name) {
  return std::find(cfg.explicit_keys.begin(), cfg.explicit_keys.end(), name) != cfg.explicit_keys.end();
}

std::string fnv_hex(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

void PipelineConfig::validate() const {
  // additive-trigger settings make no sense for a stego attack and vice versa
  static const char* const regularized_only[] = {
      "attack.norm",        "attack.stop",         "attack.keep",      "attack.anchors",     "attack.scale",
      "attack.lambda",      "attack.theta_amplify", "attack.theta_shrink", "attack.switch_iters", "attack.lr",
      "attack.lr_decay",    "attack.decay_every",  "attack.max_iters", "attack.rho_init",    "attack.rho_decay",
      "attack.rho_floor",   "attack.inner_iters",  "attack.init_std",      "attack.theta_linf",  "attack.linf_patience"};
  static const char* const stego_only[] = {"attack.payload", "attack.size", "attack.k", "sweep.sizes"};
  if (family == AttackFamily::Stego) {
    for (const char* k : regularized_only)
      if (is_set(*this, k)) bad_field(k, "not allowed with attack.family=stego");
    if (payload.empty()) bad_field("attack.payload", "must be nonempty");
    if (size == 0) bad_field("attack.size", "must be positive");
    if (k < 1 || k > kMaxBitPlanes) bad_field("attack.k", "must be in 1.." + std::to_string(kMaxBitPlanes));
  } else {
    for (const char* k : stego_only)
      if (is_set(*this, k)) bad_field(k, "not allowed with attack.family=regularized");
    if (anchors < 1) bad_field("attack.anchors", "must be >= 1");
    if (keep < 1) bad_field("attack.keep", "must be >= 1");
    if (scale <= 1.0) bad_field("attack.scale", "must exceed 1");
    schedule.validate();
  }
  if (source == "synthetic") {
    for (const char* k : {"data.train_images", "data.train_labels", "data.val_images", "data.val_labels"})
      if (is_set(*this, k)) bad_field(k, "only used with data.source=idx");
  } else if (source == "idx") {
    if (train_images.empty()) bad_field("data.train_images", "required with data.source=idx");
    if (train_labels.empty()) bad_field("data.train_labels", "required with data.source=idx");
    if (val_images.empty()) bad_field("data.val_images", "required with data.source=idx");
    if (val_labels.empty()) bad_field("data.val_labels", "required with data.source=idx");
  } else {
    bad_field("data.source", "expected synthetic or idx, got '" + source + "'");
  }
  if (poison.mode == PoisonMode::SingleTarget && !is_set(*this, "poison.source"))
    bad_field("poison.source", "required for single-target poisoning");
  if (poison.mode != PoisonMode::SingleTarget && is_set(*this, "poison.source"))
    bad_field("poison.source", "only used with single-target poisoning");
  if (!(converge_asr > 0 && converge_asr <= 1)) bad_field("retrain.converge_asr", "must be in (0, 1]");
  try {
    pretrain.validate();
  } catch (const Error& e) {
    bad_field("pretrain", e.what());
  }
  try {
    retrain.validate();
  } catch (const Error& e) {
    bad_field("retrain", e.what());
  }
  try {
    detection.validate();
  } catch (const Error& e) {
    bad_field("detect", e.what());
  }
  if (out.empty()) bad_field("run.out", "must be nonempty");
}

std::string PipelineConfig::canonical() const {
  std::string s;
  for (const auto& [name, k] : registry()) s += name + "=" + k.get(*this) + "\n";
  return s;
}

std::string PipelineConfig::stage_hash(const std::string& stage) const {
  static const std::map<std::string, std::vector<std::string>> sections = {
      {"pretrain", {"data.", "model.", "pretrain.", "run.seed"}},
      {"trigger", {"data.", "model.", "pretrain.", "run.seed", "attack.", "poison."}},
      {"retrain", {"data.", "model.", "pretrain.", "run.seed", "attack.", "poison.", "retrain."}},
  };
  const auto it = sections.find(stage);
  require(it != sections.end(), ErrorKind::Invalid, "no hash scope for stage '" + stage + "'");
  std::string text;
  for (const auto& [name, k] : registry())
    for (const auto& prefix : it->second)
      if (name.rfind(prefix, 0) == 0) {
        text += name + "=" + k.get(*this) + "\n";
        break;
      }
  return fnv_hex(text);
}

PipelineConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    fail(ErrorKind::Config, std::string("config: ") + e.what());
  }
  PipelineConfig cfg;
  // model.filters resets kernels, so apply it first
  if (auto f = tree.get_optional<std::string>("model.filters")) set_key(cfg, "model.filters", *f);
  for (const auto& [section, body] : tree) {
    if (body.empty()) bad_field(section, "settings must live inside a [section]");
    for (const auto& [name, value] : body) {
      const std::string full = section + "." + name;
      if (full == "model.filters") continue;
      set_key(cfg, full, value.data());
    }
  }
  return cfg;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return parse_config(std::string(bytes.begin(), bytes.end()));
  } catch (const Error& e) {
    fail(e.kind(), path.string() + ": " + e.what());
  }
}

void apply_override(PipelineConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) fail(ErrorKind::Config, "override '" + assignment + "' is not section.key=value");
  set_key(cfg, trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

std::string artifact::trigger_file(std::size_t index) { return "trigger_" + std::to_string(index) + ".bin"; }

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Invalid:
    case ErrorKind::Shape:
      return 2;
    case ErrorKind::Artifact:
    case ErrorKind::Format:
      return 3;
    case ErrorKind::Numeric:
      return 4;
  }
  return 1;
}

namespace {

void log(const StageOptions& opt, const std::string& line) {
  if (opt.verbose) std::cerr << line << std::endl;
}

std::filesystem::path at(const PipelineConfig& cfg, const std::string& name) { return cfg.out / name; }

void check_hash(const std::string& got, const std::string& want, const std::filesystem::path& path,
                const StageOptions& opt) {
  if (got == want || opt.force) return;
  fail(ErrorKind::Artifact, path.string() + " was produced under config " + got + " but the current config expects " +
                                want + " (pass --force to use it anyway)");
}

Dataset load_data(const PipelineConfig& cfg, const char* name, const std::string& want, const StageOptions& opt) {
  const auto path = at(cfg, name);
  Dataset d = load_dataset(path);
  check_hash(d.config_hash, want, path, opt);
  return d;
}

ModelParams load_net(const PipelineConfig& cfg, const char* name, const std::string& want, const StageOptions& opt) {
  const auto path = at(cfg, name);
  ModelParams m = load_model(path);
  check_hash(m.config_hash, want, path, opt);
  return m;
}

void save_data(const PipelineConfig& cfg, const char* name, const Dataset& d) {
  save_dataset(at(cfg, name), d);
  std::string manifest = name;
  manifest.replace(manifest.rfind(".bin"), 4, "_manifest.txt");
  write_text(at(cfg, manifest), manifest_text(d));
}

TrainConfig seeded(TrainConfig t, std::uint64_t seed) {
  t.seed = seed;
  return t;
}

SplitDataset make_data(const PipelineConfig& cfg) {
  SplitDataset d;
  if (cfg.source == "synthetic") {
    SyntheticSpec spec = cfg.synthetic;
    spec.seed = cfg.seed;
    d = gen_synthetic(spec);
  } else {
    d.train = load_idx(cfg.train_images, cfg.train_labels);
    d.val = load_idx(cfg.val_images, cfg.val_labels);
    require(d.train.shape == d.val.shape, ErrorKind::Config, "IDX train and validation images differ in shape");
    d.train.name = "idx-train";
    d.val.name = "idx-val";
    d.val.classes = d.train.classes = std::max(d.train.classes, d.val.classes);
  }
  return d;
}

ArchConfig arch_for(const PipelineConfig& cfg, const Dataset& d) {
  ArchConfig a = cfg.arch;
  a.input = d.shape;
  a.classes = d.classes;
  a.seed = cfg.seed;
  return a;
}

// Labels that receive their own trigger.
std::vector<int> trigger_targets(const PipelineConfig& cfg, std::size_t classes) {
  if (cfg.poison.mode != PoisonMode::InjectionAll) return {cfg.poison.target};
  std::vector<int> t(classes);
  for (std::size_t k = 0; k < classes; ++k) t[k] = static_cast<int>(k);
  return t;
}

AdditiveTrigger make_additive(const PipelineConfig& cfg, const ModelParams& model, int target) {
  OptSchedule s = cfg.schedule;
  s.seed = cfg.seed;
  return generate_trigger(model, TriggerRequest{target, cfg.norm, cfg.anchors, cfg.scale, cfg.keep}, s);
}

// Injection-all gives every class its own payload by suffixing the label.
StegoTrigger make_stego(const PipelineConfig& cfg, std::size_t size, std::optional<int> label = std::nullopt) {
  const std::string base = label ? cfg.payload + std::to_string(*label) : cfg.payload;
  return StegoTrigger{make_text_trigger(base, size), StegoConfig{cfg.k}};
}

constexpr std::uint32_t kPayloadVersion = 1;

void save_payloads(const std::filesystem::path& path, const std::vector<StegoTrigger>& ts, const std::string& hash) {
  ByteWriter w;
  w.magic("IBDPAYL1");
  w.u32(kPayloadVersion);
  w.str(hash);
  w.u32(static_cast<std::uint32_t>(ts.size()));
  for (const auto& t : ts) {
    w.u32(t.cfg.k);
    w.u32(static_cast<std::uint32_t>(t.payload.bytes.size()));
    w.raw(t.payload.bytes);
  }
  write_file(path, w.bytes());
}

std::vector<StegoTrigger> load_payloads(const std::filesystem::path& path, std::string& hash) {
  const auto bytes = read_file(path);
  ByteReader r(bytes, "payload");
  r.expect_magic("IBDPAYL1");
  r.expect_version(kPayloadVersion);
  hash = r.str();
  const auto count = r.u32();
  require(count <= r.remaining() / 8, ErrorKind::Format, "payload: count " + std::to_string(count) + " exceeds file");
  std::vector<StegoTrigger> out(count);
  for (auto& t : out) {
    t.cfg.k = r.u32();
    t.cfg.validate();
    const auto n = r.u32();
    const auto raw = r.raw(n);
    t.payload.bytes.assign(raw.begin(), raw.end());
  }
  r.expect_end();
  return out;
}

std::vector<Trigger> load_triggers(const PipelineConfig& cfg, std::size_t classes, const StageOptions& opt) {
  const std::string want = cfg.stage_hash("trigger");
  std::vector<Trigger> out;
  const auto targets = trigger_targets(cfg, classes);
  if (cfg.family == AttackFamily::Stego) {
    std::string hash;
    const auto path = at(cfg, artifact::kPayload);
    auto ts = load_payloads(path, hash);
    check_hash(hash, want, path, opt);
    require(ts.size() == targets.size(), ErrorKind::Artifact,
            path.string() + " holds " + std::to_string(ts.size()) + " payloads, expected " +
                std::to_string(targets.size()));
    for (auto& t : ts) out.emplace_back(std::move(t));
    return out;
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto path = at(cfg, artifact::trigger_file(i));
    AdditiveTrigger t = load_trigger(path);
    check_hash(t.config_hash, want, path, opt);
    out.emplace_back(std::move(t));
  }
  return out;
}

PoisonedDataset make_poison(const PipelineConfig& cfg, const SplitDataset& data, const std::vector<Trigger>& triggers) {
  PoisonSpec spec = cfg.poison;
  spec.seed = cfg.seed;
  switch (spec.mode) {
    case PoisonMode::SingleTarget: return poison_single_target(data, triggers.at(0), spec);
    case PoisonMode::Universal: return poison_universal(data, triggers.at(0), spec);
    case PoisonMode::InjectionAll: return poison_injection_all(data, triggers, spec.rate, spec.seed);
  }
  fail(ErrorKind::Invalid, "unknown poison mode");
}

// Clean validation image behind each poisoned validation image, in order.
std::vector<std::size_t> val_sources(const PipelineConfig& cfg, const Dataset& clean_val, std::size_t triggers) {
  if (cfg.poison.mode == PoisonMode::SingleTarget) return clean_val.indices_of_label(cfg.poison.source);
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < triggers; ++k)
    for (std::size_t i = 0; i < clean_val.size(); ++i) out.push_back(i);
  return out;
}

double poisoned_pass(const PipelineConfig& cfg, const Dataset& clean_val, const Dataset& poisoned_val,
                     std::size_t triggers) {
  const auto src = val_sources(cfg, clean_val, triggers);
  require(src.size() == poisoned_val.size(), ErrorKind::Artifact,
          "poisoned validation set does not line up with the clean validation set");
  double s = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i)
    s += pass_score(clean_val.image(src[i]), poisoned_val.image(i), clean_val.shape);
  return s / static_cast<double>(src.size());
}

struct Retrained {
  ModelParams model;
  RetrainTrace trace;
};

Retrained do_retrain(const PipelineConfig& cfg, const ModelParams& clean, const PoisonedDataset& p,
                     const Dataset& clean_val, const StageOptions& opt) {
  Retrained r;
  ModelParams keep;
  const int target = cfg.poison.mode == PoisonMode::InjectionAll ? -1 : cfg.poison.target;
  auto asr_of = [&](const ModelParams& m) {
    if (target >= 0) return attack_success_rate(m, p.val, target);
    // injection-all: each copy carries its own target label
    const auto pred = predict(m, p.val);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == p.val.label(i);
    return static_cast<double>(hit) / static_cast<double>(pred.size());
  };
  auto res = retrain(clean, p.train, clean_val, seeded(cfg.retrain, cfg.seed), [&](std::size_t e, const ModelParams& m) {
    const double a = asr_of(m), f = functionality(m, clean_val);
    r.trace.asr.push_back(a);
    r.trace.functionality.push_back(f);
    log(opt, "[retrain] epoch " + std::to_string(e) + " asr=" + fmt(a) + " functionality=" + fmt(f));
    if (a >= cfg.converge_asr && !r.trace.converged) {
      r.trace.converged = e;
      if (cfg.early_stop) return false;
    }
    return true;
  });
  r.model = std::move(res.model);
  return r;
}

std::string trace_text(const RetrainTrace& t, const std::string& hash) {
  std::ostringstream os;
  os << "config_hash=" << hash << "\n";
  os << "converged=" << (t.converged ? std::to_string(*t.converged) : "none") << "\n";
  os << "# epoch asr functionality\n";
  for (std::size_t i = 0; i < t.asr.size(); ++i) os << i + 1 << " " << fmt(t.asr[i]) << " " << fmt(t.functionality[i]) << "\n";
  return os.str();
}

RetrainTrace read_trace(const std::filesystem::path& path, const std::string& want, const StageOptions& opt) {
  const auto bytes = read_file(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  RetrainTrace t;
  std::string line, hash;
  bool have_conv = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("config_hash=", 0) == 0) {
      hash = line.substr(12);
    } else if (line.rfind("converged=", 0) == 0) {
      const std::string v = line.substr(10);
      if (v != "none") t.converged = to_uint("converged", v);
      have_conv = true;
    } else {
      std::istringstream ls(line);
      std::size_t e = 0;
      double a = 0, f = 0;
      if (!(ls >> e >> a >> f)) fail(ErrorKind::Format, path.string() + ": bad line '" + line + "'");
      t.asr.push_back(a);
      t.functionality.push_back(f);
    }
  }
  if (!have_conv) fail(ErrorKind::Format, path.string() + ": missing converged line");
  check_hash(hash, want, path, opt);
  return t;
}

}  // namespace

void stage_pretrain(const PipelineConfig& cfg, const StageOptions& opt) {
  cfg.validate();
  std::filesystem::create_directories(cfg.out);
  const std::string hash = cfg.stage_hash("pretrain");
  SplitDataset d = make_data(cfg);
  d.train.config_hash = d.val.config_hash = hash;
  save_data(cfg, artifact::kTrain, d.train);
  save_data(cfg, artifact::kVal, d.val);
  log(opt, "[pretrain] " + std::to_string(d.train.size()) + " training images");
  auto res = pretrain(build_model(arch_for(cfg, d.train)), d.train, d.val, seeded(cfg.pretrain, cfg.seed),
                      [&](std::size_t e, const ModelParams&) {
                        log(opt, "[pretrain] epoch " + std::to_string(e));
                        return true;
                      });
  res.model.config_hash = hash;
  save_model(at(cfg, artifact::kCleanModel), res.model);
  std::ostringstream os;
  os << "config_hash=" << hash << "\nbaseline_accuracy=" << fmt(res.val_accuracy) << "\n# epoch loss\n";
  for (std::size_t i = 0; i < res.epoch_loss.size(); ++i) os << i + 1 << " " << fmt(res.epoch_loss[i]) << "\n";
  write_text(at(cfg, "pretrain.txt"), os.str());
}

void stage_trigger(const PipelineConfig& cfg, const StageOptions& opt) {
  cfg.validate();
  const std::string hash = cfg.stage_hash("trigger");
  const ModelParams model = load_net(cfg, artifact::kCleanModel, cfg.stage_hash("pretrain"), opt);
  const auto targets = trigger_targets(cfg, model.arch.classes);
  if (cfg.family == AttackFamily::Stego) {
    const std::size_t cap = stego_capacity(model.arch.input.size(), StegoConfig{cfg.k});
    if (cfg.size * 8 > cap)
      bad_field("attack.size", std::to_string(cfg.size) + " bytes exceeds the image capacity of " +
                                   std::to_string(cap) + " bits at k=" + std::to_string(cfg.k));
    std::vector<StegoTrigger> ts;
    if (targets.size() == 1)
      ts.push_back(make_stego(cfg, cfg.size));
    else
      for (int t : targets) ts.push_back(make_stego(cfg, cfg.size, t));
    save_payloads(at(cfg, artifact::kPayload), ts, hash);
    log(opt, "[gen-trigger] " + std::to_string(ts.size()) + " payload(s) of " + std::to_string(cfg.size) + " bytes");
    return;
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    AdditiveTrigger t = make_additive(cfg, model, targets[i]);
    t.config_hash = hash;
    save_trigger(at(cfg, artifact::trigger_file(i)), t);
    write_text(at(cfg, "trigger_" + std::to_string(i) + "_log.txt"), generation_log_text(t));
    log(opt, "[gen-trigger] target " + std::to_string(targets[i]) + " " + norm_name(t.kind) + " norm " + fmt(t.norm));
  }
}

void stage_poison(const PipelineConfig& cfg, const StageOptions& opt) {
  cfg.validate();
  const std::string pre = cfg.stage_hash("pretrain"), hash = cfg.stage_hash("trigger");
  SplitDataset d{load_data(cfg, artifact::kTrain, pre, opt), load_data(cfg, artifact::kVal, pre, opt)};
  const auto triggers = load_triggers(cfg, d.train.classes, opt);
  PoisonedDataset p = make_poison(cfg, d, triggers);
  p.train.config_hash = p.val.config_hash = hash;
  save_data(cfg, artifact::kPoisonTrain, p.train);
  save_data(cfg, artifact::kPoisonVal, p.val);
  log(opt, "[poison] " + std::to_string(p.poisoned) + " poisoned training images");
}

void stage_retrain(const PipelineConfig& cfg, const StageOptions& opt) {
  cfg.validate();
  const std::string pre = cfg.stage_hash("pretrain"), trig = cfg.stage_hash("trigger"),
                    hash = cfg.stage_hash("retrain");
  const ModelParams clean = load_net(cfg, artifact::kCleanModel, pre, opt);
  PoisonedDataset p;
  p.train = load_data(cfg, artifact::kPoisonTrain, trig, opt);
  p.val = load_data(cfg, artifact::kPoisonVal, trig, opt);
  const Dataset val = load_data(cfg, artifact::kVal, pre, opt);
  Retrained r = do_retrain(cfg, clean, p, val, opt);
  r.model.config_hash = hash;
  save_model(at(cfg, artifact::kBackdoorModel), r.model);
  write_text(at(cfg, artifact::kRetrainLog), trace_text(r.trace, hash));
}

MetricReport stage_eval(const PipelineConfig& cfg, const StageOptions& opt) {
  cfg.validate();
  const std::string pre = cfg.stage_hash("pretrain"), trig = cfg.stage_hash("trigger"),
                    hash = cfg.stage_hash("retrain");
  const ModelParams clean = load_net(cfg, artifact::kCleanModel, pre, opt);
  const ModelParams bd = load_net(cfg, artifact::kBackdoorModel, hash, opt);
  const Dataset val = load_data(cfg, artifact::kVal, pre, opt);
  const Dataset pval = load_data(cfg, artifact::kPoisonVal, trig, opt);
  const RetrainTrace trace = read_trace(at(cfg, artifact::kRetrainLog), hash, opt);
  const auto triggers = load_triggers(cfg, val.classes, opt);

  MetricReport r;
  if (cfg.poison.mode == PoisonMode::InjectionAll) {
    const auto pred = predict(bd, pval);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == pval.label(i);
    r.asr = static_cast<double>(hit) / static_cast<double>(pred.size());
  } else {
    r.asr = attack_success_rate(bd, pval, cfg.poison.target);
  }
  r.functionality = functionality(bd, val);
  r.baseline = functionality(clean, val);
  if (cfg.pass) r.avg_pass = poisoned_pass(cfg, val, pval, triggers.size());
  r.epochs_to_converge = trace.converged;
  r.validate();

  std::ostringstream os;
  os << "config_hash=" << hash << "\n"
     << "attack=" << (cfg.family == AttackFamily::Stego ? "stego" : std::string("regularized-") + norm_name(cfg.norm))
     << "\nmode=" << mode_name(cfg.poison.mode) << "\n"
     << r.text();
  if (cfg.activation && cfg.family == AttackFamily::Regularized) {
    for (std::size_t i = 0; i < triggers.size(); ++i) {
      const auto& t = std::get<AdditiveTrigger>(triggers[i]);
      const ActivationReport a = activation_report(clean, val, t.anchor.at(0), t);
      os << "activation_" << t.target << "_clean=" << fmt(a.clean) << "\n"
         << "activation_" << t.target << "_triggered=" << fmt(a.triggered) << "\n";
    }
  }
  write_text(at(cfg, artifact::kReport), os.str());
  return r;
}

DetectionReport stage_detect(const PipelineConfig& cfg, const StageOptions& opt) {
  cfg.validate();
  const std::string pre = cfg.stage_hash("pretrain"), hash = cfg.stage_hash("retrain");
  const ModelParams bd = load_net(cfg, artifact::kBackdoorModel, hash, opt);
  const Dataset val = load_data(cfg, artifact::kVal, pre, opt);
  std::vector<int> labels(bd.arch.classes);
  for (std::size_t k = 0; k < labels.size(); ++k) labels[k] = static_cast<int>(k);
  DetectConfig dc = cfg.detection;
  dc.seed = cfg.seed;
  log(opt, "[detect] reverse-engineering " + std::to_string(labels.size()) + " labels");
  const DetectionReport r = detect_backdoor(bd, labels, val, dc);
  for (std::size_t i = 0; i < r.triggers.size(); ++i)
    save_reversed(at(cfg, "reversed_" + std::to_string(labels[i]) + ".bin"), r.triggers[i]);
  std::ostringstream os;
  os << "config_hash=" << hash << "\nmode=" << mode_name(cfg.poison.mode) << "\n";
  if (cfg.poison.mode != PoisonMode::InjectionAll) os << "true_target=" << cfg.poison.target << "\n";
  os << r.text();
  write_text(at(cfg, artifact::kDetection), os.str());
  return r;
}

void stage_sweep(const PipelineConfig& cfg, const StageOptions& opt) {
  cfg.validate();
  require(!cfg.sweep_sizes.empty() || cfg.sweep_pairs, ErrorKind::Config,
          "config field 'sweep.sizes': set sweep.sizes or sweep.pairs=true");
  const std::string pre = cfg.stage_hash("pretrain");
  const ModelParams clean = load_net(cfg, artifact::kCleanModel, pre, opt);
  const SplitDataset d{load_data(cfg, artifact::kTrain, pre, opt), load_data(cfg, artifact::kVal, pre, opt)};
  const double baseline = functionality(clean, d.val);

  if (!cfg.sweep_sizes.empty()) {
    require(cfg.family == AttackFamily::Stego, ErrorKind::Config, "config field 'sweep.sizes': stego attacks only");
    require(cfg.poison.mode != PoisonMode::InjectionAll, ErrorKind::Config,
            "config field 'sweep.sizes': not available for injection-all");
    std::ostringstream os;
    os << "size,asr,functionality,baseline,avg_pass,epochs_to_converge\n";
    for (std::size_t size : cfg.sweep_sizes) {
      PipelineConfig c = cfg;
      c.size = size;
      // the trade-off is read at the end of a fixed budget, so every size trains the full schedule
      c.early_stop = false;
      log(opt, "[sweep] payload size " + std::to_string(size));
      const std::vector<Trigger> t{make_stego(c, size)};
      const PoisonedDataset p = make_poison(c, d, t);
      const Retrained r = do_retrain(c, clean, p, d.val, opt);
      os << size << "," << fmt(attack_success_rate(r.model, p.val, c.poison.target)) << ","
         << fmt(functionality(r.model, d.val)) << "," << fmt(baseline) << "," << fmt(poisoned_pass(c, d.val, p.val, 1))
         << "," << (r.trace.converged ? std::to_string(*r.trace.converged) : "none") << "\n";
    }
    write_text(at(cfg, artifact::kSweep), os.str());
  }
  if (cfg.sweep_pairs) {
    std::map<int, Trigger> cache;
    auto cell = [&](int s, int t) {
      PipelineConfig c = cfg;
      c.poison.mode = PoisonMode::SingleTarget;
      c.poison.source = s;
      c.poison.target = t;
      if (!cache.count(t)) {
        if (c.family == AttackFamily::Stego)
          cache.emplace(t, make_stego(c, c.size));
        else
          cache.emplace(t, make_additive(c, clean, t));
      }
      log(opt, "[sweep] pair " + std::to_string(s) + " -> " + std::to_string(t));
      const PoisonedDataset p = make_poison(c, d, {cache.at(t)});
      const Retrained r = do_retrain(c, clean, p, d.val, opt);
      GridCell g;
      g.asr = attack_success_rate(r.model, p.val, t);
      g.functionality = functionality(r.model, d.val);
      return g;
    };
    MetricReport m;
    m.grid = sweep_pairs(cell, all_pairs(d.train.classes));
    write_text(at(cfg, artifact::kGrid), m.grid_csv());
  }
}

void stage_run(const PipelineConfig& cfg, const StageOptions& opt) {
  cfg.validate();
  stage_pretrain(cfg, opt);
  stage_trigger(cfg, opt);
  stage_poison(cfg, opt);
  stage_retrain(cfg, opt);
  stage_eval(cfg, opt);
  if (cfg.detect) stage_detect(cfg, opt);
}

}  // namespace ibd
