#include "soma/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "soma/errors.hpp"

namespace soma {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double to_double(const std::string& s) {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
}

int64_t to_int(const std::string& s) {
    int64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw std::invalid_argument(s);
    return v;
}

uint64_t to_uint(const std::string& s) {
    uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw std::invalid_argument(s);
    return v;
}

bool to_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw std::invalid_argument(s);
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

template <class T>
std::string join(const T& values) {
    std::string out;
    for (const auto& v : values) {
        if (!out.empty()) out += ',';
        out += std::to_string(v);
    }
    return out;
}

std::vector<int> to_levels(const std::string& s) {
    std::vector<int> out;
    for (const auto& item : split(s, ',')) out.push_back(static_cast<int>(to_int(item)));
    return out;
}

struct Field {
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

using Registry = std::vector<std::pair<std::string, Field>>;

#define SOMA_DOUBLE(key, member)                                                        \
    {key, {[](const RunConfig& c) { return fmt_double(c.member); },                     \
           [](RunConfig& c, const std::string& v) { c.member = to_double(v); }}}
#define SOMA_INT(key, member)                                                           \
    {key, {[](const RunConfig& c) { return std::to_string(c.member); },                 \
           [](RunConfig& c, const std::string& v) { c.member = to_int(v); }}}
#define SOMA_UINT(key, member)                                                          \
    {key, {[](const RunConfig& c) { return std::to_string(c.member); },                 \
           [](RunConfig& c, const std::string& v) { c.member = to_uint(v); }}}
#define SOMA_BOOL(key, member)                                                          \
    {key, {[](const RunConfig& c) { return fmt_bool(c.member); },                       \
           [](RunConfig& c, const std::string& v) { c.member = to_bool(v); }}}
#define SOMA_STRING(key, member)                                                        \
    {key, {[](const RunConfig& c) { return std::string(c.member); },                    \
           [](RunConfig& c, const std::string& v) { c.member = v; }}}

const Registry& registry() {
    static const Registry r{
        SOMA_STRING("name", name),
        SOMA_INT("image.height", height),
        SOMA_INT("image.width", width),
        {"model.channels",
         {[](const RunConfig& c) {
              const auto& s = c.model.channels;
              return join(std::vector<int64_t>{s.c1, s.c2, s.c4, s.c8, s.c16});
          },
          [](RunConfig& c, const std::string& v) {
              auto items = split(v, ',');
              if (items.size() != 5) throw std::invalid_argument(v);
              auto& s = c.model.channels;
              s = {to_int(items[0]), to_int(items[1]), to_int(items[2]), to_int(items[3]), to_int(items[4])};
          }}},
        SOMA_INT("model.optical_channels", model.optical_channels),
        SOMA_BOOL("dino.enabled", model.dino),
        SOMA_INT("dino.channels", model.coarse_channels),
        SOMA_INT("dino.patch", model.coarse_patch),
        SOMA_UINT("dino.seed", model.coarse_seed),
        {"dino.script",
         {[](const RunConfig& c) { return c.model.coarse_script.string(); },
          [](RunConfig& c, const std::string& v) { c.model.coarse_script = v; }}},
        SOMA_BOOL("fge.enabled", model.fge.enabled),
        SOMA_INT("fge.sru_groups", model.fge.sru_groups),
        SOMA_DOUBLE("fge.sru_gate_threshold", model.fge.sru_gate_threshold),
        SOMA_DOUBLE("fge.cru_alpha", model.fge.cru_alpha),
        SOMA_INT("fge.cru_squeeze", model.fge.cru_squeeze),
        SOMA_INT("fge.cru_group_size", model.fge.cru_group_size),
        SOMA_INT("fge.cru_group_kernel", model.fge.cru_group_kernel),
        SOMA_INT("fge.ca_reduction", model.fge.ca_reduction),
        SOMA_INT("fge.sa_kernel", model.fge.sa_kernel),
        {"fge.dilations",
         {[](const RunConfig& c) { return join(c.model.fge.dilations); },
          [](RunConfig& c, const std::string& v) {
              auto items = split(v, ',');
              if (items.size() != 3) throw std::invalid_argument(v);
              for (int i = 0; i < 3; ++i) c.model.fge.dilations[i] = to_int(items[i]);
          }}},
        SOMA_INT("fge.gauss_size", model.fge.gauss_size),
        SOMA_DOUBLE("fge.gauss_sigma", model.fge.gauss_sigma),
        SOMA_BOOL("glam.enabled", model.glam.enabled),
        {"glam.affine_levels",
         {[](const RunConfig& c) { return join(c.model.glam.affine_levels); },
          [](RunConfig& c, const std::string& v) { c.model.glam.affine_levels = to_levels(v); }}},
        {"glam.flow_levels",
         {[](const RunConfig& c) { return join(c.model.glam.flow_levels); },
          [](RunConfig& c, const std::string& v) { c.model.glam.flow_levels = to_levels(v); }}},
        SOMA_INT("glam.max_decoder_width", model.glam.max_decoder_width),
        SOMA_DOUBLE("loss.lambda_cons", loss.lambda_cons),
        SOMA_DOUBLE("loss.alpha_cert", loss.alpha_cert),
        SOMA_DOUBLE("loss.alpha_delta", loss.alpha_delta),
        SOMA_DOUBLE("loss.alpha_uni", loss.alpha_uni),
        {"loss.level_weights",
         {[](const RunConfig& c) {
              std::string out;
              for (auto it = c.loss.level_weights.rbegin(); it != c.loss.level_weights.rend(); ++it) {
                  if (!out.empty()) out += ',';
                  out += std::to_string(it->first) + ":" + fmt_double(it->second);
              }
              return out;
          },
          [](RunConfig& c, const std::string& v) {
              std::map<int, double> weights;
              for (const auto& item : split(v, ',')) {
                  auto kv = split(item, ':');
                  if (kv.size() != 2) throw std::invalid_argument(item);
                  weights[static_cast<int>(to_int(kv[0]))] = to_double(kv[1]);
              }
              c.loss.level_weights = weights;
          }}},
        SOMA_BOOL("loss.mask_padding", mask_padding),
        SOMA_DOUBLE("optim.lr", lr),
        SOMA_DOUBLE("optim.weight_decay", weight_decay),
        SOMA_DOUBLE("optim.beta1", beta1),
        SOMA_DOUBLE("optim.beta2", beta2),
        SOMA_DOUBLE("optim.eps", eps),
        SOMA_DOUBLE("optim.grad_clip", grad_clip),
        SOMA_INT("train.epochs", epochs),
        SOMA_INT("train.batch_size", batch_size),
        SOMA_INT("train.warmup_epochs", warmup_epochs),
        SOMA_INT("train.max_steps", max_steps),
        SOMA_STRING("data.root", data_root),
        SOMA_DOUBLE("data.max_translation_px", perturbation.max_translation_px),
        SOMA_DOUBLE("data.scale_delta", perturbation.scale_delta),
        SOMA_DOUBLE("data.max_rotation_deg", perturbation.max_rotation_deg),
        SOMA_BOOL("data.resample_train", resample_train),
        SOMA_INT("data.train_limit", train_limit),
        SOMA_UINT("run.seed", seed),
        SOMA_BOOL("run.deterministic", deterministic),
        SOMA_INT("run.threads", threads),
        SOMA_STRING("run.dir", run_dir),
        SOMA_INT("run.checkpoint_every", checkpoint_every),
    };
    return r;
}

#undef SOMA_DOUBLE
#undef SOMA_INT
#undef SOMA_UINT
#undef SOMA_BOOL
#undef SOMA_STRING

} // namespace

void RunConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
    if (height <= 0 || width <= 0 || height % 16 != 0 || width % 16 != 0) {
        fail("image size must be positive and divisible by 16");
    }
    const auto& c = model.channels;
    for (auto w : {c.c1, c.c2, c.c4, c.c8, c.c16}) {
        if (w <= 0) fail("channel widths must be positive");
    }
    if (model.fge.enabled) {
        for (auto w : {c.c2, c.c4, c.c8}) {
            if (w % 8 != 0) fail("FGE levels need channel widths divisible by 8");
        }
    }
    if (model.optical_channels != 1 && model.optical_channels != 3) fail("model.optical_channels must be 1 or 3");
    if (batch_size < 1) fail("train.batch_size must be >= 1");
    if (epochs < 0 || warmup_epochs < 0 || max_steps < 0 || checkpoint_every < 0) fail("epoch/step counts must be non-negative");
    if (!(lr > 0)) fail("optim.lr must be positive");
    if (loss.lambda_cons < 0 || loss.alpha_cert < 0 || loss.alpha_delta < 0 || loss.alpha_uni < 0) {
        fail("loss weights must be non-negative");
    }
    for (const auto& [l, w] : loss.level_weights) {
        if (!is_valid_level(l) || w < 0) fail("loss.level_weights has an invalid entry");
    }
    perturbation.validate();
}

DatasetOptions RunConfig::dataset_options() const {
    DatasetOptions o;
    o.perturbation = perturbation;
    o.seed = seed;
    o.resample_train = resample_train;
    o.limit = static_cast<std::size_t>(train_limit);
    return o;
}

bool operator==(const RunConfig& a, const RunConfig& b) {
    return serialize_config(a) == serialize_config(b);
}

RunConfig parse_config(const std::string& text, RunConfig base) {
    std::map<std::string, const Field*> lookup;
    for (const auto& [k, f] : registry()) lookup[k] = &f;
    std::stringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        }
        const auto key = trim(line.substr(0, eq));
        const auto value = trim(line.substr(eq + 1));
        auto it = lookup.find(key);
        if (it == lookup.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        try {
            it->second->set(base, value);
        } catch (const std::exception&) {
            throw ConfigError("config line " + std::to_string(lineno) + ": bad value for '" + key + "': " + value);
        }
    }
    return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), std::move(base));
}

std::string serialize_config(const RunConfig& config) {
    std::string out;
    for (const auto& [k, f] : registry()) out += k + "=" + f.get(config) + "\n";
    return out;
}

void save_config(const std::filesystem::path& path, const RunConfig& config) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write config " + path.string());
    out << serialize_config(config);
}

uint64_t config_hash(const RunConfig& config) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : serialize_config(config)) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& [k, f] : registry()) keys.push_back(k);
    return keys;
}

RunConfig paper_preset() {
    RunConfig c;
    c.name = "soma";
    c.height = 512;
    c.width = 512;
    return c;
}

RunConfig desk_preset() { return RunConfig{}; }

const std::vector<std::string>& ablation_names() {
    static const std::vector<std::string> names{"baseline", "dino",     "fge",      "glam",
                                                "dino_fge", "dino_glam", "fge_glam", "full"};
    return names;
}

std::string ablation_label(const std::string& name) {
    static const std::map<std::string, std::string> labels{
        {"baseline", "baseline"},        {"dino", "+ DINO"},
        {"fge", "+ FGE"},                {"glam", "+ GLAM"},
        {"dino_fge", "+ DINO + FGE"},    {"dino_glam", "+ DINO + GLAM"},
        {"fge_glam", "+ FGE + GLAM"},    {"full", "SOMA (full)"}};
    auto it = labels.find(name);
    if (it == labels.end()) throw ConfigError("unknown ablation preset '" + name + "'");
    return it->second;
}

RunConfig apply_ablation(RunConfig config, const std::string& name) {
    ablation_label(name); // validates the name
    const bool all = name == "full";
    auto has = [&](const char* part) { return all || name.find(part) != std::string::npos; };
    config.model.dino = has("dino");
    config.model.fge.enabled = has("fge");
    config.model.glam.enabled = has("glam");
    config.name = name;
    return config;
}

} // namespace soma
