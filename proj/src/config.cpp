#include "flankid/config.hpp"

#include "flankid/error.hpp"

#include <cstdio>
#include <fstream>

namespace flankid {

using nlohmann::json;

std::string_view to_string(LossKind loss) {
    switch (loss) {
        case LossKind::triplet: return "triplet";
        case LossKind::normalized_softmax: return "normalized_softmax";
        case LossKind::cosface: return "cosface";
        case LossKind::modified_cosface: return "modified_cosface";
    }
    return "?";
}

std::optional<LossKind> parse_loss(std::string_view text) {
    for (auto l : {LossKind::triplet, LossKind::normalized_softmax, LossKind::cosface, LossKind::modified_cosface})
        if (text == to_string(l)) return l;
    return std::nullopt;
}

std::string_view to_string(LrSchedule schedule) { return schedule == LrSchedule::fixed ? "fixed" : "plateau"; }

std::optional<LrSchedule> parse_schedule(std::string_view text) {
    if (text == "fixed") return LrSchedule::fixed;
    if (text == "plateau") return LrSchedule::plateau;
    return std::nullopt;
}

double TrainConfig::effective_lr() const { return lr.value_or(angular() ? 0.001 : 0.0008); }

LrSchedule TrainConfig::effective_schedule() const {
    return schedule.value_or(angular() ? LrSchedule::plateau : LrSchedule::fixed);
}

int TrainConfig::effective_batch_size() const { return batch_size.value_or(angular() ? 64 : 32); }

void TrainConfig::validate() const {
    if (!(effective_lr() > 0.0)) throw ConfigError("train.lr must be > 0");
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (effective_batch_size() < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(s > 0.0)) throw ConfigError("train.s must be > 0");
    if (m < 0.0) throw ConfigError("train.m must be >= 0");
    if (!(alpha > 0.0)) throw ConfigError("train.alpha must be > 0");
    if (mining_start_epoch < 1) throw ConfigError("train.mining_start_epoch must be >= 1");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
        throw ConfigError("train.validation_fraction must be in [0, 1)");
    if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw ConfigError("train.plateau_factor must be in (0, 1)");
    if (plateau_patience < 1) throw ConfigError("train.plateau_patience must be >= 1");
}

SamplerConfig RunConfig::sampler() const {
    SamplerConfig s;
    s.exemplars_per_id = exemplars_per_id;
    s.batch_size = train.effective_batch_size();
    s.include_singletons = include_singletons.value_or(!train.angular());
    s.seed = train.seed;
    return s;
}

void RunConfig::validate() const {
    preprocess.validate();
    encoder.validate();
    train.validate();
    sampler().validate();
}

namespace {

template <class T>
json opt(const std::optional<T>& v) {
    return v ? json(*v) : json(nullptr);
}

template <class T>
std::optional<T> get_opt(const json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<T>();
}

template <class E, class Parse>
E get_enum(const json& j, const char* key, Parse parse) {
    const auto text = j.at(key).get<std::string>();
    const auto v = parse(text);
    if (!v) throw ConfigError(std::string("unknown value '") + text + "' for " + key);
    return *v;
}

// Rejects keys that the default config does not have.
void check_keys(const json& given, const json& known, const std::string& where) {
    if (!given.is_object()) throw ConfigError(where.empty() ? "config must be a JSON object" : where + " must be an object");
    for (const auto& [key, value] : given.items()) {
        const std::string path = where.empty() ? key : where + "." + key;
        if (!known.contains(key)) throw ConfigError("unknown config key '" + path + "'");
        if (known[key].is_object()) check_keys(value, known[key], path);
    }
}

// Like merge_patch, but a null value sets the key to null instead of removing it.
void merge_into(json& base, const json& patch) {
    for (const auto& [key, value] : patch.items()) {
        if (value.is_object() && base[key].is_object())
            merge_into(base[key], value);
        else
            base[key] = value;
    }
}

}  // namespace

json to_json(const RunConfig& c) {
    const auto& p = c.preprocess;
    const auto& e = c.encoder;
    const auto& t = c.train;
    return json{
        {"preprocess",
         {{"height", p.height},
          {"width", p.width},
          {"use_background_removal", p.use_background_removal},
          {"background_stage", p.background_stage},
          {"equalization", p.equalization == Equalization::global ? "global" : "adaptive"},
          {"gaussian_kernel", p.gaussian_kernel},
          {"gaussian_sigma", p.gaussian_sigma},
          {"canny_low", p.canny_low},
          {"canny_high", p.canny_high},
          {"rotation_max_deg", p.rotation_max_deg},
          {"crop_max_fraction", p.crop_max_fraction},
          {"jitter_brightness", p.jitter_brightness},
          {"jitter_contrast", p.jitter_contrast},
          {"jitter_saturation", p.jitter_saturation},
          {"channel_means", p.channel_means},
          {"channel_stds", p.channel_stds}}},
        {"encoder",
         {{"backbone", to_string(e.backbone)},
          {"embedding_dim", e.embedding_dim},
          {"input_channels", e.input_channels},
          {"stem_adaptation", to_string(e.stem_adaptation)}}},
        {"train",
         {{"loss", to_string(t.loss)},
          {"lr", opt(t.lr)},
          {"schedule", t.schedule ? json(to_string(*t.schedule)) : json(nullptr)},
          {"batch_size", opt(t.batch_size)},
          {"epochs", t.epochs},
          {"s", t.s},
          {"m", t.m},
          {"alpha", t.alpha},
          {"mining_start_epoch", t.mining_start_epoch},
          {"seed", t.seed},
          {"validation_fraction", t.validation_fraction},
          {"plateau_factor", t.plateau_factor},
          {"plateau_patience", t.plateau_patience},
          {"augment", t.augment}}},
        {"sampler", {{"exemplars_per_id", c.exemplars_per_id}, {"include_singletons", opt(c.include_singletons)}}},
        {"paths", {{"cache_dir", c.cache_dir.string()}, {"detections", c.detections.string()}}},
    };
}

RunConfig run_config_from_json(const json& given) {
    json j = to_json(RunConfig{});
    check_keys(given, j, "");
    merge_into(j, given);

    RunConfig c;
    try {
        const auto& p = j.at("preprocess");
        auto& pp = c.preprocess;
        pp.height = p.at("height").get<int>();
        pp.width = p.at("width").get<int>();
        pp.use_background_removal = p.at("use_background_removal").get<bool>();
        pp.background_stage = p.at("background_stage").get<std::string>();
        const auto eq = p.at("equalization").get<std::string>();
        if (eq != "global" && eq != "adaptive") throw ConfigError("unknown value '" + eq + "' for equalization");
        pp.equalization = eq == "global" ? Equalization::global : Equalization::adaptive;
        pp.gaussian_kernel = p.at("gaussian_kernel").get<int>();
        pp.gaussian_sigma = p.at("gaussian_sigma").get<double>();
        pp.canny_low = p.at("canny_low").get<double>();
        pp.canny_high = p.at("canny_high").get<double>();
        pp.rotation_max_deg = p.at("rotation_max_deg").get<double>();
        pp.crop_max_fraction = p.at("crop_max_fraction").get<double>();
        pp.jitter_brightness = p.at("jitter_brightness").get<double>();
        pp.jitter_contrast = p.at("jitter_contrast").get<double>();
        pp.jitter_saturation = p.at("jitter_saturation").get<double>();
        pp.channel_means = p.at("channel_means").get<std::array<float, 4>>();
        pp.channel_stds = p.at("channel_stds").get<std::array<float, 4>>();

        const auto& e = j.at("encoder");
        c.encoder.backbone = get_enum<Backbone>(e, "backbone", parse_backbone);
        c.encoder.embedding_dim = e.at("embedding_dim").get<int>();
        c.encoder.input_channels = e.at("input_channels").get<int>();
        c.encoder.stem_adaptation = get_enum<StemAdaptation>(e, "stem_adaptation", parse_stem_adaptation);

        const auto& t = j.at("train");
        auto& tc = c.train;
        tc.loss = get_enum<LossKind>(t, "loss", parse_loss);
        tc.lr = get_opt<double>(t.at("lr"));
        if (!t.at("schedule").is_null()) tc.schedule = get_enum<LrSchedule>(t, "schedule", parse_schedule);
        tc.batch_size = get_opt<int>(t.at("batch_size"));
        tc.epochs = t.at("epochs").get<int>();
        tc.s = t.at("s").get<double>();
        tc.m = t.at("m").get<double>();
        tc.alpha = t.at("alpha").get<double>();
        tc.mining_start_epoch = t.at("mining_start_epoch").get<int>();
        tc.seed = t.at("seed").get<std::uint64_t>();
        tc.validation_fraction = t.at("validation_fraction").get<double>();
        tc.plateau_factor = t.at("plateau_factor").get<double>();
        tc.plateau_patience = t.at("plateau_patience").get<int>();
        tc.augment = t.at("augment").get<bool>();

        const auto& s = j.at("sampler");
        c.exemplars_per_id = s.at("exemplars_per_id").get<int>();
        c.include_singletons = get_opt<bool>(s.at("include_singletons"));

        const auto& paths = j.at("paths");
        c.cache_dir = paths.at("cache_dir").get<std::string>();
        c.detections = paths.at("detections").get<std::string>();
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("bad config value: ") + ex.what());
    }
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    RunConfig c = run_config_from_json(j);
    const auto base = path.parent_path();
    for (auto* p : {&c.cache_dir, &c.detections})
        if (!p->empty() && p->is_relative()) *p = base / *p;
    if (!c.preprocess.background_stage.empty() && std::filesystem::path(c.preprocess.background_stage).is_relative())
        c.preprocess.background_stage = (base / c.preprocess.background_stage).string();
    return c;
}

void apply_override(RunConfig& cfg, std::string_view assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string_view::npos || dot == std::string_view::npos || dot > eq)
        throw ConfigError("override must look like section.key=value, got '" + std::string(assignment) + "'");
    const std::string section(assignment.substr(0, dot));
    const std::string key(assignment.substr(dot + 1, eq - dot - 1));
    const std::string raw(assignment.substr(eq + 1));
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw;
    }
    json j = to_json(cfg);
    if (!j.contains(section) || !j[section].contains(key))
        throw ConfigError("unknown config key '" + section + "." + key + "'");
    j[section][key] = value;
    cfg = run_config_from_json(j);
}

std::string config_fingerprint(const RunConfig& cfg) {
    // Paths say where data lives, not how the model was built.
    json j = to_json(cfg);
    j.erase("paths");
    const std::string text = j.dump();
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace flankid
