#include "reflekt/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

#include <openssl/evp.h>

#include "json.hpp"
#include "reflekt/sde.hpp"

#ifndef REFLEKT_CODE_VERSION
#define REFLEKT_CODE_VERSION "unknown"
#endif

namespace reflekt::cli {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- config parsing

namespace {

const std::set<std::string> kSections = {"domain",   "diffusivity", "p0",         "schedule", "sde",
                                         "training", "nets",        "evaluation", "seeds",    "output_dir"};
const std::set<std::string> kSeedNames = {"data", "train", "sde", "generate", "bootstrap", "rate"};

// Reads one config section and rejects keys that were never asked for.
class Section {
public:
    Section(const json& root, std::string name) : name_(std::move(name)) {
        if (root.contains(name_)) {
            if (!root.at(name_).is_object()) throw ConfigError("config: section '" + name_ + "' must be an object");
            obj_ = root.at(name_);
        } else {
            obj_ = json::object();
        }
    }

    double num(const std::string& key, double def) {
        const json* v = find(key);
        if (!v) return def;
        if (!v->is_number()) throw type_error(key, "a number");
        return v->get<double>();
    }
    int integer(const std::string& key, int def) {
        const json* v = find(key);
        if (!v) return def;
        if (!v->is_number_integer()) throw type_error(key, "an integer");
        return v->get<int>();
    }
    bool boolean(const std::string& key, bool def) {
        const json* v = find(key);
        if (!v) return def;
        if (!v->is_boolean()) throw type_error(key, "a boolean");
        return v->get<bool>();
    }
    std::string str(const std::string& key, const std::string& def, const std::set<std::string>& allowed = {}) {
        const json* v = find(key);
        if (!v) return def;
        if (!v->is_string()) throw type_error(key, "a string");
        std::string s = v->get<std::string>();
        if (!allowed.empty() && !allowed.count(s)) {
            std::string opts;
            for (const auto& a : allowed) opts += (opts.empty() ? "" : ", ") + a;
            throw ConfigError("config: " + name_ + "." + key + " must be one of {" + opts + "}, got '" + s + "'");
        }
        return s;
    }
    std::vector<double> nums(const std::string& key, const std::vector<double>& def) {
        const json* v = find(key);
        if (!v) return def;
        if (!v->is_array()) throw type_error(key, "an array of numbers");
        std::vector<double> out;
        for (const auto& e : *v) {
            if (!e.is_number()) throw type_error(key, "an array of numbers");
            out.push_back(e.get<double>());
        }
        return out;
    }
    std::vector<int> ints(const std::string& key, const std::vector<int>& def) {
        const json* v = find(key);
        if (!v) return def;
        if (!v->is_array()) throw type_error(key, "an array of integers");
        std::vector<int> out;
        for (const auto& e : *v) {
            if (!e.is_number_integer()) throw type_error(key, "an array of integers");
            out.push_back(e.get<int>());
        }
        return out;
    }
    void finish() const {
        for (const auto& item : obj_.items())
            if (!used_.count(item.key())) throw ConfigError("config: unknown key '" + name_ + "." + item.key() + "'");
    }

private:
    const json* find(const std::string& key) {
        used_.insert(key);
        auto it = obj_.find(key);
        return it == obj_.end() ? nullptr : &*it;
    }
    ConfigError type_error(const std::string& key, const std::string& what) const {
        return ConfigError("config: " + name_ + "." + key + " must be " + what);
    }

    std::string name_;
    json obj_;
    std::set<std::string> used_;
};

void apply_override(json& root, const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + spec + "': expected key.path=value");
    const std::string path = spec.substr(0, eq), text = spec.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::parse_error&) {
        value = text;
    }
    std::vector<std::string> parts;
    std::stringstream ss(path);
    for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
    if (parts.empty() || parts.size() > 2) throw ConfigError("override '" + spec + "': key must be section.key");
    if (parts.size() == 1) {
        root[parts[0]] = value;
    } else {
        json& sec = root[parts[0]];
        if (sec.is_null()) sec = json::object();
        if (!sec.is_object()) throw ConfigError("override '" + spec + "': section is not an object");
        sec[parts[1]] = value;
    }
}

void validate(const RunConfig& c) {
    const std::size_t d = c.lows.size();
    if (d < 1 || d > 3 || c.highs.size() != d) throw ConfigError("config: domain needs 1 to 3 matching lows/highs");
    for (std::size_t i = 0; i < d; ++i)
        if (!(c.lows[i] < c.highs[i])) throw ConfigError("config: domain.lows must be below domain.highs");
    if (c.modes < 2) throw ConfigError("config: domain.modes must be at least 2");
    if (c.diffusivity == "constant" && !(c.diffusivity_c > 0.0)) throw ConfigError("config: diffusivity.c must be positive");
    if (c.diffusivity == "cosine") {
        if (c.cosine_scale.size() != d || c.cosine_amplitude.size() != d)
            throw ConfigError("config: diffusivity.scale and diffusivity.amplitude need one entry per axis");
        for (std::size_t i = 0; i < d; ++i)
            if (!(c.cosine_scale[i] > 0.0) || !(std::abs(c.cosine_amplitude[i]) < 1.0))
                throw ConfigError("config: cosine diffusivity needs scale > 0 and |amplitude| < 1");
    }
    if (c.p0_mode < 1 || c.p0_mode > c.modes) throw ConfigError("config: p0.mode must be in [1, modes]");
    if (c.p0_s < 1 || !(c.p0_beta > 0.0 && c.p0_beta <= 1.0)) throw ConfigError("config: need p0.s >= 1 and beta in (0, 1]");
    if (!(c.n > 1.0) || !(c.c_lo > 0.0)) throw ConfigError("config: need schedule.n > 1 and schedule.c_lo > 0");
    if (!(c.dt > 0.0) || !(c.T > 0.0)) throw ConfigError("config: need sde.dt > 0 and sde.T > 0");
    if (c.paths < 1 || c.samples < 1 || c.record_stride < 0) throw ConfigError("config: need sde.paths, sde.samples >= 1");
    if (c.hidden.empty()) throw ConfigError("config: training.hidden must list at least one layer");
    for (int w : c.hidden)
        if (w < 1) throw ConfigError("config: training.hidden widths must be positive");
    if (c.schedule.epochs < 1 || c.schedule.batch_size < 1 || !(c.schedule.step_size > 0.0))
        throw ConfigError("config: need training.epochs, training.batch >= 1 and training.step > 0");
    if (c.draws_per_point < 1) throw ConfigError("config: training.draws_per_point must be positive");
    if (!(c.validation_fraction > 0.0 && c.validation_fraction < 1.0))
        throw ConfigError("config: training.validation_fraction must be in (0, 1)");
    if (c.fp.cells < 8 || c.fp.steps < 1) throw ConfigError("config: need evaluation.fp_cells >= 8, fp_steps >= 1");
    if (c.resamples < 0) throw ConfigError("config: evaluation.resamples must be nonnegative");
    if (c.rate_ns.size() < 3 || c.rate_seeds < 1) throw ConfigError("config: need 3 rate_ns values and rate_seeds >= 1");
}

}  // namespace

RunConfig parse_config(const std::string& text, const std::vector<std::string>& overrides) {
    json root;
    try {
        root = text.empty() ? json::object() : json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    if (!root.is_object()) throw ConfigError("config: top level must be an object");
    for (const auto& o : overrides) apply_override(root, o);
    for (const auto& item : root.items())
        if (!kSections.count(item.key())) throw ConfigError("config: unknown section '" + item.key() + "'");

    RunConfig c;
    {
        Section s(root, "domain");
        c.lows = s.nums("lows", c.lows);
        c.highs = s.nums("highs", c.highs);
        c.modes = s.integer("modes", c.modes);
        s.finish();
    }
    {
        Section s(root, "diffusivity");
        c.diffusivity = s.str("kind", c.diffusivity, {"constant", "cosine"});
        c.diffusivity_c = s.num("c", c.diffusivity_c);
        c.cosine_scale = s.nums("scale", c.cosine_scale);
        c.cosine_amplitude = s.nums("amplitude", c.cosine_amplitude);
        s.finish();
    }
    {
        Section s(root, "p0");
        c.p0_kind = s.str("kind", c.p0_kind, {"uniform", "single_mode", "synthetic"});
        c.p0_mode = s.integer("mode", c.p0_mode);
        c.p0_amplitude = s.num("amplitude", c.p0_amplitude);
        c.p0_decay = s.num("decay", c.p0_decay);
        c.p0_s = s.integer("s", c.p0_s);
        c.p0_beta = s.num("beta", c.p0_beta);
        s.finish();
    }
    {
        Section s(root, "schedule");
        c.n = s.num("n", c.n);
        c.c_lo = s.num("c_lo", c.c_lo);
        c.T_lo = s.num("T_lo", c.T_lo);
        c.T_hi = s.num("T_hi", c.T_hi);
        s.finish();
    }
    {
        Section s(root, "sde");
        c.dt = s.num("dt", c.dt);
        c.T = s.num("T", c.T);
        c.paths = s.integer("paths", c.paths);
        c.record_stride = s.integer("record_stride", c.record_stride);
        c.samples = s.integer("samples", c.samples);
        c.table_space_nodes = s.integer("table_space_nodes", c.table_space_nodes);
        c.table_time_nodes = s.integer("table_time_nodes", c.table_time_nodes);
        s.finish();
    }
    {
        Section s(root, "training");
        c.hidden = s.ints("hidden", c.hidden);
        c.schedule.epochs = s.integer("epochs", c.schedule.epochs);
        c.schedule.batch_size = s.integer("batch", c.schedule.batch_size);
        c.schedule.step_size = s.num("step", c.schedule.step_size);
        c.schedule.momentum = s.num("momentum", c.schedule.momentum);
        c.schedule.decay = s.num("decay", c.schedule.decay);
        c.schedule.grad_clip = s.num("grad_clip", c.schedule.grad_clip);
        c.draws_per_point = s.integer("draws_per_point", c.draws_per_point);
        c.time_sampling = s.str("time_sampling", c.time_sampling, {"uniform", "log_uniform"});
        c.validation_fraction = s.num("validation_fraction", c.validation_fraction);
        c.clamp_C = s.num("clamp_C", c.clamp_C);
        s.finish();
    }
    {
        Section s(root, "nets");
        c.score = s.str("score", c.score, {"exact", "network", "trained"});
        c.primitives = s.str("primitives", c.primitives, {"network", "exact"});
        c.ell = s.integer("ell", c.ell);
        c.N = s.integer("N", c.N);
        s.finish();
    }
    {
        Section s(root, "evaluation");
        c.fp.cells = s.integer("fp_cells", c.fp.cells);
        c.fp.steps = s.integer("fp_steps", c.fp.steps);
        c.fp.richardson = s.boolean("fp_richardson", c.fp.richardson);
        c.bins = s.integer("bins", c.bins);
        c.resamples = s.integer("resamples", c.resamples);
        c.rate_ns = s.nums("rate_ns", c.rate_ns);
        c.rate_seeds = s.integer("rate_seeds", c.rate_seeds);
        c.rate_mode = s.str("rate_mode", c.rate_mode, {"exact_network", "trained", "exact_score"});
        s.finish();
    }
    if (root.contains("seeds")) {
        const json& sd = root.at("seeds");
        if (!sd.is_object()) throw ConfigError("config: section 'seeds' must be an object");
        for (const auto& item : sd.items()) {
            if (!kSeedNames.count(item.key())) throw ConfigError("config: unknown key 'seeds." + item.key() + "'");
            if (!item.value().is_number_unsigned()) throw ConfigError("config: seeds." + item.key() + " must be a nonnegative integer");
            c.seeds[item.key()] = item.value().get<std::uint64_t>();
        }
    }
    if (root.contains("output_dir")) {
        if (!root.at("output_dir").is_string()) throw ConfigError("config: output_dir must be a string");
        c.output_dir = root.at("output_dir").get<std::string>();
    }
    validate(c);
    return c;
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot read " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str(), overrides);
}

namespace {

json effective(const RunConfig& c) {
    json j;
    j["domain"] = {{"lows", c.lows}, {"highs", c.highs}, {"modes", c.modes}};
    j["diffusivity"] = {{"kind", c.diffusivity}, {"c", c.diffusivity_c}, {"scale", c.cosine_scale},
                        {"amplitude", c.cosine_amplitude}};
    j["p0"] = {{"kind", c.p0_kind}, {"mode", c.p0_mode}, {"amplitude", c.p0_amplitude},
               {"decay", c.p0_decay}, {"s", c.p0_s},       {"beta", c.p0_beta}};
    j["schedule"] = {{"n", c.n}, {"c_lo", c.c_lo}, {"T_lo", c.T_lo}, {"T_hi", c.T_hi}};
    j["sde"] = {{"dt", c.dt},
                {"T", c.T},
                {"paths", c.paths},
                {"record_stride", c.record_stride},
                {"samples", c.samples},
                {"table_space_nodes", c.table_space_nodes},
                {"table_time_nodes", c.table_time_nodes}};
    j["training"] = {{"hidden", c.hidden},
                     {"epochs", c.schedule.epochs},
                     {"batch", c.schedule.batch_size},
                     {"step", c.schedule.step_size},
                     {"momentum", c.schedule.momentum},
                     {"decay", c.schedule.decay},
                     {"grad_clip", c.schedule.grad_clip},
                     {"draws_per_point", c.draws_per_point},
                     {"time_sampling", c.time_sampling},
                     {"validation_fraction", c.validation_fraction},
                     {"clamp_C", c.clamp_C}};
    j["nets"] = {{"score", c.score}, {"primitives", c.primitives}, {"ell", c.ell}, {"N", c.N}};
    j["evaluation"] = {{"fp_cells", c.fp.cells},   {"fp_steps", c.fp.steps}, {"fp_richardson", c.fp.richardson},
                       {"bins", c.bins},           {"resamples", c.resamples}, {"rate_ns", c.rate_ns},
                       {"rate_seeds", c.rate_seeds}, {"rate_mode", c.rate_mode}};
    json seeds = json::object();
    for (const auto& [k, v] : c.seeds) seeds[k] = v;
    j["seeds"] = seeds;
    j["output_dir"] = c.output_dir;
    return j;
}

}  // namespace

std::string RunConfig::effective_json() const { return effective(*this).dump(); }

std::uint64_t RunConfig::seed(const std::string& name) const {
    auto it = seeds.find(name);
    if (it == seeds.end()) throw ConfigError("config: seeds." + name + " is required by this command");
    return it->second;
}

const std::string& RunConfig::require_output_dir() const {
    if (output_dir.empty()) throw ConfigError("config: output_dir is required");
    return output_dir;
}

std::string default_config_json() { return effective(RunConfig{}).dump(2) + "\n"; }

// ---------------------------------------------------------------- hashing and manifest

namespace {

std::string hex(const unsigned char* p, unsigned n) {
    static const char* digits = "0123456789abcdef";
    std::string s(2 * n, '0');
    for (unsigned i = 0; i < n; ++i) {
        s[2 * i] = digits[p[i] >> 4];
        s[2 * i + 1] = digits[p[i] & 15];
    }
    return s;
}

std::string sha256_bytes(const std::string& data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx, data.data(), data.size()) != 1 || EVP_DigestFinal_ex(ctx, md, &len) != 1) {
        EVP_MD_CTX_free(ctx);
        throw std::runtime_error("sha256: digest failed");
    }
    EVP_MD_CTX_free(ctx);
    return hex(md, len);
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << text;
}

void write_json(const std::string& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

std::string prepare_dir(const RunConfig& c) {
    const std::string& dir = c.require_output_dir();
    fs::create_directories(dir);
    return dir;
}

std::string in_dir(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void require_artifact(const std::string& dir, const std::string& name, const std::string& producer) {
    if (!fs::exists(in_dir(dir, name)))
        throw DependencyError("missing upstream artifact " + in_dir(dir, name) + "; run 'reflekt " + producer +
                              "' with this config first");
}

void update_manifest(const std::string& dir, const std::string& command, const RunConfig& cfg,
                     const std::vector<std::string>& seed_names, const std::vector<std::string>& outputs) {
    const std::string path = in_dir(dir, "manifest.json");
    json m = json::object();
    if (fs::exists(path)) {
        try {
            m = json::parse(read_file(path));
        } catch (const json::parse_error&) {
            m = json::object();
        }
        if (!m.is_object()) m = json::object();
    }
    m["format"] = "reflekt-manifest";
    json entry;
    entry["code_version"] = code_version();
    entry["config_sha256"] = sha256_bytes(cfg.effective_json());
    entry["config"] = json::parse(cfg.effective_json());
    json seeds = json::object();
    for (const auto& s : seed_names) seeds[s] = cfg.seed(s);
    entry["seeds"] = seeds;
    json outs = json::array();
    for (const auto& o : outputs) {
        const std::string p = in_dir(dir, o);
        outs.push_back({{"path", o}, {"sha256", sha256_file(p)}, {"bytes", fs::file_size(p)}});
    }
    entry["outputs"] = outs;
    m["commands"][command] = entry;
    write_json(path, m);
}

}  // namespace

std::string sha256_file(const std::string& path) { return sha256_bytes(read_file(path)); }

std::string code_version() { return REFLEKT_CODE_VERSION; }

std::string audit_path_for(const std::string& net_path) {
    fs::path p(net_path);
    return (p.parent_path() / (p.stem().string() + ".audit.json")).string();
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string s = "region,measured_error,stated_bound,pass\n";
    for (const auto& r : rows) {
        std::string region = r.region;
        std::replace(region.begin(), region.end(), ',', ';');
        s += region + "," + format_double(r.measured) + "," + format_double(r.bound) + "," + (r.pass ? "1" : "0") + "\n";
    }
    return s;
}

// ---------------------------------------------------------------- problem setup

namespace {

struct Problem {
    BoxDomain domain;
    Diffusivity diffusivity;
    SpectralBasis basis;
    InitialDensity p0;
    Schedule sc;
    int d = 1;
};

Diffusivity make_diffusivity(const RunConfig& c) {
    if (c.diffusivity == "constant") return Diffusivity::constant(c.diffusivity_c);
    std::vector<AxisFunction> axes;
    double fmin = 1e300, fmax = 0.0;
    for (std::size_t i = 0; i < c.lows.size(); ++i) {
        const double s = c.cosine_scale[i], a = c.cosine_amplitude[i], lo = c.lows[i];
        const double k = M_PI / (c.highs[i] - c.lows[i]);
        axes.push_back({[s, a, lo, k](double x) { return s * (1.0 + a * std::cos(k * (x - lo))); },
                        [s, a, lo, k](double x) { return -s * a * k * std::sin(k * (x - lo)); }});
        fmin = std::min(fmin, s * (1.0 - std::abs(a)));
        fmax = std::max(fmax, s * (1.0 + std::abs(a)));
    }
    return Diffusivity::separable(std::move(axes), fmin, fmax, "cosine");
}

std::unique_ptr<Problem> make_problem(const RunConfig& c) {
    auto P = std::make_unique<Problem>();
    P->domain = BoxDomain(c.lows, c.highs);
    P->d = P->domain.dim();
    P->diffusivity = make_diffusivity(c);
    P->basis = build_basis(P->domain, P->diffusivity, c.modes);
    if (c.p0_kind == "uniform")
        P->p0 = uniform_density(P->basis);
    else if (c.p0_kind == "single_mode")
        P->p0 = single_mode_density(P->basis, c.p0_mode, c.p0_amplitude, c.p0_s);
    else
        P->p0 = synthetic_density(P->basis, c.p0_amplitude, c.p0_decay, c.p0_s, c.p0_beta);
    P->p0.beta = c.p0_beta;
    P->sc = Schedule::make(c.n, c.p0_s, P->d, c.p0_beta, P->basis.eigenvalue(1), c.c_lo);
    if (c.T_lo > 0.0) P->sc.T_lo = c.T_lo;
    if (c.T_hi > 0.0) P->sc.T_hi = c.T_hi;
    if (c.N > 0) P->sc.N = c.N;
    P->sc.validate();
    return P;
}

ScoreNetConfig score_net_config(const RunConfig& c, const Problem& P) {
    ScoreNetConfig cfg;
    cfg.spacetime.N = std::min(P.sc.N, P.basis.J());
    cfg.spacetime.T_lo = P.sc.T_lo;
    cfg.spacetime.T_hi = P.sc.T_hi;
    cfg.spacetime.primitives = c.primitives == "exact" ? PrimitiveMode::Exact : PrimitiveMode::Network;
    cfg.spacetime.spatial = SpatialKind::Exact;
    cfg.ell = c.ell;
    return cfg;
}

json schedule_json(const Schedule& sc) {
    return {{"n", sc.n}, {"T_lo", sc.T_lo}, {"T_hi", sc.T_hi}, {"N", sc.N}, {"s", sc.s}, {"beta", sc.beta}};
}

json size_json(const SizeBudget& s) {
    return {{"L", s.L}, {"W_inf", s.W_inf}, {"S", s.S}, {"B", s.B}, {"widths", s.widths}};
}

SdeConfig sde_base(const RunConfig& c, const Problem& P) {
    SdeConfig s;
    s.domain = P.domain;
    s.diffusivity = P.diffusivity;
    s.dt = c.dt;
    s.T = c.T;
    s.record_stride = c.record_stride;
    return s;
}

// Score sources shared by generate and evaluate. Owns whatever the field and slice refer to.
struct ScoreSource {
    std::unique_ptr<ScoreNet> network;
    std::unique_ptr<TrainableNet> trained;
    ScoreField field;
    ScoreSlice slice;
};

std::unique_ptr<ScoreSource> make_score_source(const RunConfig& c, const Problem& P, const std::string& dir) {
    auto src = std::make_unique<ScoreSource>();
    if (c.score == "exact") {
        src->field = exact_score_field(P.basis, P.p0);
        src->slice = exact_score_slice(P.basis, P.p0);
    } else if (c.score == "network") {
        src->network = std::make_unique<ScoreNet>(P.basis, P.p0, score_net_config(c, P));
        const ScoreNet* net = src->network.get();
        src->field = [net](const double* x, double t, double* out) { net->eval(x, t, out); };
        src->slice = slice_of(*net);
    } else {
        require_artifact(dir, "score_net.json", "train");
        require_artifact(dir, "score_net.opt.json", "train");
        src->trained = std::make_unique<TrainableNet>(
            TrainableNet::load(in_dir(dir, "score_net.json"), in_dir(dir, "score_net.opt.json")));
        const TrainableNet& tn = *src->trained;
        auto close = [](double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(std::abs(a), std::abs(b)); };
        if (!close(tn.T_lo(), P.sc.T_lo) || !close(tn.T_hi(), P.sc.T_hi) || tn.dim() != P.d)
            throw DependencyError("score_net.json in " + dir +
                                  " was trained for a different schedule or domain; rerun 'reflekt train'");
        src->field = tn.field();
        src->slice = slice_of(src->field, P.d);
    }
    return src;
}

}  // namespace

// ---------------------------------------------------------------- pipeline commands

int cmd_simulate(const RunConfig& cfg, const CommandOptions&) {
    const std::string dir = prepare_dir(cfg);
    auto P = make_problem(cfg);
    SdeConfig sc = sde_base(cfg, *P);
    sc.seed = cfg.seed("sde");
    sc.validate();
    PathEnsemble ens = simulate(sc, forward_drift(P->diffusivity, P->d), InitSpec::from_density(P->basis, P->p0), cfg.paths);
    export_ensemble_csv(ens, in_dir(dir, "forward_paths.csv"));

    json summary;
    summary["paths"] = ens.n_paths;
    summary["steps"] = sc.steps();
    summary["T"] = sc.T;
    double lt = 0.0;
    const int last = ens.records() - 1;
    for (int p = 0; p < ens.n_paths; ++p) lt += ens.local_time[static_cast<std::size_t>(last) * ens.n_paths + p];
    summary["mean_local_time"] = lt / ens.n_paths;
    if (ens.n_paths >= 1000) {
        SampleTv tv = tv_samples_vs_density(ens.final_points(), marginal_density_fn(P->basis, P->p0, sc.T), P->domain,
                                            cfg.bins, cfg.resamples, cfg.seed("sde"));
        summary["tv_to_marginal"] = {{"tv", tv.tv},       {"lower", tv.lower},         {"upper", tv.upper},
                                     {"bias_floor", tv.bias_floor}, {"bins_per_axis", tv.bins_per_axis}};
    }
    write_json(in_dir(dir, "forward_summary.json"), summary);
    update_manifest(dir, "simulate", cfg, {"sde"}, {"forward_paths.csv", "forward_summary.json"});
    return ExitOk;
}

int cmd_train(const RunConfig& cfg, const CommandOptions&) {
    const std::string dir = prepare_dir(cfg);
    auto P = make_problem(cfg);
    const std::uint64_t data_seed = cfg.seed("data"), train_seed = cfg.seed("train");
    std::mt19937_64 rng = make_rng(data_seed, 0);
    const int n = static_cast<int>(std::llround(cfg.n));
    const int n_val = std::max(250, static_cast<int>(std::llround(cfg.validation_fraction * n)));
    std::vector<Point> data = sample_initial(P->basis, P->p0, n, rng);
    std::vector<Point> val = sample_initial(P->basis, P->p0, n_val, rng);
    export_points_csv(data, in_dir(dir, "data.csv"));

    const TimeSampling ts = cfg.time_sampling == "uniform" ? TimeSampling::Uniform : TimeSampling::LogUniform;
    auto tr = make_denoising_batch(P->basis, P->sc.T_lo, P->sc.T_hi, data, cfg.draws_per_point, train_seed * 2 + 1, ts);
    auto va = make_denoising_batch(P->basis, P->sc.T_lo, P->sc.T_hi, val, cfg.draws_per_point, train_seed * 2 + 2, ts);
    TrainableConfig tc;
    tc.hidden = cfg.hidden;
    tc.clamp_C = cfg.clamp_C > 0.0 ? cfg.clamp_C : default_clamp_constant(P->basis, P->p0);
    tc.seed = train_seed;
    TrainSchedule sch = cfg.schedule;
    sch.seed = train_seed;
    TrainResult res = train(TrainableNet(P->domain, P->sc.T_lo, P->sc.T_hi, tc), tr, va, sch);
    res.net.save(in_dir(dir, "score_net.json"), in_dir(dir, "score_net.opt.json"));
    write_trace_csv(res.trace, in_dir(dir, "train_trace.csv"));

    json summary;
    summary["schedule"] = schedule_json(P->sc);
    summary["best_epoch"] = res.best_epoch;
    for (const auto& row : res.trace)
        if (row.epoch == res.best_epoch) summary["best_val_loss"] = row.val_loss;
    summary["parameters"] = res.net.parameter_count();
    summary["clamp_C"] = tc.clamp_C;
    summary["score_gap"] = explicit_score_gap(res.net.field(), P->basis, P->p0, P->sc.T_lo, P->sc.T_hi);
    summary["zero_score_gap"] = explicit_score_gap(zero_score(P->d), P->basis, P->p0, P->sc.T_lo, P->sc.T_hi);
    write_json(in_dir(dir, "train_summary.json"), summary);
    update_manifest(dir, "train", cfg, {"data", "train"},
                    {"data.csv", "score_net.json", "score_net.opt.json", "train_trace.csv", "train_summary.json"});
    return ExitOk;
}

int cmd_generate(const RunConfig& cfg, const CommandOptions&) {
    const std::string dir = prepare_dir(cfg);
    auto P = make_problem(cfg);
    const std::uint64_t seed = cfg.seed("generate");
    auto src = make_score_source(cfg, *P, dir);
    const int nodes = cfg.table_space_nodes;
    std::shared_ptr<const ScoreTable> table;
    DriftSpec::Kind kind = DriftSpec::Kind::BackwardNetwork;
    if (cfg.score == "exact") {
        table = std::make_shared<ScoreTable>(
            exact_score_table(P->basis, P->p0, P->sc.T_lo, P->sc.T_hi, nodes, cfg.table_time_nodes));
        kind = DriftSpec::Kind::BackwardExact;
    } else if (cfg.score == "network") {
        table = std::make_shared<ScoreTable>(
            network_score_table(P->basis, *src->network, P->sc.T_lo, P->sc.T_hi, nodes, cfg.table_time_nodes));
    } else {
        const int d = P->d;
        const int ns = nodes > 0 ? nodes : (d == 1 ? 1025 : (d == 2 ? 129 : 17));
        const ScoreSlice slice = src->slice;
        table = std::make_shared<ScoreTable>(
            P->domain, P->sc.T_lo, P->sc.T_hi, ns, cfg.table_time_nodes,
            [slice](double t, const std::vector<double>& xs, std::size_t n, std::vector<double>& out) {
                slice(t, xs.data(), n, out.data());
            });
    }
    GenerateOptions go;
    go.dt = cfg.dt;
    go.seed = seed;
    std::vector<Point> samples =
        generate(sde_base(cfg, *P), backward_drift(P->diffusivity, table, kind), P->sc.T_lo, P->sc.T_hi, cfg.samples, go);
    export_points_csv(samples, in_dir(dir, "samples.csv"));
    update_manifest(dir, "generate", cfg, {"generate"}, {"samples.csv"});
    return ExitOk;
}

int cmd_evaluate(const RunConfig& cfg, const CommandOptions& opt) {
    const std::string dir = prepare_dir(cfg);
    require_artifact(dir, "samples.csv", "generate");
    auto P = make_problem(cfg);
    const std::uint64_t seed = cfg.seed("bootstrap");
    auto src = make_score_source(cfg, *P, dir);
    std::vector<Point> samples = import_points_csv(in_dir(dir, "samples.csv"));
    SampleTv st = tv_samples_vs_density(samples, initial_density_fn(P->basis, P->p0), P->domain, cfg.bins,
                                        cfg.resamples, seed);

    ErrorReport rep;
    if (P->d == 1) {
        rep = error_report(P->basis, P->p0, src->slice, src->field, P->sc.T_lo, P->sc.T_hi, cfg.fp);
    } else {
        auto t0 = std::chrono::steady_clock::now();
        rep.tv_early_stop = early_stop_error(P->basis, P->p0, P->sc.T_lo);
        ErgodicResult e = ergodic_error(P->basis, P->p0, P->sc.T_hi);
        rep.tv_ergodic = e.measured;
        rep.ergodic_bound = e.bound;
        ScoreTerm term = score_term(P->basis, P->p0, src->field, P->sc.T_lo, P->sc.T_hi);
        rep.kl_score = term.kl;
        rep.tv_score_bound = term.tv_bound;
        rep.total_tv = st.tv;
        rep.total_tv_lower = st.lower;
        rep.total_tv_upper = st.upper;
        rep.total_method = "samples";
        rep.slack = rep.tv_early_stop + rep.tv_ergodic + rep.tv_score_bound - rep.total_tv;
        // the binned estimate carries its own noise floor, so the comparison uses the lower end
        rep.decomposition_holds = rep.tv_early_stop + rep.tv_ergodic + rep.tv_score_bound >= rep.total_tv_lower - 1e-3;
        rep.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    if (!opt.record_timing) rep.wall_time_s = 0.0;
    ErgodicResult erg = ergodic_error(P->basis, P->p0, P->sc.T_hi);

    json out;
    out["score_source"] = cfg.score;
    out["schedule"] = schedule_json(P->sc);
    out["error_report"] = json::parse(to_json(rep));
    out["ergodic_bound_holds"] = erg.holds;
    out["sample_tv"] = {{"tv", st.tv},
                        {"lower", st.lower},
                        {"upper", st.upper},
                        {"se", st.se},
                        {"bias_floor", st.bias_floor},
                        {"bins_per_axis", st.bins_per_axis},
                        {"samples", samples.size()}};
    write_json(in_dir(dir, "report.json"), out);
    update_manifest(dir, "evaluate", cfg, {"bootstrap"}, {"report.json"});
    return erg.holds && rep.decomposition_holds ? ExitOk : ExitBoundViolation;
}

int cmd_rate_study(const RunConfig& cfg, const CommandOptions& opt) {
    const std::string dir = prepare_dir(cfg);
    auto P = make_problem(cfg);
    RateStudyConfig rc;
    rc.ns = cfg.rate_ns;
    rc.seeds = cfg.rate_seeds;
    rc.base_seed = cfg.seed("rate");
    rc.s = cfg.p0_s;
    rc.beta = cfg.p0_beta;
    rc.c_lo = cfg.c_lo;
    rc.mode = cfg.rate_mode == "exact_network" ? RateMode::ExactNetwork
              : cfg.rate_mode == "trained"     ? RateMode::Trained
                                               : RateMode::ExactScore;
    rc.fp = cfg.fp;
    rc.draws_per_point = cfg.draws_per_point;
    rc.hidden = cfg.hidden;
    rc.schedule = cfg.schedule;
    rc.csv_path = in_dir(dir, "rate_study.csv");
    rc.record_time = opt.record_timing;
    RateStudyResult res = rate_study(P->basis, P->p0, rc);

    const double target = -static_cast<double>(cfg.p0_s) / (2.0 * cfg.p0_s + P->d);
    json fit = {{"slope", res.fit.slope},
                {"intercept", res.fit.intercept},
                {"slope_se", res.fit.slope_se},
                {"slope_lower", res.slope_lower},
                {"slope_upper", res.slope_upper},
                {"target_slope", target},
                {"rows", res.rows.size()},
                {"mode", cfg.rate_mode}};
    write_json(in_dir(dir, "rate_fit.json"), fit);
    update_manifest(dir, "rate-study", cfg, {"rate"}, {"rate_study.csv", "rate_fit.json"});
    return ExitOk;
}

// ---------------------------------------------------------------- build-net / verify

namespace {

const std::set<std::string> kNetKinds = {"mult", "reciprocal", "cap", "chebyshev", "hN", "score"};

int required(int v, const char* flag, const std::string& kind) {
    if (v < 0) throw ConfigError("build-net " + kind + ": " + flag + " is required");
    return v;
}

// Grid plus seeded uniform points on [lo, hi] (log-spaced when log_scale), deterministic for a seed.
std::vector<double> axis_points(double lo, double hi, int count, bool log_scale, std::mt19937_64& rng) {
    std::vector<double> v;
    const int grid = std::max(2, count / 2);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    auto at = [&](double u) { return log_scale ? lo * std::pow(hi / lo, u) : lo + (hi - lo) * u; };
    for (int g = 0; g < grid; ++g) v.push_back(at(static_cast<double>(g) / (grid - 1)));
    for (int r = grid; r < count; ++r) v.push_back(at(U(rng)));
    return v;
}

std::string interval(const std::string& name, double a, double b) {
    return name + "[" + format_double(a) + " " + format_double(b) + "]";
}

std::vector<SweepRow> sweep_relu(const std::string& kind, const json& params, const ReluNetwork& net, int points,
                                 std::uint64_t seed) {
    CompiledNet c(net);
    std::mt19937_64 rng = make_rng(seed, 11);
    std::vector<SweepRow> rows;
    if (kind == "mult") {
        const int m = params.at("m");
        const double C = params.at("C");
        const double bound = C * std::ldexp(1.0, -m);
        const int per = std::max(16, points / 16);
        const int side = std::max(2, static_cast<int>(std::sqrt(per / 2.0)));
        std::uniform_real_distribution<double> U(0.0, 1.0);
        for (int a = 0; a < 4; ++a)
            for (int b = 0; b < 4; ++b) {
                const double x0 = a / 4.0, x1 = (a + 1) / 4.0, y0 = -C + b * C / 2, y1 = y0 + C / 2;
                double worst = 0.0;
                auto check = [&](double x, double y) {
                    const double in[2] = {x, y};
                    double out;
                    c.eval(in, &out);
                    worst = std::max(worst, std::abs(out - x * y));
                };
                for (int i = 0; i < side; ++i)
                    for (int j = 0; j < side; ++j)
                        check(x0 + (x1 - x0) * i / (side - 1), y0 + (y1 - y0) * j / (side - 1));
                for (int r = side * side; r < per; ++r) check(x0 + (x1 - x0) * U(rng), y0 + (y1 - y0) * U(rng));
                rows.push_back({interval("x", x0, x1) + " " + interval("y", y0, y1), worst, bound, worst <= bound});
            }
    } else if (kind == "reciprocal") {
        const int m = params.at("m"), lo = params.at("k_lo"), hi = params.at("k_hi");
        const double bound = std::ldexp(1.0, -m);
        const int regions = lo + hi;
        for (int j = -lo; j < hi; ++j) {
            const double a = std::ldexp(1.0, j), b = std::ldexp(1.0, j + 1);
            double worst = 0.0;
            for (double x : axis_points(a, b, std::max(16, points / regions), true, rng))
                worst = std::max(worst, std::abs(c.eval1(&x) - 1.0 / x));
            rows.push_back({interval("x", a, b), worst, bound, worst <= bound});
        }
    } else if (kind == "cap") {
        // the band 1/4 <= phi sqrt(t) <= 7/4 is |phi sqrt(t) - 1| <= 3/4
        const int m = params.at("m");
        for (int j = 0; j < m; ++j) {
            const double a = std::ldexp(1.0, -j - 1), b = std::ldexp(1.0, -j);
            double worst = 0.0;
            for (double t : axis_points(a, b, std::max(16, points / m), true, rng))
                worst = std::max(worst, std::abs(c.eval1(&t) * std::sqrt(t) - 1.0));
            rows.push_back({interval("t", a, b), worst, 0.75, worst <= 0.75});
        }
    } else if (kind == "chebyshev") {
        const int k = params.at("k"), i = params.at("i"), ell3 = params.at("ell3");
        ChebyshevGrid g(k);
        const int levels = chebyshev_pairing(g, i).levels;
        const double bound = (std::ldexp(1.0, levels) - 1.0) * std::ldexp(1.0, -ell3);
        for (int r = 0; r < 8; ++r) {
            const double a = -1.0 + r / 4.0, b = a + 0.25;
            double worst = 0.0;
            for (double t : axis_points(a, b, std::max(16, points / 8), false, rng))
                worst = std::max(worst, std::abs(c.eval1(&t) - g.p(i, t)));
            rows.push_back({interval("t", a, b), worst, bound, worst <= bound});
        }
    }
    return rows;
}

std::vector<Point> space_points(const BoxDomain& D, int count, std::mt19937_64& rng) {
    std::vector<Point> pts;
    const int d = D.dim();
    if (d == 1) {
        for (double x : axis_points(D.lows[0], D.highs[0], count, false, rng)) pts.push_back({x});
        return pts;
    }
    std::uniform_real_distribution<double> U(0.0, 1.0);
    for (int r = 0; r < count; ++r) {
        Point x(d);
        for (int i = 0; i < d; ++i) x[i] = D.lows[i] + D.length(i) * U(rng);
        pts.push_back(x);
    }
    return pts;
}

// Rows per dyadic time interval of the cover, clipped to [T_lo, T_hi].
std::vector<SweepRow> sweep_descriptor(const std::string& kind, const RunConfig& cfg, int points, std::uint64_t seed) {
    auto P = make_problem(cfg);
    ScoreNetConfig snc = score_net_config(cfg, *P);
    std::mt19937_64 rng = make_rng(seed, 13);
    TimeDyadicCover cover(P->sc.T_lo, P->sc.T_hi);
    const int time_per = 8;
    const int space_per = std::max(4, points / (cover.M * time_per));
    std::vector<SweepRow> rows;
    if (kind == "hN") {
        // pointwise Chebyshev bound, so rows report the worst ratio error / bound against 1
        SpaceTimeNet h(P->basis, P->p0, snc.spacetime, -1);
        for (int m = 1; m <= cover.M; ++m) {
            const double a = std::max(P->sc.T_lo, cover.lower(m)), b = std::min(P->sc.T_hi, cover.upper(m));
            double worst = 0.0;
            for (double t : axis_points(a, b, time_per, true, rng))
                for (const Point& x : space_points(P->domain, space_per, rng)) {
                    double bound = 0.0;
                    for (int k = 1; k <= h.cover().M; ++k) bound = std::max(bound, h.chebyshev_bound(x.data(), k));
                    const double err = std::abs(h.eval(x.data(), t) - h.reference(x.data(), t));
                    worst = std::max(worst, err / (bound + 1e-12));
                }
            rows.push_back({interval("t", a, b), worst, 1.0, worst <= 1.0});
        }
    } else {
        ScoreNet net(P->basis, P->p0, snc);
        const double C = net.report().sup_constant;
        std::vector<double> s(P->d);
        for (int m = 1; m <= cover.M; ++m) {
            const double a = std::max(P->sc.T_lo, cover.lower(m)), b = std::min(P->sc.T_hi, cover.upper(m));
            double worst = 0.0;
            for (double t : axis_points(a, b, time_per, true, rng))
                for (const Point& x : space_points(P->domain, space_per, rng)) {
                    net.eval(x.data(), t, s.data());
                    double norm = 0.0;
                    for (double v : s) norm += v * v;
                    worst = std::max(worst, std::sqrt(norm * t));
                }
            rows.push_back({interval("t", a, b), worst, C, worst <= C});
        }
    }
    return rows;
}

bool all_pass(const std::vector<SweepRow>& rows) {
    return std::all_of(rows.begin(), rows.end(), [](const SweepRow& r) { return r.pass; });
}

}  // namespace

int cmd_build_net(const BuildNetParams& p) {
    if (!kNetKinds.count(p.kind))
        throw ConfigError("build-net: kind must be one of mult, reciprocal, cap, chebyshev, hN, score");
    const std::string out = p.out.empty() ? p.kind + ".json" : p.out;
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    json audit;
    audit["kind"] = p.kind;
    audit["code_version"] = code_version();
    std::vector<SweepRow> rows;

    if (p.kind == "hN" || p.kind == "score") {
        if (p.config_path.empty() && p.overrides.empty())
            throw ConfigError("build-net " + p.kind + ": --config is required");
        RunConfig cfg = p.config_path.empty() ? parse_config("{}", p.overrides) : load_config(p.config_path, p.overrides);
        auto P = make_problem(cfg);
        ScoreNetConfig snc = score_net_config(cfg, *P);
        json desc = {{"format", "reflekt-descriptor"}, {"kind", p.kind}, {"config", json::parse(cfg.effective_json())}};
        write_json(out, desc);
        audit["params"] = {{"schedule", schedule_json(P->sc)}};
        if (p.kind == "hN") {
            SpaceTimeNet h(P->basis, P->p0, snc.spacetime, -1);
            audit["size"] = size_json(h.size());
            const auto& k = h.knobs();
            audit["knobs"] = {{"k", k.k}, {"ell1", k.ell1}, {"ell2", k.ell2}, {"ell3", k.ell3}, {"M", k.M}, {"cap_m", k.cap_m}};
        } else {
            ScoreNet net(P->basis, P->p0, snc);
            const auto& r = net.report();
            audit["size"] = size_json(r.size);
            audit["sup_constant"] = r.sup_constant;
            audit["ell"] = r.ell;
            ScalingRatios ratios = score_size_ratios(r.size, P->sc.n, P->sc.s, P->d);
            audit["scaling_ratios"] = {{"L", ratios.L}, {"W", ratios.W}, {"S", ratios.S}};
        }
        rows = sweep_descriptor(p.kind, cfg, p.points, p.seed);
    } else {
        ReluNetwork net;
        json params;
        if (p.kind == "mult") {
            const int m = required(p.m, "--m", p.kind);
            if (!(p.C > 0.0)) throw ConfigError("build-net mult: --C must be positive");
            net = mult_net(m, p.C);
            params = {{"m", m}, {"C", p.C}};
            audit["stated_size"] = {{"L", m + 8}, {"S", 58 + 16 * m}};
            audit["size_matches_stated"] = net.stored().L == m + 8 && net.stored().S == 58 + 16 * m;
            audit["size_within_stated"] = net.stored().L <= m + 8 && net.stored().S <= 58 + 16 * m;
        } else if (p.kind == "reciprocal") {
            const int m = required(p.m, "--m", p.kind);
            const int lo = required(p.k_lo, "--k-lo", p.kind), hi = required(p.k_hi, "--k-hi", p.kind);
            net = reciprocal_net(m, lo, hi);
            params = {{"m", m}, {"k_lo", lo}, {"k_hi", hi}};
            SizeBudget stated = reciprocal_stated_size(m, lo, hi);
            audit["stated_size"] = {{"L", stated.L}, {"S", stated.S}};
            audit["size_matches_stated"] = net.stored().L == stated.L && net.stored().S == stated.S;
            audit["size_within_stated"] = net.stored().L <= stated.L && net.stored().S <= stated.S;
        } else if (p.kind == "cap") {
            const int m = required(p.m, "--m", p.kind);
            net = cap_net(m);
            params = {{"m", m}};
        } else {
            const int k = required(p.k, "--k", p.kind), ell3 = required(p.ell3, "--ell3", p.kind);
            if (p.i < 0 || p.i > k) throw ConfigError("build-net chebyshev: --i must be in [0, k]");
            net = chebyshev_basis_net(ChebyshevGrid(k), p.i, ell3);
            params = {{"k", k}, {"i", p.i}, {"ell3", ell3}};
        }
        save_json(net, out);
        audit["params"] = params;
        audit["size"] = size_json(net.stored());
        rows = sweep_relu(p.kind, params, net, p.points, p.seed);
    }
    const bool pass = all_pass(rows);
    json sweep = json::array();
    for (const auto& r : rows) sweep.push_back({{"region", r.region}, {"measured", r.measured}, {"bound", r.bound}, {"pass", r.pass}});
    audit["sweep"] = {{"points", p.points}, {"seed", p.seed}, {"rows", sweep}, {"pass", pass}};
    audit["network_file"] = fs::path(out).filename().string();
    audit["network_sha256"] = sha256_file(out);
    write_json(audit_path_for(out), audit);
    return pass ? ExitOk : ExitBoundViolation;
}

int cmd_verify(const VerifyParams& p) {
    const std::string audit_path = audit_path_for(p.net_path);
    if (!fs::exists(p.net_path)) throw DependencyError("verify: network file " + p.net_path + " not found");
    if (!fs::exists(audit_path)) throw DependencyError("verify: audit " + audit_path + " not found; run build-net first");
    json audit = json::parse(read_file(audit_path));
    const std::string kind = audit.at("kind");
    std::vector<SweepRow> rows;
    if (kind == "hN" || kind == "score") {
        json desc = json::parse(read_file(p.net_path));
        if (desc.value("format", "") != "reflekt-descriptor" || desc.value("kind", "") != kind)
            throw ConfigError("verify: " + p.net_path + " is not a " + kind + " descriptor");
        rows = sweep_descriptor(kind, parse_config(desc.at("config").dump()), p.points, p.seed);
    } else {
        try {
            ReluNetwork net = load_json(p.net_path);
            audit_size(net);
            rows = sweep_relu(kind, audit.at("params"), net, p.points, p.seed);
        } catch (const IntegrityError& e) {
            rows.push_back({std::string("integrity: ") + e.what(), 1.0, 0.0, false});
        }
    }
    const std::string csv = p.csv_path.empty()
                                ? (fs::path(p.net_path).parent_path() / (fs::path(p.net_path).stem().string() + ".verify.csv")).string()
                                : p.csv_path;
    write_file(csv, sweep_csv(rows));
    return all_pass(rows) ? ExitOk : ExitBoundViolation;
}

}  // namespace reflekt::cli
