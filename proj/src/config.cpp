#include "tden/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace tden {

void RunConfig::validate() const {
    model.validate();
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (lr <= 0.0 || ft_lr <= 0.0) throw std::invalid_argument("learning rate must be positive");
    if (mask_prob_words < 0.0 || mask_prob_words > 1.0 || mask_prob_regions < 0.0 ||
        mask_prob_regions > 1.0)
        throw std::invalid_argument("masking probabilities must lie in [0,1]");
    if (scheme != Scheme::none && !(use_mlm && use_moc && use_ism && use_msg))
        throw std::invalid_argument("two-pass schemes require all four proxy tasks enabled");
    if (scheme != Scheme::none && ism_placement != IsmPlacement::encoder)
        throw std::invalid_argument(
            "two-pass schemes support encoder-level image-sentence matching only");
    data_config().validate();
}

DataConfig RunConfig::data_config() const {
    DataConfig d;
    d.n_object_classes = model.n_object_classes;
    d.n_attributes = n_attributes;
    d.d_region_feat = model.d_region_feat;
    d.max_regions = model.max_regions;
    d.max_seq_len = model.max_seq_len;
    d.noise_sigma = noise_sigma;
    d.attr_sigma = attr_sigma;
    d.relation_prob = relation_prob;
    d.seed = data_seed;
    return d;
}

SamplingOptions RunConfig::sampling_options(std::size_t step) const {
    SamplingOptions o;
    double scale = 1.0;
    if (mask_anneal_steps > 0)
        scale = std::max(0.0, 1.0 - static_cast<double>(step) /
                                        static_cast<double>(mask_anneal_steps));
    o.p_words = mask_prob_words * scale;
    o.p_regions = mask_prob_regions * scale;
    o.argmax = sample_argmax;
    o.losses.use_mlm = use_mlm;
    o.losses.use_moc = use_moc;
    o.losses.use_ism = use_ism;
    o.losses.use_msg = use_msg;
    o.losses.ism_margin = ism_margin;
    o.losses.ism_placement = ism_placement;
    return o;
}

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    std::size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

struct Field {
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

std::string bool_str(bool v) { return v ? "true" : "false"; }

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("expected true/false, got '" + v + "'");
}

std::size_t parse_size(const std::string& v) {
    std::size_t pos = 0;
    unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("expected integer, got '" + v + "'");
    return static_cast<std::size_t>(x);
}

double parse_double(const std::string& v) {
    std::size_t pos = 0;
    double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("expected number, got '" + v + "'");
    return x;
}

std::string dump_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

// Ordered field table; serialization follows this order so configs echo
// deterministically.
const std::vector<std::pair<std::string, Field>>& fields() {
    static const std::vector<std::pair<std::string, Field>> table = [] {
        std::vector<std::pair<std::string, Field>> t;
        auto size_field = [&t](const std::string& key, std::size_t RunConfig::* member) {
            t.push_back({key,
                         {[member](const RunConfig& c) { return std::to_string(c.*member); },
                          [member](RunConfig& c, const std::string& v) {
                              c.*member = parse_size(v);
                          }}});
        };
        auto msize_field = [&t](const std::string& key, std::size_t ModelConfig::* member) {
            t.push_back(
                {key,
                 {[member](const RunConfig& c) { return std::to_string(c.model.*member); },
                  [member](RunConfig& c, const std::string& v) {
                      c.model.*member = parse_size(v);
                  }}});
        };
        auto double_field = [&t](const std::string& key, double RunConfig::* member) {
            t.push_back({key,
                         {[member](const RunConfig& c) { return dump_double(c.*member); },
                          [member](RunConfig& c, const std::string& v) {
                              c.*member = parse_double(v);
                          }}});
        };
        auto bool_field = [&t](const std::string& key, bool RunConfig::* member) {
            t.push_back({key,
                         {[member](const RunConfig& c) { return bool_str(c.*member); },
                          [member](RunConfig& c, const std::string& v) {
                              c.*member = parse_bool(v);
                          }}});
        };
        auto u64_field = [&t](const std::string& key, std::uint64_t RunConfig::* member) {
            t.push_back({key,
                         {[member](const RunConfig& c) { return std::to_string(c.*member); },
                          [member](RunConfig& c, const std::string& v) {
                              c.*member = parse_size(v);
                          }}});
        };

        msize_field("d_model", &ModelConfig::d_model);
        msize_field("n_heads", &ModelConfig::n_heads);
        msize_field("d_ff", &ModelConfig::d_ff);
        msize_field("k_i", &ModelConfig::k_i);
        msize_field("k_s", &ModelConfig::k_s);
        msize_field("k_e", &ModelConfig::k_e);
        msize_field("k_d", &ModelConfig::k_d);
        msize_field("vocab_size", &ModelConfig::vocab_size);
        msize_field("n_object_classes", &ModelConfig::n_object_classes);
        msize_field("d_region_feat", &ModelConfig::d_region_feat);
        msize_field("max_seq_len", &ModelConfig::max_seq_len);
        msize_field("max_regions", &ModelConfig::max_regions);
        t.push_back({"untie_word_classifier",
                     {[](const RunConfig& c) { return bool_str(c.model.untie_word_classifier); },
                      [](RunConfig& c, const std::string& v) {
                          c.model.untie_word_classifier = parse_bool(v);
                      }}});

        t.push_back({"scheme",
                     {[](const RunConfig& c) { return to_string(c.scheme); },
                      [](RunConfig& c, const std::string& v) {
                          c.scheme = scheme_from_string(v);
                      }}});
        size_field("steps", &RunConfig::steps);
        size_field("batch_size", &RunConfig::batch_size);
        double_field("lr", &RunConfig::lr);
        u64_field("seed", &RunConfig::seed);
        double_field("clip_norm", &RunConfig::clip_norm);
        size_field("warmup_steps", &RunConfig::warmup_steps);
        size_field("eval_every", &RunConfig::eval_every);
        size_field("eval_items", &RunConfig::eval_items);
        size_field("checkpoint_every", &RunConfig::checkpoint_every);
        double_field("mask_prob_words", &RunConfig::mask_prob_words);
        double_field("mask_prob_regions", &RunConfig::mask_prob_regions);
        double_field("ism_margin", &RunConfig::ism_margin);
        t.push_back({"ism_placement",
                     {[](const RunConfig& c) {
                          return std::string(c.ism_placement == IsmPlacement::encoder
                                                 ? "encoder"
                                                 : "cross");
                      },
                      [](RunConfig& c, const std::string& v) {
                          if (v == "encoder")
                              c.ism_placement = IsmPlacement::encoder;
                          else if (v == "cross")
                              c.ism_placement = IsmPlacement::cross;
                          else
                              throw std::invalid_argument(
                                  "ism_placement must be encoder or cross, got '" + v + "'");
                      }}});
        bool_field("sample_argmax", &RunConfig::sample_argmax);
        size_field("mask_anneal_steps", &RunConfig::mask_anneal_steps);
        bool_field("use_mlm", &RunConfig::use_mlm);
        bool_field("use_moc", &RunConfig::use_moc);
        bool_field("use_ism", &RunConfig::use_ism);
        bool_field("use_msg", &RunConfig::use_msg);

        u64_field("data_seed", &RunConfig::data_seed);
        size_field("n_train", &RunConfig::n_train);
        size_field("n_val", &RunConfig::n_val);
        size_field("n_test", &RunConfig::n_test);
        size_field("n_attributes", &RunConfig::n_attributes);
        double_field("noise_sigma", &RunConfig::noise_sigma);
        double_field("attr_sigma", &RunConfig::attr_sigma);
        double_field("relation_prob", &RunConfig::relation_prob);

        size_field("ft_steps", &RunConfig::ft_steps);
        size_field("ft_batch_size", &RunConfig::ft_batch_size);
        double_field("ft_lr", &RunConfig::ft_lr);
        return t;
    }();
    return table;
}

}  // namespace

std::string RunConfig::serialize() const {
    std::ostringstream os;
    for (const auto& [key, f] : fields()) os << key << " = " << f.get(*this) << "\n";
    return os.str();
}

RunConfig RunConfig::parse(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        std::size_t eq = stripped.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        " is not 'key = value': " + stripped);
        std::string key = trim(stripped.substr(0, eq));
        std::string value = trim(stripped.substr(eq + 1));
        bool found = false;
        for (const auto& [k, f] : fields()) {
            if (k == key) {
                try {
                    f.set(cfg, value);
                } catch (const std::exception& e) {
                    throw std::invalid_argument("config key '" + key + "': " + e.what());
                }
                found = true;
                break;
            }
        }
        if (!found) throw std::invalid_argument("unknown config key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

RunConfig RunConfig::resolve(const std::string& name_or_path) {
    if (name_or_path == "desk") return desk();
    if (name_or_path == "tiny") return tiny();
    return from_file(name_or_path);
}

RunConfig RunConfig::desk() { return RunConfig{}; }

RunConfig RunConfig::tiny() {
    RunConfig cfg;
    cfg.model = ModelConfig::tiny();
    cfg.n_attributes = 4;
    cfg.steps = 50;
    cfg.batch_size = 4;
    cfg.n_train = 32;
    cfg.n_val = 8;
    cfg.n_test = 16;
    cfg.eval_every = 25;
    cfg.eval_items = 8;
    return cfg;
}

}  // namespace tden
