#pragma once

// Experiment configuration: a small TOML subset (sections, key = value,
// integers, floats, booleans, double-quoted strings, flat arrays, # comments).

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "fedmosaic/errors.hpp"
#include "fedmosaic/format.hpp"
#include "fedmosaic/protocol.hpp"

namespace fedmosaic {

struct DataConfig {
  std::size_t num_classes = 10;
  std::size_t dim = 16;
  std::size_t per_class = 100;
  double separation = 3.0;
  double class_std = 1.0;
  double public_fraction = 0.3;
  std::size_t test_per_client = 100;
  std::string public_source = "union";  // "union": U spans every client domain; "base": untransformed

  bool operator==(const DataConfig&) const = default;
};

struct PartitionConfig {
  std::string scheme = "pathological";  // pathological | dirichlet | feature_shift | hybrid
  std::size_t num_clients = 5;
  std::size_t classes_per_client = 2;
  std::vector<ClassId> target_classes;
  double alpha = 0.5;
  std::size_t domains = 2;
  std::size_t clients_per_domain = 2;
  double rotation_step = 0.5;
  double scale_step = 0.0;
  double bias_gap = 1.0;
  double domain_noise = 0.0;
  std::size_t max_attempts = 10;

  bool operator==(const PartitionConfig&) const = default;
};

struct ExperimentConfig {
  DataConfig data;
  PartitionConfig partition;
  ProtocolConfig protocol;  // mode and seed are set per job
  std::optional<std::size_t> flipped_label_client;
  std::vector<Mode> modes{Mode::kLocalOnly, Mode::kFedMosaic};
  std::vector<std::uint64_t> seeds{1};
  std::string outdir = "out";
  std::size_t jobs = 1;

  bool operator==(const ExperimentConfig&) const = default;
};

namespace config_detail {

struct Value;
using Array = std::vector<Value>;
struct Value {
  std::variant<std::int64_t, double, bool, std::string, Array> v;
  std::size_t line = 0;
};

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Drops a trailing comment, respecting quoted strings.
inline std::string strip_comment(const std::string& s) {
  bool in_str = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"' && (i == 0 || s[i - 1] != '\\')) in_str = !in_str;
    if (s[i] == '#' && !in_str) return s.substr(0, i);
  }
  return s;
}

class ValueParser {
 public:
  ValueParser(std::string text, std::size_t line) : s_(std::move(text)), line_(line) {}

  Value parse() {
    Value v = value();
    skip_ws();
    if (pos_ != s_.size()) fail("unexpected trailing characters");
    return v;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) { throw ConfigError(msg, line_); }

  void skip_ws() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
  }

  Value value() {
    skip_ws();
    if (pos_ >= s_.size()) fail("missing value");
    const char c = s_[pos_];
    if (c == '"') return {string(), line_};
    if (c == '[') return {array(), line_};
    return scalar();
  }

  std::string string() {
    ++pos_;
    std::string out;
    while (pos_ < s_.size() && s_[pos_] != '"') {
      if (s_[pos_] == '\\') {
        if (++pos_ >= s_.size()) fail("unterminated escape");
        switch (s_[pos_]) {
          case '"': out += '"'; break;
          case '\\': out += '\\'; break;
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          default: fail("unsupported escape sequence");
        }
      } else {
        out += s_[pos_];
      }
      ++pos_;
    }
    if (pos_ >= s_.size()) fail("unterminated string");
    ++pos_;
    return out;
  }

  Array array() {
    ++pos_;
    Array out;
    skip_ws();
    if (pos_ < s_.size() && s_[pos_] == ']') {
      ++pos_;
      return out;
    }
    for (;;) {
      out.push_back(value());
      skip_ws();
      if (pos_ >= s_.size()) fail("unterminated array");
      if (s_[pos_] == ',') {
        ++pos_;
        skip_ws();
        if (pos_ < s_.size() && s_[pos_] == ']') {
          ++pos_;
          return out;
        }
        continue;
      }
      if (s_[pos_] == ']') {
        ++pos_;
        return out;
      }
      fail("expected ',' or ']' in array");
    }
  }

  Value scalar() {
    const auto start = pos_;
    while (pos_ < s_.size() && s_[pos_] != ',' && s_[pos_] != ']' && s_[pos_] != ' ' &&
           s_[pos_] != '\t')
      ++pos_;
    std::string tok = s_.substr(start, pos_ - start);
    if (tok == "true") return {true, line_};
    if (tok == "false") return {false, line_};
    tok.erase(std::remove(tok.begin(), tok.end(), '_'), tok.end());
    const bool is_float = tok.find_first_of(".eE") != std::string::npos || tok == "inf" ||
                          tok == "nan" || tok == "+inf" || tok == "-inf";
    if (!is_float) {
      std::int64_t v{};
      const char* b = tok.data() + (tok.starts_with('+') ? 1 : 0);
      auto [p, ec] = std::from_chars(b, tok.data() + tok.size(), v);
      if (ec == std::errc{} && p == tok.data() + tok.size()) return {v, line_};
      fail("invalid value '" + tok + "'");
    }
    if (auto d = parse_double(tok.starts_with('+') ? tok.substr(1) : tok)) return {*d, line_};
    fail("invalid number '" + tok + "'");
  }

  std::string s_;
  std::size_t pos_ = 0;
  std::size_t line_;
};

using Table = std::map<std::string, std::map<std::string, Value>>;

inline Table parse_table(std::istream& in) {
  Table t;
  std::string section;
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string s = trim(strip_comment(raw));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError("malformed section header", line);
      section = trim(s.substr(1, s.size() - 2));
      if (section.empty()) throw ConfigError("empty section name", line);
      if (t.count(section)) throw ConfigError("duplicate section [" + section + "]", line);
      t[section];
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("expected 'key = value'", line);
    const std::string key = trim(s.substr(0, eq));
    if (key.empty()) throw ConfigError("missing key", line);
    if (section.empty()) throw ConfigError("key '" + key + "' outside of any section", line);
    auto& sec = t[section];
    if (sec.count(key)) throw ConfigError("duplicate key '" + key + "'", line);
    sec[key] = ValueParser(trim(s.substr(eq + 1)), line).parse();
  }
  return t;
}

/// Typed access to one section; every key must be consumed.
class Section {
 public:
  Section(std::string name, std::map<std::string, Value>* values)
      : name_(std::move(name)), values_(values) {}

  template <typename F>
  void visit(const std::string& key, F&& f) {
    if (!values_) return;
    auto it = values_->find(key);
    if (it == values_->end()) return;
    current_line_ = it->second.line;
    f(it->second);
    values_->erase(it);
  }

  void get(const std::string& key, std::size_t& out) {
    visit(key, [&](const Value& v) { out = as_size(v, key); });
  }
  void get(const std::string& key, double& out) {
    visit(key, [&](const Value& v) { out = as_double(v, key); });
  }
  void get(const std::string& key, bool& out) {
    visit(key, [&](const Value& v) {
      if (const auto* b = std::get_if<bool>(&v.v)) out = *b;
      else throw ConfigError("'" + key + "' must be a boolean", v.line);
    });
  }
  void get(const std::string& key, std::string& out) {
    visit(key, [&](const Value& v) { out = as_string(v, key); });
  }

  void finish() const {
    if (values_ && !values_->empty()) {
      const auto& [k, v] = *values_->begin();
      throw ConfigError("unknown key '" + k + "' in [" + name_ + "]", v.line);
    }
  }

  std::size_t line() const { return current_line_; }

  static std::size_t as_size(const Value& v, const std::string& key) {
    const auto* i = std::get_if<std::int64_t>(&v.v);
    if (!i || *i < 0) throw ConfigError("'" + key + "' must be a non-negative integer", v.line);
    return static_cast<std::size_t>(*i);
  }
  static double as_double(const Value& v, const std::string& key) {
    if (const auto* d = std::get_if<double>(&v.v)) return *d;
    if (const auto* i = std::get_if<std::int64_t>(&v.v)) return static_cast<double>(*i);
    throw ConfigError("'" + key + "' must be a number", v.line);
  }
  static std::string as_string(const Value& v, const std::string& key) {
    if (const auto* s = std::get_if<std::string>(&v.v)) return *s;
    throw ConfigError("'" + key + "' must be a string", v.line);
  }
  static const Array& as_array(const Value& v, const std::string& key) {
    if (const auto* a = std::get_if<Array>(&v.v)) return *a;
    throw ConfigError("'" + key + "' must be an array", v.line);
  }

 private:
  std::string name_;
  std::map<std::string, Value>* values_;
  std::size_t current_line_ = 0;
};

inline std::string toml_double(double v) {
  std::string s = format_double(v);
  if (s.find_first_of(".en") == std::string::npos) s += ".0";
  return s;
}

inline std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    if (c == '\t') {
      out += "\\t";
      continue;
    }
    out += c;
  }
  return out + "\"";
}

}  // namespace config_detail

/// Parses and validates a configuration. Errors carry the offending line.
inline ExperimentConfig parse_config(std::istream& in) {
  using namespace config_detail;
  Table table = parse_table(in);
  for (const auto& [name, values] : table) {
    static const std::vector<std::string> known{"data", "partition", "protocol", "dp", "scenario",
                                                "experiment"};
    if (std::find(known.begin(), known.end(), name) == known.end()) {
      const std::size_t line = values.empty() ? 0 : values.begin()->second.line;
      throw ConfigError("unknown section [" + name + "]", line);
    }
  }
  auto section = [&](const std::string& name) {
    auto it = table.find(name);
    return Section(name, it == table.end() ? nullptr : &it->second);
  };

  ExperimentConfig cfg;
  {
    auto s = section("data");
    auto& d = cfg.data;
    s.get("num_classes", d.num_classes);
    if (d.num_classes < 2) throw ConfigError("num_classes must be >= 2", s.line());
    s.get("dim", d.dim);
    if (d.dim < 2) throw ConfigError("dim must be >= 2", s.line());
    s.get("per_class", d.per_class);
    if (d.per_class < 1) throw ConfigError("per_class must be >= 1", s.line());
    s.get("separation", d.separation);
    if (!(d.separation > 0)) throw ConfigError("separation must be > 0", s.line());
    s.get("class_std", d.class_std);
    if (!(d.class_std >= 0)) throw ConfigError("class_std must be >= 0", s.line());
    s.get("public_fraction", d.public_fraction);
    if (!(d.public_fraction > 0 && d.public_fraction < 1))
      throw ConfigError("public_fraction must lie in (0, 1)", s.line());
    s.get("test_per_client", d.test_per_client);
    if (d.test_per_client < 1) throw ConfigError("test_per_client must be >= 1", s.line());
    s.get("public_source", d.public_source);
    if (d.public_source != "union" && d.public_source != "base")
      throw ConfigError("public_source must be \"union\" or \"base\"", s.line());
    s.finish();
  }
  {
    auto s = section("partition");
    auto& p = cfg.partition;
    s.get("scheme", p.scheme);
    if (p.scheme != "pathological" && p.scheme != "dirichlet" && p.scheme != "feature_shift" &&
        p.scheme != "hybrid")
      throw ConfigError("unknown partition scheme '" + p.scheme + "'", s.line());
    s.get("num_clients", p.num_clients);
    if (p.num_clients < 2) throw ConfigError("num_clients must be >= 2", s.line());
    s.get("classes_per_client", p.classes_per_client);
    if (p.classes_per_client < 1) throw ConfigError("classes_per_client must be >= 1", s.line());
    s.visit("target_classes", [&](const Value& v) {
      for (const auto& e : Section::as_array(v, "target_classes")) {
        const auto c = Section::as_size(e, "target_classes");
        if (c >= cfg.data.num_classes) throw ConfigError("target class out of range", v.line);
        p.target_classes.push_back(static_cast<ClassId>(c));
      }
    });
    s.get("alpha", p.alpha);
    if (!(p.alpha > 0)) throw ConfigError("alpha must be > 0", s.line());
    s.get("domains", p.domains);
    if (p.domains < 1) throw ConfigError("domains must be >= 1", s.line());
    s.get("clients_per_domain", p.clients_per_domain);
    if (p.clients_per_domain < 1) throw ConfigError("clients_per_domain must be >= 1", s.line());
    s.get("rotation_step", p.rotation_step);
    s.get("scale_step", p.scale_step);
    s.get("bias_gap", p.bias_gap);
    s.get("domain_noise", p.domain_noise);
    if (!(p.domain_noise >= 0)) throw ConfigError("domain_noise must be >= 0", s.line());
    s.get("max_attempts", p.max_attempts);
    if (p.max_attempts < 1) throw ConfigError("max_attempts must be >= 1", s.line());
    s.finish();
    if (p.scheme == "hybrid" && p.domains * p.clients_per_domain != p.num_clients)
      throw ConfigError("hybrid scheme needs num_clients = domains * clients_per_domain");
    if ((p.scheme == "pathological" || p.scheme == "hybrid") &&
        p.classes_per_client > cfg.data.num_classes)
      throw ConfigError("classes_per_client exceeds num_classes");
  }
  {
    auto s = section("protocol");
    auto& p = cfg.protocol;
    s.get("rounds", p.num_rounds);
    if (p.num_rounds < 1) throw ConfigError("rounds must be >= 1", s.line());
    s.get("sync_period", p.sync_period);
    if (p.sync_period < 1) throw ConfigError("sync_period must be >= 1", s.line());
    s.get("step_size", p.step_size);
    if (!(p.step_size > 0)) throw ConfigError("step_size must be > 0", s.line());
    s.get("batch_size", p.batch_size);
    if (p.batch_size < 1) throw ConfigError("batch_size must be >= 1", s.line());
    s.visit("expertise", [&](const Value& v) {
      try {
        p.expertise = expertise_from_string(Section::as_string(v, "expertise"));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what(), v.line);
      }
    });
    s.visit("model", [&](const Value& v) {
      try {
        p.model = model_kind_from_string(Section::as_string(v, "model"));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what(), v.line);
      }
    });
    s.get("hidden", p.hidden);
    if (p.model == ModelKind::kMlp && p.hidden < 1) throw ConfigError("hidden must be >= 1", s.line());
    s.get("threads", p.threads);
    if (p.threads < 1) throw ConfigError("threads must be >= 1", s.line());
    s.get("diagnostics", p.diagnostics);
    s.get("smoothness_probes", p.smoothness_probes);
    s.finish();
  }
  if (auto it = table.find("dp"); it != table.end()) {
    auto s = section("dp");
    DpConfig dp;
    s.get("epsilon", dp.epsilon);
    if (!(dp.epsilon > 0)) throw ConfigError("epsilon must be > 0", s.line());
    s.get("clip_max", dp.clip_max);
    if (!(dp.clip_max > 0)) throw ConfigError("clip_max must be > 0", s.line());
    s.finish();
    cfg.protocol.dp = dp;
  }
  {
    auto s = section("scenario");
    s.visit("flipped_label_client", [&](const Value& v) {
      const auto c = Section::as_size(v, "flipped_label_client");
      if (c >= cfg.partition.num_clients)
        throw ConfigError("flipped_label_client out of range", v.line);
      cfg.flipped_label_client = c;
    });
    s.finish();
  }
  {
    auto s = section("experiment");
    s.visit("modes", [&](const Value& v) {
      cfg.modes.clear();
      for (const auto& e : Section::as_array(v, "modes")) {
        try {
          cfg.modes.push_back(mode_from_string(Section::as_string(e, "modes")));
        } catch (const std::invalid_argument& ex) {
          throw ConfigError(ex.what(), v.line);
        }
      }
      if (cfg.modes.empty()) throw ConfigError("modes must not be empty", v.line);
    });
    s.visit("seeds", [&](const Value& v) {
      cfg.seeds.clear();
      for (const auto& e : Section::as_array(v, "seeds")) cfg.seeds.push_back(Section::as_size(e, "seeds"));
      if (cfg.seeds.empty()) throw ConfigError("seeds must contain at least one seed", v.line);
    });
    s.get("outdir", cfg.outdir);
    s.get("jobs", cfg.jobs);
    if (cfg.jobs < 1) throw ConfigError("jobs must be >= 1", s.line());
    s.finish();
  }
  if (cfg.protocol.dp &&
      std::find(cfg.modes.begin(), cfg.modes.end(), Mode::kFedMosaic) == cfg.modes.end())
    throw ConfigError("[dp] is set but fedmosaic is not among the modes");
  return cfg;
}

inline ExperimentConfig parse_config_string(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in);
}

inline std::string serialize_config(const ExperimentConfig& c) {
  using config_detail::quote;
  using config_detail::toml_double;
  std::ostringstream os;
  const auto& d = c.data;
  os << "[data]\n"
     << "num_classes = " << d.num_classes << '\n'
     << "dim = " << d.dim << '\n'
     << "per_class = " << d.per_class << '\n'
     << "separation = " << toml_double(d.separation) << '\n'
     << "class_std = " << toml_double(d.class_std) << '\n'
     << "public_fraction = " << toml_double(d.public_fraction) << '\n'
     << "test_per_client = " << d.test_per_client << '\n'
     << "public_source = " << quote(d.public_source) << "\n\n";
  const auto& p = c.partition;
  os << "[partition]\n"
     << "scheme = " << quote(p.scheme) << '\n'
     << "num_clients = " << p.num_clients << '\n'
     << "classes_per_client = " << p.classes_per_client << '\n'
     << "target_classes = [";
  for (std::size_t i = 0; i < p.target_classes.size(); ++i)
    os << (i ? ", " : "") << p.target_classes[i];
  os << "]\n"
     << "alpha = " << toml_double(p.alpha) << '\n'
     << "domains = " << p.domains << '\n'
     << "clients_per_domain = " << p.clients_per_domain << '\n'
     << "rotation_step = " << toml_double(p.rotation_step) << '\n'
     << "scale_step = " << toml_double(p.scale_step) << '\n'
     << "bias_gap = " << toml_double(p.bias_gap) << '\n'
     << "domain_noise = " << toml_double(p.domain_noise) << '\n'
     << "max_attempts = " << p.max_attempts << "\n\n";
  const auto& q = c.protocol;
  os << "[protocol]\n"
     << "rounds = " << q.num_rounds << '\n'
     << "sync_period = " << q.sync_period << '\n'
     << "step_size = " << toml_double(q.step_size) << '\n'
     << "batch_size = " << q.batch_size << '\n'
     << "expertise = " << quote(to_string(q.expertise)) << '\n'
     << "model = " << quote(to_string(q.model)) << '\n'
     << "hidden = " << q.hidden << '\n'
     << "threads = " << q.threads << '\n'
     << "diagnostics = " << (q.diagnostics ? "true" : "false") << '\n'
     << "smoothness_probes = " << q.smoothness_probes << "\n\n";
  if (q.dp)
    os << "[dp]\n"
       << "epsilon = " << toml_double(q.dp->epsilon) << '\n'
       << "clip_max = " << toml_double(q.dp->clip_max) << "\n\n";
  os << "[scenario]\n";
  if (c.flipped_label_client) os << "flipped_label_client = " << *c.flipped_label_client << '\n';
  os << "\n[experiment]\nmodes = [";
  for (std::size_t i = 0; i < c.modes.size(); ++i) os << (i ? ", " : "") << quote(to_string(c.modes[i]));
  os << "]\nseeds = [";
  for (std::size_t i = 0; i < c.seeds.size(); ++i) os << (i ? ", " : "") << c.seeds[i];
  os << "]\n"
     << "outdir = " << quote(c.outdir) << '\n'
     << "jobs = " << c.jobs << '\n';
  return os.str();
}

}  // namespace fedmosaic
