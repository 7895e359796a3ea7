#include "pmdet/config.hpp"

#include <fstream>
#include <sstream>

#include "pmdet/common.hpp"

namespace pmdet {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

Config Config::defaults() {
  Config c;
  auto put = [&](const char* k, const char* v) { c.kv_[k] = v; };

  // synthetic benchmark
  put("data.canvas", "64");
  put("data.min_objects", "1");
  put("data.max_objects", "4");
  put("data.classes", "3");
  put("data.corruption", "fog");
  put("data.corruption_strength", "0.6");
  put("data.n_source", "500");
  put("data.n_target", "500");
  put("data.seed", "1");

  // detector
  put("detector.d", "64");
  put("detector.heads", "4");
  put("detector.enc_layers", "2");
  put("detector.dec_layers", "2");
  put("detector.ffn", "256");
  put("detector.queries", "25");
  put("detector.stride", "8");
  put("detector.seed", "11");

  // matching / detection loss
  put("match.w_cls", "1.0");
  put("match.w_l1", "1.0");
  put("match.w_giou", "0.0");
  put("loss.focal_alpha", "0.25");
  put("loss.focal_gamma", "2.0");
  put("loss.w_focal", "2.0");
  put("loss.w_l1", "5.0");

  // prompt domain memory
  put("pdm.input.enabled", "true");
  put("pdm.token.enabled", "true");
  put("pdm.query.enabled", "true");
  put("pdm.N", "10");
  put("pdm.M", "4");
  put("pdm.L", "8");
  put("pdm.query.L", "2");
  put("pdm.init_scale", "0.03");
  put("pdm.border", "4");
  put("pdm.strategy", "distribution");
  put("pdm.seed", "21");

  // prompt memory alignment
  put("pma.enabled", "true");
  put("pma.C", "256");
  put("pma.lambda1", "1.0");
  put("pma.lambda2", "1.0");
  put("pma.reversal_scale", "1.0");
  put("pma.seed", "31");

  // mean teacher
  put("teacher.alpha", "0.999");
  put("teacher.pseudo_threshold", "0.5");
  put("teacher.refresh", "step");  // or "epoch"

  // stage 1 (burn-in)
  put("stage1.epochs", "15");
  put("stage1.lr", "2e-4");
  put("stage1.decay_epoch", "12");  // 80% of epochs, the published ratio
  put("stage1.decay_factor", "0.1");
  put("stage1.train_pools", "false");

  // stage 2 (cross-domain adaptation)
  put("stage2.epochs", "8");
  put("stage2.lr_prompt", "2e-4");  // 10x the base rate, published ratio
  put("stage2.lr_base", "2e-5");
  put("stage2.decay_epoch", "7");  // ~10/12 of the stage, published ratio
  put("stage2.decay_factor", "0.1");
  put("stage2.lambda_s", "1.0");
  put("stage2.lambda_us", "1.0");
  put("stage2.lambda_epa", "0.25");
  put("stage2.lambda_dpa", "0.25");

  put("train.batch_size", "4");
  put("train.seed", "7");
  put("eval.score_threshold", "0.0");
  put("eval.iou", "0.5");

  c.sealed_ = true;
  return c;
}

Config Config::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str());
}

Config Config::from_text(const std::string& text) {
  Config c = defaults();
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError("config: line " + std::to_string(lineno) +
                       " is not key = value");
    c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return c;
}

void Config::set(const std::string& key, const std::string& value) {
  if (sealed_ && !kv_.count(key))
    throw ConfigError("config: unknown key '" + key + "'");
  kv_[key] = value;
}

const std::string& Config::get(const std::string& key) const {
  const auto it = kv_.find(key);
  if (it == kv_.end()) throw ConfigError("config: unknown key '" + key + "'");
  return it->second;
}

double Config::get_double(const std::string& key) const {
  try {
    return std::stod(get(key));
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' is not a number");
  }
}

int Config::get_int(const std::string& key) const {
  try {
    return std::stoi(get(key));
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' is not an integer");
  }
}

std::int64_t Config::get_i64(const std::string& key) const {
  try {
    return std::stoll(get(key));
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' is not an integer");
  }
}

bool Config::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: key '" + key + "' is not a boolean");
}

std::vector<std::string> Config::keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : kv_) out.push_back(k);
  return out;
}

std::string Config::to_text() const {
  std::string out;
  for (const auto& [k, v] : kv_) out += k + " = " + v + "\n";
  return out;
}

}  // namespace pmdet
