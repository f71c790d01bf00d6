#include "vlm/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include "vlm/error.hpp"

namespace vlm::harness {

using nlohmann::json;

void RunConfig::validate() const {
  model.resolved();
  adapter.validate();
  data.split.validate();
  if (policy != "frozen" && policy != "lora" && policy != "dora" && policy != "full") {
    throw Error(ErrorCode::kConfig, "unknown policy '" + policy + "'");
  }
  if (!(train.lr > 0.0) || !(train.warmup_frac >= 0.0 && train.warmup_frac <= 1.0)) {
    throw Error(ErrorCode::kConfig, "learning rate must be positive and warmup_frac in [0, 1]");
  }
  if (data.manifest.empty() && data.n_examples == 0) throw Error(ErrorCode::kConfig, "data.n_examples must be positive");
}

json to_json(const RunConfig& c) {
  const auto& m = c.model;
  json lm{{"vocab_size", m.lm.vocab_size}, {"d_model", m.lm.d_model},     {"n_layers", m.lm.n_layers},
          {"n_heads", m.lm.n_heads},       {"max_seq", m.lm.max_seq},     {"mlp_ratio", m.lm.mlp_ratio}};
  lm["cross_attn_every"] = m.lm.cross_attn_every ? json(*m.lm.cross_attn_every) : json(nullptr);
  json adapter{{"rank", c.adapter.rank},
               {"kind", std::string(adapters::to_string(c.adapter.kind))},
               {"dropout_p", c.adapter.dropout_p}};
  adapter["alpha"] = c.adapter.alpha ? json(*c.adapter.alpha) : json(nullptr);
  return {
      {"architecture", std::string(to_string(m.architecture))},
      {"patch_mode", std::string(vision::to_string(m.patch_mode))},
      {"neftune_alpha", m.neftune_alpha},
      {"vision",
       {{"patch_size", m.vision.patch_size},
        {"d_vision", m.vision.d_vision},
        {"n_layers", m.vision.n_layers},
        {"n_heads", m.vision.n_heads},
        {"base_grid", {m.vision.base_rows, m.vision.base_cols}},
        {"max_side", m.vision.max_side},
        {"mlp_ratio", m.vision.mlp_ratio}}},
      {"connector",
       {{"kind", std::string(connector::to_string(m.connector.kind))},
        {"n_latents", m.connector.n_latents},
        {"n_layers", m.connector.n_layers},
        {"use_pre_mlp", m.connector.use_pre_mlp},
        {"n_heads", m.connector.n_heads},
        {"mlp_hidden", m.connector.mlp_hidden},
        {"mlp_ratio", m.connector.mlp_ratio}}},
      {"lm", lm},
      {"policy", c.policy},
      {"adapter", adapter},
      {"train",
       {{"steps", c.train.steps},
        {"lr", c.train.lr},
        {"warmup_frac", c.train.warmup_frac},
        {"beta1", c.train.beta1},
        {"beta2", c.train.beta2},
        {"weight_decay", c.train.weight_decay},
        {"eps", c.train.eps}}},
      {"data",
       {{"n_examples", c.data.n_examples},
        {"image_size", c.data.image_size},
        {"vary_size", c.data.vary_size},
        {"manifest", c.data.manifest},
        {"split", {{"enabled", c.data.split.enabled}, {"apply_prob", c.data.split.apply_prob}}}}},
      {"seed", c.seed},
  };
}

namespace {

// Reads known keys from an object and rejects anything else.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw Error(ErrorCode::kConfig, where_ + " must be an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw Error(ErrorCode::kConfig, "unknown key '" + where_ + key + "'");
    }
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kConfig, "bad value for '" + where_ + key + "': " + e.what());
    }
  }
  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

RunConfig parse_run_config(const json& j);

}  // namespace

RunConfig run_config_from_json(const json& j) {
  try {
    return parse_run_config(j);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("malformed config: ") + e.what());
  }
}

namespace {

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  auto& m = c.model;
  {
    Reader r(j, "");
    if (const json* v = r.child("architecture")) m.architecture = parse_architecture(v->get<std::string>());
    if (const json* v = r.child("patch_mode")) m.patch_mode = vision::parse_patch_mode(v->get<std::string>());
    r.get("neftune_alpha", m.neftune_alpha);
    r.get("policy", c.policy);
    r.get("seed", c.seed);
    if (const json* v = r.child("vision")) {
      Reader rv(*v, "vision.");
      rv.get("patch_size", m.vision.patch_size);
      rv.get("d_vision", m.vision.d_vision);
      rv.get("n_layers", m.vision.n_layers);
      rv.get("n_heads", m.vision.n_heads);
      rv.get("max_side", m.vision.max_side);
      rv.get("mlp_ratio", m.vision.mlp_ratio);
      if (const json* g = rv.child("base_grid")) {
        if (!g->is_array() || g->size() != 2) throw Error(ErrorCode::kConfig, "vision.base_grid must be [rows, cols]");
        m.vision.base_rows = g->at(0).get<std::size_t>();
        m.vision.base_cols = g->at(1).get<std::size_t>();
      }
    }
    if (const json* v = r.child("connector")) {
      Reader rc(*v, "connector.");
      if (const json* k = rc.child("kind")) m.connector.kind = connector::parse_kind(k->get<std::string>());
      rc.get("n_latents", m.connector.n_latents);
      rc.get("n_layers", m.connector.n_layers);
      rc.get("use_pre_mlp", m.connector.use_pre_mlp);
      rc.get("n_heads", m.connector.n_heads);
      rc.get("mlp_hidden", m.connector.mlp_hidden);
      rc.get("mlp_ratio", m.connector.mlp_ratio);
    }
    if (const json* v = r.child("lm")) {
      Reader rl(*v, "lm.");
      rl.get("vocab_size", m.lm.vocab_size);
      rl.get("d_model", m.lm.d_model);
      rl.get("n_layers", m.lm.n_layers);
      rl.get("n_heads", m.lm.n_heads);
      rl.get("max_seq", m.lm.max_seq);
      rl.get("mlp_ratio", m.lm.mlp_ratio);
      if (const json* k = rl.child("cross_attn_every"); k && !k->is_null()) m.lm.cross_attn_every = k->get<std::size_t>();
    }
    if (const json* v = r.child("adapter")) {
      Reader ra(*v, "adapter.");
      ra.get("rank", c.adapter.rank);
      ra.get("dropout_p", c.adapter.dropout_p);
      if (const json* k = ra.child("kind")) c.adapter.kind = adapters::parse_kind(k->get<std::string>());
      if (const json* a = ra.child("alpha"); a && !a->is_null()) c.adapter.alpha = a->get<double>();
    }
    if (const json* v = r.child("train")) {
      Reader rt(*v, "train.");
      rt.get("steps", c.train.steps);
      rt.get("lr", c.train.lr);
      rt.get("warmup_frac", c.train.warmup_frac);
      rt.get("beta1", c.train.beta1);
      rt.get("beta2", c.train.beta2);
      rt.get("weight_decay", c.train.weight_decay);
      rt.get("eps", c.train.eps);
    }
    if (const json* v = r.child("data")) {
      Reader rd(*v, "data.");
      rd.get("n_examples", c.data.n_examples);
      rd.get("image_size", c.data.image_size);
      rd.get("vary_size", c.data.vary_size);
      rd.get("manifest", c.data.manifest);
      if (const json* sp = rd.child("split")) {
        Reader rs(*sp, "data.split.");
        rs.get("enabled", c.data.split.enabled);
        rs.get("apply_prob", c.data.split.apply_prob);
      }
    }
  }
  c.validate();
  return c;
}

}  // namespace

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

void save_run_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << to_json(cfg).dump(2) << '\n';
}

void set_path(json& j, const std::string& dotted, const json& value) {
  json* node = &j;
  std::size_t begin = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', begin);
    const std::string key = dotted.substr(begin, dot == std::string::npos ? std::string::npos : dot - begin);
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    begin = dot + 1;
  }
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_id(const RunConfig& cfg) {
  json j = to_json(cfg);
  j.erase("seed");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

}  // namespace vlm::harness
