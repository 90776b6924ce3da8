#include "modprune/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "modprune/config.hpp"
#include "modprune/errors.hpp"

namespace modprune {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f64s(std::span<const double> v) { raw(v.data(), v.size() * 8); }
  void str(std::string_view s) { raw(s.data(), s.size()); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Cursor {
 public:
  explicit Cursor(std::string_view b) : b_(b) {}
  void raw(void* p, std::size_t n) {
    if (n > b_.size() - pos_) throw InputError("checkpoint truncated at byte " + std::to_string(pos_));
    std::memcpy(p, b_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, 8);
    return v;
  }
  std::string str(std::size_t n) {
    if (n > b_.size() - pos_) throw InputError("checkpoint truncated at byte " + std::to_string(pos_));
    std::string s(b_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::string_view b_;
  std::size_t pos_ = 0;
};

std::string write_container(const char magic[4], const json& meta, const std::vector<NamedTensor>& tensors) {
  Writer w;
  w.raw(magic, 4);
  w.u32(kVersion);
  const std::string m = meta.dump();
  w.u64(m.size());
  w.str(m);
  w.u64(tensors.size());
  for (const NamedTensor& t : tensors) {
    w.u32(static_cast<std::uint32_t>(t.path.size()));
    w.str(t.path);
    const Shape& s = t.tensor.shape();
    w.u32(static_cast<std::uint32_t>(s.size()));
    for (std::size_t d : s) w.u64(d);
    w.f64s(t.tensor.values());
  }
  return w.take();
}

std::map<std::string, Tensor> read_container(std::string_view bytes, const char magic[4], json& meta) {
  Cursor c(bytes);
  char m[4];
  c.raw(m, 4);
  if (std::memcmp(m, magic, 4) != 0) throw InputError("not a " + std::string(magic, 4) + " file (bad magic)");
  const std::uint32_t ver = c.u32();
  if (ver != kVersion) throw InputError("unsupported checkpoint version " + std::to_string(ver));
  const std::uint64_t meta_len = c.u64();
  try {
    meta = json::parse(c.str(meta_len));
  } catch (const json::exception& e) {
    throw InputError(std::string("checkpoint meta is not valid JSON: ") + e.what());
  }
  std::map<std::string, Tensor> out;
  const std::uint64_t n = c.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::string name = c.str(c.u32());
    Shape shape(c.u32());
    std::size_t numel = 1;
    for (std::size_t& d : shape) numel *= (d = c.u64());
    std::vector<double> v(numel);
    c.raw(v.data(), numel * 8);
    out.emplace(name, Tensor(shape, std::move(v)));
  }
  if (!c.done()) throw InputError("checkpoint has trailing bytes");
  return out;
}

Tensor take(std::map<std::string, Tensor>& m, const std::string& name) {
  auto it = m.find(name);
  if (it == m.end()) throw InputError("checkpoint is missing tensor '" + name + "'");
  Tensor t = it->second;
  t.set_requires_grad(true);
  m.erase(it);
  return t;
}

}  // namespace

std::string serialize_backbone(const Backbone& model, const json& provenance) {
  json meta;
  meta["kind"] = "backbone";
  meta["config"] = to_json(model.config());
  json layers = json::array();
  for (const AttentionLayout& a : model.layout().attention)
    layers.push_back({{"layer", a.layer}, {"head_group", a.head_group}});
  meta["attention"] = layers;
  if (!provenance.is_null()) meta["provenance"] = provenance;
  return write_container("MPCK", meta, model.parameters());
}

Backbone deserialize_backbone(std::string_view bytes, json* provenance) {
  json meta;
  auto t = read_container(bytes, "MPCK", meta);
  if (meta.value("kind", "") != "backbone") throw InputError("checkpoint does not hold a backbone");
  const BackboneConfig cfg = backbone_config_from_json(meta.at("config"));
  const std::size_t d = cfg.model_dim / cfg.n_heads;
  std::map<std::size_t, std::vector<std::size_t>> head_group;
  for (const json& l : meta.at("attention"))
    head_group[l.at("layer").get<std::size_t>()] = l.at("head_group").get<std::vector<std::size_t>>();

  auto attn = [&](const std::string& pre, std::size_t layer) {
    AttentionWeights w;
    w.w_q = take(t, pre + "attn.w_q");
    w.w_k = take(t, pre + "attn.w_k");
    w.w_v = take(t, pre + "attn.w_v");
    w.w_o = take(t, pre + "attn.w_o");
    w.head_dim = d;
    if (!head_group.count(layer)) throw InputError("checkpoint lacks the head map of layer " + std::to_string(layer));
    w.head_group = head_group[layer];
    w.validate(cfg.model_dim);
    return w;
  };
  auto ffn = [&](const std::string& pre) {
    return FeedForward{take(t, pre + "w1"), take(t, pre + "b1"), take(t, pre + "w2"), take(t, pre + "b2")};
  };

  std::vector<ModalityEncoder> enc(cfg.n_modalities);
  for (std::size_t j = 0; j < cfg.n_modalities; ++j) {
    const std::string pre = "enc." + std::to_string(j) + ".";
    ModalityEncoder& e = enc[j];
    e.embed_w = take(t, pre + "embed.w");
    e.embed_b = take(t, pre + "embed.b");
    e.pos = take(t, pre + "pos");
    e.missing_token = take(t, pre + "missing_token");
    for (std::size_t l = 0; l < cfg.encoder_depth; ++l) {
      const std::string lp = pre + "layer." + std::to_string(l) + ".";
      EncoderLayer el;
      el.attn = attn(lp, j * cfg.encoder_depth + l);
      el.ffn = ffn(lp + "ffn.");
      e.layers.push_back(std::move(el));
    }
  }
  std::vector<FusionLayer> fusion(cfg.fusion_depth);
  for (std::size_t f = 0; f < cfg.fusion_depth; ++f) {
    const std::string pre = "fusion." + std::to_string(f) + ".";
    fusion[f].attn = attn(pre, cfg.n_modalities * cfg.encoder_depth + f);
    fusion[f].moe.router = take(t, pre + "moe.router");
    fusion[f].moe.top_k = cfg.top_k;
    for (std::size_t e = 0; e < cfg.n_experts; ++e)
      fusion[f].moe.experts.push_back(ffn(pre + "moe.expert." + std::to_string(e) + "."));
  }
  Tensor hw = take(t, "head.w"), hb = take(t, "head.b");
  if (!t.empty()) throw InputError("checkpoint has unexpected tensor '" + t.begin()->first + "'");
  if (provenance) *provenance = meta.value("provenance", json());
  return Backbone(cfg, std::move(enc), std::move(fusion), hw, hb);
}

std::string serialize_gates(const GateTable& gates) {
  json meta;
  meta["kind"] = "gates";
  meta["n_modalities"] = gates.n_modalities();
  json groups = json::array();
  for (const GateGroup& g : gates.groups())
    groups.push_back({{"id", g.id.str()}, {"n_units", g.n_units}, {"hidden", g.hidden}});
  meta["groups"] = groups;
  return write_container("MPCK", meta, gates.parameters());
}

GateTable deserialize_gates(std::string_view bytes) {
  json meta;
  auto t = read_container(bytes, "MPCK", meta);
  if (meta.value("kind", "") != "gates") throw InputError("checkpoint does not hold a gate table");
  const std::size_t M = meta.at("n_modalities").get<std::size_t>();
  std::vector<GateGroup> groups;
  for (const json& gj : meta.at("groups")) {
    GateGroup g;
    g.id = parse_unit_group_id(gj.at("id").get<std::string>());
    g.n_units = gj.at("n_units").get<std::size_t>();
    g.hidden = gj.at("hidden").get<std::size_t>();
    g.n_modalities = M;
    const std::string pre = "gates." + g.id.str() + ".";
    g.zeta = take(t, pre + "zeta");
    g.w1 = take(t, pre + "w1");
    g.b1 = take(t, pre + "b1");
    g.w2 = take(t, pre + "w2");
    g.b2 = take(t, pre + "b2");
    g.gamma = take(t, pre + "gamma");
    if (g.zeta.numel() != g.n_units || g.w1.shape() != Shape{M, g.n_units * g.hidden})
      throw InputError("gate group " + g.id.str() + " has inconsistent tensor shapes");
    groups.push_back(std::move(g));
  }
  if (!t.empty()) throw InputError("gate checkpoint has unexpected tensor '" + t.begin()->first + "'");
  return GateTable(M, std::move(groups));
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot open '" + path.string() + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw InputError("write to '" + path.string() + "' failed");
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

UnitGroupId parse_unit_group_id(std::string_view s) {
  // site/layer[/expert]
  const auto a = s.find('/');
  if (a == std::string_view::npos) throw InputError("bad unit group id '" + std::string(s) + "'");
  const auto b = s.find('/', a + 1);
  UnitGroupId id;
  id.site = site_from_name(s.substr(0, a));
  try {
    id.layer = std::stoul(std::string(s.substr(a + 1, b == std::string_view::npos ? s.npos : b - a - 1)));
    if (b != std::string_view::npos) id.expert = std::stoul(std::string(s.substr(b + 1)));
  } catch (const std::exception&) {
    throw InputError("bad unit group id '" + std::string(s) + "'");
  }
  return id;
}

std::string serialize_attention(const std::vector<AttentionProbe>& probes) {
  Writer w;
  w.raw("MPAT", 4);
  w.u32(kVersion);
  std::uint64_t n = 0;
  for (const auto& p : probes) n += p.heads.size();
  w.u64(n);
  for (std::size_t layer = 0; layer < probes.size(); ++layer)
    for (const auto& h : probes[layer].heads) {
      w.u64(layer);
      w.u64(h.head);
      w.u64(h.seq_len);
      w.f64s(h.weights);
    }
  return w.take();
}

}  // namespace modprune
