#include "magic/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "json.hpp"
#include "magic/wire.hpp"

namespace magic {

namespace {

using nlohmann::json;

[[noreturn]] void line_error(std::size_t line, const std::string& what) {
  throw std::runtime_error("annotation line " + std::to_string(line) + ": " + what);
}

const json& field(const json& j, const char* name, std::size_t line) {
  auto it = j.find(name);
  if (it == j.end()) line_error(line, std::string("missing field '") + name + "'");
  return *it;
}

std::string string_field(const json& j, const char* name, std::size_t line) {
  const json& f = field(j, name, line);
  if (!f.is_string()) line_error(line, std::string("field '") + name + "' has the wrong type");
  return f.get<std::string>();
}

AnnotationRecord parse_record(const json& j, std::size_t line) {
  AnnotationRecord rec;
  rec.id = string_field(j, "id", line);
  rec.text = string_field(j, "text", line);

  const json& objs = field(j, "objects", line);
  if (!objs.is_array()) line_error(line, "field 'objects' has the wrong type");
  std::unordered_set<std::string> seen;
  for (const auto& o : objs) {
    if (!o.is_string()) line_error(line, "field 'objects' has the wrong type");
    auto id = o.get<std::string>();
    if (!seen.insert(id).second) line_error(line, "duplicate object id '" + id + "'");
    rec.objects.push_back(std::move(id));
  }
  if (rec.objects.size() < 2) line_error(line, "fewer than two objects");

  const json& tgt = field(j, "target", line);
  if (!tgt.is_number_integer()) line_error(line, "field 'target' has the wrong type");
  const auto t = tgt.get<std::int64_t>();
  if (t < 0 || std::size_t(t) >= rec.objects.size())
    line_error(line, "target out of range (" + std::to_string(t) + " of " +
                         std::to_string(rec.objects.size()) + " objects)");
  rec.target = std::uint32_t(t);

  const std::string kind = string_field(j, "kind", line);
  if (kind == "visual") rec.kind = Kind::visual;
  else if (kind == "blind") rec.kind = Kind::blind;
  else line_error(line, "unknown kind '" + kind + "'");

  const std::string split = string_field(j, "split", line);
  if (split == "train") rec.split = Split::train;
  else if (split == "val") rec.split = Split::val;
  else if (split == "test") rec.split = Split::test;
  else line_error(line, "unknown split '" + split + "'");
  return rec;
}

}  // namespace

std::vector<AnnotationRecord> parse_annotations(std::istream& in) {
  std::vector<AnnotationRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      line_error(lineno, std::string("invalid JSON: ") + e.what());
    }
    out.push_back(parse_record(j, lineno));
  }
  return out;
}

std::vector<AnnotationRecord> load_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return parse_annotations(in);
}

void FeatureStore::add(const std::string& id, Tensor<float> rows) {
  if (rows.rows() == 0) throw std::invalid_argument("feature store: empty record '" + id + "'");
  if (dim == 0) dim = std::uint32_t(rows.cols());
  if (rows.cols() != dim)
    throw std::invalid_argument("feature store: record '" + id + "' has dim " +
                                std::to_string(rows.cols()) + ", store has " +
                                std::to_string(dim));
  if (!records.emplace(id, std::move(rows)).second)
    throw std::invalid_argument("feature store: duplicate id '" + id + "'");
  order.push_back(id);
}

const Tensor<float>& FeatureStore::get(const std::string& id) const {
  auto it = records.find(id);
  if (it == records.end()) throw std::runtime_error("feature store: unknown id '" + id + "'");
  return it->second;
}

void write_feature_store(const std::string& path, const FeatureStore& store) {
  std::string buf;
  buf += "MVGF";
  wire::put_u32(buf, 1);
  wire::put_u32(buf, store.dim);
  wire::put_u64(buf, store.order.size());
  for (const auto& id : store.order) {
    if (id.size() > 0xffff)
      throw std::invalid_argument("feature store: id too long '" + id + "'");
    const Tensor<float>& rec = store.get(id);
    wire::put_u16(buf, std::uint16_t(id.size()));
    buf += id;
    wire::put_u32(buf, std::uint32_t(rec.rows()));
    for (float f : rec.data) wire::put_f32(buf, f);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(buf.data(), std::streamsize(buf.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

FeatureStore read_feature_store(const std::string& path, std::uint32_t expected_dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();

  wire::Cursor c{buf, "feature store"};
  if (c.get_bytes(4) != "MVGF") throw std::runtime_error("feature store: bad magic");
  const auto version = std::uint32_t(c.get_uint(4));
  if (version != 1)
    throw std::runtime_error("feature store: unsupported version " + std::to_string(version));
  FeatureStore store;
  store.dim = std::uint32_t(c.get_uint(4));
  if (expected_dim != 0 && store.dim != expected_dim)
    throw std::runtime_error("feature store: dimension mismatch, file has " +
                             std::to_string(store.dim) + ", expected " +
                             std::to_string(expected_dim));
  const auto count = c.get_uint(8);
  for (std::uint64_t r = 0; r < count; ++r) {
    const auto id_len = std::size_t(c.get_uint(2));
    std::string id = c.get_bytes(id_len);
    const auto rows = std::size_t(c.get_uint(4));
    if (store.dim != 0 && rows > buf.size() / (std::size_t(store.dim) * 4))
      throw std::runtime_error("feature store: truncated file");
    c.need(rows * store.dim * 4);
    Tensor<float> t = Tensor<float>::zeros({rows, store.dim});
    for (auto& f : t.data) f = c.get_f32();
    store.add(id, std::move(t));
  }
  if (!c.done()) throw std::runtime_error("feature store: trailing bytes");
  return store;
}

MaskSample sample_masks(Rng& rng, std::size_t objects, std::size_t views, std::size_t tokens,
                        double p_view, double p_lang) {
  if (p_view < 0 || p_view > 1 || p_lang < 0 || p_lang > 1)
    throw std::invalid_argument("sample_masks: probability out of [0,1]");
  MaskSample s;
  s.view_keep.assign(objects * views, 1);
  s.lang_keep.assign(tokens, 1);
  auto drop_group = [&](std::uint8_t* keep, std::size_t n, double p) {
    std::size_t kept = 0;
    for (std::size_t i = 0; i < n; ++i) {
      keep[i] = rng.bernoulli(p) ? 0 : 1;
      kept += keep[i];
    }
    if (kept == 0) keep[rng.bounded(n)] = 1;
  };
  for (std::size_t o = 0; o < objects; ++o)
    drop_group(s.view_keep.data() + o * views, views, p_view);
  drop_group(s.lang_keep.data(), tokens, p_lang);
  return s;
}

std::vector<std::uint32_t> subsample_views(std::size_t n, std::size_t j) {
  if (j == 0 || j > n)
    throw std::invalid_argument("subsample_views: j=" + std::to_string(j) + " out of [1," +
                                std::to_string(n) + "]");
  std::vector<std::uint32_t> idx;
  idx.reserve(j);
  for (std::size_t i = 0; i < j; ++i) {
    const auto v = std::uint32_t(std::llround(double(i) * double(n) / double(j)));
    if (idx.empty() || idx.back() != v) idx.push_back(v);
  }
  return idx;
}

AnnotationRecord extend_distractors(const AnnotationRecord& rec,
                                    const std::vector<std::string>& pool, std::size_t m,
                                    Rng& rng) {
  if (m < rec.objects.size())
    throw std::invalid_argument("extend_distractors: m smaller than the record");
  const std::size_t need = m - rec.objects.size();
  if (pool.size() < need) throw std::invalid_argument("extend_distractors: insufficient pool");
  std::unordered_set<std::string> existing(rec.objects.begin(), rec.objects.end());
  for (const auto& id : pool)
    if (existing.count(id))
      throw std::invalid_argument("extend_distractors: pool contains '" + id + "'");

  AnnotationRecord out = rec;
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = 0; i < need; ++i) {
    const std::size_t j = i + std::size_t(rng.bounded(order.size() - i));
    std::swap(order[i], order[j]);
    out.objects.push_back(pool[order[i]]);
  }
  std::vector<std::size_t> perm(m);
  for (std::size_t i = 0; i < m; ++i) perm[i] = i;
  rng.shuffle(perm);
  std::vector<std::string> shuffled(m);
  for (std::size_t i = 0; i < m; ++i) {
    shuffled[i] = out.objects[perm[i]];
    if (perm[i] == rec.target) out.target = std::uint32_t(i);
  }
  out.objects = std::move(shuffled);
  return out;
}

namespace {

// attribute i is exposed by view v iff v==i or v+1==i (mod attributes)
bool view_shows(std::size_t v, std::size_t attr, std::size_t attributes) {
  return v % attributes == attr || (v + 1) % attributes == attr;
}

struct Predicate {
  std::size_t c1, c2;
  bool farther;
};

// |a[c1] - b[c2]| compared against |b[c1] - a[c2]|
bool satisfies(const std::vector<double>& a, const std::vector<double>& b, const Predicate& p) {
  const double da = std::abs(a[p.c1] - b[p.c2]);
  const double db = std::abs(b[p.c1] - a[p.c2]);
  return p.farther ? da > db : da < db;
}

}  // namespace

void generate_synthetic(const SynthConfig& cfg, const std::string& out_dir) {
  if (cfg.attributes < 2) throw std::invalid_argument("synth: need at least 2 attributes");
  if (cfg.dim < 1 || cfg.views < 1 || cfg.count_train < 1 || cfg.count_val < 1)
    throw std::invalid_argument("synth: zero-sized configuration");
  for (std::size_t a = 0; a < cfg.attributes; ++a) {
    std::size_t visible = 0;
    for (std::size_t v = 0; v < cfg.views; ++v) visible += view_shows(v, a, cfg.attributes);
    if (visible < 2)
      throw std::invalid_argument("synth: invalid visibility plan, attribute " +
                                  std::to_string(a) + " visible in " + std::to_string(visible) +
                                  " views");
  }

  const std::size_t A = cfg.attributes, d = cfg.dim, n = cfg.views;
  Rng proj_rng(mix_seed(cfg.seed, 0x70726f6a));
  Tensor<float> proj = Tensor<float>::zeros({d, A});
  const double scale = 1.0 / std::sqrt(double(A));
  for (auto& x : proj.data) x = float(scale * proj_rng.normal());

  Rng dict_rng(mix_seed(cfg.seed, 0x64696374));
  Tensor<float> dict = Tensor<float>::zeros({2 * A + 2, d});
  for (auto& x : dict.data) x = float(dict_rng.normal());

  FeatureStore objects, language;
  objects.dim = std::uint32_t(d);
  language.dim = std::uint32_t(d);
  std::string annotations;

  const struct {
    const char* tag;
    std::size_t count;
    std::uint64_t stream;
  } splits[] = {{"train", cfg.count_train, 1}, {"val", cfg.count_val, 2}};

  for (const auto& sp : splits) {
    Rng rng(mix_seed(cfg.seed, sp.stream));
    for (std::size_t i = 0; i < sp.count; ++i) {
      std::vector<double> ax(A), ay(A);
      Predicate pred{};
      while (true) {
        for (auto& x : ax) x = rng.uniform();
        for (auto& x : ay) x = rng.uniform();
        pred.c1 = std::size_t(rng.bounded(A));
        pred.c2 = std::size_t(rng.bounded(A - 1));
        if (pred.c2 >= pred.c1) ++pred.c2;
        pred.farther = rng.bernoulli(0.5);
        if (satisfies(ax, ay, pred) != satisfies(ay, ax, pred)) break;
      }
      const bool x_is_target = satisfies(ax, ay, pred);
      const std::size_t target = std::size_t(rng.bounded(2));
      const std::vector<double>* attrs[2];
      attrs[target] = x_is_target ? &ax : &ay;
      attrs[1 - target] = x_is_target ? &ay : &ax;
      if (!satisfies(*attrs[target], *attrs[1 - target], pred) ||
          satisfies(*attrs[1 - target], *attrs[target], pred))
        throw std::logic_error("synth: exactly-one-target violated");

      const std::string inst = std::string(sp.tag) + "_" + std::to_string(i);
      const std::string obj_ids[2] = {inst + "_a", inst + "_b"};
      for (std::size_t o = 0; o < 2; ++o) {
        Tensor<float> vw = Tensor<float>::zeros({n, d});
        for (std::size_t v = 0; v < n; ++v) {
          for (std::size_t c = 0; c < d; ++c) {
            double acc = 0;
            for (std::size_t a = 0; a < A; ++a)
              if (view_shows(v, a, A)) acc += double(proj.at(c, a)) * (*attrs[o])[a];
            vw.at(v, c) = float(acc + cfg.noise_std * rng.normal());
          }
        }
        objects.add(obj_ids[o], std::move(vw));
      }

      Tensor<float> lang = Tensor<float>::zeros({3, d});
      const std::size_t rows[3] = {pred.c1, A + pred.c2, 2 * A + (pred.farther ? 1 : 0)};
      for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t c = 0; c < d; ++c)
          lang.at(t, c) = float(double(dict.at(rows[t], c)) + cfg.noise_std * rng.normal());
      language.add(inst, std::move(lang));

      const bool visual = pred.c1 == 0 || pred.c2 == 0;
      json rec = {
          {"id", inst},
          {"objects", {obj_ids[0], obj_ids[1]}},
          {"target", target},
          {"text", "attribute " + std::to_string(pred.c1) + " of the target is " +
                       (pred.farther ? "farther from" : "closer to") + " attribute " +
                       std::to_string(pred.c2) + " of the other object"},
          {"kind", visual ? "visual" : "blind"},
          {"split", sp.tag},
      };
      annotations += rec.dump();
      annotations += '\n';
    }
  }

  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  {
    std::ofstream out(fs::path(out_dir) / "annotations.jsonl");
    if (!out) throw std::runtime_error("cannot write annotations.jsonl");
    out << annotations;
  }
  write_feature_store((fs::path(out_dir) / "objects.mvgf").string(), objects);
  write_feature_store((fs::path(out_dir) / "language.mvgf").string(), language);
  {
    json meta = {{"attributes", cfg.attributes}, {"dim", cfg.dim},
                 {"views", cfg.views},           {"noise_std", cfg.noise_std},
                 {"count_train", cfg.count_train}, {"count_val", cfg.count_val},
                 {"seed", cfg.seed}};
    std::ofstream out(fs::path(out_dir) / "meta.json");
    if (!out) throw std::runtime_error("cannot write meta.json");
    out << meta.dump(2) << '\n';
  }
}

namespace {

// P over z uniform in [0,1]^2 that |x1 - z2| < |z1 - x2|: for each z2 the
// admissible z1 measure is exact; integrate over z2 by midpoint rule.
double closer_posterior(double x1, double x2) {
  constexpr int steps = 2048;
  double acc = 0;
  for (int i = 0; i < steps; ++i) {
    const double z2 = (i + 0.5) / steps;
    const double r = std::abs(x1 - z2);
    const double inside = std::min(1.0, x2 + r) - std::max(0.0, x2 - r);
    acc += 1.0 - std::max(0.0, inside);
  }
  return acc / steps;
}

}  // namespace

double bayes_single_object_ceiling(std::size_t trials, std::uint64_t seed) {
  Rng rng(seed);
  double correct = 0;
  std::size_t done = 0;
  while (done < trials) {
    const double x1 = rng.uniform(), x2 = rng.uniform();
    const double y1 = rng.uniform(), y2 = rng.uniform();
    const double dx = std::abs(x1 - y2), dy = std::abs(y1 - x2);
    if (dx == dy) continue;
    const bool x_target = dx < dy;
    const double qt = closer_posterior(x_target ? x1 : y1, x_target ? x2 : y2);
    const double qo = closer_posterior(x_target ? y1 : x1, x_target ? y2 : x2);
    if (qt > qo) correct += 1;
    else if (qt == qo) correct += 0.5;
    ++done;
  }
  return correct / double(trials);
}

std::vector<const AnnotationRecord*> Dataset::split(Split s) const {
  std::vector<const AnnotationRecord*> out;
  for (const auto& r : annotations)
    if (r.split == s) out.push_back(&r);
  return out;
}

Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  Dataset d;
  d.annotations = load_annotations((fs::path(dir) / "annotations.jsonl").string());
  d.objects = read_feature_store((fs::path(dir) / "objects.mvgf").string());
  d.language = read_feature_store((fs::path(dir) / "language.mvgf").string(), d.objects.dim);
  return d;
}

Batch<float> make_batch(const std::vector<const AnnotationRecord*>& instances,
                        const FeatureStore& objects, const FeatureStore& language,
                        std::size_t views_per_object, std::size_t max_tokens,
                        const std::vector<MaskSample>* masks) {
  if (instances.empty()) throw std::invalid_argument("make_batch: no instances");
  if (max_tokens == 0) throw std::invalid_argument("make_batch: max_tokens must be positive");
  const std::size_t B = instances.size(), m = instances[0]->objects.size();
  const std::size_t d = objects.dim, j = views_per_object;
  if (language.dim != d)
    throw std::invalid_argument("make_batch: store dimensions disagree");
  if (masks && masks->size() != B)
    throw std::invalid_argument("make_batch: one mask sample per instance required");

  std::vector<std::size_t> lang_rows(B);
  std::size_t k = 0;
  for (std::size_t b = 0; b < B; ++b) {
    if (instances[b]->objects.size() != m)
      throw std::invalid_argument("make_batch: mixed object counts in one batch");
    lang_rows[b] = std::min<std::size_t>(language.get(instances[b]->id).rows(), max_tokens);
    k = std::max(k, lang_rows[b]);
  }

  Batch<float> out;
  out.size = B;
  out.objects = m;
  out.views = j;
  out.tokens = k;
  out.dim = d;
  out.view_feats = Tensor<float>::zeros({B * m * j, d});
  out.view_valid.assign(B * m * j, 0);
  out.lang_feats = Tensor<float>::zeros({B * k, d});
  out.lang_valid.assign(B * k, 0);
  out.targets.resize(B);
  out.kinds.resize(B);

  for (std::size_t b = 0; b < B; ++b) {
    const AnnotationRecord& rec = *instances[b];
    if (masks) {
      const MaskSample& ms = (*masks)[b];
      if (ms.view_keep.size() != m * j || ms.lang_keep.size() != lang_rows[b])
        throw std::invalid_argument("make_batch: mask shape mismatch for '" + rec.id + "'");
    }
    for (std::size_t o = 0; o < m; ++o) {
      const Tensor<float>& rows = objects.get(rec.objects[o]);
      const auto idx = subsample_views(rows.rows(), j);
      for (std::size_t v = 0; v < idx.size(); ++v) {
        const std::size_t r = (b * m + o) * j + v;
        std::copy_n(rows.data.begin() + idx[v] * d, d, out.view_feats.data.begin() + r * d);
        out.view_valid[r] = masks ? (*masks)[b].view_keep[o * j + v] : 1;
      }
    }
    const Tensor<float>& lang = language.get(rec.id);
    for (std::size_t t = 0; t < lang_rows[b]; ++t) {
      const std::size_t r = b * k + t;
      std::copy_n(lang.data.begin() + t * d, d, out.lang_feats.data.begin() + r * d);
      out.lang_valid[r] = masks ? (*masks)[b].lang_keep[t] : 1;
    }
    out.targets[b] = rec.target;
    out.kinds[b] = rec.kind == Kind::visual ? 1 : 0;
  }
  return out;
}

}  // namespace magic
