#include "magic/train.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "magic/kernels.hpp"
#include "magic/wire.hpp"

namespace magic {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

json config_to_json(const TrainConfig& c) {
  return json{{"variant", variant_name(c.variant)},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"base_lr", c.base_lr},
              {"warmup_steps", c.warmup_steps},
              {"smoothing_eps", c.smoothing_eps},
              {"p_view", c.p_view},
              {"p_lang", c.p_lang},
              {"seed", c.seed},
              {"views_per_object", c.views_per_object},
              {"distractors", c.distractors},
              {"contrastive_weight", c.contrastive_weight},
              {"contrastive_temperature", c.contrastive_temperature},
              {"use_view_positions", c.use_view_positions},
              {"deterministic", c.deterministic},
              {"hidden", c.hidden},
              {"layers", c.layers},
              {"heads", c.heads},
              {"ffn_dim", c.ffn_dim},
              {"max_tokens", c.max_tokens},
              {"weight_decay", c.weight_decay}};
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  const auto vname = j.at("variant").get<std::string>();
  if (!variant_from_name(vname, c.variant))
    throw std::runtime_error("checkpoint: unknown variant '" + vname + "'");
  c.epochs = j.at("epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.base_lr = j.at("base_lr").get<double>();
  c.warmup_steps = j.at("warmup_steps").get<std::size_t>();
  c.smoothing_eps = j.at("smoothing_eps").get<double>();
  c.p_view = j.at("p_view").get<double>();
  c.p_lang = j.at("p_lang").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.views_per_object = j.at("views_per_object").get<std::size_t>();
  c.distractors = j.at("distractors").get<std::size_t>();
  c.contrastive_weight = j.at("contrastive_weight").get<double>();
  c.contrastive_temperature = j.at("contrastive_temperature").get<double>();
  c.use_view_positions = j.at("use_view_positions").get<bool>();
  c.deterministic = j.at("deterministic").get<bool>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.max_tokens = j.at("max_tokens").get<std::size_t>();
  c.weight_decay = j.at("weight_decay").get<double>();
  return c;
}

json metrics_to_json(const MetricsBreakdown& m) {
  return json{{"visual", m.visual},
              {"blind", m.blind},
              {"all", m.all},
              {"visual_n", m.visual_n},
              {"blind_n", m.blind_n},
              {"visual_correct", m.visual_correct},
              {"blind_correct", m.blind_correct}};
}

MetricsBreakdown metrics_from_json(const json& j) {
  MetricsBreakdown m;
  m.visual = j.at("visual").get<double>();
  m.blind = j.at("blind").get<double>();
  m.all = j.at("all").get<double>();
  m.visual_n = j.at("visual_n").get<std::size_t>();
  m.blind_n = j.at("blind_n").get<std::size_t>();
  m.visual_correct = j.at("visual_correct").get<std::size_t>();
  m.blind_correct = j.at("blind_correct").get<std::size_t>();
  return m;
}

constexpr std::uint64_t kInitStream = 0x696e6974;  // model init
constexpr std::uint64_t kOrderStream = 0x6f726472;  // per-epoch shuffle
constexpr std::uint64_t kMaskStream = 0x6d61736b;   // per-epoch masking
constexpr std::uint64_t kExtendStream = 0x65787464; // per-epoch distractors
constexpr std::uint64_t kEvalStream = 0x6576616c;   // eval distractors

// ids available as extra distractors: every object of every other record in
// the same split, in first-appearance order
std::vector<std::string> distractor_pool(const std::vector<const AnnotationRecord*>& insts,
                                         const AnnotationRecord& rec) {
  std::unordered_set<std::string> own(rec.objects.begin(), rec.objects.end());
  std::vector<std::string> pool;
  std::unordered_set<std::string> seen;
  for (const auto* r : insts)
    for (const auto& id : r->objects)
      if (!own.count(id) && seen.insert(id).second) pool.push_back(id);
  return pool;
}

struct EpochBatchSource {
  // materialized records for instances whose object list was extended; the
  // pointer list mixes originals and extensions
  std::vector<AnnotationRecord> extended;
  std::vector<const AnnotationRecord*> insts;
};

EpochBatchSource epoch_instances(const std::vector<const AnnotationRecord*>& base,
                                 std::size_t m, Rng& ext_rng) {
  EpochBatchSource src;
  src.extended.reserve(base.size());
  src.insts.reserve(base.size());
  for (const auto* r : base) {
    if (m > r->objects.size()) {
      src.extended.push_back(extend_distractors(*r, distractor_pool(base, *r), m, ext_rng));
      src.insts.push_back(&src.extended.back());
    } else {
      src.insts.push_back(r);
    }
  }
  return src;
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out.flush()) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

ModelConfig model_config(const TrainConfig& cfg, std::size_t feature_dim) {
  ModelConfig mc;
  mc.feature_dim = feature_dim;
  mc.hidden = cfg.hidden;
  mc.layers = cfg.layers;
  mc.heads = cfg.heads;
  mc.ffn_dim = cfg.ffn_dim;
  mc.max_tokens = cfg.max_tokens;
  mc.max_views = cfg.views_per_object;
  mc.variant = cfg.variant;
  mc.use_view_positions = cfg.use_view_positions;
  mc.smoothing_eps = cfg.smoothing_eps;
  mc.contrastive_weight = cfg.contrastive_weight;
  mc.contrastive_temperature = cfg.contrastive_temperature;
  return mc;
}

std::string run_label(const TrainConfig& cfg) {
  std::ostringstream out;
  out << variant_name(cfg.variant) << "_j" << cfg.views_per_object << "_m" << cfg.distractors;
  if (cfg.p_view != 0.1 || cfg.p_lang != 0.2)
    out << "_pv" << cfg.p_view << "_pl" << cfg.p_lang;
  if (cfg.use_view_positions) out << "_pos";
  if (cfg.contrastive_weight != 0.0) out << "_cw" << cfg.contrastive_weight;
  return out.str();
}

MetricsBreakdown evaluate_split(const ModelParams<float>& params, const Dataset& data,
                                Split split, std::size_t views, std::size_t distractors,
                                std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("evaluate: batch_size must be positive");
  const auto insts = data.split(split);
  if (insts.empty()) throw std::runtime_error("evaluate: empty split");

  MetricsBreakdown mb;
  for (std::size_t start = 0; start < insts.size(); start += batch_size) {
    const std::size_t stop = std::min(insts.size(), start + batch_size);
    std::vector<AnnotationRecord> extended;
    extended.reserve(stop - start);
    std::vector<const AnnotationRecord*> chunk;
    for (std::size_t i = start; i < stop; ++i) {
      if (distractors > insts[i]->objects.size()) {
        // a fixed per-instance stream keeps eval independent of batch size
        Rng rng(mix_seed(kEvalStream, i));
        extended.push_back(extend_distractors(*insts[i], distractor_pool(insts, *insts[i]),
                                              distractors, rng));
        chunk.push_back(&extended.back());
      } else {
        chunk.push_back(insts[i]);
      }
    }
    const Batch<float> batch =
        make_batch(chunk, data.objects, data.language, views, params.cfg.max_tokens);
    const auto out = forward(batch, params);
    const auto preds = predict_batch(out.scores->value, batch.size, batch.objects);
    for (std::size_t b = 0; b < batch.size; ++b) {
      const bool hit = preds[b] == batch.targets[b];
      if (batch.kinds[b]) {
        ++mb.visual_n;
        mb.visual_correct += hit;
      } else {
        ++mb.blind_n;
        mb.blind_correct += hit;
      }
    }
  }
  mb.visual = mb.visual_n ? double(mb.visual_correct) / double(mb.visual_n) : 0.0;
  mb.blind = mb.blind_n ? double(mb.blind_correct) / double(mb.blind_n) : 0.0;
  mb.all = double(mb.visual_correct + mb.blind_correct) / double(mb.visual_n + mb.blind_n);
  return mb;
}

void save_checkpoint(const std::string& path, const ModelParams<float>& params,
                     const AdamW<float>& opt, const CheckpointState& state) {
  const auto& reg = params.registry;
  if (opt.params.size() != reg.size())
    throw std::invalid_argument("checkpoint: optimizer does not match the model");
  for (std::size_t i = 0; i < reg.size(); ++i)
    if (opt.params[i] != reg[i].second)
      throw std::invalid_argument("checkpoint: optimizer does not match the model");

  json header{{"train", config_to_json(state.train)},
              {"feature_dim", state.feature_dim},
              {"step", state.step},
              {"epochs_done", state.epochs_done},
              {"best_val_all", state.best_val_all},
              {"best", metrics_to_json(state.best_metrics)}};
  const std::string header_text = header.dump();

  std::string buf;
  buf += "MGCK";
  wire::put_u32(buf, 1);
  wire::put_u64(buf, header_text.size());
  buf += header_text;

  wire::put_u32(buf, std::uint32_t(3 * reg.size()));
  auto put_tensor = [&buf](const std::string& name, const Tensor<float>& t) {
    wire::put_u16(buf, std::uint16_t(name.size()));
    buf += name;
    wire::put_u32(buf, std::uint32_t(t.shape.size()));
    for (auto d : t.shape) wire::put_u64(buf, d);
    for (float f : t.data) wire::put_f32(buf, f);
  };
  for (std::size_t i = 0; i < reg.size(); ++i) {
    put_tensor(reg[i].first, reg[i].second->value);
    put_tensor("adam.m." + reg[i].first, opt.m[i]);
    put_tensor("adam.v." + reg[i].first, opt.v[i]);
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(buf.data(), std::streamsize(buf.size()));
  if (!out.flush()) throw std::runtime_error("write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();

  wire::Cursor c{buf, "checkpoint"};
  if (c.get_bytes(4) != "MGCK") throw std::runtime_error("checkpoint: bad magic");
  const auto version = std::uint32_t(c.get_uint(4));
  if (version != 1)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const auto header_len = std::size_t(c.get_uint(8));
  json header;
  try {
    header = json::parse(c.get_bytes(header_len));
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("checkpoint: invalid header: ") + e.what());
  }

  CheckpointState state;
  state.train = config_from_json(header.at("train"));
  state.feature_dim = header.at("feature_dim").get<std::size_t>();
  state.step = header.at("step").get<std::size_t>();
  state.epochs_done = header.at("epochs_done").get<std::size_t>();
  state.best_val_all = header.at("best_val_all").get<double>();
  state.best_metrics = metrics_from_json(header.at("best"));

  ModelParams<float> params = init_model<float>(model_config(state.train, state.feature_dim),
                                                mix_seed(state.train.seed, kInitStream));
  AdamW<float> opt(params.trainable());
  opt.weight_decay = float(state.train.weight_decay);
  opt.step_count = state.step;

  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < params.registry.size(); ++i)
    index.emplace(params.registry[i].first, i);

  const auto count = std::size_t(c.get_uint(4));
  if (count != 3 * params.registry.size())
    throw std::runtime_error("checkpoint: expected " +
                             std::to_string(3 * params.registry.size()) + " tensors, file has " +
                             std::to_string(count));
  std::unordered_set<std::string> seen;
  for (std::size_t r = 0; r < count; ++r) {
    const auto name_len = std::size_t(c.get_uint(2));
    const std::string name = c.get_bytes(name_len);
    if (!seen.insert(name).second)
      throw std::runtime_error("checkpoint: duplicate tensor '" + name + "'");

    std::string param = name;
    Tensor<float>* dst = nullptr;
    if (name.rfind("adam.m.", 0) == 0) param = name.substr(7);
    else if (name.rfind("adam.v.", 0) == 0) param = name.substr(7);
    const auto it = index.find(param);
    if (it == index.end()) throw std::runtime_error("checkpoint: unknown tensor '" + name + "'");
    if (name.rfind("adam.m.", 0) == 0) dst = &opt.m[it->second];
    else if (name.rfind("adam.v.", 0) == 0) dst = &opt.v[it->second];
    else dst = &params.registry[it->second].second->value;

    const auto ndim = std::size_t(c.get_uint(4));
    std::vector<std::size_t> shape(ndim);
    for (auto& d : shape) d = std::size_t(c.get_uint(8));
    if (shape != dst->shape)
      throw std::runtime_error("checkpoint: tensor '" + name + "' has the wrong shape");
    for (auto& f : dst->data) f = c.get_f32();
  }
  if (!c.done()) throw std::runtime_error("checkpoint: trailing bytes");

  return LoadedCheckpoint{std::move(params), std::move(opt), std::move(state)};
}

RunResult train_run(const Dataset& data, const TrainConfig& cfg, const std::string& out_dir,
                    const std::string& resume_from) {
  const auto train_insts = data.split(Split::train);
  if (train_insts.empty()) throw std::runtime_error("train: empty train split");
  const std::size_t d = data.objects.dim;

  CheckpointState st;
  ModelParams<float> params;
  std::unique_ptr<AdamW<float>> opt;
  const bool resume = !resume_from.empty();
  if (resume) {
    LoadedCheckpoint lc = load_checkpoint(resume_from);
    st = std::move(lc.state);
    params = std::move(lc.params);
    opt = std::make_unique<AdamW<float>>(std::move(lc.opt));
    if (st.feature_dim != d)
      throw std::runtime_error("train: checkpoint feature dim " +
                               std::to_string(st.feature_dim) + " does not match the data");
    st.train.epochs = cfg.epochs;  // everything else continues from the checkpoint
  } else {
    st.train = cfg;
    st.feature_dim = d;
    params = init_model<float>(model_config(cfg, d), mix_seed(cfg.seed, kInitStream));
    opt = std::make_unique<AdamW<float>>(params.trainable());
    opt->weight_decay = float(cfg.weight_decay);
  }
  const TrainConfig& tc = st.train;
  kern::set_canonical_reductions(tc.deterministic);
  const LrSchedule sched{tc.base_lr, tc.warmup_steps};

  fs::create_directories(out_dir);
  const std::string best_path = (fs::path(out_dir) / "best.ckpt").string();
  const std::string last_path = (fs::path(out_dir) / "last.ckpt").string();
  {
    json echo = config_to_json(tc);
    echo["feature_dim"] = d;
    echo["param_count"] = params.param_count();
    echo["label"] = run_label(tc);
    write_text_file(fs::path(out_dir) / "config.json", echo.dump(2) + "\n");
  }
  std::ofstream log(fs::path(out_dir) / "run_log.jsonl",
                    resume ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write run_log.jsonl in " + out_dir);

  RunResult res;
  res.seed = tc.seed;
  res.best_path = best_path;
  res.last_path = last_path;
  const auto t0 = std::chrono::steady_clock::now();

  MetricsBreakdown last_metrics;
  bool evaluated = false;
  for (std::size_t epoch = st.epochs_done; epoch < tc.epochs; ++epoch) {
    Rng ext_rng(mix_seed(tc.seed, kExtendStream, epoch));
    EpochBatchSource src = epoch_instances(train_insts, tc.distractors, ext_rng);
    Rng order_rng(mix_seed(tc.seed, kOrderStream, epoch));
    order_rng.shuffle(src.insts);
    Rng mask_rng(mix_seed(tc.seed, kMaskStream, epoch));

    double loss_sum = 0;
    double lr_last = 0;
    for (std::size_t start = 0; start < src.insts.size(); start += tc.batch_size) {
      const std::size_t stop = std::min(src.insts.size(), start + tc.batch_size);
      const std::vector<const AnnotationRecord*> chunk(src.insts.begin() + start,
                                                       src.insts.begin() + stop);
      std::vector<MaskSample> masks;
      masks.reserve(chunk.size());
      for (const auto* r : chunk) {
        const std::size_t tokens =
            std::min<std::size_t>(data.language.get(r->id).rows(), tc.max_tokens);
        masks.push_back(sample_masks(mask_rng, r->objects.size(), tc.views_per_object, tokens,
                                     tc.p_view, tc.p_lang));
      }
      const Batch<float> batch = make_batch(chunk, data.objects, data.language,
                                            tc.views_per_object, tc.max_tokens, &masks);
      const auto out = forward(batch, params);
      const auto loss = total_loss(out, batch, params);
      const double loss_value = double(loss->value.data[0]);
      if (!std::isfinite(loss_value))
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                 ", step " + std::to_string(st.step));
      opt->zero_grad();
      backward(loss);
      lr_last = sched.at(st.step);
      opt->step(float(lr_last));
      ++st.step;
      loss_sum += loss_value * double(batch.size);
    }
    const double train_loss = loss_sum / double(src.insts.size());
    res.train_loss.push_back(train_loss);

    last_metrics = evaluate_split(params, data, Split::val, tc.views_per_object,
                                  tc.distractors, tc.batch_size);
    evaluated = true;
    st.epochs_done = epoch + 1;
    if (last_metrics.all > st.best_val_all) {
      st.best_val_all = last_metrics.all;
      st.best_metrics = last_metrics;
      save_checkpoint(best_path, params, *opt, st);
    }
    save_checkpoint(last_path, params, *opt, st);

    json line{{"epoch", epoch},
              {"train_loss", train_loss},
              {"val_visual", last_metrics.visual},
              {"val_blind", last_metrics.blind},
              {"val_all", last_metrics.all},
              {"lr_last", lr_last}};
    log << line.dump() << '\n';
    log.flush();
  }

  if (!evaluated)  // resume target already reached; report where things stand
    last_metrics = evaluate_split(params, data, Split::val, tc.views_per_object,
                                  tc.distractors, tc.batch_size);
  res.best = st.best_metrics;
  res.last = last_metrics;
  res.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace magic
