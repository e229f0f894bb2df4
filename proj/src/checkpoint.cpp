#include "avasr/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "avasr/config.hpp"

namespace avasr {

namespace {

constexpr uint8_t kVersion = 1;

void put_u8(std::ostream& o, uint8_t v) { o.put(static_cast<char>(v)); }

void put_u32(std::ostream& o, uint32_t v) {
  for (int i = 0; i < 4; ++i) o.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::ostream& o, uint64_t v) {
  for (int i = 0; i < 8; ++i) o.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::ostream& o, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(o, bits);
}

void put_string(std::ostream& o, const std::string& s) {
  put_u32(o, static_cast<uint32_t>(s.size()));
  o.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void put_payload(std::ostream& o, const std::vector<real>& v) {
  o.write(reinterpret_cast<const char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(real)));
}

uint8_t get_u8(std::istream& in) {
  int c = in.get();
  if (c < 0) throw IoError("checkpoint truncated");
  return static_cast<uint8_t>(c);
}

uint32_t get_u32(std::istream& in) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(get_u8(in)) << (8 * i);
  return v;
}

uint64_t get_u64(std::istream& in) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(get_u8(in)) << (8 * i);
  return v;
}

double get_f64(std::istream& in) {
  uint64_t bits = get_u64(in);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

std::string get_string(std::istream& in) {
  uint32_t len = get_u32(in);
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (!in) throw IoError("checkpoint truncated");
  return s;
}

std::vector<real> get_payload(std::istream& in, std::size_t numel,
                              uint8_t width) {
  std::vector<real> out(numel);
  if (width == sizeof(real)) {
    in.read(reinterpret_cast<char*>(out.data()),
            static_cast<std::streamsize>(numel * sizeof(real)));
  } else if (width == 4) {
    std::vector<float> tmp(numel);
    in.read(reinterpret_cast<char*>(tmp.data()),
            static_cast<std::streamsize>(numel * 4));
    for (std::size_t i = 0; i < numel; ++i) out[i] = static_cast<real>(tmp[i]);
  } else if (width == 8) {
    std::vector<double> tmp(numel);
    in.read(reinterpret_cast<char*>(tmp.data()),
            static_cast<std::streamsize>(numel * 8));
    for (std::size_t i = 0; i < numel; ++i) out[i] = static_cast<real>(tmp[i]);
  } else {
    throw IoError("checkpoint has unsupported scalar width " +
                  std::to_string(width));
  }
  if (!in) throw IoError("checkpoint truncated");
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const AVASRModel& model,
                     const TrainState& state, uint64_t seed,
                     const std::string& config_echo) {
  std::string echo = config_echo;
  if (echo.empty()) {
    // make checkpoints self-describing even without a CLI-provided echo
    KV kv;
    model_config_to_kv(model.config(), kv);
    echo = kv.to_string();
  }

  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + tmp);
    put_u8(out, kVersion);
    put_u8(out, sizeof(real));
    put_u64(out, seed);
    put_u64(out, static_cast<uint64_t>(state.step));
    put_u32(out, static_cast<uint32_t>(state.next_epoch));
    put_u32(out, static_cast<uint32_t>(state.best_epoch + 1));  // -1 -> 0
    put_f64(out, state.best_dev);
    put_u32(out, static_cast<uint32_t>(state.epochs_since_best));
    put_string(out, echo);

    NamedParams params = model.named_parameters();
    put_u32(out, static_cast<uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
      put_string(out, name);
      put_u8(out, static_cast<uint8_t>(t.ndim()));
      for (int d : t.shape()) put_u32(out, static_cast<uint32_t>(d));
      put_payload(out, t.data());
    }

    put_u8(out, state.adam.initialized() ? 1 : 0);
    if (state.adam.initialized()) {
      if (state.adam.m.size() != params.size())
        throw ContractError("optimizer state does not match parameters");
      put_f64(out, static_cast<double>(state.adam.beta1));
      put_f64(out, static_cast<double>(state.adam.beta2));
      put_f64(out, static_cast<double>(state.adam.eps));
      put_u64(out, static_cast<uint64_t>(state.adam.step));
      put_u64(out, static_cast<uint64_t>(state.adam.skipped));
      for (std::size_t i = 0; i < params.size(); ++i) {
        put_payload(out, state.adam.m[i]);
        put_payload(out, state.adam.v[i]);
      }
    }
    if (!out) throw IoError("failed writing checkpoint: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

void model_config_to_kv(const AVASRConfig& c, KV& kv) {
  kv.set_long("d_model", c.d_model);
  kv.set_long("heads", c.heads);
  kv.set_long("enc_layers", c.enc_layers);
  kv.set_long("dec_layers", c.dec_layers);
  kv.set_long("d_ff", c.d_ff);
  kv.set_double("dropout", c.dropout);
  kv.set_long("audio_cols", c.audio_cols);
  kv.set_long("stack_factor", c.stack_factor);
  kv.set_long("video_dim", c.video_dim);
  kv.set_long("char_vocab", c.char_vocab);
  kv.set_long("subword_vocab", c.subword_vocab);
  kv.set_bool("attention_scaling", c.attention_scaling);
  kv.set_bool("fusion_enabled", c.fusion_enabled);
}

TrainConfig train_config_from_kv(const KV& kv) {
  TrainConfig t;
  t.gamma = static_cast<real>(kv.get_double("gamma", t.gamma));
  t.label_smoothing =
      static_cast<real>(kv.get_double("label_smoothing", t.label_smoothing));
  t.base_lr = static_cast<real>(kv.get_double("lr", t.base_lr));
  t.warmup_steps = kv.get_long("warmup_steps", t.warmup_steps);
  t.max_epochs = static_cast<int>(kv.get_long("max_epochs", t.max_epochs));
  t.patience = static_cast<int>(kv.get_long("patience", t.patience));
  t.seed = static_cast<uint64_t>(kv.get_long("seed", static_cast<long>(t.seed)));
  t.batch_frames = kv.get_long("batch_frames", t.batch_frames);
  t.clip_norm = static_cast<real>(kv.get_double("clip_norm", t.clip_norm));
  std::string sched = kv.get("schedule", "warmup_inv_sqrt");
  if (sched == "warmup_inv_sqrt")
    t.schedule = TrainConfig::Schedule::kWarmupInvSqrt;
  else if (sched == "constant")
    t.schedule = TrainConfig::Schedule::kConstant;
  else
    throw ConfigError("unknown schedule: " + sched);
  return t;
}

void train_config_to_kv(const TrainConfig& t, KV& kv) {
  kv.set_double("gamma", t.gamma);
  kv.set_double("label_smoothing", t.label_smoothing);
  kv.set_double("lr", t.base_lr);
  kv.set_long("warmup_steps", t.warmup_steps);
  kv.set_long("max_epochs", t.max_epochs);
  kv.set_long("patience", t.patience);
  kv.set_long("seed", static_cast<long>(t.seed));
  kv.set_long("batch_frames", t.batch_frames);
  kv.set_double("clip_norm", t.clip_norm);
  kv.set("schedule", t.schedule == TrainConfig::Schedule::kWarmupInvSqrt
                         ? "warmup_inv_sqrt"
                         : "constant");
}

AVASRConfig model_config_from_kv(const KV& kv) {
  AVASRConfig c;
  c.d_model = static_cast<int>(kv.get_long("d_model", c.d_model));
  c.heads = static_cast<int>(kv.get_long("heads", c.heads));
  c.enc_layers = static_cast<int>(kv.get_long("enc_layers", c.enc_layers));
  c.dec_layers = static_cast<int>(kv.get_long("dec_layers", c.dec_layers));
  c.d_ff = static_cast<int>(kv.get_long("d_ff", c.d_ff));
  c.dropout = static_cast<real>(kv.get_double("dropout", c.dropout));
  c.audio_cols = static_cast<int>(kv.get_long("audio_cols", c.audio_cols));
  c.stack_factor =
      static_cast<int>(kv.get_long("stack_factor", c.stack_factor));
  c.video_dim = static_cast<int>(kv.get_long("video_dim", c.video_dim));
  c.char_vocab = static_cast<int>(kv.get_long("char_vocab", c.char_vocab));
  c.subword_vocab =
      static_cast<int>(kv.get_long("subword_vocab", c.subword_vocab));
  c.attention_scaling =
      kv.get_bool("attention_scaling", c.attention_scaling);
  c.fusion_enabled = kv.get_bool("fusion_enabled", c.fusion_enabled);
  return c;
}

AVASRConfig model_config_from_echo(const std::string& echo) {
  return model_config_from_kv(KV::parse(echo));
}

LoadedCheckpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  uint8_t version = get_u8(in);
  if (version != kVersion)
    throw IoError("checkpoint version " + std::to_string(version) +
                  " unsupported (want " + std::to_string(kVersion) + ")");
  uint8_t width = get_u8(in);
  LoadedCheckpoint ckpt;
  ckpt.seed = get_u64(in);
  ckpt.state.step = static_cast<long>(get_u64(in));
  ckpt.state.next_epoch = static_cast<int>(get_u32(in));
  ckpt.state.best_epoch = static_cast<int>(get_u32(in)) - 1;
  ckpt.state.best_dev = get_f64(in);
  ckpt.state.epochs_since_best = static_cast<int>(get_u32(in));
  ckpt.config_echo = get_string(in);
  ckpt.config = model_config_from_echo(ckpt.config_echo);

  uint32_t count = get_u32(in);
  ckpt.params.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = get_string(in);
    uint8_t ndim = get_u8(in);
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<int>(get_u32(in));
    std::vector<real> payload = get_payload(in, shape_numel(shape), width);
    ckpt.params.emplace_back(name,
                             Tensor::from_data(shape, std::move(payload)));
  }

  if (get_u8(in)) {
    ckpt.state.adam.beta1 = static_cast<real>(get_f64(in));
    ckpt.state.adam.beta2 = static_cast<real>(get_f64(in));
    ckpt.state.adam.eps = static_cast<real>(get_f64(in));
    ckpt.state.adam.step = static_cast<long>(get_u64(in));
    ckpt.state.adam.skipped = static_cast<long>(get_u64(in));
    for (uint32_t i = 0; i < count; ++i) {
      std::size_t numel = ckpt.params[i].second.numel();
      ckpt.state.adam.m.push_back(get_payload(in, numel, width));
      ckpt.state.adam.v.push_back(get_payload(in, numel, width));
    }
  }
  return ckpt;
}

AVASRModel restore_model(const LoadedCheckpoint& ckpt) {
  Rng rng(ckpt.seed);
  AVASRModel model(ckpt.config, rng);
  NamedParams params = model.named_parameters();
  if (params.size() != ckpt.params.size())
    throw IoError("checkpoint has " + std::to_string(ckpt.params.size()) +
                  " parameters, model wants " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [want_name, t] = params[i];
    const auto& [got_name, payload] = ckpt.params[i];
    if (want_name != got_name)
      throw IoError("checkpoint parameter '" + got_name +
                    "' does not match model parameter '" + want_name + "'");
    if (payload.shape() != t.shape())
      throw IoError("checkpoint parameter '" + got_name + "' has shape " +
                    shape_str(payload.shape()) + ", model wants " +
                    shape_str(t.shape()));
    const_cast<Tensor&>(t).data() = payload.data();
  }
  return model;
}

}  // namespace avasr
