#include "atvc/model.hpp"

#include <algorithm>
#include <cmath>

#include "atvc/wire.hpp"

namespace atvc {

namespace {

constexpr double kVarLo = 1e-4;
constexpr double kVarHi = 1e4;
constexpr double kHalfLog2Pi = 0.9189385332046727;  // 0.5 * ln(2*pi)

void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractError(msg);
}

std::vector<double> softmax_plain(const std::vector<double>& scores) {
  double mx = scores[0];
  for (double s : scores) mx = std::max(mx, s);
  std::vector<double> out(scores.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  if (access < 1) throw ConfigError("model access must be >= 1");
  if (buffer_cap < 1) throw ConfigError("model buffer_cap must be >= 1");
  if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
  if (encoder_hidden < 1) throw ConfigError("encoder_hidden must be >= 1");
  if (head_hidden < 1) throw ConfigError("head_hidden must be >= 1");
  if (attention_dim < 1) throw ConfigError("attention_dim must be >= 1");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in [0, 1]");
}

std::string message_to_bytes(const GaussianMessage& m) {
  require(m.mu.size() == m.sigma.size(), "message mu/sigma lengths differ");
  std::string out;
  wire::put_u32(out, static_cast<std::uint32_t>(m.sender));
  wire::put_u32(out, static_cast<std::uint32_t>(m.mu.size()));
  for (double v : m.mu) wire::put_f64(out, v);
  for (double v : m.sigma) wire::put_f64(out, v);
  return out;
}

GaussianMessage message_from_bytes(const std::string& bytes) {
  wire::Reader r{bytes};
  GaussianMessage m;
  m.sender = static_cast<int>(r.u32());
  const std::uint32_t n = r.u32();
  m.mu.resize(n);
  m.sigma.resize(n);
  for (double& v : m.mu) v = r.f64();
  for (double& v : m.sigma) v = r.f64();
  return m;
}

std::vector<CommGroup> comm_groups(const std::vector<std::vector<int>>& access_map) {
  const int m = static_cast<int>(access_map.size());
  require(m >= 1, "access map is empty");
  std::vector<CommGroup> groups(m);
  for (int i = 0; i < m; ++i) {
    groups[i].owner = i;
    for (int j = 0; j < m; ++j) {
      bool shares = false;
      for (int qi : access_map[i]) {
        for (int qj : access_map[j]) {
          if (qi == qj) {
            shares = true;
            break;
          }
        }
        if (shares) break;
      }
      if (shares) groups[i].candidates.push_back(j);
    }
  }
  return groups;
}

ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, Stream::ParamInit));
  ParamStore store;
  const int in = cfg.input_dim();
  const int h = cfg.encoder_hidden;
  const int l = cfg.latent_dim;
  const int a = cfg.attention_dim;
  const int hh = cfg.head_hidden;
  const int d = cfg.access;
  const int out = cfg.access * (cfg.buffer_cap + 1);

  // Creation order is fixed: it determines how the init RNG stream is
  // consumed, so reordering would silently change every initial weight.
  store.create("enc/W1", xavier_uniform(in, h, rng));
  store.create("enc/b1", Tensor(1, h, 0.0));
  store.create("enc/W2", xavier_uniform(h, h, rng));
  store.create("enc/b2", Tensor(1, h, 0.0));
  store.create("enc/Wmu", xavier_uniform(h, l, rng));
  store.create("enc/bmu", Tensor(1, l, 0.0));
  store.create("enc/Wsig", xavier_uniform(h, l, rng));
  store.create("enc/bsig", Tensor(1, l, 0.0));

  store.create("att/W", xavier_uniform(2 * l, a, rng));
  store.create("att/b", Tensor(1, a, 0.0));
  store.create("att/ug", xavier_uniform(a, 1, rng));

  store.create("act/W1", xavier_uniform(l, hh, rng));
  store.create("act/b1", Tensor(1, hh, 0.0));
  // Small output layer keeps the initial policy near-uniform so exploration
  // starts symmetric across queues.
  store.create("act/W2", scaled_normal(hh, d, 0.01, rng));
  store.create("act/b2", Tensor(1, d, 0.0));
  store.create("act/logstd", Tensor(1, d, 0.0));

  store.create("val/W1", xavier_uniform(l, hh, rng));
  store.create("val/b1", Tensor(1, hh, 0.0));
  store.create("val/W2", xavier_uniform(hh, 1, rng));
  store.create("val/b2", Tensor(1, 1, 0.0));

  store.create("dec/W1", xavier_uniform(l, hh, rng));
  store.create("dec/b1", Tensor(1, hh, 0.0));
  store.create("dec/W2", xavier_uniform(hh, out, rng));
  store.create("dec/b2", Tensor(1, out, 0.0));
  return store;
}

std::map<std::string, Tensor> model_meta_arrays(const ModelConfig& cfg) {
  std::map<std::string, Tensor> out;
  out.emplace("meta/access", Tensor::scalar(cfg.access));
  out.emplace("meta/buffer_cap", Tensor::scalar(cfg.buffer_cap));
  out.emplace("meta/latent_dim", Tensor::scalar(cfg.latent_dim));
  out.emplace("meta/encoder_hidden", Tensor::scalar(cfg.encoder_hidden));
  out.emplace("meta/head_hidden", Tensor::scalar(cfg.head_hidden));
  out.emplace("meta/attention_dim", Tensor::scalar(cfg.attention_dim));
  out.emplace("meta/gamma", Tensor::scalar(cfg.gamma));
  return out;
}

ModelConfig model_config_from_arrays(const std::map<std::string, Tensor>& arrays) {
  auto scalar = [&arrays](const std::string& key) {
    auto it = arrays.find(key);
    if (it == arrays.end()) throw CompatError("checkpoint is missing " + key);
    return it->second.data.at(0);
  };
  ModelConfig cfg;
  cfg.access = static_cast<int>(scalar("meta/access"));
  cfg.buffer_cap = static_cast<int>(scalar("meta/buffer_cap"));
  cfg.latent_dim = static_cast<int>(scalar("meta/latent_dim"));
  cfg.encoder_hidden = static_cast<int>(scalar("meta/encoder_hidden"));
  cfg.head_hidden = static_cast<int>(scalar("meta/head_hidden"));
  cfg.attention_dim = static_cast<int>(scalar("meta/attention_dim"));
  cfg.gamma = scalar("meta/gamma");
  cfg.validate();
  return cfg;
}

Tensor one_hot_obs(const std::vector<int>& lengths, int buffer_cap) {
  return one_hot_obs_batch({lengths}, buffer_cap);
}

Tensor one_hot_obs_batch(const std::vector<std::vector<int>>& lengths_rows, int buffer_cap) {
  require(!lengths_rows.empty(), "no observations to encode");
  const int d = static_cast<int>(lengths_rows[0].size());
  require(d >= 1, "empty observation row");
  const int span = buffer_cap + 1;
  Tensor out(static_cast<int>(lengths_rows.size()), d * span, 0.0);
  for (std::size_t r = 0; r < lengths_rows.size(); ++r) {
    require(static_cast<int>(lengths_rows[r].size()) == d, "ragged observation rows");
    for (int q = 0; q < d; ++q) {
      const int len = lengths_rows[r][q];
      require(0 <= len && len <= buffer_cap,
              "observed length " + std::to_string(len) + " outside [0," +
                  std::to_string(buffer_cap) + "]");
      out.at(static_cast<int>(r), q * span + len) = 1.0;
    }
  }
  return out;
}

GaussianRefs encode_graph(Tape& tape, ParamStore& store, const ModelConfig& cfg, ValueRef obs) {
  require(tape.val(obs).cols == cfg.input_dim(),
          "encoder input is " + shape_str(tape.val(obs)) + ", want cols " +
              std::to_string(cfg.input_dim()));
  ValueRef h1 = tape.tanh(tape.add_row(tape.matmul(obs, tape.param(store, "enc/W1")),
                                       tape.param(store, "enc/b1")));
  ValueRef h2 = tape.tanh(tape.add_row(tape.matmul(h1, tape.param(store, "enc/W2")),
                                       tape.param(store, "enc/b2")));
  ValueRef mu = tape.add_row(tape.matmul(h2, tape.param(store, "enc/Wmu")),
                             tape.param(store, "enc/bmu"));
  ValueRef raw = tape.add_row(tape.matmul(h2, tape.param(store, "enc/Wsig")),
                              tape.param(store, "enc/bsig"));
  ValueRef var = tape.clamp(tape.exp(raw), kVarLo, kVarHi);
  return {mu, var};
}

ValueRef attention_embed_graph(Tape& tape, ParamStore& store, ValueRef mu, ValueRef var) {
  ValueRef x = tape.concat_cols({mu, var});
  return tape.tanh(tape.add_row(tape.matmul(x, tape.param(store, "att/W")),
                                tape.param(store, "att/b")));
}

ValueRef attention_score_graph(Tape& tape, ParamStore& store, ValueRef u) {
  return tape.matmul(u, tape.param(store, "att/ug"));
}

GaussianRefs weighted_poe_graph(Tape& tape, ValueRef alphas, const std::vector<GaussianRefs>& experts,
                                bool include_prior) {
  require(!experts.empty(), "weighted fusion needs at least one expert");
  const int n = tape.val(experts[0].mu).rows;
  const int l = tape.val(experts[0].mu).cols;
  require(tape.val(alphas).rows == n &&
              tape.val(alphas).cols == static_cast<int>(experts.size()),
          "alphas are " + shape_str(tape.val(alphas)) + ", want [" + std::to_string(n) + "," +
              std::to_string(experts.size()) + "]");

  ValueRef precision;
  ValueRef numerator;
  bool have = false;
  if (include_prior) {
    precision = tape.constant(Tensor(n, l, 1.0));
    have = true;
  }
  for (std::size_t j = 0; j < experts.size(); ++j) {
    ValueRef w = tape.slice_cols(alphas, static_cast<int>(j), static_cast<int>(j) + 1);
    ValueRef t = tape.recip(experts[j].var);
    ValueRef wt = tape.mul_col(t, w);
    ValueRef wtm = tape.mul_col(tape.mul(t, experts[j].mu), w);
    if (have) {
      precision = tape.add(precision, wt);
    } else {
      precision = wt;
      have = true;
    }
    if (j == 0) {
      numerator = wtm;
    } else {
      numerator = tape.add(numerator, wtm);
    }
  }
  ValueRef fused_var = tape.recip(precision);
  ValueRef fused_mu = tape.mul(numerator, fused_var);
  return {fused_mu, fused_var};
}

ValueRef action_mean_graph(Tape& tape, ParamStore& store, ValueRef z) {
  ValueRef h = tape.tanh(tape.add_row(tape.matmul(z, tape.param(store, "act/W1")),
                                      tape.param(store, "act/b1")));
  return tape.add_row(tape.matmul(h, tape.param(store, "act/W2")), tape.param(store, "act/b2"));
}

ValueRef value_graph(Tape& tape, ParamStore& store, ValueRef z) {
  ValueRef h = tape.tanh(tape.add_row(tape.matmul(z, tape.param(store, "val/W1")),
                                      tape.param(store, "val/b1")));
  return tape.add_row(tape.matmul(h, tape.param(store, "val/W2")), tape.param(store, "val/b2"));
}

ValueRef decoder_graph(Tape& tape, ParamStore& store, ValueRef z) {
  ValueRef h = tape.tanh(tape.add_row(tape.matmul(z, tape.param(store, "dec/W1")),
                                      tape.param(store, "dec/b1")));
  return tape.add_row(tape.matmul(h, tape.param(store, "dec/W2")), tape.param(store, "dec/b2"));
}

ValueRef gaussian_log_prob_graph(Tape& tape, ValueRef raw, ValueRef mean, ValueRef logstd_row) {
  const Tensor& traw = tape.val(raw);
  const int n = traw.rows;
  const int d = traw.cols;
  ValueRef logstd = tape.add_row(tape.constant(Tensor(n, d, 0.0)), logstd_row);
  ValueRef diff = tape.sub(raw, mean);
  ValueRef inv_two_var = tape.recip(tape.affine(tape.exp(tape.affine(logstd, 2.0, 0.0)), 2.0, 0.0));
  ValueRef terms = tape.add(tape.mul(tape.square(diff), inv_two_var), logstd);
  return tape.affine(tape.row_sum(terms), -1.0, -kHalfLog2Pi * d);
}

GaussianMessage encode(ParamStore& store, const ModelConfig& cfg,
                       const std::vector<int>& observed_lengths, int sender) {
  require(static_cast<int>(observed_lengths.size()) == cfg.access,
          "observation has " + std::to_string(observed_lengths.size()) + " entries, want " +
              std::to_string(cfg.access));
  Tape tape(false);
  ValueRef obs = tape.constant(one_hot_obs(observed_lengths, cfg.buffer_cap));
  GaussianRefs enc = encode_graph(tape, store, cfg, obs);
  GaussianMessage m;
  m.sender = sender;
  m.mu = tape.val(enc.mu).data;
  m.sigma = tape.val(enc.var).data;
  return m;
}

std::vector<double> attention_weights(ParamStore& store, const ModelConfig& cfg,
                                      const std::vector<GaussianMessage>& messages) {
  require(!messages.empty(), "attention needs at least one message");
  const int l = cfg.latent_dim;
  Tensor mu(static_cast<int>(messages.size()), l, 0.0);
  Tensor var(static_cast<int>(messages.size()), l, 0.0);
  for (std::size_t i = 0; i < messages.size(); ++i) {
    require(static_cast<int>(messages[i].mu.size()) == l &&
                static_cast<int>(messages[i].sigma.size()) == l,
            "message " + std::to_string(i) + " has wrong latent size");
    for (int c = 0; c < l; ++c) {
      require(messages[i].sigma[c] > 0.0, "message sigma must be positive");
      mu.at(static_cast<int>(i), c) = messages[i].mu[c];
      var.at(static_cast<int>(i), c) = messages[i].sigma[c];
    }
  }
  Tape tape(false);
  ValueRef u = attention_embed_graph(tape, store, tape.constant(std::move(mu)),
                                     tape.constant(std::move(var)));
  ValueRef scores = attention_score_graph(tape, store, u);
  return softmax_plain(tape.val(scores).data);
}

std::vector<bool> select_messages(const std::vector<double>& alphas, double gamma, int owner_pos) {
  require(gamma >= 0.0 && gamma <= 1.0, "gamma must be in [0, 1]");
  require(owner_pos >= 0 && owner_pos < static_cast<int>(alphas.size()),
          "owner position out of range");
  std::vector<bool> mask(alphas.size());
  for (std::size_t i = 0; i < alphas.size(); ++i) mask[i] = alphas[i] > gamma;
  mask[owner_pos] = true;
  return mask;
}

FusedBelief weighted_poe(const std::vector<GaussianMessage>& messages,
                         const std::vector<double>& alphas, bool include_prior) {
  require(!messages.empty(), "fusion needs at least one expert");
  require(messages.size() == alphas.size(), "one weight per expert required");
  const std::size_t l = messages[0].mu.size();
  for (std::size_t j = 0; j < messages.size(); ++j) {
    require(messages[j].mu.size() == l && messages[j].sigma.size() == l,
            "expert " + std::to_string(j) + " has inconsistent latent size");
    require(alphas[j] >= 0.0, "expert weights must be nonnegative");
    for (double s : messages[j].sigma) require(s > 0.0, "expert sigma must be positive");
  }

  FusedBelief out;
  out.mu.resize(l);
  out.sigma.resize(l);
  out.alphas = alphas;
  out.selected.resize(messages.size());
  for (std::size_t j = 0; j < messages.size(); ++j) out.selected[j] = alphas[j] > 0.0;

  for (std::size_t c = 0; c < l; ++c) {
    double precision = include_prior ? 1.0 : 0.0;
    double numerator = 0.0;
    for (std::size_t j = 0; j < messages.size(); ++j) {
      const double t = 1.0 / messages[j].sigma[c];
      precision += alphas[j] * t;
      numerator += alphas[j] * t * messages[j].mu[c];
    }
    require(precision > 0.0, "total precision is zero: no prior and no positive weight");
    out.sigma[c] = 1.0 / precision;
    out.mu[c] = numerator * out.sigma[c];
  }
  return out;
}

ActionSample act(ParamStore& store, const ModelConfig& cfg, const std::vector<double>& z,
                 Rng& rng) {
  require(static_cast<int>(z.size()) == cfg.latent_dim, "latent vector has wrong size");
  Tape tape(false);
  ValueRef mean = action_mean_graph(tape, store, tape.constant(Tensor::row(z)));
  const Tensor& logstd = store.value("act/logstd");

  ActionSample s;
  s.mean = tape.val(mean).data;
  s.raw_logits.resize(cfg.access);
  double lp = 0.0;
  for (int i = 0; i < cfg.access; ++i) {
    const double sd = std::exp(logstd.data[i]);
    s.raw_logits[i] = s.mean[i] + sd * rng.normal();
    const double diff = s.raw_logits[i] - s.mean[i];
    const double inv_two_var = 1.0 / (2.0 * std::exp(2.0 * logstd.data[i]));
    lp += diff * diff * inv_two_var + logstd.data[i];
  }
  s.log_prob = -lp - kHalfLog2Pi * cfg.access;
  s.fractions = softmax_plain(s.raw_logits);
  return s;
}

double value(ParamStore& store, const ModelConfig& cfg, const std::vector<double>& z) {
  require(static_cast<int>(z.size()) == cfg.latent_dim, "latent vector has wrong size");
  Tape tape(false);
  return tape.val(value_graph(tape, store, tape.constant(Tensor::row(z)))).data[0];
}

Tensor decode(ParamStore& store, const ModelConfig& cfg, const std::vector<double>& z) {
  require(static_cast<int>(z.size()) == cfg.latent_dim, "latent vector has wrong size");
  Tape tape(false);
  const Tensor flat = tape.val(decoder_graph(tape, store, tape.constant(Tensor::row(z))));
  Tensor out(cfg.access, cfg.buffer_cap + 1, 0.0);
  out.data = flat.data;
  return out;
}

StepDecision decide_step(ParamStore& store, const ModelConfig& cfg,
                         const std::vector<CommGroup>& groups,
                         const std::vector<std::vector<int>>& observed_lengths, CommMode mode,
                         double gamma, Rng& rng, bool need_value) {
  const int m = static_cast<int>(groups.size());
  require(m >= 1, "no agents to step");
  require(static_cast<int>(observed_lengths.size()) == m, "one observation per agent required");
  require(gamma >= 0.0 && gamma <= 1.0, "gamma must be in [0, 1]");
  const int l = cfg.latent_dim;

  Tape tape(false);
  ValueRef obs = tape.constant(one_hot_obs_batch(observed_lengths, cfg.buffer_cap));
  GaussianRefs enc = encode_graph(tape, store, cfg, obs);
  ValueRef u = attention_embed_graph(tape, store, enc.mu, enc.var);
  const std::vector<double> scores = tape.val(attention_score_graph(tape, store, u)).data;
  const Tensor enc_mu = tape.val(enc.mu);
  const Tensor enc_var = tape.val(enc.var);

  StepDecision out;
  out.messages.resize(m);
  out.fused_mu.assign(m, std::vector<double>(l));
  out.fused_var.assign(m, std::vector<double>(l));
  out.z.assign(m, std::vector<double>(l));
  out.eps_z.assign(m, std::vector<double>(l));
  out.alphas.resize(m);
  out.selected.resize(m);

  for (int i = 0; i < m; ++i) {
    out.messages[i].sender = i;
    out.messages[i].mu.assign(enc_mu.data.begin() + static_cast<std::size_t>(i) * l,
                              enc_mu.data.begin() + static_cast<std::size_t>(i + 1) * l);
    out.messages[i].sigma.assign(enc_var.data.begin() + static_cast<std::size_t>(i) * l,
                                 enc_var.data.begin() + static_cast<std::size_t>(i + 1) * l);
  }

  for (int i = 0; i < m; ++i) {
    const CommGroup& g = groups[i];
    require(g.owner == i, "groups must be listed in owner order");
    const int k = static_cast<int>(g.candidates.size());
    require(k >= 1, "empty communication group");

    // The own message and the standard-normal prior always enter the product
    // at weight 1; only the peers compete through the attention softmax, and
    // only they are subject to selection.
    int owner_pos = -1;
    for (int j = 0; j < k; ++j) {
      require(0 <= g.candidates[j] && g.candidates[j] < m, "candidate id out of range");
      if (g.candidates[j] == i) owner_pos = j;
    }
    require(owner_pos >= 0, "owner missing from its own communication group");

    std::vector<double> s;
    s.reserve(k - 1);
    for (int j = 0; j < k; ++j) {
      if (j != owner_pos) s.push_back(scores[g.candidates[j]]);
    }
    std::vector<double> alpha(k, 1.0);
    if (!s.empty()) {
      const std::vector<double> peer_alpha = softmax_plain(s);
      for (int j = 0, p = 0; j < k; ++j) {
        if (j != owner_pos) alpha[j] = peer_alpha[p++];
      }
    }

    std::vector<bool> selected(k, true);
    std::vector<double> w = alpha;
    switch (mode) {
      case CommMode::SoftTraining:
      case CommMode::Full:
        break;
      case CommMode::Threshold:
        for (int j = 0; j < k; ++j) {
          selected[j] = j == owner_pos || alpha[j] > gamma;
          if (!selected[j]) w[j] = 0.0;
        }
        break;
      case CommMode::None:
        for (int j = 0; j < k; ++j) {
          selected[j] = j == owner_pos;
          w[j] = selected[j] ? 1.0 : 0.0;
        }
        break;
    }

    // Mirrors weighted_poe_graph term by term (prior first, then the own
    // message, then the peers in listed order) so training-time
    // recomputation reproduces these numbers exactly.
    for (int c = 0; c < l; ++c) {
      double precision = 1.0;
      const double own_t = 1.0 / enc_var.at(i, c);
      precision += own_t * w[owner_pos];
      double numerator = own_t * enc_mu.at(i, c) * w[owner_pos];
      for (int j = 0; j < k; ++j) {
        if (j == owner_pos) continue;
        const double var = enc_var.at(g.candidates[j], c);
        const double t = 1.0 / var;
        precision += t * w[j];
        numerator += t * enc_mu.at(g.candidates[j], c) * w[j];
      }
      const double fvar = 1.0 / precision;
      out.fused_var[i][c] = fvar;
      out.fused_mu[i][c] = numerator * fvar;
    }

    for (int c = 0; c < l; ++c) {
      const double e = rng.normal();
      out.eps_z[i][c] = e;
      out.z[i][c] = out.fused_mu[i][c] + std::sqrt(out.fused_var[i][c]) * e;
    }

    out.alphas[i] = std::move(alpha);
    out.selected[i] = std::move(selected);
  }

  // Heads run batched over all agents' latents.
  Tensor zmat(m, l, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int c = 0; c < l; ++c) zmat.at(i, c) = out.z[i][c];
  }
  ValueRef zref = tape.constant(std::move(zmat));
  const Tensor mean = tape.val(action_mean_graph(tape, store, zref));
  const Tensor* values = nullptr;
  Tensor values_store;
  if (need_value) {
    values_store = tape.val(value_graph(tape, store, zref));
    values = &values_store;
  }
  const Tensor& logstd = store.value("act/logstd");

  out.actions.resize(m);
  out.raw_logits.assign(m, std::vector<double>(cfg.access));
  out.action_mean.assign(m, std::vector<double>(cfg.access));
  out.log_prob.assign(m, 0.0);
  if (need_value) out.value.assign(m, 0.0);

  for (int i = 0; i < m; ++i) {
    // The reciprocal form matches gaussian_log_prob_graph operation for
    // operation, like the fusion loop above.
    double lp = 0.0;
    for (int c = 0; c < cfg.access; ++c) {
      out.action_mean[i][c] = mean.at(i, c);
      const double sd = std::exp(logstd.data[c]);
      out.raw_logits[i][c] = mean.at(i, c) + sd * rng.normal();
      const double diff = out.raw_logits[i][c] - mean.at(i, c);
      const double inv_two_var = 1.0 / (2.0 * std::exp(2.0 * logstd.data[c]));
      lp += diff * diff * inv_two_var + logstd.data[c];
    }
    out.log_prob[i] = -lp - kHalfLog2Pi * cfg.access;
    out.actions[i] = AllocationAction::from_logits(i, out.raw_logits[i]);
    if (need_value) out.value[i] = values->at(i, 0);
  }
  return out;
}

}  // namespace atvc
