#include "mfas/fusion.hpp"

#include <cmath>

namespace mfas {

namespace {

const char* kOpNames[kNumOps] = {"Zero",      "Sum",        "Attention", "Attention_r",
                                 "ConcatFC",  "ConcatFC_r", "ISM",       "ISM_r"};
const char* kLevelNames[kNumLevels] = {"raw", "deep", "target"};

void require_same_shape(Tape& t, Var a, Var b, const char* op) {
  if (!t.val(a).same_shape(t.val(b)))
    throw InputError(std::string(op) + ": operand shape mismatch, " + t.val(a).shape_str() +
                     " vs " + t.val(b).shape_str());
}

}  // namespace

const char* op_name(OperationId id) { return kOpNames[static_cast<int>(id)]; }

OperationId op_from_name(const std::string& name) {
  for (int i = 0; i < kNumOps; ++i)
    if (name == kOpNames[i]) return static_cast<OperationId>(i);
  throw ConfigError("unknown fusion operation: " + name);
}

const char* level_name(Level level) { return kLevelNames[static_cast<int>(level)]; }

Level level_from_name(const std::string& name) {
  for (int i = 0; i < kNumLevels; ++i)
    if (name == kLevelNames[i]) return static_cast<Level>(i);
  throw ConfigError("unknown fusion level: " + name);
}

Var tap_for_level(const LayerTapBundle& bundle, Level level) {
  switch (level) {
    case Level::Raw: return bundle.raw();
    case Level::Deep: return bundle.deep();
    case Level::Target: return bundle.target();
  }
  throw ConfigError("invalid level");
}

std::pair<Level, Var> choose_level(const LayerTapBundle& bundle, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, kNumLevels - 1);
  Level level = static_cast<Level>(pick(rng));
  return {level, tap_for_level(bundle, level)};
}

Tensor AlphaTable::softmax_rows() const {
  Tensor out = alpha.value;
  for (int64_t r = 0; r < kNumLevels; ++r) {
    double* row = out.data.data() + r * kNumOps;
    double mx = row[0];
    for (int i = 1; i < kNumOps; ++i) mx = std::max(mx, row[i]);
    double z = 0;
    for (int i = 0; i < kNumOps; ++i) z += (row[i] = std::exp(row[i] - mx));
    for (int i = 0; i < kNumOps; ++i) row[i] /= z;
  }
  return out;
}

nlohmann::json FusionStrategy::to_json() const {
  nlohmann::json ops;
  for (int i = 0; i < kNumLevels; ++i)
    ops[kLevelNames[i]] = op_name(op_per_level[static_cast<size_t>(i)]);
  return {{"ops", ops}, {"selected_level", level_name(selected_level)}};
}

FusionStrategy FusionStrategy::from_json(const nlohmann::json& j) {
  FusionStrategy s;
  for (int i = 0; i < kNumLevels; ++i)
    s.op_per_level[static_cast<size_t>(i)] =
        op_from_name(j.at("ops").at(kLevelNames[i]).get<std::string>());
  s.selected_level = level_from_name(j.at("selected_level").get<std::string>());
  return s;
}

FusionStrategy derive_strategy(const AlphaTable& alpha,
                               const std::map<Level, LevelScore>& validation_scores) {
  for (int i = 0; i < kNumLevels; ++i)
    if (!validation_scores.count(static_cast<Level>(i)))
      throw StateError(std::string("derive_strategy: missing validation score for level ") +
                       kLevelNames[i]);
  FusionStrategy s;
  for (int r = 0; r < kNumLevels; ++r) {
    const double* row = alpha.alpha.value.data.data() + r * kNumOps;
    int best = 0;
    for (int i = 1; i < kNumOps; ++i)
      if (row[i] > row[best]) best = i;  // ties keep the lowest index
    s.op_per_level[static_cast<size_t>(r)] = static_cast<OperationId>(best);
  }
  Level best_level = Level::Raw;
  for (int i = 1; i < kNumLevels; ++i) {
    const LevelScore& cand = validation_scores.at(static_cast<Level>(i));
    const LevelScore& cur = validation_scores.at(best_level);
    if (cand.ua > cur.ua || (cand.ua == cur.ua && cand.wa > cur.wa))
      best_level = static_cast<Level>(i);
  }
  s.selected_level = best_level;
  return s;
}

Var op_zero(Tape& t, Var a, Var b) {
  require_same_shape(t, a, b, "Zero");
  return t.leaf(Tensor::zeros(t.val(a).shape));
}

Var op_sum(Tape& t, Var a, Var b) {
  require_same_shape(t, a, b, "Sum");
  return t.add(a, b);
}

Var op_attention(Tape& t, Var a, Var b, Param& wq, Param& wk, int heads) {
  require_same_shape(t, a, b, "Attention");
  Var q = t.matmul(a, t.param(wq));
  Var k = t.matmul(b, t.param(wk));
  return attend(t, q, k, b, heads);
}

Var op_concat_fc(Tape& t, Var a, Var b, Linear& fc) {
  require_same_shape(t, a, b, "ConcatFC");
  return t.relu(fc.forward(t, t.concat_last(a, b)));
}

Var op_ism(Tape& t, Var a, Var b, Linear& lin_b, Linear& lin_a) {
  require_same_shape(t, a, b, "ISM");
  Var h = lin_b.forward(t, b);
  Var gate = t.tanh_(t.mul(lin_a.forward(t, a), h));
  return t.add(a, t.mul(gate, h));
}

FusionCell::FusionCell(int64_t dim, FusionCellConfig cfg, uint64_t seed) : cfg_(cfg) {
  if (cfg_.heads < 1 || dim % cfg_.heads != 0)
    throw ConfigError("fusion cell: dim must divide into heads");
  std::mt19937_64 rng(seed);
  double sd = std::sqrt(1.0 / static_cast<double>(dim));
  for (int i = 0; i < kNumLevels; ++i) {
    std::string base = std::string("fusion.") + kLevelNames[i] + ".";
    Slot& s = slots_[static_cast<size_t>(i)];
    s.att_q = Param(base + "att_q", Tensor::randn({dim, dim}, sd, rng));
    s.att_k = Param(base + "att_k", Tensor::randn({dim, dim}, sd, rng));
    s.attr_q = Param(base + "attr_q", Tensor::randn({dim, dim}, sd, rng));
    s.attr_k = Param(base + "attr_k", Tensor::randn({dim, dim}, sd, rng));
    s.cat_fc = Linear(base + "cat_fc", 2 * dim, dim, rng);
    s.catr_fc = Linear(base + "catr_fc", 2 * dim, dim, rng);
    s.ism_b = Linear(base + "ism_b", dim, dim, rng);
    s.ism_a = Linear(base + "ism_a", dim, dim, rng);
    // gate linears start at zero so ISM opens as the identity on its first arg
    s.ism_a.w.value = Tensor::zeros({dim, dim});
    s.ismr_b = Linear(base + "ismr_b", dim, dim, rng);
    s.ismr_a = Linear(base + "ismr_a", dim, dim, rng);
    s.ismr_a.w.value = Tensor::zeros({dim, dim});
  }
}

Var FusionCell::apply_op(Tape& t, Level level, OperationId op, Var a, Var b) {
  Slot& s = slots_[static_cast<size_t>(level)];
  switch (op) {
    case OperationId::Zero: return op_zero(t, a, b);
    case OperationId::Sum: return op_sum(t, a, b);
    case OperationId::Attention: return op_attention(t, a, b, s.att_q, s.att_k, cfg_.heads);
    case OperationId::AttentionR: return op_attention(t, b, a, s.attr_q, s.attr_k, cfg_.heads);
    case OperationId::ConcatFC: return op_concat_fc(t, a, b, s.cat_fc);
    case OperationId::ConcatFCR: return op_concat_fc(t, b, a, s.catr_fc);
    case OperationId::Ism: return op_ism(t, a, b, s.ism_b, s.ism_a);
    case OperationId::IsmR: return op_ism(t, b, a, s.ismr_b, s.ismr_a);
  }
  throw ConfigError("invalid fusion operation");
}

Var FusionCell::reverse(Tape& t, Level level, OperationId base_op, Var a, Var b) {
  switch (base_op) {
    case OperationId::Attention: return apply_op(t, level, OperationId::AttentionR, a, b);
    case OperationId::ConcatFC: return apply_op(t, level, OperationId::ConcatFCR, a, b);
    case OperationId::Ism: return apply_op(t, level, OperationId::IsmR, a, b);
    default:
      throw ConfigError(std::string("reverse undefined for symmetric operation ") +
                        op_name(base_op));
  }
}

Var FusionCell::forward(Tape& t, Level level, Var alpha_row, Var a, Var b) {
  if (t.val(alpha_row).numel() != kNumOps)
    throw InputError("fusion cell: alpha row must have 8 entries");
  Var w = t.softmax_last(alpha_row);
  Var out;
  for (int o = 0; o < kNumOps; ++o) {
    Var term = t.mul_scalar(apply_op(t, level, static_cast<OperationId>(o), a, b),
                            t.index_scalar(w, o));
    out = (o == 0) ? term : t.add(out, term);
  }
  return out;
}

ParamRefs FusionCell::params() {
  ParamRefs out;
  for (Slot& s : slots_) {
    out.push_back(&s.att_q);
    out.push_back(&s.att_k);
    out.push_back(&s.attr_q);
    out.push_back(&s.attr_k);
    s.cat_fc.collect(out);
    s.catr_fc.collect(out);
    s.ism_b.collect(out);
    s.ism_a.collect(out);
    s.ismr_b.collect(out);
    s.ismr_a.collect(out);
  }
  return out;
}

nlohmann::json alpha_snapshot_json(const AlphaTable& alpha) {
  nlohmann::json rows = nlohmann::json::object();
  nlohmann::json soft = nlohmann::json::object();
  Tensor sm = alpha.softmax_rows();
  for (int r = 0; r < kNumLevels; ++r) {
    std::vector<double> lv(kNumOps), sv(kNumOps);
    for (int i = 0; i < kNumOps; ++i) {
      lv[static_cast<size_t>(i)] = alpha.alpha.value[r * kNumOps + i];
      sv[static_cast<size_t>(i)] = sm[r * kNumOps + i];
    }
    rows[kLevelNames[r]] = lv;
    soft[kLevelNames[r]] = sv;
  }
  nlohmann::json ops = nlohmann::json::array();
  for (int i = 0; i < kNumOps; ++i) ops.push_back(kOpNames[i]);
  return {{"operations", ops}, {"alpha", rows}, {"softmax", soft}};
}

}  // namespace mfas
