#pragma once

#include <array>
#include <map>

#include <json.hpp>

#include "mfas/encoder.hpp"

namespace mfas {

// Fixed enumeration order; argmax ties resolve to the lowest index.
enum class OperationId {
  Zero = 0,
  Sum,
  Attention,
  AttentionR,
  ConcatFC,
  ConcatFCR,
  Ism,
  IsmR,
};
inline constexpr int kNumOps = 8;

const char* op_name(OperationId id);
OperationId op_from_name(const std::string& name);

enum class Level { Raw = 0, Deep = 1, Target = 2 };
inline constexpr int kNumLevels = 3;

const char* level_name(Level level);
Level level_from_name(const std::string& name);

Var tap_for_level(const LayerTapBundle& bundle, Level level);

// Uniform level sample for the search phase ("Choice cell").
std::pair<Level, Var> choose_level(const LayerTapBundle& bundle, std::mt19937_64& rng);

// Architecture weights: unconstrained logits, one row per level.
struct AlphaTable {
  Param alpha;  // [3, 8], zero-initialized for a uniform mixture start

  AlphaTable() : alpha("alpha", Tensor::zeros({kNumLevels, kNumOps})) {}
  Tensor softmax_rows() const;  // value-only convenience
};

struct FusionStrategy {
  std::array<OperationId, kNumLevels> op_per_level = {OperationId::Zero, OperationId::Zero,
                                                      OperationId::Zero};
  Level selected_level = Level::Target;

  nlohmann::json to_json() const;
  static FusionStrategy from_json(const nlohmann::json& j);
};

struct LevelScore {
  double ua = 0, wa = 0;
};

// Per level: argmax of the alpha row. Selected level: best validation UA,
// WA tiebreak, then lower level index.
FusionStrategy derive_strategy(const AlphaTable& alpha,
                               const std::map<Level, LevelScore>& validation_scores);

// ---- the operation pool (Eqs. 1-6 plus reverse variants) ----
Var op_zero(Tape& t, Var a, Var b);
Var op_sum(Tape& t, Var a, Var b);
// a is the query, b is key and value. Projections are bias-free so a zero
// query yields uniform attention, and values are b itself.
Var op_attention(Tape& t, Var a, Var b, Param& wq, Param& wk, int heads);
Var op_concat_fc(Tape& t, Var a, Var b, Linear& fc);
// H = lin_b(b); a + tanh(lin_a(a) * H) * H, elementwise products
Var op_ism(Tape& t, Var a, Var b, Linear& lin_b, Linear& lin_a);

struct FusionCellConfig {
  int heads = 1;  // single-head: C = D_m
};

// All eight operations with one independent parameter set per
// (level, operation) slot, and the softmax-weighted mixture.
class FusionCell {
 public:
  FusionCell(int64_t dim, FusionCellConfig cfg, uint64_t seed);

  Var apply_op(Tape& t, Level level, OperationId op, Var a, Var b);
  // reverse slot of a base op; Zero and Sum are symmetric and have none
  Var reverse(Tape& t, Level level, OperationId base_op, Var a, Var b);
  // X_o = sum_o softmax(alpha_row)_o * o(a, b)
  Var forward(Tape& t, Level level, Var alpha_row, Var a, Var b);

  ParamRefs params();  // operation weights only; alpha lives in AlphaTable

 private:
  struct Slot {
    Param att_q, att_k;
    Param attr_q, attr_k;
    Linear cat_fc, catr_fc;
    Linear ism_b, ism_a;
    Linear ismr_b, ismr_a;
  };
  FusionCellConfig cfg_;
  std::array<Slot, kNumLevels> slots_;
};

// Alpha snapshot as labeled structured text.
nlohmann::json alpha_snapshot_json(const AlphaTable& alpha);

}  // namespace mfas
