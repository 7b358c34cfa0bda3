// SPDX-License-Identifier: Apache-2.0
//
// Executable invariant checks. `selfcheck` runs them at small sizes; the
// acceptance binary runs them at full size.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace awaker {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;  // measured quantities, or the first violation
  double seconds = 0.0;
};

/// σ = 0, k = 1, τ log-uniform in [0.1, 10]: G_global == 1 − G_max exactly,
/// selected weight + G_global = 1 within 1e-12, argmax unchanged when x is
/// scaled by a positive factor.
CheckResult check_gate_algebra(int draws, std::uint64_t seed);

/// All B = 0 ⇒ adapted logits equal base logits within `tol`, for both
/// placement maps, with random A and gate weights.
CheckResult check_zero_init_noop(int instances, std::uint64_t seed, double tol = 1e-12);

/// Logits after init_stage2_from_stage1 match the Stage-1 model within `tol`.
CheckResult check_stage2_init_equivalence(int instances, std::uint64_t seed, double tol = 1e-10);

/// Central differences against the tape for every adapter tensor kind and
/// W_G on a one-block model, per seed in [seed0, seed0 + seeds).
CheckResult check_adapter_gradients(int seeds, std::uint64_t seed0, double step = 1e-5, double tol = 1e-4);

/// Pairs that differ only in response tokens produce identical routing logs,
/// in both routing modes and with noisy routing under equal RNG states; every
/// gated layer logs exactly one decision per instance.
CheckResult check_instruction_only_routing(int pairs, std::uint64_t seed);

/// Simplified layers consume exactly the donor gate's output in every block.
CheckResult check_shared_gate_contract(int instances, std::uint64_t seed);

/// Per-stage group checksums: only the trainable set changes, the base never
/// does, and Stage-3 gates keep their bytes.
CheckResult check_freeze_discipline(int steps_per_stage, std::uint64_t seed);

/// save → load → save is byte-identical; a flipped payload byte is reported
/// as a crc32 mismatch.
CheckResult check_checkpoint_roundtrip(std::uint64_t seed);

/// Same seed ⇒ byte-identical JSONL; different seed ⇒ different corpus.
CheckResult check_corpus_determinism(std::uint64_t seed);

/// Targets outside the response span get zero loss gradient.
CheckResult check_loss_mask(std::uint64_t seed);

/// The fast suite behind `awaker selfcheck`.
std::vector<CheckResult> run_selfcheck(std::uint64_t seed);

}  // namespace awaker
