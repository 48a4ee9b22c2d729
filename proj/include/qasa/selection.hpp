#pragma once

// Slot quality, token coverage, novelty, and greedy quality-guided slot
// selection over a token-by-slot attention map A (rows sum to one).
// Slot and token indices are zero-based throughout.

#include "qasa/autodiff.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace qasa {

using AttentionMap = ad::Matrix;  // N tokens x K_max slots

/// Throws std::invalid_argument unless entries are in [0,1] and every row
/// sums to one within `tol`.
void validate_attention(const AttentionMap& a, double tol = 1e-5);

struct QualityScores {
    std::vector<int> winners;          // per token
    std::vector<double> winner_mass;   // per slot
    std::vector<double> total_mass;    // per slot
    std::vector<double> quality;       // per slot, in [0,1]
};

// Small enough that Q stays within 1e-9 of its epsilon-free value for unit
// mass, still far below 1/N for any token count here.
inline constexpr double kSelectionEpsilon = 1e-10;

struct SelectionConfig {
    double tau = 0.5;
    double rho = 0.8;
    double mu = 0.3;
    double epsilon = kSelectionEpsilon;
    // Ablation switches. coverage off selects every slot; quality off scans
    // slots in index order; novelty off is equivalent to mu = 0.
    bool use_coverage = true;
    bool use_quality = true;
    bool use_novelty = true;

    void validate() const;
};

struct SelectionStep {
    int slot = 0;
    double quality = 0.0;
    double novelty = 0.0;
    double coverage_after = 0.0;
    bool accepted = false;

    bool operator==(const SelectionStep&) const = default;
};

struct SelectionMask {
    std::vector<std::uint8_t> mask;  // length K_max, 0/1
    std::vector<int> active;         // ascending slot ids with mask == 1
    std::vector<SelectionStep> trace;
    bool forced_nonempty = false;

    std::size_t size() const { return active.size(); }
    static SelectionMask all(int k_max);
};

struct CoverageResult {
    std::vector<std::uint8_t> covered;  // per token
    double rate = 0.0;
};

/// Per-token argmax; ties go to the lowest slot index.
std::vector<int> compute_winners(const AttentionMap& a);

QualityScores compute_quality(const AttentionMap& a, double epsilon = kSelectionEpsilon);

/// covered_t = [sum_{i in S} A_{t,i} >= tau].
CoverageResult coverage(const AttentionMap& a, const std::vector<int>& slots, double tau);

/// 1 - (mass of slot i on covered tokens) / (total mass of slot i + eps).
double novelty(const AttentionMap& a, int slot, const std::vector<std::uint8_t>& covered,
               double epsilon = kSelectionEpsilon);
double novelty(const AttentionMap& a, int slot, const std::vector<int>& selected, double tau,
               double epsilon = kSelectionEpsilon);

/// Slots by descending quality, ties to the lower index.
std::vector<int> quality_order(const std::vector<double>& quality);

SelectionMask select_slots(const AttentionMap& a, const SelectionConfig& cfg);

std::string format_selection(const SelectionMask& m);

/// Attention matrix file: plain text ("N K" then N rows of K numbers) or
/// raw block ("QATN", uint32 N, uint32 K, N*K float64 little-endian).
AttentionMap read_attention_matrix(const std::string& path);
void write_attention_matrix_text(const std::string& path, const AttentionMap& a);
void write_attention_matrix_raw(const std::string& path, const AttentionMap& a);

}  // namespace qasa
