#pragma once

#include <string>
#include <vector>

#include "ccs/data.hpp"
#include "ccs/model.hpp"

namespace ccs {

enum class Lens { tip, logit_lens };
const char* to_string(Lens l);
Lens lens_from_string(const std::string& s);

// Token Identity Patchscope. The identity prompt is "t t \n" repeated
// `groups` times followed by one query token; a hidden state patched into
// RESID_POST at the query position decodes to whatever token identity it
// carries. The prompt prefix is fixed per model, so its K/V are cached once.
struct TipConfig {
    int groups = 3;
    std::vector<TokenId> fillers;  // empty = deterministic spread over the vocabulary
    TokenId query_token = -1;      // -1 = deterministic default
};

class TipReader {
public:
    TipReader(const TinyModel& model, TipConfig cfg = {});

    // Patch h into RESID_POST at `layer` of the identity prompt's final
    // position; returns the next-token distribution.
    std::vector<double> readout(const std::vector<float>& h, int layer) const;

    const std::vector<TokenId>& prompt_tokens() const { return prompt_; }

private:
    const TinyModel* model_;
    TipConfig cfg_;
    std::vector<TokenId> prompt_;
    TailCache cache_;
};

// Final layer norm + unembedding + softmax of a residual vector.
std::vector<double> logit_lens(const TinyModel& model, const std::vector<float>& h);

// ---------------------------------------------------------------------------
// Interchange interventions
// ---------------------------------------------------------------------------

// Last-token activations of the source run at one site, all layers, plus the
// source run's output; recorded once and reused across layer subsets.
struct SourceRecording {
    Site site = Site::mha_out;
    std::vector<std::vector<float>> vectors;  // per layer
    std::vector<float> source_logits;
};

struct InterchangeResult {
    std::vector<float> patched_logits;  // final position of the patched target run
    Mat<float> target_resid;            // n_layers x d_model, RESID_POST at the last token
    std::vector<float> source_logits;
};

SourceRecording record_source(const TinyModel& model, const PatchTuple& tuple, Site site);

InterchangeResult interchange_recorded(const TinyModel& model, const PatchTuple& tuple,
                                       const SourceRecording& rec, const std::vector<int>& layers);

InterchangeResult interchange(const TinyModel& model, const PatchTuple& tuple,
                              const std::vector<int>& layers, Site site = Site::mha_out);

// Replace RESID_POST at one layer of the target run with the source run's
// value; downstream layers run on the substituted state.
std::vector<float> residual_patch(const TinyModel& model, const PatchTuple& tuple, int layer);

// ---------------------------------------------------------------------------
// Per-layer answer-probability curves
// ---------------------------------------------------------------------------

struct LayerCurve {
    std::string token;
    Lens lens = Lens::tip;
    std::vector<double> probability;  // one entry per layer
};

std::vector<LayerCurve> layer_curve(const TinyModel& model, const PatchTuple& tuple,
                                    const std::vector<int>& patched_layers,
                                    const std::vector<std::string>& answer_tokens, Lens lens,
                                    Site site = Site::mha_out, const TipReader* tip = nullptr);

// One interchange sweep over a batch of tuples with a fixed layer set:
// dataset-mean lens curves of the source/target answers plus mean output
// softmax probabilities. The unit the layer search consumes.
struct SweepEval {
    std::vector<double> src_curve;  // per layer, mean lens probability of the source answer
    std::vector<double> tgt_curve;
    double out_src = 0.0;  // mean output probability of the source answer
    double out_tgt = 0.0;
};

struct PreparedTuple {
    PatchTuple tuple;
    SourceRecording recording;
    std::vector<TokenId> target_tokens;
    TokenId src_answer = 0;
    TokenId tgt_answer = 0;
};

std::vector<PreparedTuple> prepare_tuples(const TinyModel& model,
                                          const std::vector<PatchTuple>& tuples, Site site);

SweepEval evaluate_sweep(const TinyModel& model, const std::vector<PreparedTuple>& prepared,
                         const std::vector<int>& layers, Lens lens, const TipReader* tip,
                         bool use_median = false);

}  // namespace ccs
