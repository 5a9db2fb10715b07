#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ccs/tokenizer.hpp"

namespace ccs {

enum class Intent { ctx, pri };
enum class IntentFormat { instruction, weight, none };
enum class DatasetKind { arithmetic, fact, fact_multihop };
enum class PatchSetup { w_p2c, w_c2p, pri, ctx };

const char* to_string(Intent w);
const char* to_string(IntentFormat f);
const char* to_string(DatasetKind k);
const char* to_string(PatchSetup s);
Intent intent_from_string(const std::string& s);
IntentFormat format_from_string(const std::string& s);
DatasetKind kind_from_string(const std::string& s);
PatchSetup setup_from_string(const std::string& s);

// One knowledge-conflict instance. `query` evaluated alone yields
// `prior_answer`; evaluated under the context's claim it yields
// `context_answer`. Both answers are single vocabulary tokens.
struct QueryContextPair {
    std::string id;
    DatasetKind kind = DatasetKind::arithmetic;
    std::string query;
    std::string context;
    std::string prior_answer;
    std::string context_answer;
    // Shape tag (arithmetic context form or fact relation). Items with equal
    // template_id render to equal-length prompts, which patch tuples require.
    std::string template_id;
};

struct PromptExample {
    std::string pair_id;
    std::string prompt;
    Intent intent = Intent::ctx;
    IntentFormat intent_format = IntentFormat::weight;
    std::string expected_answer;
};

struct PatchTuple {
    std::string pair_id;
    PatchSetup setup = PatchSetup::w_p2c;
    std::string source_prompt;
    std::string source_answer;
    std::string target_prompt;
    std::string target_answer;
};

// ---------------------------------------------------------------------------
// Arithmetic task: depth-2 integer expressions "( a op1 b ) op2 c =" with all
// intermediate and final values inside [min_value, max_value].
// ---------------------------------------------------------------------------

enum class ArithOp { add, sub, mul, div, pow };
char op_symbol(ArithOp op);

struct ArithmeticSpec {
    std::vector<ArithOp> operators{ArithOp::add, ArithOp::sub, ArithOp::mul, ArithOp::div,
                                   ArithOp::pow};
    int depth = 2;
    int min_value = 0;
    int max_value = 9;
    // Fraction of contexts that state the full expression's answer directly
    // ("( 5 + 1 ) / 2 = 7"); the rest override a leaf or the subexpression,
    // split evenly.
    double explicit_answer_fraction = 0.25;
    // How many context variants to emit per sampled query (>=2 keeps the CTX
    // patch setup feasible on small test splits).
    int contexts_per_query = 2;
};

struct ArithExpr {
    int a = 0, b = 0, c = 0;
    ArithOp op1 = ArithOp::add, op2 = ArithOp::add;
    int inner = 0;   // a op1 b
    int result = 0;  // inner op2 c
};

// nullopt when the operation is invalid (inexact division, out-of-range
// value, unsupported exponent).
std::optional<int> apply_op(ArithOp op, int lhs, int rhs, const ArithmeticSpec& spec);
std::optional<ArithExpr> make_expr(int a, ArithOp op1, int b, ArithOp op2, int c,
                                   const ArithmeticSpec& spec);
std::vector<ArithExpr> enumerate_expressions(const ArithmeticSpec& spec);
std::string render_query(const ArithExpr& e);     // "( 5 + 1 ) / 2 ="
std::string render_equation(const ArithExpr& e);  // "( 5 + 1 ) / 2 = 3"
std::optional<ArithExpr> parse_rendered_query(const std::string& query, const ArithmeticSpec& spec);

// Evaluates `query` ("( a op b ) op c =") with `context` applied
// ("x = y", "a op b = y", or "( a op b ) op c = y"); empty context gives the
// plain value. nullopt when the context does not bind or the result leaves
// the value range.
std::optional<int> eval_query_under_context(const std::string& query, const std::string& context,
                                            const ArithmeticSpec& spec);

std::vector<QueryContextPair> gen_arithmetic(const ArithmeticSpec& spec, int n, uint64_t seed);

// ---------------------------------------------------------------------------
// Templated fact knowledge base. Countries and their capital cities form a
// bijection so the multihop chain (cf-capital + same-country bridge) stays
// derivable from the KB itself.
// ---------------------------------------------------------------------------

struct FactTriple {
    std::string subject;
    std::string relation;
    std::string object;
};

struct RelationTemplate {
    std::string name;
    std::string statement;  // "The capital of {S} is {O} ."
    std::string query;      // "The capital of {S} is"
};

struct FactKB {
    std::vector<FactTriple> triples;
    std::vector<RelationTemplate> relations;
    std::unordered_map<std::string, std::vector<std::string>> answer_pools;  // by relation

    std::vector<std::string> countries;
    std::vector<std::string> cities;

    const RelationTemplate& relation(const std::string& name) const;
    const std::string& true_object(const std::string& subject, const std::string& relation) const;
    bool has_triple(const std::string& subject, const std::string& relation) const;

    // Deterministic synthetic KB; n_countries == n_cities.
    static FactKB synth(int n_countries, uint64_t seed);
};

std::string render_statement(const RelationTemplate& rel, const std::string& subject,
                             const std::string& object);
std::string render_fact_query(const RelationTemplate& rel, const std::string& subject);

QueryContextPair make_fact_pair(const FactKB& kb, const std::string& subject,
                                const std::string& relation, const std::string& cf_object);
// Context: "<cf_capital> is the capital of <cf_country> . <city> is in the
// same country as <cf_capital> ."  Query asks the city's country.
QueryContextPair make_multihop_pair(const FactKB& kb, const std::string& city,
                                    const std::string& cf_country, const std::string& cf_capital);

std::vector<QueryContextPair> gen_fact_dataset(const FactKB& kb, int n, bool multihop,
                                               uint64_t seed);

// ---------------------------------------------------------------------------
// Prompt formatting and dataset splits.
// ---------------------------------------------------------------------------

std::string intent_line(Intent w, IntentFormat f);  // empty for IntentFormat::none
PromptExample format_prompt(const QueryContextPair& pair, Intent w, IntentFormat f);

struct Split {
    std::vector<QueryContextPair> train;
    std::vector<QueryContextPair> test;
};
// Disjoint by id; arithmetic additionally keeps every item of one query
// string on the same side.
Split split(const std::vector<QueryContextPair>& dataset, double test_fraction, uint64_t seed);

std::vector<PatchTuple> build_patch_dataset(const std::vector<QueryContextPair>& test_set,
                                            PatchSetup setup, IntentFormat format, uint64_t seed,
                                            const ArithmeticSpec& spec = {});

// Checks the setup-specific invariants; throws on violation.
void verify_patch_tuple(const PatchTuple& t);

// ---------------------------------------------------------------------------
// Closed vocabulary and training corpora.
// ---------------------------------------------------------------------------

// Every word any prompt, statement, or answer may contain.
std::vector<std::string> vocabulary_words(const ArithmeticSpec& spec, const FactKB& kb);

struct TrainExample {
    std::vector<TokenId> tokens;
    int loss_from = 0;  // next-token loss applies at positions >= loss_from
};

struct PretrainConfig {
    bool fact_statements = true;
    int statement_repeat = 1;
    bool fact_qa = true;
    bool arithmetic_equations = true;
    bool arithmetic_qa = true;
    // When set, only these expressions are pretrained (the dataset's own
    // queries); empty means the full enumeration of the spec.
    std::vector<ArithExpr> arith_exprs;
    // Token-identity sequences ("x x \n y y \n ...") teach the copy pattern
    // the TIP lens decodes through.
    int identity_sequences = 1200;
    int identity_groups = 4;
    // Each example is shifted by a random separator prefix (loss-masked) so
    // recall works at the positions prompts later place the query at.
    int max_offset = 12;
    // Facts are few next to the enumerated equations; repeat them so both
    // knowledge sources get comparable sampling mass.
    int fact_repeat = 4;
    int arithmetic_repeat = 1;
    // Loss on QA and equation sequences covers only the answer token;
    // statements and identity sequences keep the full next-token loss.
    bool answer_focus = false;
    uint64_t seed = 1;
};

std::vector<TrainExample> build_pretrain_corpus(const ArithmeticSpec& spec, const FactKB& kb,
                                                const Tokenizer& tok, const PretrainConfig& cfg);

// Formats each pair under both intents. Formats beyond one entry alternate
// deterministically per pair.
std::vector<TrainExample> build_finetune_corpus(const std::vector<QueryContextPair>& pairs,
                                                const std::vector<IntentFormat>& formats,
                                                const Tokenizer& tok, bool answer_only_loss,
                                                uint64_t seed);

}  // namespace ccs
