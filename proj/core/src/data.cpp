#include "ccs/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "ccs/common.hpp"
#include "ccs/rng.hpp"

namespace ccs {

// ---------------------------------------------------------------------------
// enum <-> string
// ---------------------------------------------------------------------------

const char* to_string(Intent w) { return w == Intent::ctx ? "ctx" : "pri"; }
const char* to_string(IntentFormat f) {
    switch (f) {
        case IntentFormat::instruction: return "instruction";
        case IntentFormat::weight: return "weight";
        case IntentFormat::none: return "none";
    }
    return "?";
}
const char* to_string(DatasetKind k) {
    switch (k) {
        case DatasetKind::arithmetic: return "arithmetic";
        case DatasetKind::fact: return "fact";
        case DatasetKind::fact_multihop: return "fact-multihop";
    }
    return "?";
}
const char* to_string(PatchSetup s) {
    switch (s) {
        case PatchSetup::w_p2c: return "W_P2C";
        case PatchSetup::w_c2p: return "W_C2P";
        case PatchSetup::pri: return "PRI";
        case PatchSetup::ctx: return "CTX";
    }
    return "?";
}

Intent intent_from_string(const std::string& s) {
    if (s == "ctx") return Intent::ctx;
    if (s == "pri") return Intent::pri;
    fail_schema("unknown intent: " + s);
}
IntentFormat format_from_string(const std::string& s) {
    if (s == "instruction") return IntentFormat::instruction;
    if (s == "weight") return IntentFormat::weight;
    if (s == "none") return IntentFormat::none;
    fail_schema("unknown intent format: " + s);
}
DatasetKind kind_from_string(const std::string& s) {
    if (s == "arithmetic") return DatasetKind::arithmetic;
    if (s == "fact") return DatasetKind::fact;
    if (s == "fact-multihop") return DatasetKind::fact_multihop;
    fail_schema("unknown dataset kind: " + s);
}
PatchSetup setup_from_string(const std::string& s) {
    if (s == "W_P2C") return PatchSetup::w_p2c;
    if (s == "W_C2P") return PatchSetup::w_c2p;
    if (s == "PRI") return PatchSetup::pri;
    if (s == "CTX") return PatchSetup::ctx;
    fail_schema("unknown patch setup: " + s);
}

// ---------------------------------------------------------------------------
// Arithmetic
// ---------------------------------------------------------------------------

char op_symbol(ArithOp op) {
    switch (op) {
        case ArithOp::add: return '+';
        case ArithOp::sub: return '-';
        case ArithOp::mul: return '*';
        case ArithOp::div: return '/';
        case ArithOp::pow: return '^';
    }
    return '?';
}

static std::optional<ArithOp> op_from_symbol(const std::string& s) {
    if (s.size() != 1) return std::nullopt;
    switch (s[0]) {
        case '+': return ArithOp::add;
        case '-': return ArithOp::sub;
        case '*': return ArithOp::mul;
        case '/': return ArithOp::div;
        case '^': return ArithOp::pow;
    }
    return std::nullopt;
}

// Operator validity alone (exact division, bounded exponent); range checks
// are the caller's concern. A reassigned context may push intermediates out
// of the single-digit range even though the final answer lands back in it.
static std::optional<int> apply_op_unchecked(ArithOp op, int lhs, int rhs) {
    switch (op) {
        case ArithOp::add: return lhs + rhs;
        case ArithOp::sub: return lhs - rhs;
        case ArithOp::mul: return lhs * rhs;
        case ArithOp::div:
            if (rhs == 0 || lhs % rhs != 0) return std::nullopt;
            return lhs / rhs;
        case ArithOp::pow: {
            if (rhs < 0 || rhs > 2) return std::nullopt;
            if (lhs == 0 && rhs == 0) return std::nullopt;
            int r = 1;
            for (int i = 0; i < rhs; ++i) r *= lhs;
            return r;
        }
    }
    return std::nullopt;
}

std::optional<int> apply_op(ArithOp op, int lhs, int rhs, const ArithmeticSpec& spec) {
    auto r = apply_op_unchecked(op, lhs, rhs);
    if (!r || *r < spec.min_value || *r > spec.max_value) return std::nullopt;
    return r;
}

std::optional<ArithExpr> make_expr(int a, ArithOp op1, int b, ArithOp op2, int c,
                                   const ArithmeticSpec& spec) {
    auto inner = apply_op(op1, a, b, spec);
    if (!inner) return std::nullopt;
    auto result = apply_op(op2, *inner, c, spec);
    if (!result) return std::nullopt;
    ArithExpr e;
    e.a = a;
    e.b = b;
    e.c = c;
    e.op1 = op1;
    e.op2 = op2;
    e.inner = *inner;
    e.result = *result;
    return e;
}

std::vector<ArithExpr> enumerate_expressions(const ArithmeticSpec& spec) {
    if (spec.operators.empty()) fail_schema("arithmetic spec has an empty operator set");
    if (spec.depth != 2) fail_schema("only depth-2 expressions are supported");
    std::vector<ArithExpr> out;
    for (ArithOp op1 : spec.operators)
        for (ArithOp op2 : spec.operators)
            for (int a = spec.min_value; a <= spec.max_value; ++a)
                for (int b = spec.min_value; b <= spec.max_value; ++b)
                    for (int c = spec.min_value; c <= spec.max_value; ++c)
                        if (auto e = make_expr(a, op1, b, op2, c, spec)) out.push_back(*e);
    return out;
}

std::string render_query(const ArithExpr& e) {
    std::ostringstream ss;
    ss << "( " << e.a << ' ' << op_symbol(e.op1) << ' ' << e.b << " ) " << op_symbol(e.op2) << ' '
       << e.c << " =";
    return ss.str();
}

std::string render_equation(const ArithExpr& e) { return render_query(e) + ' ' + std::to_string(e.result); }

static std::vector<std::string> words_of(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream ss(s);
    std::string w;
    while (ss >> w) out.push_back(w);
    return out;
}

static std::optional<int> parse_digit(const std::string& s) {
    if (s.size() != 1 || s[0] < '0' || s[0] > '9') return std::nullopt;
    return s[0] - '0';
}

std::optional<ArithExpr> parse_rendered_query(const std::string& query,
                                              const ArithmeticSpec& spec) {
    auto w = words_of(query);
    if (w.size() != 8 || w[0] != "(" || w[4] != ")" || w[7] != "=") return std::nullopt;
    auto a = parse_digit(w[1]), b = parse_digit(w[3]), c = parse_digit(w[6]);
    auto op1 = op_from_symbol(w[2]), op2 = op_from_symbol(w[5]);
    if (!a || !b || !c || !op1 || !op2) return std::nullopt;
    return make_expr(*a, *op1, *b, *op2, *c, spec);
}

std::optional<int> eval_query_under_context(const std::string& query, const std::string& context,
                                            const ArithmeticSpec& spec) {
    auto expr = parse_rendered_query(query, spec);
    if (!expr) return std::nullopt;
    auto w = words_of(context);
    if (w.empty()) return expr->result;

    if (w.size() == 3 && w[1] == "=") {  // leaf reassignment "x = y"
        auto x = parse_digit(w[0]), y = parse_digit(w[2]);
        if (!x || !y) return std::nullopt;
        if (expr->a != *x && expr->b != *x && expr->c != *x) return std::nullopt;
        int a = expr->a == *x ? *y : expr->a;
        int b = expr->b == *x ? *y : expr->b;
        int c = expr->c == *x ? *y : expr->c;
        // Intermediates may leave the range under a reassignment; only the
        // final answer must stay a single token.
        auto inner = apply_op_unchecked(expr->op1, a, b);
        if (!inner) return std::nullopt;
        auto fin = apply_op_unchecked(expr->op2, *inner, c);
        if (!fin || *fin < spec.min_value || *fin > spec.max_value) return std::nullopt;
        return fin;
    }
    if (w.size() == 5 && w[3] == "=") {  // subexpression override "a op b = y"
        auto a = parse_digit(w[0]), b = parse_digit(w[2]), y = parse_digit(w[4]);
        auto op = op_from_symbol(w[1]);
        if (!a || !b || !y || !op) return std::nullopt;
        if (*a != expr->a || *b != expr->b || *op != expr->op1) return std::nullopt;
        return apply_op(expr->op2, *y, expr->c, spec);
    }
    if (w.size() == 9 && w[7] == "=") {  // full override "( a op b ) op c = y"
        std::string head;
        for (int i = 0; i < 8; ++i) head += (i ? " " : "") + w[static_cast<size_t>(i)];
        if (head != render_query(*expr)) return std::nullopt;
        return parse_digit(w[8]);
    }
    return std::nullopt;
}

namespace {

enum class CtxForm { leaf, sub, full };

const char* form_name(CtxForm f) {
    switch (f) {
        case CtxForm::leaf: return "leaf";
        case CtxForm::sub: return "sub";
        case CtxForm::full: return "full";
    }
    return "?";
}

// One concrete counterfactual context for `e`, or nullopt when no valid
// reassignment of that form exists.
std::optional<std::pair<std::string, int>> sample_context(const ArithExpr& e, CtxForm form,
                                                          const ArithmeticSpec& spec, Rng& rng) {
    switch (form) {
        case CtxForm::full: {
            std::vector<int> cands;
            for (int y = spec.min_value; y <= spec.max_value; ++y)
                if (y != e.result) cands.push_back(y);
            if (cands.empty()) return std::nullopt;
            int y = cands[rng.below(static_cast<uint32_t>(cands.size()))];
            return std::make_pair(render_query(e) + ' ' + std::to_string(y), y);
        }
        case CtxForm::sub: {
            std::vector<std::pair<int, int>> cands;  // (m', final)
            for (int m = spec.min_value; m <= spec.max_value; ++m) {
                if (m == e.inner) continue;
                auto fin = apply_op(e.op2, m, e.c, spec);
                if (fin && *fin != e.result) cands.emplace_back(m, *fin);
            }
            if (cands.empty()) return std::nullopt;
            auto [m, fin] = cands[rng.below(static_cast<uint32_t>(cands.size()))];
            std::ostringstream ss;
            ss << e.a << ' ' << op_symbol(e.op1) << ' ' << e.b << " = " << m;
            return std::make_pair(ss.str(), fin);
        }
        case CtxForm::leaf: {
            std::vector<std::tuple<int, int, int>> cands;  // (x, y, final)
            std::set<int> leaves{e.a, e.b, e.c};
            for (int x : leaves) {
                for (int y = spec.min_value; y <= spec.max_value; ++y) {
                    if (y == x) continue;  // self-reassignment keeps prior == context
                    int a = e.a == x ? y : e.a;
                    int b = e.b == x ? y : e.b;
                    int c = e.c == x ? y : e.c;
                    auto inner = apply_op_unchecked(e.op1, a, b);
                    if (!inner) continue;
                    auto fin = apply_op_unchecked(e.op2, *inner, c);
                    if (fin && *fin >= spec.min_value && *fin <= spec.max_value &&
                        *fin != e.result)
                        cands.emplace_back(x, y, *fin);
                }
            }
            if (cands.empty()) return std::nullopt;
            auto [x, y, fin] = cands[rng.below(static_cast<uint32_t>(cands.size()))];
            std::ostringstream ss;
            ss << x << " = " << y;
            return std::make_pair(ss.str(), fin);
        }
    }
    return std::nullopt;
}

}  // namespace

std::vector<QueryContextPair> gen_arithmetic(const ArithmeticSpec& spec, int n, uint64_t seed) {
    if (n <= 0) fail_schema("gen_arithmetic: n must be positive");
    auto exprs = enumerate_expressions(spec);
    if (exprs.empty()) fail_schema("gen_arithmetic: spec admits no valid expressions");

    Rng rng(seed, 11);
    rng.shuffle(exprs);

    std::vector<QueryContextPair> out;
    std::set<std::pair<std::string, std::string>> seen;
    size_t cursor = 0;
    long attempts = 0;
    const long max_attempts = 64L * n + 4096;
    while (static_cast<int>(out.size()) < n) {
        if (++attempts > max_attempts)
            fail_schema("gen_arithmetic: requested n exceeds distinct valid items");
        const ArithExpr& e = exprs[cursor % exprs.size()];
        int burst = std::min(spec.contexts_per_query, n - static_cast<int>(out.size()));
        for (int k = 0; k < burst; ++k) {
            CtxForm form;
            if (rng.chance(spec.explicit_answer_fraction)) {
                form = CtxForm::full;
            } else {
                form = rng.chance(0.5) ? CtxForm::leaf : CtxForm::sub;
            }
            auto ctx = sample_context(e, form, spec, rng);
            if (!ctx) continue;
            std::string query = render_query(e);
            if (!seen.emplace(query, ctx->first).second) continue;
            QueryContextPair p;
            char idbuf[16];
            std::snprintf(idbuf, sizeof idbuf, "ar-%06zu", out.size());
            p.id = idbuf;
            p.kind = DatasetKind::arithmetic;
            p.query = query;
            p.context = ctx->first;
            p.prior_answer = std::to_string(e.result);
            p.context_answer = std::to_string(ctx->second);
            p.template_id = form_name(form);
            out.push_back(std::move(p));
        }
        ++cursor;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fact KB
// ---------------------------------------------------------------------------

const RelationTemplate& FactKB::relation(const std::string& name) const {
    for (const auto& r : relations)
        if (r.name == name) return r;
    fail_schema("unknown relation: " + name);
}

const std::string& FactKB::true_object(const std::string& subject,
                                       const std::string& relation_name) const {
    for (const auto& t : triples)
        if (t.subject == subject && t.relation == relation_name) return t.object;
    fail_schema("no triple for (" + subject + ", " + relation_name + ")");
}

bool FactKB::has_triple(const std::string& subject, const std::string& relation_name) const {
    for (const auto& t : triples)
        if (t.subject == subject && t.relation == relation_name) return true;
    return false;
}

static std::string replace_all(std::string s, const std::string& from, const std::string& to) {
    size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
    }
    return s;
}

std::string render_statement(const RelationTemplate& rel, const std::string& subject,
                             const std::string& object) {
    return replace_all(replace_all(rel.statement, "{S}", subject), "{O}", object);
}

std::string render_fact_query(const RelationTemplate& rel, const std::string& subject) {
    return replace_all(rel.query, "{S}", subject);
}

FactKB FactKB::synth(int n_countries, uint64_t seed) {
    if (n_countries < 2) fail_schema("FactKB::synth needs at least 2 countries");
    if (n_countries > 100) fail_schema("FactKB::synth supports at most 100 countries");
    FactKB kb;
    kb.relations = {
        {"capital", "The capital of {S} is {O} .", "The capital of {S} is"},
        {"country", "{S} is a city in {O} .", "What country is {S} in ?"},
        {"language", "The official language of {S} is {O} .", "The official language of {S} is"},
        {"currency", "The currency of {S} is {O} .", "The currency of {S} is"},
        {"leader", "The leader of {S} is {O} .", "The leader of {S} is"},
        {"continent", "{S} is located in {O} .", "{S} is located in"},
        {"animal", "The national animal of {S} is {O} .", "The national animal of {S} is"},
        {"flower", "The national flower of {S} is {O} .", "The national flower of {S} is"},
    };

    const std::vector<std::string> c_pre = {"Vel", "Dor", "Kal", "Mar", "Tor",
                                            "Bel", "Nor", "Zan", "Gil", "Fen"};
    const std::vector<std::string> c_suf = {"mora", "land", "stan", "via", "gard",
                                            "nia",  "wick", "holm", "berg", "dell"};
    const std::vector<std::string> t_pre = {"Quin", "Bran", "Hol",  "Ash",  "Crag",
                                            "Thorn", "Wren", "Lark", "Pine", "Stone"};
    const std::vector<std::string> t_suf = {"ton",  "burg", "ville", "port", "ford",
                                            "dale", "mont", "field", "haven", "crest"};
    for (int i = 0; i < n_countries; ++i)
        kb.countries.push_back(c_pre[static_cast<size_t>(i % 10)] + c_suf[static_cast<size_t>(i / 10)]);
    for (int i = 0; i < n_countries; ++i)
        kb.cities.push_back(t_pre[static_cast<size_t>(i % 10)] + t_suf[static_cast<size_t>(i / 10)]);

    auto product = [](const std::vector<std::string>& a, const std::vector<std::string>& b) {
        std::vector<std::string> out;
        for (const auto& y : b)
            for (const auto& x : a) out.push_back(x + y);
        return out;
    };
    std::vector<std::string> languages =
        product({"Vel", "Dor", "Kal", "Mar", "Tor", "Bel", "Nor", "Zan", "Gil", "Fen"},
                {"ic", "ish", "ese", "ian"});
    std::vector<std::string> currencies =
        product({"Aur", "Bel", "Ced", "Dran", "Eld", "Fal", "Gor", "Hel", "Ist", "Jor"},
                {"en", "in", "on", "ar"});
    std::vector<std::string> leaders =
        product({"Ald", "Bren", "Cas", "Dav", "Edr", "Fenn", "Gar", "Hal", "Ing", "Jas", "Kel",
                 "Lor"},
                {"an", "in", "or", "us", "el"});
    std::vector<std::string> continents = {"Northia", "Southia", "Estara",  "Westara",
                                           "Centara", "Polaria", "Meridia", "Insularia"};
    std::vector<std::string> animals = {"Lynx",  "Falcon", "Otter", "Ibex",  "Heron", "Viper",
                                        "Bison", "Crane",  "Marten", "Raven", "Elk",   "Boar",
                                        "Stork", "Wolf",   "Hare",  "Swan",  "Fox",   "Owl",
                                        "Seal",  "Moth",   "Newt",  "Toad",  "Finch", "Pike",
                                        "Carp",  "Mole",   "Vole",  "Stoat", "Kite",  "Crab"};
    std::vector<std::string> flowers = {"Rose",   "Tulip",  "Iris",   "Lotus",  "Orchid",
                                        "Daisy",  "Lily",   "Poppy",  "Aster",  "Fern",
                                        "Clover", "Heather", "Jasmine", "Laurel", "Marigold",
                                        "Peony",  "Primrose", "Sage",  "Thistle", "Violet",
                                        "Yarrow", "Zinnia", "Bluebell", "Camellia", "Dahlia",
                                        "Edelweiss", "Foxglove", "Gardenia", "Hibiscus", "Ivy"};

    kb.answer_pools["capital"] = kb.cities;
    kb.answer_pools["country"] = kb.countries;
    kb.answer_pools["language"] = languages;
    kb.answer_pools["currency"] = currencies;
    kb.answer_pools["leader"] = leaders;
    kb.answer_pools["continent"] = continents;
    kb.answer_pools["animal"] = animals;
    kb.answer_pools["flower"] = flowers;

    Rng rng(seed, 23);
    // Countries and capitals form a bijection: the city's country is the
    // country it is the capital of.
    std::vector<int> capital_perm(static_cast<size_t>(n_countries));
    for (int i = 0; i < n_countries; ++i) capital_perm[static_cast<size_t>(i)] = i;
    rng.shuffle(capital_perm);
    for (int i = 0; i < n_countries; ++i) {
        const std::string& country = kb.countries[static_cast<size_t>(i)];
        const std::string& city = kb.cities[static_cast<size_t>(capital_perm[static_cast<size_t>(i)])];
        kb.triples.push_back({country, "capital", city});
        kb.triples.push_back({city, "country", country});
    }
    auto pick = [&rng](const std::vector<std::string>& pool) {
        return pool[rng.below(static_cast<uint32_t>(pool.size()))];
    };
    for (int i = 0; i < n_countries; ++i) {
        const std::string& country = kb.countries[static_cast<size_t>(i)];
        kb.triples.push_back({country, "language", pick(languages)});
        kb.triples.push_back({country, "currency", pick(currencies)});
        kb.triples.push_back({country, "leader", pick(leaders)});
        kb.triples.push_back({country, "continent", pick(continents)});
        kb.triples.push_back({country, "animal", pick(animals)});
        kb.triples.push_back({country, "flower", pick(flowers)});
    }
    return kb;
}

QueryContextPair make_fact_pair(const FactKB& kb, const std::string& subject,
                                const std::string& relation_name, const std::string& cf_object) {
    const RelationTemplate& rel = kb.relation(relation_name);
    const std::string& truth = kb.true_object(subject, relation_name);
    if (cf_object == truth)
        fail_schema("counterfactual object equals the true object for " + subject);
    QueryContextPair p;
    p.kind = DatasetKind::fact;
    p.query = render_fact_query(rel, subject);
    p.context = render_statement(rel, subject, cf_object);
    p.prior_answer = truth;
    p.context_answer = cf_object;
    p.template_id = relation_name;
    return p;
}

QueryContextPair make_multihop_pair(const FactKB& kb, const std::string& city,
                                    const std::string& cf_country, const std::string& cf_capital) {
    const std::string& truth = kb.true_object(city, "country");
    if (cf_country == truth) fail_schema("multihop counterfactual country equals the true country");
    if (cf_capital == city) fail_schema("multihop bridge city equals the queried city");
    QueryContextPair p;
    p.kind = DatasetKind::fact_multihop;
    p.query = render_fact_query(kb.relation("country"), city);
    p.context = cf_capital + " is the capital of " + cf_country + " . " + city +
                " is in the same country as " + cf_capital + " .";
    p.prior_answer = truth;
    p.context_answer = cf_country;
    p.template_id = "multihop";
    return p;
}

std::vector<QueryContextPair> gen_fact_dataset(const FactKB& kb, int n, bool multihop,
                                               uint64_t seed) {
    if (n <= 0) fail_schema("gen_fact_dataset: n must be positive");
    if (kb.triples.empty()) fail_schema("gen_fact_dataset: empty KB");
    Rng rng(seed, 37);
    std::vector<QueryContextPair> out;
    std::set<std::string> seen;
    long attempts = 0;
    const long max_attempts = 64L * n + 4096;

    if (multihop) {
        std::vector<std::string> cities;
        for (const auto& t : kb.triples)
            if (t.relation == "country") cities.push_back(t.subject);
        std::vector<std::string> countries;
        for (const auto& t : kb.triples)
            if (t.relation == "capital") countries.push_back(t.subject);
        if (cities.size() < 2 || countries.size() < 2)
            fail_schema("gen_fact_dataset: KB lacks enough triples for multihop chains");
        while (static_cast<int>(out.size()) < n) {
            if (++attempts > max_attempts)
                fail_schema("gen_fact_dataset: requested n exceeds distinct multihop items");
            const std::string& city = cities[rng.below(static_cast<uint32_t>(cities.size()))];
            const std::string& cf_country =
                countries[rng.below(static_cast<uint32_t>(countries.size()))];
            const std::string& cf_capital = cities[rng.below(static_cast<uint32_t>(cities.size()))];
            if (cf_country == kb.true_object(city, "country") || cf_capital == city) continue;
            std::string key = city + "|" + cf_country + "|" + cf_capital;
            if (!seen.insert(key).second) continue;
            QueryContextPair p = make_multihop_pair(kb, city, cf_country, cf_capital);
            char idbuf[16];
            std::snprintf(idbuf, sizeof idbuf, "mh-%06zu", out.size());
            p.id = idbuf;
            out.push_back(std::move(p));
        }
        return out;
    }

    while (static_cast<int>(out.size()) < n) {
        if (++attempts > max_attempts)
            fail_schema("gen_fact_dataset: requested n exceeds distinct fact items");
        const FactTriple& t = kb.triples[rng.below(static_cast<uint32_t>(kb.triples.size()))];
        auto pool_it = kb.answer_pools.find(t.relation);
        if (pool_it == kb.answer_pools.end() || pool_it->second.size() < 2) continue;
        const auto& pool = pool_it->second;
        const std::string& cf = pool[rng.below(static_cast<uint32_t>(pool.size()))];
        if (cf == t.object) continue;
        std::string key = t.subject + "|" + t.relation + "|" + cf;
        if (!seen.insert(key).second) continue;
        QueryContextPair p = make_fact_pair(kb, t.subject, t.relation, cf);
        char idbuf[16];
        std::snprintf(idbuf, sizeof idbuf, "fa-%06zu", out.size());
        p.id = idbuf;
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Prompt formatting
// ---------------------------------------------------------------------------

// Both instruction strings are ten tokens long so the two intent variants of
// a prompt line up position for position.
static const char* kInstructionPri = "Ignore the context and only answer from your knowledge .";
static const char* kInstructionCtx = "Only listen to the context in answering the query .";

std::string intent_line(Intent w, IntentFormat f) {
    switch (f) {
        case IntentFormat::instruction:
            return w == Intent::ctx ? kInstructionCtx : kInstructionPri;
        case IntentFormat::weight:
            return w == Intent::ctx ? "Context weight: 1" : "Context weight: 0";
        case IntentFormat::none:
            return "";
    }
    return "";
}

PromptExample format_prompt(const QueryContextPair& pair, Intent w, IntentFormat f) {
    PromptExample ex;
    ex.pair_id = pair.id;
    ex.intent = w;
    ex.intent_format = f;
    ex.expected_answer = w == Intent::ctx ? pair.context_answer : pair.prior_answer;
    std::string line = intent_line(w, f);
    ex.prompt = "Context: " + pair.context + "\n";
    if (!line.empty()) ex.prompt += line + "\n";
    ex.prompt += "Query: " + pair.query + "\nAnswer:";
    return ex;
}

// ---------------------------------------------------------------------------
// Split
// ---------------------------------------------------------------------------

Split split(const std::vector<QueryContextPair>& dataset, double test_fraction, uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        fail_schema("split: test_fraction must lie strictly between 0 and 1");
    if (dataset.size() < 2) fail_schema("split: dataset too small to split");

    // Group key: full query string for arithmetic, id otherwise.
    std::vector<std::string> keys;
    std::map<std::string, std::vector<size_t>> groups;
    for (size_t i = 0; i < dataset.size(); ++i) {
        const auto& p = dataset[i];
        std::string key = p.kind == DatasetKind::arithmetic ? ("q|" + p.query) : ("i|" + p.id);
        auto [it, inserted] = groups.emplace(key, std::vector<size_t>{});
        if (inserted) keys.push_back(key);
        it->second.push_back(i);
    }
    if (keys.size() < 2) fail_schema("split: dataset too small to split");

    Rng rng(seed, 41);
    rng.shuffle(keys);
    size_t target = static_cast<size_t>(std::llround(test_fraction * static_cast<double>(dataset.size())));
    if (target == 0) target = 1;
    if (target >= dataset.size()) target = dataset.size() - 1;

    std::set<size_t> test_idx;
    for (const auto& k : keys) {
        if (test_idx.size() >= target) break;
        for (size_t i : groups[k]) test_idx.insert(i);
    }
    Split out;
    for (size_t i = 0; i < dataset.size(); ++i) {
        if (test_idx.count(i))
            out.test.push_back(dataset[i]);
        else
            out.train.push_back(dataset[i]);
    }
    if (out.train.empty() || out.test.empty()) fail_schema("split: dataset too small to split");
    return out;
}

// ---------------------------------------------------------------------------
// Patch datasets
// ---------------------------------------------------------------------------

namespace {

std::optional<std::string> context_form(const QueryContextPair& p) {
    if (p.kind != DatasetKind::arithmetic) return std::nullopt;
    return p.template_id;
}

}  // namespace

std::vector<PatchTuple> build_patch_dataset(const std::vector<QueryContextPair>& test_set,
                                            PatchSetup setup, IntentFormat format, uint64_t seed,
                                            const ArithmeticSpec& spec) {
    if (test_set.empty()) fail_schema("build_patch_dataset: empty test set");
    Rng rng(seed, 53);
    std::vector<size_t> order(test_set.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);

    std::vector<PatchTuple> out;
    for (size_t idx : order) {
        const QueryContextPair& p = test_set[idx];
        PatchTuple t;
        t.pair_id = p.id;
        t.setup = setup;
        switch (setup) {
            case PatchSetup::w_p2c: {
                auto src = format_prompt(p, Intent::pri, format);
                auto tgt = format_prompt(p, Intent::ctx, format);
                t.source_prompt = src.prompt;
                t.source_answer = src.expected_answer;
                t.target_prompt = tgt.prompt;
                t.target_answer = tgt.expected_answer;
                out.push_back(std::move(t));
                break;
            }
            case PatchSetup::w_c2p: {
                auto src = format_prompt(p, Intent::ctx, format);
                auto tgt = format_prompt(p, Intent::pri, format);
                t.source_prompt = src.prompt;
                t.source_answer = src.expected_answer;
                t.target_prompt = tgt.prompt;
                t.target_answer = tgt.expected_answer;
                out.push_back(std::move(t));
                break;
            }
            case PatchSetup::pri: {
                // Partner query from the test set: same template (equal prompt
                // length), different query, different prior answer. For
                // arithmetic the original context must still bind the partner
                // query so the target prompt stays in-distribution.
                std::vector<size_t> partners;
                for (size_t j = 0; j < test_set.size(); ++j) {
                    const auto& q = test_set[j];
                    if (j == idx || q.kind != p.kind || q.template_id != p.template_id) continue;
                    if (q.query == p.query || q.prior_answer == p.prior_answer) continue;
                    if (p.kind == DatasetKind::arithmetic) {
                        auto v = eval_query_under_context(q.query, p.context, spec);
                        if (!v || std::to_string(*v) == q.prior_answer) continue;
                    }
                    partners.push_back(j);
                }
                if (partners.empty()) continue;
                const auto& q = test_set[partners[rng.below(static_cast<uint32_t>(partners.size()))]];
                QueryContextPair tgt_pair = q;
                tgt_pair.context = p.context;
                auto src = format_prompt(p, Intent::pri, format);
                auto tgt = format_prompt(tgt_pair, Intent::pri, format);
                t.source_prompt = src.prompt;
                t.source_answer = p.prior_answer;
                t.target_prompt = tgt.prompt;
                t.target_answer = q.prior_answer;
                out.push_back(std::move(t));
                break;
            }
            case PatchSetup::ctx: {
                // Partner context: same query where possible (arithmetic
                // sibling items), otherwise same-relation object substitution
                // drawn from the test set's own answers.
                std::string tgt_context, tgt_answer;
                bool found = false;
                for (size_t j_off = 0; j_off < test_set.size() && !found; ++j_off) {
                    size_t j = (idx + 1 + j_off) % test_set.size();
                    const auto& q = test_set[j];
                    if (j == idx || q.kind != p.kind) continue;
                    if (q.query == p.query && context_form(q) == context_form(p) &&
                        q.context != p.context && q.context_answer != p.context_answer) {
                        tgt_context = q.context;
                        tgt_answer = q.context_answer;
                        found = true;
                    }
                }
                if (!found && p.kind != DatasetKind::arithmetic) {
                    std::vector<std::string> objects;
                    for (const auto& q : test_set) {
                        if (q.kind != p.kind || q.template_id != p.template_id) continue;
                        if (q.context_answer == p.context_answer ||
                            q.context_answer == p.prior_answer)
                            continue;
                        if (std::find(objects.begin(), objects.end(), q.context_answer) !=
                            objects.end())
                            continue;
                        objects.push_back(q.context_answer);
                    }
                    if (!objects.empty()) {
                        const std::string& o2 =
                            objects[rng.below(static_cast<uint32_t>(objects.size()))];
                        // Rebuild the context sentence around the new object.
                        QueryContextPair alt = p;
                        size_t pos = alt.context.rfind(p.context_answer);
                        if (pos != std::string::npos) {
                            alt.context.replace(pos, p.context_answer.size(), o2);
                            alt.context_answer = o2;
                            tgt_context = alt.context;
                            tgt_answer = o2;
                            found = true;
                        }
                    }
                }
                if (!found) continue;
                QueryContextPair tgt_pair = p;
                tgt_pair.context = tgt_context;
                tgt_pair.context_answer = tgt_answer;
                auto src = format_prompt(p, Intent::ctx, format);
                auto tgt = format_prompt(tgt_pair, Intent::ctx, format);
                t.source_prompt = src.prompt;
                t.source_answer = p.context_answer;
                t.target_prompt = tgt.prompt;
                t.target_answer = tgt_answer;
                out.push_back(std::move(t));
                break;
            }
        }
    }
    if (out.empty())
        fail_schema("build_patch_dataset: no valid tuples (need >=2 distinct queries/contexts)");
    for (const auto& t : out) verify_patch_tuple(t);
    return out;
}

static std::vector<std::string> prompt_lines(const std::string& prompt) {
    std::vector<std::string> lines;
    std::string cur;
    for (char ch : prompt) {
        if (ch == '\n') {
            lines.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    lines.push_back(cur);
    return lines;
}

void verify_patch_tuple(const PatchTuple& t) {
    auto sw = words_of(t.source_prompt);
    auto tw = words_of(t.target_prompt);
    if (sw.empty() || tw.empty()) fail_schema("patch tuple with empty prompt");
    if (sw.back() != tw.back()) fail_schema("patch tuple prompts end with different tokens");
    if (sw.size() != tw.size()) fail_schema("patch tuple prompts differ in length");
    if (t.source_answer == t.target_answer) fail_schema("patch tuple with equal answers");

    auto sl = prompt_lines(t.source_prompt);
    auto tl = prompt_lines(t.target_prompt);
    if (sl.size() != tl.size()) fail_schema("patch tuple prompts differ in structure");
    switch (t.setup) {
        case PatchSetup::w_p2c:
        case PatchSetup::w_c2p: {
            // Swapping the intent line must yield the other prompt verbatim.
            if (sl.size() != 4) fail_schema("intent patch tuple must carry an intent line");
            for (size_t i = 0; i < sl.size(); ++i) {
                if (i == 1) continue;
                if (sl[i] != tl[i]) fail_schema("intent tuple prompts differ beyond the intent");
            }
            Intent src_w = t.setup == PatchSetup::w_p2c ? Intent::pri : Intent::ctx;
            bool weight = sl[1].rfind("Context weight:", 0) == 0;
            IntentFormat f = weight ? IntentFormat::weight : IntentFormat::instruction;
            if (sl[1] != intent_line(src_w, f) ||
                tl[1] != intent_line(src_w == Intent::pri ? Intent::ctx : Intent::pri, f))
                fail_schema("intent tuple lines do not match the declared direction");
            break;
        }
        case PatchSetup::pri: {
            for (size_t i = 0; i + 2 < sl.size(); ++i)
                if (sl[i] != tl[i]) fail_schema("PRI tuple prompts differ outside the query");
            if (sl[sl.size() - 2] == tl[tl.size() - 2]) fail_schema("PRI tuple with equal queries");
            if (sl.size() == 4 && sl[1] != intent_line(Intent::pri, sl[1].rfind("Context weight:", 0) == 0
                                                                        ? IntentFormat::weight
                                                                        : IntentFormat::instruction))
                fail_schema("PRI tuple must carry the prior intent");
            break;
        }
        case PatchSetup::ctx: {
            if (sl[0] == tl[0]) fail_schema("CTX tuple with equal contexts");
            for (size_t i = 1; i < sl.size(); ++i)
                if (sl[i] != tl[i]) fail_schema("CTX tuple prompts differ outside the context");
            break;
        }
    }
}

// ---------------------------------------------------------------------------
// Vocabulary and corpora
// ---------------------------------------------------------------------------

std::vector<std::string> vocabulary_words(const ArithmeticSpec& spec, const FactKB& kb) {
    std::vector<std::string> words;
    auto add = [&words](const std::string& w) { words.push_back(w); };
    auto add_text = [&words](const std::string& text) {
        for (const auto& w : words_of(text))
            if (w != "{S}" && w != "{O}") words.push_back(w);
    };

    add("Context:");
    add("Query:");
    add("Answer:");
    add_text(intent_line(Intent::pri, IntentFormat::weight));
    add_text(intent_line(Intent::ctx, IntentFormat::weight));
    add_text(intent_line(Intent::pri, IntentFormat::instruction));
    add_text(intent_line(Intent::ctx, IntentFormat::instruction));

    for (int d = 0; d <= 9; ++d) add(std::to_string(d));
    for (char c : std::string("()+-*/^=")) add(std::string(1, c));
    (void)spec;

    for (const auto& rel : kb.relations) {
        add_text(rel.statement);
        add_text(rel.query);
    }
    add_text("is the capital of . is in the same country as");
    for (const auto& t : kb.triples) {
        add(t.subject);
        add(t.object);
    }
    for (const auto& [rel, pool] : kb.answer_pools)
        for (const auto& o : pool) add(o);
    return words;
}

std::vector<TrainExample> build_pretrain_corpus(const ArithmeticSpec& spec, const FactKB& kb,
                                                const Tokenizer& tok, const PretrainConfig& cfg) {
    std::vector<TrainExample> out;
    Rng rng(cfg.seed, 61);
    auto push = [&](std::vector<TokenId> tokens, bool answer_only) {
        TrainExample ex;
        int offset = cfg.max_offset > 0 ? static_cast<int>(rng.below(static_cast<uint32_t>(cfg.max_offset + 1))) : 0;
        ex.tokens.assign(static_cast<size_t>(offset), tok.newline_id());
        ex.tokens.insert(ex.tokens.end(), tokens.begin(), tokens.end());
        // Filler positions never carry loss; answer-focused sequences train
        // only the final-token prediction.
        ex.loss_from = answer_only && cfg.answer_focus
                           ? static_cast<int>(ex.tokens.size()) - 2
                           : offset;
        out.push_back(std::move(ex));
    };
    auto push_text = [&](const std::string& text, bool answer_only) {
        push(tok.encode(text), answer_only);
    };

    for (int rep = 0; rep < std::max(1, cfg.fact_repeat); ++rep) {
        for (const auto& t : kb.triples) {
            const RelationTemplate& rel = kb.relation(t.relation);
            if (cfg.fact_statements && rep < std::max(1, cfg.statement_repeat))
                push_text(render_statement(rel, t.subject, t.object), false);
            if (cfg.fact_qa)
                push_text("Query: " + render_fact_query(rel, t.subject) + " Answer: " + t.object,
                          true);
        }
    }

    const std::vector<ArithExpr> exprs =
        cfg.arith_exprs.empty() ? enumerate_expressions(spec) : cfg.arith_exprs;
    for (int rep = 0; rep < std::max(1, cfg.arithmetic_repeat); ++rep) {
        for (const auto& e : exprs) {
            if (cfg.arithmetic_equations) push_text(render_equation(e), true);
            if (cfg.arithmetic_qa)
                push_text("Query: " + render_query(e) + " Answer: " + std::to_string(e.result),
                          true);
        }
    }

    // Token identity sequences: "x x \n y y \n ..." over random vocabulary
    // tokens, so intermediate states can be decoded by replaying them through
    // the repeat pattern.
    int content_lo = 2;  // skip <pad> and the separator
    for (int i = 0; i < cfg.identity_sequences; ++i) {
        std::vector<TokenId> tokens;
        for (int g = 0; g < cfg.identity_groups; ++g) {
            TokenId t = static_cast<TokenId>(
                content_lo + static_cast<int>(rng.below(static_cast<uint32_t>(tok.size() - content_lo))));
            tokens.push_back(t);
            tokens.push_back(t);
            if (g + 1 < cfg.identity_groups) tokens.push_back(tok.newline_id());
        }
        push(std::move(tokens), false);
    }
    return out;
}

std::vector<TrainExample> build_finetune_corpus(const std::vector<QueryContextPair>& pairs,
                                                const std::vector<IntentFormat>& formats,
                                                const Tokenizer& tok, bool answer_only_loss,
                                                uint64_t seed) {
    if (formats.empty()) fail_schema("build_finetune_corpus: no intent formats given");
    Rng rng(seed, 71);
    std::vector<TrainExample> out;
    for (size_t i = 0; i < pairs.size(); ++i) {
        IntentFormat f = formats[i % formats.size()];
        for (Intent w : {Intent::pri, Intent::ctx}) {
            PromptExample ex = format_prompt(pairs[i], w, f);
            TrainExample te;
            te.tokens = tok.encode(ex.prompt);
            size_t prompt_len = te.tokens.size();
            te.tokens.push_back(tok.id(ex.expected_answer));
            te.loss_from = answer_only_loss ? static_cast<int>(prompt_len) - 1 : 0;
            out.push_back(std::move(te));
        }
    }
    rng.shuffle(out);
    return out;
}

}  // namespace ccs
