#include "tdx/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace tdx {

using nlohmann::json;

// -------------------------------------------------------------- expressions

namespace {

class Parser {
public:
    Parser(std::string_view text, int dim, bool allow_state) : text_(text), dim_(dim), allow_state_(allow_state) {}

    std::vector<Expression::Instr> run(bool& uses_state) {
        skip();
        if (pos_ == text_.size()) fail("empty expression");
        expr();
        skip();
        if (pos_ != text_.size()) fail("unexpected '" + std::string(1, text_[pos_]) + "'");
        uses_state = uses_state_;
        return std::move(code_);
    }

private:
    using Op = Expression::Op;

    [[noreturn]] void fail(const std::string& why) const {
        throw Error(ErrorCode::ConfigInvalid,
                    "expression \"" + std::string(text_) + "\" at offset " + std::to_string(pos_) + ": " + why);
    }

    void skip() {
        while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    }

    bool eat(char c) {
        skip();
        if (pos_ < text_.size() && text_[pos_] == c) {
            ++pos_;
            return true;
        }
        return false;
    }

    void emit(Op op, double value = 0.0, int index = 0) { code_.push_back({op, value, index}); }

    void expr() {
        term();
        while (true) {
            if (eat('+')) {
                term();
                emit(Op::Add);
            } else if (eat('-')) {
                term();
                emit(Op::Sub);
            } else {
                return;
            }
        }
    }

    void term() {
        unary();
        while (true) {
            if (eat('*')) {
                unary();
                emit(Op::Mul);
            } else if (eat('/')) {
                unary();
                emit(Op::Div);
            } else {
                return;
            }
        }
    }

    void unary() {
        if (eat('-')) {
            unary();
            emit(Op::Neg);
        } else if (eat('+')) {
            unary();
        } else {
            power();
        }
    }

    void power() {
        primary();
        if (eat('^')) {
            unary();
            emit(Op::Pow);
        }
    }

    void primary() {
        skip();
        if (pos_ >= text_.size()) fail("unexpected end of input");
        const char c = text_[pos_];
        if (c == '(') {
            ++pos_;
            expr();
            if (!eat(')')) fail("missing ')'");
            return;
        }
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
            number();
            return;
        }
        if (std::isalpha(static_cast<unsigned char>(c))) {
            name();
            return;
        }
        fail("unexpected '" + std::string(1, c) + "'");
    }

    void number() {
        const std::size_t start = pos_;
        while (pos_ < text_.size() && (std::isdigit(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '.'))
            ++pos_;
        if (pos_ < text_.size() && (text_[pos_] == 'e' || text_[pos_] == 'E')) {
            std::size_t look = pos_ + 1;
            if (look < text_.size() && (text_[look] == '+' || text_[look] == '-')) ++look;
            if (look < text_.size() && std::isdigit(static_cast<unsigned char>(text_[look]))) {
                pos_ = look;
                while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) ++pos_;
            }
        }
        const std::string token(text_.substr(start, pos_ - start));
        std::istringstream in(token);
        in.imbue(std::locale::classic());
        double value = 0.0;
        in >> value;
        if (!in || in.peek() != std::char_traits<char>::eof()) fail("malformed number '" + token + "'");
        emit(Op::Number, value);
    }

    void name() {
        const std::size_t start = pos_;
        while (pos_ < text_.size() && std::isalnum(static_cast<unsigned char>(text_[pos_]))) ++pos_;
        const std::string id(text_.substr(start, pos_ - start));
        static const std::pair<const char*, Op> functions[] = {
            {"sin", Op::Sin}, {"cos", Op::Cos}, {"exp", Op::Exp}, {"sqrt", Op::Sqrt}};
        for (const auto& [fname, op] : functions) {
            if (id == fname) {
                if (!eat('(')) fail(id + " needs an argument in parentheses");
                expr();
                if (!eat(')')) fail("missing ')'");
                emit(op);
                return;
            }
        }
        if (id == "t") {
            emit(Op::Time);
            return;
        }
        if (id == "pi") {
            emit(Op::Number, std::numbers::pi);
            return;
        }
        if (id.size() >= 2 && id[0] == 'x' &&
            std::all_of(id.begin() + 1, id.end(), [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); })) {
            const int index = std::stoi(id.substr(1));
            if (!allow_state_) fail("state variable " + id + " is not allowed here");
            if (index < 1 || index > dim_) fail(id + " is out of range for dimension " + std::to_string(dim_));
            uses_state_ = true;
            emit(Op::State, 0.0, index - 1);
            return;
        }
        fail("unknown name '" + id + "'");
    }

    std::string_view text_;
    int dim_;
    bool allow_state_;
    std::size_t pos_ = 0;
    bool uses_state_ = false;
    std::vector<Expression::Instr> code_;
};

}  // namespace

Expression Expression::parse(std::string_view text, int dim, bool allow_state) {
    Expression e;
    e.text_ = std::string(text);
    e.code_ = Parser(text, dim, allow_state).run(e.uses_state_);
    std::size_t depth = 0;
    for (const Instr& in : e.code_) {
        switch (in.op) {
            case Op::Number: case Op::Time: case Op::State: ++depth; break;
            case Op::Add: case Op::Sub: case Op::Mul: case Op::Div: case Op::Pow: --depth; break;
            default: break;
        }
        e.depth_ = std::max(e.depth_, depth);
    }
    return e;
}

double Expression::operator()(double t, const Vector& x) const {
    // Small fixed buffer covers realistic expressions without allocating.
    double small[32] = {};
    std::vector<double> large;
    double* stack = small;
    if (depth_ > 32) {
        large.resize(depth_);
        stack = large.data();
    }
    std::size_t top = 0;
    for (const Instr& in : code_) {
        switch (in.op) {
            case Op::Number: stack[top++] = in.value; break;
            case Op::Time: stack[top++] = t; break;
            case Op::State: stack[top++] = x(in.index); break;
            case Op::Add: --top; stack[top - 1] += stack[top]; break;
            case Op::Sub: --top; stack[top - 1] -= stack[top]; break;
            case Op::Mul: --top; stack[top - 1] *= stack[top]; break;
            case Op::Div: --top; stack[top - 1] /= stack[top]; break;
            case Op::Pow: --top; stack[top - 1] = std::pow(stack[top - 1], stack[top]); break;
            case Op::Neg: stack[top - 1] = -stack[top - 1]; break;
            case Op::Sin: stack[top - 1] = std::sin(stack[top - 1]); break;
            case Op::Cos: stack[top - 1] = std::cos(stack[top - 1]); break;
            case Op::Exp: stack[top - 1] = std::exp(stack[top - 1]); break;
            case Op::Sqrt: stack[top - 1] = std::sqrt(stack[top - 1]); break;
        }
    }
    return stack[0];
}

// ------------------------------------------------------------------ models

HestonVolatility capped_sqrt_volatility(double floor, double cap) {
    if (!(floor >= 0.0) || !(cap > floor)) throw Error(ErrorCode::InvalidParameter, "need 0 <= floor < cap");
    HestonVolatility vol;
    vol.f = [floor, cap](double v, double) { return std::sqrt(std::clamp(v, floor, cap)); };
    vol.g = [floor, cap](double v) { return std::sqrt(std::clamp(v, floor, cap)); };
    vol.f_bound = vol.g_bound = std::sqrt(cap) * (1.0 + 1e-12);
    return vol;
}

namespace {

[[noreturn]] void invalid(const std::string& why) { throw Error(ErrorCode::ConfigInvalid, why); }

double number_at(const json& obj, const char* key) {
    if (!obj.contains(key)) invalid(std::string("missing key '") + key + "'");
    const json& v = obj.at(key);
    if (!v.is_number()) invalid(std::string("key '") + key + "' must be a number");
    const double out = v.get<double>();
    if (!std::isfinite(out)) invalid(std::string("key '") + key + "' is not finite");
    return out;
}

double number_or(const json& obj, const char* key, double fallback) {
    return obj.contains(key) ? number_at(obj, key) : fallback;
}

std::string text_of(const json& v, const std::string& where) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number()) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v.get<double>());
        return buf;
    }
    invalid(where + " must be an expression string or a number");
}

Vector vector_of(const json& v, int dim, const std::string& where) {
    Vector out(dim);
    if (v.is_number() && dim == 1) {
        out(0) = v.get<double>();
        return out;
    }
    if (!v.is_array() || static_cast<int>(v.size()) != dim) invalid(where + " must be an array of " + std::to_string(dim) + " numbers");
    for (int i = 0; i < dim; ++i) {
        if (!v[static_cast<std::size_t>(i)].is_number()) invalid(where + " must contain numbers");
        out(i) = v[static_cast<std::size_t>(i)].get<double>();
    }
    return out;
}

// d x d grid of texts from a nested array (or a single entry when d = 1).
std::vector<std::string> matrix_texts(const json& v, int dim, const std::string& where) {
    std::vector<std::string> out;
    if (dim == 1 && (v.is_string() || v.is_number())) return {text_of(v, where)};
    if (!v.is_array() || static_cast<int>(v.size()) != dim) invalid(where + " must be a " + std::to_string(dim) + "x" + std::to_string(dim) + " array");
    for (const json& row : v) {
        if (!row.is_array() || static_cast<int>(row.size()) != dim) invalid(where + " rows must have " + std::to_string(dim) + " entries");
        for (const json& cell : row) out.push_back(text_of(cell, where));
    }
    return out;
}

std::vector<std::string> vector_texts(const json& v, int dim, const std::string& where) {
    if (dim == 1 && (v.is_string() || v.is_number())) return {text_of(v, where)};
    if (!v.is_array() || static_cast<int>(v.size()) != dim) invalid(where + " must be an array of " + std::to_string(dim) + " entries");
    std::vector<std::string> out;
    for (const json& cell : v) out.push_back(text_of(cell, where));
    return out;
}

std::vector<Expression> compile(const std::vector<std::string>& texts, int dim, bool allow_state) {
    std::vector<Expression> out;
    out.reserve(texts.size());
    for (const auto& s : texts) out.push_back(Expression::parse(s, dim, allow_state));
    return out;
}

std::string builtin_name(const json& v) {
    if (!v.is_object()) return {};
    if (!v.contains("builtin") || !v.at("builtin").is_string()) invalid("coefficient objects need a \"builtin\" name");
    return v.at("builtin").get<std::string>();
}

Matrix constant_matrix(const json& v, int dim, const std::string& where) {
    if (!v.contains("value")) invalid(where + ": constant built-in needs \"value\"");
    const auto texts = matrix_texts(v.at("value"), dim, where);
    const auto exprs = compile(texts, dim, false);
    Matrix out(dim, dim);
    for (int i = 0; i < dim * dim; ++i) {
        const auto& e = exprs[static_cast<std::size_t>(i)];
        out(i / dim, i % dim) = e(0.0, Vector::Zero(dim));
    }
    return out;
}

MatrixFunction linear_part(const json& v, int dim) {
    if (const std::string name = builtin_name(v); !name.empty()) {
        if (name == "zero") return MatrixFunction::zero(dim);
        if (name == "constant") return MatrixFunction::constant(constant_matrix(v, dim, "b"));
        if (name == "vasicek") {
            if (dim != 1) invalid("b: vasicek built-in is 1-d");
            return MatrixFunction::constant(Matrix::Constant(1, 1, -number_at(v, "beta")));
        }
        if (name == "heston") {
            if (dim != 2) invalid("b: heston built-in is 2-d");
            Matrix b = Matrix::Zero(2, 2);
            b(0, 0) = number_at(v, "mu");
            b(1, 1) = -number_at(v, "k");
            return MatrixFunction::constant(b);
        }
        invalid("b: unknown built-in '" + name + "'");
    }
    auto exprs = compile(matrix_texts(v, dim, "b"), dim, false);
    return MatrixFunction(dim, [exprs, dim](double t) {
        Matrix out(dim, dim);
        const Vector none;
        for (int i = 0; i < dim * dim; ++i) out(i / dim, i % dim) = exprs[static_cast<std::size_t>(i)](t, none);
        return out;
    });
}

VectorField bounded_part(const json& v, int dim) {
    if (const std::string name = builtin_name(v); !name.empty()) {
        Vector value = Vector::Zero(dim);
        if (name == "zero") {
        } else if (name == "vasicek") {
            if (dim != 1) invalid("m: vasicek built-in is 1-d");
            value(0) = number_at(v, "alpha") * number_at(v, "beta");
        } else if (name == "heston") {
            if (dim != 2) invalid("m: heston built-in is 2-d");
            value(1) = number_at(v, "k") * number_at(v, "theta");
        } else if (name == "constant") {
            if (!v.contains("value")) invalid("m: constant built-in needs \"value\"");
            value = vector_of(v.at("value"), dim, "m.value");
        } else {
            invalid("m: unknown built-in '" + name + "'");
        }
        return [value](double, const Vector&) { return value; };
    }
    auto exprs = compile(vector_texts(v, dim, "m"), dim, true);
    return [exprs, dim](double t, const Vector& x) {
        Vector out(dim);
        for (int i = 0; i < dim; ++i) out(i) = exprs[static_cast<std::size_t>(i)](t, x);
        return out;
    };
}

MatrixField diffusion_part(const json& v, int dim) {
    if (const std::string name = builtin_name(v); !name.empty()) {
        if (name == "vasicek") {
            if (dim != 1) invalid("sigma: vasicek built-in is 1-d");
            const Matrix s = Matrix::Constant(1, 1, number_at(v, "sigma"));
            return [s](double, const Vector&) { return s; };
        }
        if (name == "constant") {
            const Matrix s = constant_matrix(v, dim, "sigma");
            return [s](double, const Vector&) { return s; };
        }
        if (name == "heston") {
            if (dim != 2) invalid("sigma: heston built-in is 2-d");
            const double xi = number_at(v, "xi");
            const auto vol = capped_sqrt_volatility(number_or(v, "v_floor", 1e-4), number_or(v, "v_cap", 1.0));
            return [vol, xi](double, const Vector& x) {
                Matrix s = Matrix::Zero(2, 2);
                s(0, 0) = vol.f(x(1), x(0));
                s(1, 1) = xi * vol.g(x(1));
                return s;
            };
        }
        invalid("sigma: unknown built-in '" + name + "'");
    }
    auto exprs = compile(matrix_texts(v, dim, "sigma"), dim, true);
    return [exprs, dim](double t, const Vector& x) {
        Matrix out(dim, dim);
        for (int i = 0; i < dim * dim; ++i) out(i / dim, i % dim) = exprs[static_cast<std::size_t>(i)](t, x);
        return out;
    };
}

ModelConfig builtin_model(const json& doc, const std::string& name) {
    ModelConfig cfg;
    cfg.source = doc;
    const double horizon = number_or(doc, "horizon", 1.0);
    try {
        if (name == "vasicek") {
            const VasicekParams p{number_at(doc, "alpha"), number_at(doc, "beta"), number_at(doc, "sigma")};
            cfg.model = make_vasicek(p.alpha, p.beta, p.sigma, number_or(doc, "x0", 0.0), horizon);
            cfg.vasicek = p;
        } else if (name == "heston") {
            const double s0 = number_or(doc, "s0", 1.0);
            const double v0 = number_or(doc, "v0", 0.04);
            const double cap = number_or(doc, "v_cap", 1.0);
            ProbeBox probe;
            probe.lower = Vector{{0.0, 0.0}};
            probe.upper = Vector{{std::max(4.0 * s0, 1.0), 2.0 * cap}};
            cfg.model = make_heston_like(number_at(doc, "mu"), number_at(doc, "k"), number_at(doc, "theta"),
                                         number_at(doc, "xi"),
                                         capped_sqrt_volatility(number_or(doc, "v_floor", 1e-4), cap), s0, v0,
                                         probe, horizon);
        } else if (name == "koo-linton") {
            const int dim = 1;
            const auto beta = Expression::parse(text_of(doc.value("beta", json("1")), "beta"), dim, false);
            const auto level = Expression::parse(text_of(doc.value("level", json("0")), "level"), dim, false);
            const double sigma = number_or(doc, "sigma", 0.1);
            const Vector none;
            cfg.model = make_koo_linton(
                MatrixFunction(1, [beta, none](double t) { return Matrix::Constant(1, 1, beta(t, none)); }),
                [level, none](double t) { return Vector::Constant(1, level(t, none)); },
                [sigma](double, const Vector&) { return Matrix::Constant(1, 1, sigma); },
                Vector::Constant(1, number_or(doc, "x0", 0.0)), horizon);
        } else {
            invalid("unknown built-in model '" + name + "'");
        }
    } catch (const Error& e) {
        if (e.code() == ErrorCode::ConfigInvalid) throw;
        invalid(std::string("built-in ") + name + ": " + e.what());
    }
    cfg.model.name = doc.value("name", name);
    return cfg;
}

}  // namespace

ModelConfig parse_model_config(const json& doc) {
    if (!doc.is_object()) invalid("model config must be a JSON object");
    try {
        if (doc.contains("builtin")) {
            if (!doc.at("builtin").is_string()) invalid("\"builtin\" must be a string");
            return builtin_model(doc, doc.at("builtin").get<std::string>());
        }
        if (!doc.contains("dim") || !doc.at("dim").is_number_integer()) invalid("missing integer key 'dim'");
        const int dim = doc.at("dim").get<int>();
        if (dim < 1 || dim > 8) invalid("dim must be between 1 and 8");
        for (const char* key : {"b", "m", "sigma", "x0"})
            if (!doc.contains(key)) invalid(std::string("missing key '") + key + "'");

        ModelConfig cfg;
        cfg.source = doc;
        DiffusionModel& model = cfg.model;
        model.dim = dim;
        model.horizon = number_or(doc, "horizon", 1.0);
        if (!(model.horizon > 0.0)) invalid("horizon must be positive");
        model.b = linear_part(doc.at("b"), dim);
        model.m = bounded_part(doc.at("m"), dim);
        model.sigma = diffusion_part(doc.at("sigma"), dim);
        model.x0 = vector_of(doc.at("x0"), dim, "x0");
        model.name = doc.value("name", std::string("config"));
        model.check();
        return cfg;
    } catch (const json::exception& e) {
        invalid(std::string("malformed config: ") + e.what());
    }
}

json read_json_file(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) invalid("cannot open config file " + file.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        invalid("cannot parse " + file.string() + ": " + e.what());
    }
}

ModelConfig load_model_config(const std::filesystem::path& file) { return parse_model_config(read_json_file(file)); }

}  // namespace tdx
