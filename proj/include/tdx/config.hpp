#pragma once

#include "tdx/models.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace tdx {

/// Arithmetic over numbers, `t`, `x1..xd` and `pi` with `+ - * / ^`
/// (right-associative power) and the functions sin, cos, exp, sqrt.
/// Compiled once to postfix code; evaluation is pure and thread-safe.
class Expression {
public:
    /// ConfigInvalid on syntax errors, unknown names, x_i with i > dim, or any
    /// state variable when `allow_state` is false.
    static Expression parse(std::string_view text, int dim, bool allow_state = true);

    [[nodiscard]] double operator()(double t, const Vector& x) const;
    [[nodiscard]] const std::string& text() const noexcept { return text_; }
    [[nodiscard]] bool uses_state() const noexcept { return uses_state_; }

    enum class Op : unsigned char { Number, Time, State, Add, Sub, Mul, Div, Pow, Neg, Sin, Cos, Exp, Sqrt };
    struct Instr {
        Op op;
        double value = 0.0;
        int index = 0;
    };

private:
    std::string text_;
    std::vector<Instr> code_;
    bool uses_state_ = false;
    std::size_t depth_ = 0;
};

struct VasicekParams {
    double alpha;
    double beta;
    double sigma;
};

/// A model read from JSON, with the document kept so derived artifacts can
/// point back at their source.
struct ModelConfig {
    DiffusionModel model;
    std::optional<VasicekParams> vasicek;  // set for the vasicek built-in; enables closed forms
    nlohmann::json source;
};

/// Keys `dim, horizon, b, m, sigma, x0`. Each of b, m, sigma is an expression
/// (a string or number for d = 1, nested arrays otherwise) or an object
/// {"builtin": name, ...}. A top-level "builtin" key selects a whole model:
/// vasicek, heston or koo-linton. Throws ConfigInvalid.
ModelConfig parse_model_config(const nlohmann::json& doc);
ModelConfig load_model_config(const std::filesystem::path& file);
nlohmann::json read_json_file(const std::filesystem::path& file);

/// sqrt(clamp(v, floor, cap)) for both f and g, bounded by sqrt(cap).
HestonVolatility capped_sqrt_volatility(double floor, double cap);

}  // namespace tdx
