#pragma once

#include <initializer_list>
#include <string>

#include <json.hpp>

#include "blo/cli.hpp"

// JSON helpers shared by config parsing and report writing.
namespace blo::cli::detail {

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where);
nlohmann::json vector_json(const Vector<double>& v);
nlohmann::json problem_json(const testbed::ProblemSpec& spec);
nlohmann::json engine_json(const Engine<double>& engine);
nlohmann::json outer_json(const OuterConfig<double>& c);
OuterConfig<double> parse_outer(const nlohmann::json& j);

}  // namespace blo::cli::detail
