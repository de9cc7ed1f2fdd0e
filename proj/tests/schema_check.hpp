#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

#include <json.hpp>

namespace schema_check {

// Minimal JSON-schema validator covering the subset used by the shipped
// schemas: type, required, properties, items, min/max bounds and $ref into
// #/definitions. Independent of the report writer.
bool validates(const nlohmann::json& value, const nlohmann::json& schema,
               const nlohmann::json& root, std::string* why) {
    if (schema.contains("$ref")) {
        const std::string ref = schema["$ref"].get<std::string>();
        const std::string prefix = "#/definitions/";
        if (ref.rfind(prefix, 0) != 0) {
            *why = "unsupported $ref " + ref;
            return false;
        }
        return validates(value, root.at("definitions").at(ref.substr(prefix.size())),
                         root, why);
    }
    if (schema.contains("type")) {
        const std::string t = schema["type"].get<std::string>();
        const bool ok = (t == "object" && value.is_object()) ||
                        (t == "array" && value.is_array()) ||
                        (t == "string" && value.is_string()) ||
                        (t == "boolean" && value.is_boolean()) ||
                        (t == "integer" && value.is_number_integer()) ||
                        (t == "number" && value.is_number());
        if (!ok) {
            *why = "expected type " + t + ", got " + value.dump().substr(0, 40);
            return false;
        }
    }
    if (value.is_number()) {
        const double v = value.get<double>();
        if (schema.contains("minimum") && v < schema["minimum"].get<double>()) {
            *why = "value below minimum";
            return false;
        }
        if (schema.contains("maximum") && v > schema["maximum"].get<double>()) {
            *why = "value above maximum";
            return false;
        }
        if (schema.contains("exclusiveMinimum") &&
            v <= schema["exclusiveMinimum"].get<double>()) {
            *why = "value not above exclusiveMinimum";
            return false;
        }
    }
    if (value.is_object()) {
        if (schema.contains("required"))
            for (const auto& key : schema["required"]) {
                if (!value.contains(key.get<std::string>())) {
                    *why = "missing required key " + key.get<std::string>();
                    return false;
                }
            }
        if (schema.contains("properties"))
            for (auto it = schema["properties"].begin(); it != schema["properties"].end();
                 ++it)
                if (value.contains(it.key()) &&
                    !validates(value.at(it.key()), it.value(), root, why))
                    return false;
    }
    if (value.is_array()) {
        if (schema.contains("minItems") &&
            value.size() < schema["minItems"].get<std::size_t>()) {
            *why = "too few items";
            return false;
        }
        if (schema.contains("maxItems") &&
            value.size() > schema["maxItems"].get<std::size_t>()) {
            *why = "too many items";
            return false;
        }
        if (schema.contains("items"))
            for (const auto& item : value)
                if (!validates(item, schema["items"], root, why)) return false;
    }
    return true;
}


inline std::string repo_root() {
    if (const char* env = std::getenv("MESHTEX_ROOT")) return env;
    return (std::filesystem::path(__FILE__).parent_path().parent_path()).string();
}

}  // namespace schema_check
