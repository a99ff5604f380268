#pragma once

#include "radq/error.hpp"

#include <initializer_list>
#include <string>

#include <nlohmann/json.hpp>

namespace radq {

// Config objects reject unknown keys instead of silently ignoring typos.
inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                                const std::string& context) {
    if (!j.is_object()) throw ConfigError(context + ": expected a JSON object");
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const char* a : allowed)
            if (key == a) {
                known = true;
                break;
            }
        if (!known) throw ConfigError(context + ": unknown key '" + key + "'");
    }
}

} // namespace radq
