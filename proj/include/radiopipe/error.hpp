#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace radiopipe {

// Every failure in the pipeline carries a stable category name (e.g.
// "MissingMagic", "ShapeMismatch") so callers and scripts can dispatch on it
// without parsing prose. The CLI prints "error: <category>: <message>".
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& message)
        : std::runtime_error(category + ": " + message),
          category_(std::move(category)) {}

    const std::string& category() const noexcept { return category_; }

private:
    std::string category_;
};

[[noreturn]] inline void fail(std::string category, const std::string& message) {
    throw Error(std::move(category), message);
}

}  // namespace radiopipe
