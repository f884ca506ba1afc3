#pragma once

#include <stdexcept>
#include <string>

namespace opt {

// Invalid input, shape or configuration. The CLI maps this to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A stage ran before something it depends on exists (checkpoint, corpus).
// The CLI maps this to exit code 3 and the message names the missing item.
class MissingPrerequisite : public std::runtime_error {
 public:
  MissingPrerequisite(std::string what_missing, const std::string& detail)
      : std::runtime_error("missing prerequisite '" + what_missing + "': " + detail),
        item_(std::move(what_missing)) {}
  const std::string& item() const { return item_; }

 private:
  std::string item_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

}  // namespace opt
