#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ragner {

enum class ErrorCode {
  invalid_argument,
  parse,
  io,
  format,
  non_finite,
  transport,
  reply_not_json,
  reply_not_array,
  reply_arity,
  reply_bad_item,
  reply_empty_text,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid-argument";
    case ErrorCode::parse: return "parse";
    case ErrorCode::io: return "io";
    case ErrorCode::format: return "format";
    case ErrorCode::non_finite: return "non-finite";
    case ErrorCode::transport: return "transport";
    case ErrorCode::reply_not_json: return "reply-not-json";
    case ErrorCode::reply_not_array: return "reply-not-array";
    case ErrorCode::reply_arity: return "reply-arity";
    case ErrorCode::reply_bad_item: return "reply-bad-item";
    case ErrorCode::reply_empty_text: return "reply-empty-text";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(ErrorCode::invalid_argument, what);
}

}  // namespace ragner
