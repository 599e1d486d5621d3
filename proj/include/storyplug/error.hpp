#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace storyplug {

enum class ErrorCode {
    EmptyText,
    TextTooLong,
    ShapeMismatch,
    BadMagic,
    VersionUnsupported,
    DimMismatch,
    NonFiniteEntry,
    EmptySceneList,
    CharacterTooLarge,
    InvalidCharacterImage,
    EmptyCharacterDir,
    UnknownClassNoun,
    MultiTokenNoun,
    DescriptorMismatch,
    NonFiniteLoss,
    InvalidConfig,
    CharacterNotInPrompt,
    PositionOutOfRange,
    DuplicateClassNoun,
    UnknownCharacter,
    InvalidLayout,
    SchemaViolation,
    MissingPlugin,
    InvalidScore,
    IoError,
};

std::string_view error_code_name(ErrorCode code);

// Coarse classification used by the CLI exit codes and the HTTP status mapping.
enum class ErrorClass { Validation, Runtime };
ErrorClass error_class(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

}  // namespace storyplug
