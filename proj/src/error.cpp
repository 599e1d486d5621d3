#include "storyplug/error.hpp"

namespace storyplug {

std::string_view error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::EmptyText: return "EmptyText";
        case ErrorCode::TextTooLong: return "TextTooLong";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::BadMagic: return "BadMagic";
        case ErrorCode::VersionUnsupported: return "VersionUnsupported";
        case ErrorCode::DimMismatch: return "DimMismatch";
        case ErrorCode::NonFiniteEntry: return "NonFiniteEntry";
        case ErrorCode::EmptySceneList: return "EmptySceneList";
        case ErrorCode::CharacterTooLarge: return "CharacterTooLarge";
        case ErrorCode::InvalidCharacterImage: return "InvalidCharacterImage";
        case ErrorCode::EmptyCharacterDir: return "EmptyCharacterDir";
        case ErrorCode::UnknownClassNoun: return "UnknownClassNoun";
        case ErrorCode::MultiTokenNoun: return "MultiTokenNoun";
        case ErrorCode::DescriptorMismatch: return "DescriptorMismatch";
        case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::CharacterNotInPrompt: return "CharacterNotInPrompt";
        case ErrorCode::PositionOutOfRange: return "PositionOutOfRange";
        case ErrorCode::DuplicateClassNoun: return "DuplicateClassNoun";
        case ErrorCode::UnknownCharacter: return "UnknownCharacter";
        case ErrorCode::InvalidLayout: return "InvalidLayout";
        case ErrorCode::SchemaViolation: return "SchemaViolation";
        case ErrorCode::MissingPlugin: return "MissingPlugin";
        case ErrorCode::InvalidScore: return "InvalidScore";
        case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

ErrorClass error_class(ErrorCode code) {
    switch (code) {
        case ErrorCode::NonFiniteLoss:
        case ErrorCode::IoError:
            return ErrorClass::Runtime;
        default:
            return ErrorClass::Validation;
    }
}

}  // namespace storyplug
