#include "redteam/errors.hpp"

namespace redteam {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingPlaceholder: return "MissingPlaceholder";
    case ErrorCode::EmptyQuestion: return "EmptyQuestion";
    case ErrorCode::TokenizationUnstable: return "TokenizationUnstable";
    case ErrorCode::OutOfVocab: return "OutOfVocab";
    case ErrorCode::ContextOverflow: return "ContextOverflow";
    case ErrorCode::UnsupportedBackend: return "UnsupportedBackend";
    case ErrorCode::EmptyCandidates: return "EmptyCandidates";
    case ErrorCode::PluginUnavailable: return "PluginUnavailable";
    case ErrorCode::MissingStage1: return "MissingStage1";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::MalformedRecord: return "MalformedRecord";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

}  // namespace redteam
