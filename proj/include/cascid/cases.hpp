#pragma once

#include <string_view>

namespace cascid {

/// Embedded copy of data/rts24.case (the repository file is the source of
/// truth; the build bakes it in so the CLI works without a data directory).
std::string_view rts24_case_text();

}  // namespace cascid
