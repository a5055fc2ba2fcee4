#pragma once

// JSON conversions shared between the report and harness serialisers. Not installed.

#include "json.hpp"
#include "rsp/stat_test.hpp"

namespace rsp::detail {

nlohmann::json report_to_json(const TestReport& report);
TestReport report_from_json(const nlohmann::json& j);

}  // namespace rsp::detail
