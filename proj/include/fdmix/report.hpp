#pragma once

#include <string>

#include "fdmix/train.hpp"

namespace fdmix {

enum class TableStyle { Csv, Json, Markdown };

// Renders a study report. Csv and Json are lossless (parse_* reads them back
// bit-exactly); Markdown shows "mean ± ci" cells with one row per study cell
// and one column per shard/checkpoint pair.
std::string emit_table(const StudyReport& report, TableStyle style);

StudyReport parse_report_csv(const std::string& text);
StudyReport parse_report_json(const std::string& text);

}  // namespace fdmix
