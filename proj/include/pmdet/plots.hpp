#pragma once

#include <string>

namespace pmdet {

// Renders bar/line charts from emitted JSON-lines records (metrics, sweep
// reports, probe reports) into PPM rasters under out_dir. Returns the number
// of charts written; an empty input yields zero charts and no output files.
int emit_plots(const std::string& input_path, const std::string& out_dir);

}  // namespace pmdet
