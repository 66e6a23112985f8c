#include "metasparse/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace metasparse {

using nlohmann::json;

namespace {

json metrics_json(const SparsityMetrics& m) {
  json j;
  j["parameter_sparsity_percent"] = m.parameter_sparsity_percent;
  j["group_sparsity_percent"] = m.group_sparsity_percent;
  j["total_params"] = m.total_params;
  j["nonzero_params"] = m.nonzero_params;
  j["total_groups"] = m.total_groups;
  j["zero_groups"] = m.zero_groups;
  j["total_flops"] = m.total_flops;
  j["nonzero_flops"] = m.nonzero_flops;
  j["compression_ratio"] = m.compression_ratio ? json(*m.compression_ratio) : json(nullptr);
  j["speed_up"] = m.speed_up ? json(*m.speed_up) : json(nullptr);
  return j;
}

SparsityMetrics metrics_from(const json& j) {
  SparsityMetrics m;
  m.parameter_sparsity_percent = j.at("parameter_sparsity_percent");
  m.group_sparsity_percent = j.at("group_sparsity_percent");
  m.total_params = j.at("total_params");
  m.nonzero_params = j.at("nonzero_params");
  m.total_groups = j.at("total_groups");
  m.zero_groups = j.at("zero_groups");
  m.total_flops = j.at("total_flops");
  m.nonzero_flops = j.at("nonzero_flops");
  if (!j.at("compression_ratio").is_null()) m.compression_ratio = j.at("compression_ratio").get<double>();
  if (!j.at("speed_up").is_null()) m.speed_up = j.at("speed_up").get<double>();
  return m;
}

json mean_std_json(const std::vector<double>& values) {
  const MeanStd s = mean_std(values);
  return {{"mean", s.mean}, {"std", s.std}, {"n", s.count}};
}

std::set<int> task_set(const RunRecord& r) {
  std::set<int> s;
  for (const auto& [id, l] : r.test_loss) s.insert(id);
  return s;
}

void require_same_tasks(const std::vector<RunRecord>& records) {
  if (records.empty()) throw std::invalid_argument("report: no run records");
  const auto first = task_set(records.front());
  for (const auto& r : records) {
    if (task_set(r) != first) {
      throw std::invalid_argument("report: records " + records.front().label + " and " + r.label +
                                  " cover different task sets");
    }
  }
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(6);
  ss << v;
  return ss.str();
}

}  // namespace

std::string profile_csv(const RunRecord& record) {
  std::ostringstream out;
  out.precision(17);
  out << kProfileHeader << "\n";
  out << "epoch,phase,train_loss,val_loss,parameter_sparsity_percent,group_sparsity_percent,lambda\n";
  for (const auto& r : record.rows) {
    out << r.epoch << ',' << r.phase << ',' << r.train_loss << ',' << r.val_loss << ',' << r.parameter_sparsity << ','
        << r.group_sparsity << ',' << r.lambda << "\n";
  }
  return out.str();
}

std::string record_json(const RunRecord& record, bool include_wall_clock) {
  json j;
  j["label"] = record.label;
  j["config_hash"] = record.config_hash;
  j["seed"] = record.seed;
  j["stop_reason"] = record.stop_reason;
  j["lambda_final"] = record.lambda_final;
  j["final_metrics"] = metrics_json(record.final_metrics);
  json tests = json::object();
  for (const auto& [id, l] : record.test_loss) tests[std::to_string(id)] = l;
  j["test_loss"] = tests;
  json rows = json::array();
  for (const auto& r : record.rows) {
    rows.push_back({{"epoch", r.epoch},
                    {"phase", r.phase},
                    {"train_loss", r.train_loss},
                    {"val_loss", r.val_loss},
                    {"parameter_sparsity", r.parameter_sparsity},
                    {"group_sparsity", r.group_sparsity},
                    {"lambda", r.lambda}});
  }
  j["rows"] = rows;
  if (include_wall_clock) j["wall_clock_seconds"] = record.wall_clock_seconds;
  return j.dump(1);
}

RunRecord record_from_json(const std::string& text) {
  const json j = json::parse(text);
  RunRecord r;
  r.label = j.at("label");
  r.config_hash = j.at("config_hash");
  r.seed = j.at("seed");
  r.stop_reason = j.at("stop_reason");
  r.lambda_final = j.at("lambda_final");
  r.final_metrics = metrics_from(j.at("final_metrics"));
  for (const auto& [id, l] : j.at("test_loss").items()) r.test_loss[std::stoi(id)] = l.get<double>();
  for (const auto& row : j.at("rows")) {
    r.rows.push_back({row.at("epoch"), row.at("phase"), row.at("train_loss"), row.at("val_loss"),
                      row.at("parameter_sparsity"), row.at("group_sparsity"), row.at("lambda")});
  }
  if (j.contains("wall_clock_seconds")) r.wall_clock_seconds = j.at("wall_clock_seconds");
  return r;
}

void save_record(const RunRecord& record, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << record_json(record) << "\n";
}

RunRecord load_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return record_from_json(ss.str());
}

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd s;
  s.count = values.size();
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= double(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / double(values.size() - 1));
  }
  return s;
}

std::string summary_json(const std::vector<RunRecord>& records) {
  require_same_tasks(records);
  json j;
  j["label"] = records.front().label;
  j["config_hash"] = records.front().config_hash;
  json seeds = json::array();
  std::vector<double> ps, gs, cr, sp, lam, clock;
  std::map<int, std::vector<double>> tasks;
  for (const auto& r : records) {
    seeds.push_back(r.seed);
    ps.push_back(r.final_metrics.parameter_sparsity_percent);
    gs.push_back(r.final_metrics.group_sparsity_percent);
    if (r.final_metrics.compression_ratio) cr.push_back(*r.final_metrics.compression_ratio);
    if (r.final_metrics.speed_up) sp.push_back(*r.final_metrics.speed_up);
    lam.push_back(r.lambda_final);
    clock.push_back(r.wall_clock_seconds);
    for (const auto& [id, l] : r.test_loss) tasks[id].push_back(l);
  }
  j["seeds"] = seeds;
  j["parameter_sparsity_percent"] = mean_std_json(ps);
  j["group_sparsity_percent"] = mean_std_json(gs);
  j["compression_ratio"] = mean_std_json(cr);
  j["speed_up"] = mean_std_json(sp);
  j["lambda_final"] = mean_std_json(lam);
  json t = json::object();
  for (const auto& [id, v] : tasks) t[std::to_string(id)] = mean_std_json(v);
  j["test_loss"] = t;
  j["wall_clock_seconds"] = mean_std_json(clock);
  return j.dump(1);
}

Report make_report(const std::vector<RunRecord>& records) {
  require_same_tasks(records);
  Report rep;

  std::vector<std::string> labels;
  std::map<std::string, std::vector<const RunRecord*>> by_label;
  for (const auto& r : records) {
    if (!by_label.count(r.label)) labels.push_back(r.label);
    by_label[r.label].push_back(&r);
  }
  const auto tasks = task_set(records.front());
  std::ostringstream table;
  table << kTableHeader << "\n";
  table << "label,n";
  for (int id : tasks) table << ",task" << id << "_mean,task" << id << "_std";
  table << ",parameter_sparsity_mean,parameter_sparsity_std,group_sparsity_mean,group_sparsity_std\n";
  for (const auto& label : labels) {
    const auto& group = by_label[label];
    table << label << ',' << group.size();
    for (int id : tasks) {
      std::vector<double> v;
      for (const auto* r : group) v.push_back(r->test_loss.at(id));
      const auto s = mean_std(v);
      table << ',' << fmt(s.mean) << ',' << fmt(s.std);
    }
    std::vector<double> ps, gs;
    for (const auto* r : group) {
      ps.push_back(r->final_metrics.parameter_sparsity_percent);
      gs.push_back(r->final_metrics.group_sparsity_percent);
    }
    const auto p = mean_std(ps), g = mean_std(gs);
    table << ',' << fmt(p.mean) << ',' << fmt(p.std) << ',' << fmt(g.mean) << ',' << fmt(g.std) << "\n";
  }
  rep.table_csv = table.str();

  for (const auto& r : records) {
    for (const auto& row : r.rows) rep.x_max = std::max(rep.x_max, row.epoch);
  }
  const double width = 640, height = 360, left = 50, right = 20, top = 20, bottom = 40;
  const double pw = width - left - right, ph = height - top - bottom;
  const double xmax = std::max(rep.x_max, 1);
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" data-x-max=\"" << rep.x_max << "\" data-y-max=\"100\">\n";
  svg << "<metadata>x_max=" << rep.x_max << " y_max=100 series=" << records.size() << "</metadata>\n";
  svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#444\"/>\n";
  svg << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 8 << "\" text-anchor=\"middle\">epoch (0.."
      << rep.x_max << ")</text>\n";
  svg << "<text x=\"12\" y=\"" << top + ph / 2 << "\" transform=\"rotate(-90 12 " << top + ph / 2
      << ")\" text-anchor=\"middle\">parameter sparsity %</text>\n";
  static const char* colors[] = {"#1b6ca8", "#d1495b", "#2e933c", "#edae49", "#6a4c93", "#00798c", "#8d6a9f"};
  std::size_t k = 0;
  for (const auto& r : records) {
    svg << "<polyline fill=\"none\" stroke=\"" << colors[k++ % 7] << "\" data-label=\"" << r.label << "\" data-seed=\""
        << r.seed << "\" points=\"";
    for (const auto& row : r.rows) {
      svg << fmt(left + pw * row.epoch / xmax) << ',' << fmt(top + ph * (1.0 - row.parameter_sparsity / 100.0)) << ' ';
    }
    svg << "\"/>\n";
  }
  svg << "</svg>\n";
  rep.profile_svg = svg.str();
  return rep;
}

std::vector<RunRecord> collect_records(const std::vector<std::filesystem::path>& dirs) {
  std::vector<std::filesystem::path> files;
  for (const auto& d : dirs) {
    if (!std::filesystem::is_directory(d)) throw std::invalid_argument("report: not a directory: " + d.string());
    for (const auto& e : std::filesystem::recursive_directory_iterator(d)) {
      if (e.is_regular_file() && e.path().filename() == "record.json") files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<RunRecord> out;
  for (const auto& f : files) out.push_back(load_record(f));
  return out;
}

}  // namespace metasparse
